//! Confidence/margin weighted pseudo-label distillation with a linearly
//! relaxing admission threshold.
//!
//! For each sample the teacher's softmax gives a confidence `C` (top
//! probability) and margin `Δ` (top minus runner-up). A sample is admitted
//! when `C ≥ τ(t)`, where `τ(t) = τ_min + (τ₀ - τ_min)(1 - t)` decays with the
//! normalised training progress `t`. Admitted samples weigh their
//! temperature-softened KL by `w = C^γ Δ^β`; the rest weigh zero. The
//! distillation term is then mixed with hard-label cross-entropy as
//! `(L_CE + α L_KD) / (1 + α)`.
//!
//! The unit "sample" is one categorical distribution (a classification
//! sample or a single token position). Teacher logits are constants: no
//! gradient flows into them, and the KD gradient carries no `T²` factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cross_entropy, ensure_finite, kl_from_logits, softmax};

/// Loss-stack hyper-parameters.
///
/// Only `alpha = 0.5` has an empirical origin (it was the best setting in a
/// full-scale α ablation); the other defaults are working choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub tau0: f64,
    pub tau_min: f64,
    pub temperature: f64,
    /// Divide `L_KD` by `Σ w` instead of the batch size.
    pub normalize_by_admitted: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.5,
            beta: 0.5,
            tau0: 0.9,
            tau_min: 0.5,
            temperature: 2.0,
            normalize_by_admitted: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64| v > 0.0 && v <= 1.0;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("distill.loss.alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !unit_open(self.gamma) {
            return Err(Error::config(format!("distill.loss.gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !unit_open(self.beta) {
            return Err(Error::config(format!("distill.loss.beta must be in (0, 1], got {}", self.beta)));
        }
        if !unit_open(self.tau0) {
            return Err(Error::config(format!("distill.loss.tau0 must be in (0, 1], got {}", self.tau0)));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau0) {
            return Err(Error::config(format!(
                "distill.loss.tau_min must be in (0, tau0 = {}], got {}",
                self.tau0, self.tau_min
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "distill.loss.temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    pub teacher_logits: Vec<Vec<f64>>,
    pub student_logits: Vec<Vec<f64>>,
    pub hard_labels: Vec<usize>,
    /// Normalised training progress in `[0, 1]`.
    pub progress: f64,
}

impl DistillBatch {
    pub fn len(&self) -> usize {
        self.teacher_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teacher_logits.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.teacher_logits.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::input("empty distillation batch"));
        }
        let k = self.num_classes();
        if k < 2 {
            return Err(Error::input(format!("need at least 2 classes, got {k}")));
        }
        if self.student_logits.len() != self.len() || self.hard_labels.len() != self.len() {
            return Err(Error::input(format!(
                "batch shape mismatch: {} teacher rows, {} student rows, {} labels",
                self.len(),
                self.student_logits.len(),
                self.hard_labels.len()
            )));
        }
        for (i, (t, s)) in self.teacher_logits.iter().zip(&self.student_logits).enumerate() {
            if t.len() != k || s.len() != k {
                return Err(Error::input(format!("row {i} does not have {k} classes")));
            }
            ensure_finite(t, "teacher logits")?;
            ensure_finite(s, "student logits")?;
        }
        if let Some(i) = self.hard_labels.iter().position(|&y| y >= k) {
            return Err(Error::input(format!(
                "label {} of sample {i} out of range for {k} classes",
                self.hard_labels[i]
            )));
        }
        check_progress(self.progress)
    }
}

fn check_progress(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::input(format!("training progress must be in [0, 1], got {t}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleWeightReport {
    pub confidence: f64,
    pub margin: f64,
    pub threshold: f64,
    pub weight: f64,
}

impl SampleWeightReport {
    pub fn admitted(&self) -> bool {
        self.weight > 0.0
    }
}

/// Top probability and top-two gap of the teacher's `T = 1` softmax.
pub fn confidence_margin(teacher_logits: &[f64]) -> Result<(f64, f64)> {
    if teacher_logits.len() < 2 {
        return Err(Error::input(format!(
            "confidence/margin needs at least 2 classes, got {}",
            teacher_logits.len()
        )));
    }
    let p = softmax(teacher_logits, 1.0)?;
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p.iter() {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    Ok((first, first - second))
}

pub fn curriculum_threshold(t: f64, cfg: &DistillConfig) -> Result<f64> {
    check_progress(t)?;
    Ok(cfg.tau_min + (cfg.tau0 - cfg.tau_min) * (1.0 - t))
}

/// `C^γ Δ^β` when `C ≥ τ`, else 0. Zero margin always gives zero weight.
pub fn adaptive_weight(confidence: f64, margin: f64, threshold: f64, cfg: &DistillConfig) -> f64 {
    if confidence < threshold {
        return 0.0;
    }
    confidence.powf(cfg.gamma) * margin.max(0.0).powf(cfg.beta)
}

fn weigh_sample(teacher: &[f64], threshold: f64, cfg: &DistillConfig) -> Result<SampleWeightReport> {
    let (confidence, margin) = confidence_margin(teacher)?;
    Ok(SampleWeightReport {
        confidence,
        margin,
        threshold,
        weight: adaptive_weight(confidence, margin, threshold, cfg),
    })
}

/// Weighted KD term and the per-sample weights behind it.
pub fn kd_loss(batch: &DistillBatch, cfg: &DistillConfig) -> Result<(f64, Vec<SampleWeightReport>)> {
    cfg.validate()?;
    batch.validate()?;
    let threshold = curriculum_threshold(batch.progress, cfg)?;
    let mut reports = Vec::with_capacity(batch.len());
    let mut weighted = 0.0;
    for (t, s) in batch.teacher_logits.iter().zip(&batch.student_logits) {
        let report = weigh_sample(t, threshold, cfg)?;
        if report.admitted() {
            weighted += report.weight * kl_from_logits(t, s, cfg.temperature)?;
        }
        reports.push(report);
    }
    let denom = kd_denominator(&reports, batch.len(), cfg);
    let loss = if denom > 0.0 { weighted / denom } else { 0.0 };
    Ok((loss, reports))
}

fn kd_denominator(reports: &[SampleWeightReport], n: usize, cfg: &DistillConfig) -> f64 {
    if cfg.normalize_by_admitted {
        reports.iter().map(|r| r.weight).sum()
    } else {
        n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub loss: f64,
    pub ce: f64,
    pub kd: f64,
    /// `∂L / ∂ student_logits`, one row per sample.
    pub grad_student_logits: Vec<Vec<f64>>,
    pub reports: Vec<SampleWeightReport>,
}

impl ObjectiveOutput {
    pub fn admitted(&self) -> usize {
        self.reports.iter().filter(|r| r.admitted()).count()
    }
}

/// `(ce + α·kd) / (1 + α)`.
pub fn mix_objective(ce: f64, kd: f64, alpha: f64) -> f64 {
    (ce + alpha * kd) / (1.0 + alpha)
}

/// `(L_CE + α L_KD) / (1 + α)` with its analytic gradient in the student
/// logits.
pub fn distill_objective(batch: &DistillBatch, cfg: &DistillConfig) -> Result<ObjectiveOutput> {
    let (kd, reports) = kd_loss(batch, cfg)?;
    let n = batch.len() as f64;
    let t = cfg.temperature;
    let mix_ce = 1.0 / (1.0 + cfg.alpha);
    let mix_kd = cfg.alpha / (1.0 + cfg.alpha);
    let kd_denom = kd_denominator(&reports, batch.len(), cfg);

    let mut ce = 0.0;
    let mut grad = Vec::with_capacity(batch.len());
    for (i, (teacher, student)) in batch.teacher_logits.iter().zip(&batch.student_logits).enumerate() {
        let label = batch.hard_labels[i];
        ce += cross_entropy(student, label)?;

        let q = softmax(student, 1.0)?;
        let mut row: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(k, qk)| mix_ce * (qk - if k == label { 1.0 } else { 0.0 }) / n)
            .collect();

        let w = reports[i].weight;
        if w > 0.0 && kd_denom > 0.0 {
            let qs = softmax(student, t)?;
            let pt = softmax(teacher, t)?;
            let scale = mix_kd * w / kd_denom / t;
            for (k, g) in row.iter_mut().enumerate() {
                *g += scale * (qs[k] - pt[k]);
            }
        }
        grad.push(row);
    }
    ce /= n;
    Ok(ObjectiveOutput {
        loss: mix_objective(ce, kd, cfg.alpha),
        ce,
        kd,
        grad_student_logits: grad,
        reports,
    })
}
