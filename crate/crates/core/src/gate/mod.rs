//! Reflective correction gate.
//!
//! A prediction `(pred_text, c)` and its label `(gt_text, c)` share one
//! anchor box `c`. Their text embeddings are compared with
//!
//! ```text
//! S = (μ⟨e_o, e_gt⟩ + ν⟨c, c⟩) / √((μ‖e_o‖² + ν‖c‖²)(μ‖e_gt‖² + ν‖c‖²))
//! ```
//!
//! which is the plain cosine of `[√μ e_o ; √ν c]` and `[√μ e_gt ; √ν c]`.
//! Because `c` is shared, the box term only lifts the similarity floor; it
//! never measures box error. Samples with `S < τ` go to a [`Corrector`],
//! which may rewrite the text but must return the box untouched.

mod corrector;

pub use corrector::{
    Correction, CorrectionRequest, Corrector, MockCorrector, RemoteConfig, RemoteCorrector,
    TemplateCorrector, DEFAULT_INSTRUCTION,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::math::{dot, ensure_finite, norm_sq};
use crate::metrics::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub mu: f64,
    pub nu: f64,
    pub tau: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { mu: 2.0, nu: 1.0, tau: 0.8 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::config(format!("gate.mu must be positive, got {}", self.mu)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::config(format!("gate.nu must be positive, got {}", self.nu)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("gate.tau must be in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateSample {
    pub pred_embedding: Vec<f64>,
    pub gt_embedding: Vec<f64>,
    pub anchor_box: BBox,
    pub pred_text: String,
    pub gt_text: String,
}

impl GateSample {
    pub fn from_texts(
        pred_text: impl Into<String>,
        gt_text: impl Into<String>,
        anchor_box: BBox,
        embedder: &dyn Embedder,
    ) -> Self {
        let pred_text = pred_text.into();
        let gt_text = gt_text.into();
        Self {
            pred_embedding: embedder.embed(&pred_text),
            gt_embedding: embedder.embed(&gt_text),
            anchor_box,
            pred_text,
            gt_text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateDecision {
    Keep,
    Correct,
}

pub fn weighted_cosine(sample: &GateSample, cfg: &GateConfig) -> Result<f64> {
    let (eo, egt) = (&sample.pred_embedding, &sample.gt_embedding);
    if eo.len() != egt.len() {
        return Err(Error::input(format!(
            "prediction and label embeddings differ in length: {} vs {}",
            eo.len(),
            egt.len()
        )));
    }
    ensure_finite(eo, "prediction embedding")?;
    ensure_finite(egt, "label embedding")?;
    let c = sample.anchor_box.to_array();
    let box_term = cfg.nu * norm_sq(&c);
    let left = cfg.mu * norm_sq(eo) + box_term;
    let right = cfg.mu * norm_sq(egt) + box_term;
    let denom = (left * right).sqrt();
    if denom == 0.0 {
        return Err(Error::input(
            "weighted cosine undefined: an embedding and the anchor box are both zero",
        ));
    }
    Ok(((cfg.mu * dot(eo, egt) + box_term) / denom).clamp(-1.0, 1.0))
}

/// `Keep` iff `score ≥ τ`.
pub fn decide(score: f64, tau: f64) -> GateDecision {
    if score < tau {
        GateDecision::Correct
    } else {
        GateDecision::Keep
    }
}

pub fn gate_decide(sample: &GateSample, cfg: &GateConfig) -> Result<GateDecision> {
    Ok(decide(weighted_cosine(sample, cfg)?, cfg.tau))
}

/// Replace the prediction text with the corrector's revision and re-embed it.
///
/// The anchor box of the result is the input box; a corrector that returns
/// any other box is a contract violation.
pub fn apply_correction(
    sample: &GateSample,
    corrector: &dyn Corrector,
    embedder: &dyn Embedder,
) -> Result<GateSample> {
    let request = CorrectionRequest {
        pred_text: sample.pred_text.clone(),
        gt_text: sample.gt_text.clone(),
        anchor_box: sample.anchor_box,
        instruction: DEFAULT_INSTRUCTION.to_string(),
    };
    let revised = corrector.correct(&request)?;
    if !revised.anchor_box.bit_eq(&sample.anchor_box) {
        return Err(Error::ContractViolation(format!(
            "corrector changed the anchor box from {:?} to {:?}",
            sample.anchor_box.to_array(),
            revised.anchor_box.to_array()
        )));
    }
    Ok(GateSample {
        pred_embedding: embedder.embed(&revised.text),
        pred_text: revised.text,
        ..sample.clone()
    })
}

/// One line of the gate manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub id: String,
    #[serde(rename = "S")]
    pub score: f64,
    pub decision: GateDecision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrected_text: Option<String>,
    /// Similarity after the single correction pass.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regate_score: Option<f64>,
    /// Corrected but still below threshold.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GateRecord {
    /// Whether this sample belongs in the retrain queue.
    pub fn queued_for_retraining(&self) -> bool {
        self.corrected_text.is_some()
    }
}

/// Gate every sample, correcting the failing ones at most once.
///
/// Work runs on the current rayon pool; records come back in input order.
pub fn run_gate(
    samples: &[(String, GateSample)],
    cfg: &GateConfig,
    corrector: Option<&dyn Corrector>,
    embedder: &dyn Embedder,
) -> Result<Vec<GateRecord>> {
    cfg.validate()?;
    samples
        .par_iter()
        .map(|(id, sample)| gate_one(id, sample, cfg, corrector, embedder))
        .collect()
}

fn gate_one(
    id: &str,
    sample: &GateSample,
    cfg: &GateConfig,
    corrector: Option<&dyn Corrector>,
    embedder: &dyn Embedder,
) -> Result<GateRecord> {
    let score = weighted_cosine(sample, cfg)?;
    let decision = decide(score, cfg.tau);
    let mut record = GateRecord {
        id: id.to_string(),
        score,
        decision,
        corrected_text: None,
        regate_score: None,
        flagged: false,
        error: None,
    };
    if decision == GateDecision::Keep {
        return Ok(record);
    }
    let Some(corrector) = corrector else {
        return Ok(record);
    };
    match apply_correction(sample, corrector, embedder) {
        Ok(corrected) => {
            let regate = weighted_cosine(&corrected, cfg)?;
            record.flagged = regate < cfg.tau;
            record.regate_score = Some(regate);
            record.corrected_text = Some(corrected.pred_text);
        }
        Err(e @ (Error::CorrectionFailed(_) | Error::ContractViolation(_))) => {
            record.error = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use crate::math::{cosine_similarity, seeded_rng};
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(eo: Vec<f64>, egt: Vec<f64>, c: [f64; 4]) -> GateSample {
        GateSample {
            pred_embedding: eo,
            gt_embedding: egt,
            anchor_box: BBox::new(c[0], c[1], c[2], c[3]).unwrap(),
            pred_text: "pred".into(),
            gt_text: "gt".into(),
        }
    }

    fn concat_oracle(s: &GateSample, cfg: &GateConfig) -> f64 {
        let c = s.anchor_box.to_array();
        let side = |e: &[f64]| -> Vec<f64> {
            e.iter().map(|v| cfg.mu.sqrt() * v).chain(c.iter().map(|v| cfg.nu.sqrt() * v)).collect()
        };
        cosine_similarity(&side(&s.pred_embedding), &side(&s.gt_embedding)).unwrap()
    }

    #[test]
    fn weighted_cosine_examples() {
        let cfg = GateConfig::default();
        let s = sample(vec![0.3, -0.4], vec![0.3, -0.4], [0.1, 0.2, 0.5, 0.9]);
        assert!((weighted_cosine(&s, &cfg).unwrap() - 1.0).abs() < 1e-15);

        let s = sample(vec![1.0, 0.0], vec![0.0, 1.0], [0.0; 4]);
        assert_eq!(weighted_cosine(&s, &cfg).unwrap(), 0.0);

        // (0 + 1·4) / √((2 + 4)(2 + 4)) = 2/3
        let s = sample(vec![1.0, 0.0], vec![0.0, 1.0], [1.0; 4]);
        let cfg = GateConfig { mu: 2.0, nu: 1.0, tau: 0.8 };
        assert!((weighted_cosine(&s, &cfg).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((concat_oracle(&s, &cfg) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_is_an_error() {
        let s = sample(vec![0.0, 0.0], vec![1.0, 0.0], [0.0; 4]);
        assert!(matches!(weighted_cosine(&s, &GateConfig::default()), Err(Error::InvalidInput(_))));
        // the box term rescues empty text
        let s = sample(vec![0.0, 0.0], vec![1.0, 0.0], [0.2, 0.2, 0.4, 0.4]);
        assert!(weighted_cosine(&s, &GateConfig::default()).is_ok());
    }

    #[test]
    fn boundary_score_keeps() {
        assert_eq!(decide(0.8, 0.8), GateDecision::Keep);
        assert_eq!(decide(0.5, 0.8), GateDecision::Correct);
        assert_eq!(decide(1.0, 0.8), GateDecision::Keep);
        let s = sample(vec![0.6, 0.1, -0.3], vec![0.2, 0.5, 0.1], [0.1, 0.1, 0.3, 0.6]);
        let score = weighted_cosine(&s, &GateConfig::default()).unwrap();
        let at = GateConfig { tau: score, ..GateConfig::default() };
        assert_eq!(gate_decide(&s, &at).unwrap(), GateDecision::Keep);
        let above = GateConfig { tau: score + 1e-12, ..GateConfig::default() };
        assert_eq!(gate_decide(&s, &above).unwrap(), GateDecision::Correct);
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig { tau: 1.01, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { mu: 0.0, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { nu: -1.0, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig::default().validate().is_ok());
    }

    #[test]
    fn scale_behaviour() {
        let cfg = GateConfig::default();
        let base = sample(vec![0.6, 0.1, -0.3], vec![0.2, 0.5, 0.1], [0.1, 0.1, 0.3, 0.6]);
        let scaled = sample(vec![1.8, 0.3, -0.9], vec![0.6, 1.5, 0.3], [0.1, 0.1, 0.3, 0.6]);
        assert!((weighted_cosine(&base, &cfg).unwrap() - weighted_cosine(&scaled, &cfg).unwrap()).abs() > 1e-6);
        let base0 = sample(vec![0.6, 0.1, -0.3], vec![0.2, 0.5, 0.1], [0.0; 4]);
        let scaled0 = sample(vec![1.8, 0.3, -0.9], vec![0.6, 1.5, 0.3], [0.0; 4]);
        assert!((weighted_cosine(&base0, &cfg).unwrap() - weighted_cosine(&scaled0, &cfg).unwrap()).abs() < 1e-15);
    }

    struct BoxMover;

    impl Corrector for BoxMover {
        fn correct(&self, req: &CorrectionRequest) -> Result<Correction> {
            let mut b = req.anchor_box.to_array();
            b[2] = (b[2] + 0.01).min(1.0);
            Ok(Correction { text: req.gt_text.clone(), anchor_box: BBox::new(b[0], b[1], b[2], b[3])? })
        }
    }

    #[test]
    fn correction_preserves_box_and_reaches_label() {
        let embedder = HashEmbedder::default();
        let bx = BBox::new(0.12, 0.3, 0.45, 0.61).unwrap();
        let s = GateSample::from_texts("right kidney cyst", "left lung nodule", bx, &embedder);
        let cfg = GateConfig::default();
        assert_eq!(gate_decide(&s, &cfg).unwrap(), GateDecision::Correct);
        let fixed = apply_correction(&s, &MockCorrector, &embedder).unwrap();
        assert!(fixed.anchor_box.bit_eq(&bx));
        assert_eq!(fixed.pred_text, "left lung nodule");
        assert_eq!(weighted_cosine(&fixed, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn box_mutation_is_a_contract_violation() {
        let embedder = HashEmbedder::default();
        let s = GateSample::from_texts("a", "b", BBox::new(0.1, 0.1, 0.2, 0.2).unwrap(), &embedder);
        assert!(matches!(apply_correction(&s, &BoxMover, &embedder), Err(Error::ContractViolation(_))));
        let records = run_gate(&[("x".into(), s)], &GateConfig::default(), Some(&BoxMover), &embedder).unwrap();
        assert!(records[0].error.as_deref().unwrap().contains("anchor box"));
        assert!(records[0].corrected_text.is_none());
    }

    #[test]
    fn run_gate_records() {
        let embedder = HashEmbedder::default();
        let bx = BBox::new(0.1, 0.2, 0.3, 0.4).unwrap();
        let samples = vec![
            ("same".to_string(), GateSample::from_texts("liver lesion", "liver lesion", bx, &embedder)),
            ("diff".to_string(), GateSample::from_texts("no finding", "liver lesion", bx, &embedder)),
        ];
        let cfg = GateConfig::default();
        let recs = run_gate(&samples, &cfg, Some(&MockCorrector), &embedder).unwrap();
        assert_eq!(recs[0].decision, GateDecision::Keep);
        assert_eq!(recs[0].score, 1.0);
        assert!(recs[0].corrected_text.is_none());
        assert_eq!(recs[1].decision, GateDecision::Correct);
        assert_eq!(recs[1].corrected_text.as_deref(), Some("liver lesion"));
        assert_eq!(recs[1].regate_score, Some(1.0));
        assert!(!recs[1].flagged);
        assert!(recs[1].queued_for_retraining());

        // a template correction may still fail the gate and is flagged rather than retried
        let recs = run_gate(&samples, &cfg, None, &embedder).unwrap();
        assert!(recs[1].corrected_text.is_none());
    }

    #[test]
    fn lowering_tau_never_adds_corrections() {
        let mut rng = seeded_rng(12);
        for _ in 0..200 {
            let eo: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let egt: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = sample(eo, egt, [0.1, 0.2, 0.6, 0.7]);
            let hi = rng.random_range(0.01..0.99);
            let lo = hi * rng.random_range(0.0..1.0f64).max(0.01);
            let d_hi = gate_decide(&s, &GateConfig { tau: hi, ..GateConfig::default() }).unwrap();
            let d_lo = gate_decide(&s, &GateConfig { tau: lo, ..GateConfig::default() }).unwrap();
            if d_hi == GateDecision::Keep {
                assert_eq!(d_lo, GateDecision::Keep);
            }
        }
    }

    fn any_box() -> impl Strategy<Value = [f64; 4]> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64)
            .prop_map(|(a, b, c, d)| [a.min(c), b.min(d), a.max(c), b.max(d)])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_concatenated_cosine(
            (eo, egt) in (1usize..16).prop_flat_map(|d| (prop::collection::vec(-2.0..2.0f64, d), prop::collection::vec(-2.0..2.0f64, d))),
            c in any_box(),
            mu in 0.05..5.0f64,
            nu in 0.05..5.0f64,
        ) {
            prop_assume!(norm_sq(&eo) > 1e-6 && norm_sq(&egt) > 1e-6);
            let cfg = GateConfig { mu, nu, tau: 0.8 };
            let s = sample(eo, egt, c);
            let w = weighted_cosine(&s, &cfg).unwrap();
            prop_assert!((w - concat_oracle(&s, &cfg)).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&w));
        }
    }
}
