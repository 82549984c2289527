//! Toy teacher-student run for the distillation objective.
//!
//! Samples come from isotropic Gaussian clusters whose centres sit evenly on a
//! circle in the first two feature dimensions. The default teacher is the
//! exact Bayes posterior of that mixture, which is itself a linear-softmax
//! model. The student is a linear-softmax classifier trained by full-batch
//! gradient descent on a fixed sample pool, so the admitted set only changes
//! through the threshold schedule.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distill::{distill_objective, DistillBatch, DistillConfig};
use crate::error::{Error, Result};
use crate::math::{dot, kl_from_logits, seeded_rng, SeededRng};

/// Anything that maps a feature vector to class logits.
pub trait LogitSource {
    fn logits(&self, x: &[f64]) -> Vec<f64>;
}

/// `logits = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(classes: usize, feature_dim: usize) -> Self {
        Self {
            weights: vec![vec![0.0; feature_dim]; classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }
}

impl LogitSource for LinearModel {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// The cluster each sample was drawn from.
    Cluster,
    /// The teacher's arg-max class.
    TeacherArgmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTask {
    pub classes: usize,
    pub feature_dim: usize,
    pub samples: usize,
    /// Distance of every cluster centre from the origin.
    pub radius: f64,
    /// Per-coordinate standard deviation within a cluster.
    pub spread: f64,
    pub labels: LabelRule,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            classes: 3,
            feature_dim: 2,
            samples: 300,
            radius: 2.0,
            spread: 1.0,
            labels: LabelRule::Cluster,
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("distill.task.classes must be >= 2, got {}", self.classes)));
        }
        if self.feature_dim < 2 {
            return Err(Error::config(format!(
                "distill.task.feature_dim must be >= 2, got {}",
                self.feature_dim
            )));
        }
        if self.samples == 0 {
            return Err(Error::config("distill.task.samples must be >= 1"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::config(format!("distill.task.radius must be positive, got {}", self.radius)));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::config(format!("distill.task.spread must be positive, got {}", self.spread)));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|k| {
                let angle = std::f64::consts::TAU * k as f64 / self.classes as f64;
                let mut c = vec![0.0; self.feature_dim];
                c[0] = self.radius * angle.cos();
                c[1] = self.radius * angle.sin();
                c
            })
            .collect()
    }

    /// Bayes posterior logits for equal priors: `μ_k·x/σ² - ‖μ_k‖²/2σ²`.
    pub fn bayes_teacher(&self) -> LinearModel {
        let var = self.spread * self.spread;
        let centers = self.centers();
        LinearModel {
            bias: centers.iter().map(|c| -dot(c, c) / (2.0 * var)).collect(),
            weights: centers
                .into_iter()
                .map(|c| c.into_iter().map(|v| v / var).collect())
                .collect(),
        }
    }

    pub fn generate(&self, rng: &mut SeededRng) -> SyntheticData {
        let centers = self.centers();
        let mut features = Vec::with_capacity(self.samples);
        let mut clusters = Vec::with_capacity(self.samples);
        for _ in 0..self.samples {
            let k = rng.random_range(0..self.classes);
            let x = centers[k]
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(rng);
                    c + self.spread * z
                })
                .collect();
            features.push(x);
            clusters.push(k);
        }
        SyntheticData { features, clusters }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub features: Vec<Vec<f64>>,
    pub clusters: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub progress: f64,
    pub tau: f64,
    pub loss: f64,
    pub ce: f64,
    pub kd: f64,
    pub admitted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// Mean `KL(teacher ‖ student)` at `T = 1` over the pool.
    pub mean_kl: f64,
    pub loss: f64,
    pub ce: f64,
    pub kd: f64,
    pub admitted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    pub initial_mean_kl: f64,
    pub final_metrics: FinalMetrics,
    pub student: LinearModel,
}

impl TrainingTrace {
    pub fn admitted_non_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].admitted <= w[1].admitted)
    }
}

fn mean_kl(teacher: &[Vec<f64>], student: &LinearModel, features: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (t, x) in teacher.iter().zip(features) {
        total += kl_from_logits(t, &student.logits(x), 1.0)?;
    }
    Ok(total / features.len() as f64)
}

/// Full-batch gradient descent of `student` on the distillation objective.
///
/// Step `s` (0-based) runs at progress `t = s / steps`; the trace row records
/// the objective before that step's update. Final metrics are evaluated after
/// the last update at `t = 1`.
pub fn toy_distill_run(
    teacher: &dyn LogitSource,
    data: &SyntheticData,
    labels: &[usize],
    cfg: &DistillConfig,
    steps: usize,
    lr: f64,
    mut student: LinearModel,
) -> Result<TrainingTrace> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::config("steps must be >= 1"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("lr must be positive, got {lr}")));
    }
    if labels.len() != data.features.len() {
        return Err(Error::input(format!(
            "{} labels for {} samples",
            labels.len(),
            data.features.len()
        )));
    }
    let teacher_logits: Vec<Vec<f64>> = data.features.iter().map(|x| teacher.logits(x)).collect();
    let batch_at = |student: &LinearModel, progress: f64| DistillBatch {
        teacher_logits: teacher_logits.clone(),
        student_logits: data.features.iter().map(|x| student.logits(x)).collect(),
        hard_labels: labels.to_vec(),
        progress,
    };
    let initial_mean_kl = mean_kl(&teacher_logits, &student, &data.features)?;

    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        let progress = step as f64 / steps as f64;
        let out = distill_objective(&batch_at(&student, progress), cfg)
            .map_err(|e| Error::RunFailed { step, reason: e.to_string() })?;
        if !out.loss.is_finite() {
            return Err(Error::RunFailed { step, reason: format!("loss became {}", out.loss) });
        }
        rows.push(TraceRow {
            step,
            progress,
            tau: out.reports[0].threshold,
            loss: out.loss,
            ce: out.ce,
            kd: out.kd,
            admitted: out.admitted(),
        });
        for (g, x) in out.grad_student_logits.iter().zip(&data.features) {
            for (k, gk) in g.iter().enumerate() {
                for (w, xi) in student.weights[k].iter_mut().zip(x) {
                    *w -= lr * gk * xi;
                }
                student.bias[k] -= lr * gk;
            }
        }
        if student.weights.iter().flatten().chain(&student.bias).any(|v| !v.is_finite()) {
            return Err(Error::RunFailed { step, reason: "student parameters diverged".into() });
        }
    }

    let out = distill_objective(&batch_at(&student, 1.0), cfg)
        .map_err(|e| Error::RunFailed { step: steps, reason: e.to_string() })?;
    let final_metrics = FinalMetrics {
        mean_kl: mean_kl(&teacher_logits, &student, &data.features)?,
        loss: out.loss,
        ce: out.ce,
        kd: out.kd,
        admitted: out.admitted(),
    };
    Ok(TrainingTrace { rows, initial_mean_kl, final_metrics, student })
}

/// Synthetic task plus optimiser settings; `run` draws the data from `seed`
/// and trains a zero-initialised student against the Bayes teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyExperiment {
    pub task: ToyTask,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        Self { task: ToyTask::default(), steps: 2000, lr: 0.5 }
    }
}

impl ToyExperiment {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.steps == 0 {
            return Err(Error::config("distill.steps must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("distill.lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn run(&self, cfg: &DistillConfig, seed: u64) -> Result<TrainingTrace> {
        self.validate()?;
        let mut rng = seeded_rng(seed);
        let data = self.task.generate(&mut rng);
        let teacher = self.task.bayes_teacher();
        let labels: Vec<usize> = match self.task.labels {
            LabelRule::Cluster => data.clusters.clone(),
            LabelRule::TeacherArgmax => data.features.iter().map(|x| argmax(&teacher.logits(x))).collect(),
        };
        let student = LinearModel::zeros(self.task.classes, self.task.feature_dim);
        toy_distill_run(&teacher, &data, &labels, cfg, self.steps, self.lr, student)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
