//! Run configuration: one strict JSON document covering every command.
//!
//! Unknown keys are rejected and every missing key takes its default, so `{}`
//! is a complete configuration. Errors name the offending key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::DistillConfig;
use crate::embed::{HashEmbedder, DEFAULT_EMBED_DIM};
use crate::error::{Error, Result};
use crate::gate::{GateConfig, RemoteConfig};
use crate::rope::{build_layout, AffineParams, RopeConfig, SequenceLayout};
use crate::sasg::DEFAULT_POOL_SIZE;
use crate::toy::{ToyExperiment, ToyTask};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub rope: RopeSection,
    pub distill: DistillSection,
    pub gate: GateSection,
    pub sasg: SasgSection,
    /// Not part of the config hash, so runs into different directories
    /// produce identical files.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            rope: RopeSection::default(),
            distill: DistillSection::default(),
            gate: GateSection::default(),
            sasg: SasgSection::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Token contents for the positional demo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenContents {
    /// Every token carries the same all-ones vector, so score differences
    /// come from positions alone.
    #[default]
    Constant,
    /// Uniform entries in `[-1, 1)` drawn from the run seed.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RopeSection {
    pub rotary: RopeConfig,
    pub layout: SequenceLayout,
    /// Defaults to unit scale with the image offset by the layout gap.
    pub affine: Option<AffineParams>,
    pub tokens: TokenContents,
}

impl Default for RopeSection {
    fn default() -> Self {
        Self {
            rotary: RopeConfig::default(),
            layout: SequenceLayout::default(),
            affine: None,
            tokens: TokenContents::Constant,
        }
    }
}

impl RopeSection {
    pub fn affine(&self) -> AffineParams {
        self.affine.unwrap_or_else(|| AffineParams::for_layout(&self.layout))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub loss: DistillConfig,
    pub task: ToyTask,
    pub steps: usize,
    pub lr: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let exp = ToyExperiment::default();
        Self {
            loss: DistillConfig::default(),
            task: exp.task,
            steps: exp.steps,
            lr: exp.lr,
        }
    }
}

impl DistillSection {
    pub fn experiment(&self) -> ToyExperiment {
        ToyExperiment { task: self.task, steps: self.steps, lr: self.lr }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectorKind {
    /// Gate only; failing samples are recorded but not rewritten.
    None,
    #[default]
    Mock,
    Template,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectorSection {
    pub kind: CorrectorKind,
    /// Seed of the template corrector; the run seed when absent.
    pub seed: Option<u64>,
    pub remote: Option<RemoteConfig>,
}

impl Default for CorrectorSection {
    fn default() -> Self {
        Self { kind: CorrectorKind::Mock, seed: None, remote: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub mu: f64,
    pub nu: f64,
    pub tau: f64,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub corrector: CorrectorSection,
}

impl Default for GateSection {
    fn default() -> Self {
        let g = GateConfig::default();
        Self {
            mu: g.mu,
            nu: g.nu,
            tau: g.tau,
            embed_dim: DEFAULT_EMBED_DIM,
            embed_seed: 0,
            corrector: CorrectorSection::default(),
        }
    }
}

impl GateSection {
    pub fn gate_config(&self) -> GateConfig {
        GateConfig { mu: self.mu, nu: self.nu, tau: self.tau }
    }

    pub fn embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.embed_dim, self.embed_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Hash,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SasgSection {
    /// Candidates considered per pool, taken in generation order.
    pub n: usize,
    pub scorer: ScorerKind,
    pub embed_dim: usize,
    pub embed_seed: u64,
}

impl Default for SasgSection {
    fn default() -> Self {
        Self {
            n: DEFAULT_POOL_SIZE,
            scorer: ScorerKind::Hash,
            embed_dim: DEFAULT_EMBED_DIM,
            embed_seed: 0,
        }
    }
}

impl SasgSection {
    pub fn embedder(&self) -> HashEmbedder {
        HashEmbedder::new(self.embed_dim, self.embed_seed)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        if !text.trim_start().starts_with('{') {
            return Err(Error::config("config must be a JSON object"));
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("{path}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Check every section; the first problem found is reported.
    pub fn validate(&self) -> Result<()> {
        self.rope.rotary.validate()?;
        self.rope.layout.validate()?;
        self.rope.affine().validate()?;
        build_layout(&self.rope.layout, &self.rope.affine())
            .map_err(|e| Error::config(format!("rope.affine: {e}")))?;
        self.distill.loss.validate()?;
        self.distill.experiment().validate()?;
        self.gate.gate_config().validate()?;
        if self.gate.embed_dim == 0 {
            return Err(Error::config("gate.embed_dim must be >= 1"));
        }
        match (&self.gate.corrector.kind, &self.gate.corrector.remote) {
            (CorrectorKind::Remote, None) => {
                return Err(Error::config("gate.corrector.remote is required when kind is \"remote\""));
            }
            (_, Some(remote)) => remote.validate()?,
            _ => {}
        }
        if self.sasg.n == 0 {
            return Err(Error::config("sasg.n must be >= 1"));
        }
        if self.sasg.embed_dim == 0 {
            return Err(Error::config("sasg.embed_dim must be >= 1"));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form with `output_dir` cleared.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"gate": {"tua": 0.5}}"#).unwrap_err().to_string();
        assert!(err.contains("gate") && err.contains("tua"), "{err}");
        let err = RunConfig::from_json(r#"{"rope": {"layout": {"prefix_len": 1, "image_h": 1, "image_w": 1, "suffix_len": 1, "extra": 0}}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("rope.layout") && err.contains("extra"), "{err}");
    }

    #[test]
    fn invalid_values_are_named() {
        let err = RunConfig::from_json(r#"{"gate": {"tau": 1.01}}"#).unwrap_err().to_string();
        assert!(err.contains("gate.tau"), "{err}");
        let err = RunConfig::from_json(r#"{"distill": {"loss": {"tau_min": 0.95}}}"#).unwrap_err().to_string();
        assert!(err.contains("distill.loss.tau_min"), "{err}");
        let err = RunConfig::from_json(r#"{"distill": {"steps": 0}}"#).unwrap_err().to_string();
        assert!(err.contains("distill.steps"), "{err}");
        let err = RunConfig::from_json(r#"{"gate": {"corrector": {"kind": "remote"}}}"#).unwrap_err().to_string();
        assert!(err.contains("gate.corrector.remote"), "{err}");
        let err = RunConfig::from_json(r#"{"sasg": {"n": 0}}"#).unwrap_err().to_string();
        assert!(err.contains("sasg.n"), "{err}");
        assert!(matches!(RunConfig::from_json("[1]"), Err(Error::InvalidConfig(_))));
        // image row 0 lands on the last prefix position
        let err = RunConfig::from_json(r#"{"rope": {"affine": {"alpha1": 1, "alpha2": 1, "lambda1": 3, "lambda2": 3}}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("rope.affine"), "{err}");
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 7, "distill": {"loss": {"alpha": 0.0}}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.distill.loss.alpha, 0.0);
        assert_eq!(cfg.distill.loss.tau0, DistillConfig::default().tau0);
        assert_eq!(cfg.distill.steps, 2000);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig { output_dir: "elsewhere".into(), ..RunConfig::default() };
        let c = RunConfig { seed: 1, ..RunConfig::default() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::from_json(r#"{"gate": {"corrector": {"kind": "remote", "remote": {"url": "http://localhost:1/x", "credential_env": "TOKEN"}}}}"#).unwrap();
        let again = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }
}
