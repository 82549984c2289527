//! Two-axis rotary position embedding for text-image-text sequences.
//!
//! Text tokens carry equal indices on both axes, `(t, t)`. Image patches at
//! grid cell `(r, c)` are mapped through an affine transform
//! `(α₁ r + λ₁, α₂ c + λ₂)`, and the suffix text resumes `g` index units past
//! the largest transformed image index. The inter-modal gap `g` is separate
//! from the intra-text step (always 1): `g = 2` gives text/image boundaries a
//! distinct interval, while `g = 1` with the default affine collapses to the
//! plain 2D-RoPE layout where image indices simply continue the text run.
//!
//! Rotation splits a head vector into a height half of `d_h` coordinates and
//! a width half of `d_w` coordinates. Each adjacent coordinate pair of the
//! height half is rotated by `x_h · ω_i`, each pair of the width half by
//! `x_w · ω_i`. The block-diagonal rotation is never materialised.
//!
//! Frequencies follow `ω_i = base^(-2i/d)`. With the default index origin 1
//! (`i = 1..=d/2`) the fastest frequency is `base^(-2/d)`, not 1 as in the
//! classic RoPE convention; set [`RopeConfig::freq_index_origin`] to 0 for
//! the classic table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ensure_finite;

/// Index distance between consecutive text tokens.
pub const INTRA_TEXT_STEP: f64 = 1.0;

pub const DEFAULT_GAP: f64 = 2.0;

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceLayout {
    pub prefix_len: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub suffix_len: usize,
    /// Index distance across a text/image boundary.
    #[serde(default = "default_gap")]
    pub gap: f64,
}

fn default_gap() -> f64 {
    DEFAULT_GAP
}

impl Default for SequenceLayout {
    fn default() -> Self {
        Self {
            prefix_len: 4,
            image_h: 3,
            image_w: 3,
            suffix_len: 4,
            gap: DEFAULT_GAP,
        }
    }
}

impl SequenceLayout {
    pub fn new(prefix_len: usize, image_h: usize, image_w: usize, suffix_len: usize) -> Self {
        Self {
            prefix_len,
            image_h,
            image_w,
            suffix_len,
            gap: DEFAULT_GAP,
        }
    }

    pub fn with_gap(mut self, gap: f64) -> Self {
        self.gap = gap;
        self
    }

    pub fn image_tokens(&self) -> usize {
        self.image_h * self.image_w
    }

    pub fn total_tokens(&self) -> usize {
        self.prefix_len + self.image_tokens() + self.suffix_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_h == 0 || self.image_w == 0 {
            return Err(Error::config(format!(
                "rope.layout image grid must be at least 1x1, got {}x{}",
                self.image_h, self.image_w
            )));
        }
        if !(self.gap.is_finite() && self.gap >= 1.0) {
            return Err(Error::config(format!(
                "rope.layout.gap must be >= 1, got {}",
                self.gap
            )));
        }
        Ok(())
    }

    /// Modality of token `index` in sequence order.
    pub fn modality(&self, index: usize) -> Modality {
        if index >= self.prefix_len && index < self.prefix_len + self.image_tokens() {
            Modality::Image
        } else {
            Modality::Text
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Affine map applied to image grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl AffineParams {
    /// Unit scale, with the image starting `gap` units after the last prefix
    /// token: `λ₁ = λ₂ = (ℓ - 1) + g`.
    pub fn for_layout(layout: &SequenceLayout) -> Self {
        let offset = layout.prefix_len as f64 - 1.0 + layout.gap;
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            lambda1: offset,
            lambda2: offset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return Err(Error::config(format!(
                "rope.affine alpha1/alpha2 must be positive, got {}/{}",
                self.alpha1, self.alpha2
            )));
        }
        ensure_finite(
            &[self.alpha1, self.alpha2, self.lambda1, self.lambda2],
            "rope.affine",
        )
        .map_err(|e| Error::config(e.to_string()))
    }

    fn apply(&self, row: usize, col: usize) -> PositionIndex2D {
        PositionIndex2D {
            x_h: self.alpha1 * row as f64 + self.lambda1,
            x_w: self.alpha2 * col as f64 + self.lambda2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PositionIndex2D {
    pub x_h: f64,
    pub x_w: f64,
}

impl PositionIndex2D {
    pub const ORIGIN: Self = Self { x_h: 0.0, x_w: 0.0 };

    pub fn new(x_h: f64, x_w: f64) -> Self {
        Self { x_h, x_w }
    }

    pub fn text(t: f64) -> Self {
        Self { x_h: t, x_w: t }
    }

    pub fn shifted(self, d_h: f64, d_w: f64) -> Self {
        Self {
            x_h: self.x_h + d_h,
            x_w: self.x_w + d_w,
        }
    }
}

impl std::ops::Add for PositionIndex2D {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        self.shifted(rhs.x_h, rhs.x_w)
    }
}

/// Position indices for every token of `layout`, in sequence order
/// (prefix, image in row-major order, suffix).
///
/// Suffix text resumes at `M + g` where `M` is the largest transformed image
/// index over both axes, so text keeps `x_h = x_w` even when `α₁ ≠ α₂`.
pub fn build_layout(layout: &SequenceLayout, affine: &AffineParams) -> Result<Vec<PositionIndex2D>> {
    layout.validate()?;
    affine.validate()?;
    let mut out = Vec::with_capacity(layout.total_tokens());
    for p in 0..layout.prefix_len {
        out.push(PositionIndex2D::text(p as f64));
    }
    let mut max_index = f64::NEG_INFINITY;
    for r in 0..layout.image_h {
        for c in 0..layout.image_w {
            let pos = affine.apply(r, c);
            // A prefix token sits at (p, p) for integer p in 0..ℓ.
            if pos.x_h == pos.x_w
                && pos.x_h >= 0.0
                && pos.x_h.fract() == 0.0
                && pos.x_h < layout.prefix_len as f64
            {
                return Err(Error::LayoutConflict(format!(
                    "image patch ({r}, {c}) maps to ({}, {}), the index of prefix token {}",
                    pos.x_h, pos.x_w, pos.x_h
                )));
            }
            max_index = max_index.max(pos.x_h).max(pos.x_w);
            out.push(pos);
        }
    }
    let start = max_index + layout.gap;
    for j in 0..layout.suffix_len {
        out.push(PositionIndex2D::text(start + j as f64 * INTRA_TEXT_STEP));
    }
    Ok(out)
}

/// The plain 2D-RoPE layout: image indices continue the text run with unit
/// steps and no extra boundary gap.
pub fn build_baseline_layout(layout: &SequenceLayout) -> Result<Vec<PositionIndex2D>> {
    let flat = layout.with_gap(1.0);
    build_layout(&flat, &AffineParams::for_layout(&flat))
}

/// Positions for a sequence with no image at all: `(t, t)` for each token.
pub fn text_positions(len: usize) -> Vec<PositionIndex2D> {
    (0..len).map(|t| PositionIndex2D::text(t as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    pub d_h: usize,
    pub d_w: usize,
    #[serde(default = "default_base")]
    pub base: f64,
    /// `1` reproduces `i = 1..=d/2`; `0` gives the classic `i = 0..d/2`.
    #[serde(default = "default_origin")]
    pub freq_index_origin: u8,
}

fn default_base() -> f64 {
    DEFAULT_BASE
}

fn default_origin() -> u8 {
    1
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self::symmetric(16)
    }
}

impl RopeConfig {
    /// Equal height/width split of a head dimension divisible by 4.
    pub fn symmetric(head_dim: usize) -> Self {
        Self {
            d_h: head_dim / 2,
            d_w: head_dim / 2,
            base: DEFAULT_BASE,
            freq_index_origin: 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_h + self.d_w
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("d_h", self.d_h), ("d_w", self.d_w)] {
            if d == 0 || d % 2 != 0 {
                return Err(Error::config(format!(
                    "rope.rotary.{name} must be a positive even integer, got {d}"
                )));
            }
        }
        if !(self.base.is_finite() && self.base >= 1.0) {
            return Err(Error::config(format!("rope.rotary.base must be >= 1, got {}", self.base)));
        }
        if self.freq_index_origin > 1 {
            return Err(Error::config(format!(
                "rope.rotary.freq_index_origin must be 0 or 1, got {}",
                self.freq_index_origin
            )));
        }
        Ok(())
    }
}

/// `ω_i = base^(-2i/dim)` for `dim/2` consecutive values of `i` starting at
/// `origin`.
pub fn frequency_table(dim: usize, base: f64, origin: u8) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!(
            "frequency table dimension must be even and >= 2, got {dim}"
        )));
    }
    if !(base.is_finite() && base >= 1.0) {
        return Err(Error::config(format!("frequency base must be >= 1, got {base}")));
    }
    if origin > 1 {
        return Err(Error::config(format!("index origin must be 0 or 1, got {origin}")));
    }
    let start = origin as usize;
    Ok((start..start + dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / dim as f64))
        .collect())
}

/// Frequency tables for both halves of a head, built once per config.
#[derive(Debug, Clone)]
pub struct RotationPlan {
    cfg: RopeConfig,
    freqs_h: Vec<f64>,
    freqs_w: Vec<f64>,
}

impl RotationPlan {
    pub fn new(cfg: &RopeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: *cfg,
            freqs_h: frequency_table(cfg.d_h, cfg.base, cfg.freq_index_origin)?,
            freqs_w: frequency_table(cfg.d_w, cfg.base, cfg.freq_index_origin)?,
        })
    }

    pub fn config(&self) -> &RopeConfig {
        &self.cfg
    }

    pub fn freqs_h(&self) -> &[f64] {
        &self.freqs_h
    }

    pub fn freqs_w(&self) -> &[f64] {
        &self.freqs_w
    }

    /// Precompute sin/cos for a fixed position.
    pub fn angles(&self, pos: PositionIndex2D) -> PositionAngles {
        let pairs = |x: f64, freqs: &[f64]| -> Vec<(f64, f64)> {
            freqs.iter().map(|w| (x * w).sin_cos()).collect()
        };
        PositionAngles {
            h: pairs(pos.x_h, &self.freqs_h),
            w: pairs(pos.x_w, &self.freqs_w),
        }
    }

    pub fn rotate(&self, q: &[f64], pos: PositionIndex2D) -> Result<Vec<f64>> {
        self.rotate_with(q, &self.angles(pos))
    }

    pub fn rotate_with(&self, q: &[f64], angles: &PositionAngles) -> Result<Vec<f64>> {
        if q.len() != self.cfg.head_dim() {
            return Err(Error::input(format!(
                "vector length {} does not match d_h + d_w = {}",
                q.len(),
                self.cfg.head_dim()
            )));
        }
        let mut out = q.to_vec();
        let (height, width) = out.split_at_mut(self.cfg.d_h);
        rotate_pairs(height, &angles.h);
        rotate_pairs(width, &angles.w);
        Ok(out)
    }
}

/// `(sin, cos)` per frequency for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionAngles {
    h: Vec<(f64, f64)>,
    w: Vec<(f64, f64)>,
}

fn rotate_pairs(half: &mut [f64], angles: &[(f64, f64)]) {
    for (pair, &(sin, cos)) in half.chunks_exact_mut(2).zip(angles) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos - b * sin;
        pair[1] = a * sin + b * cos;
    }
}

/// Rotate `q` for position `pos`.
pub fn rotate(q: &[f64], pos: PositionIndex2D, cfg: &RopeConfig) -> Result<Vec<f64>> {
    ensure_finite(q, "query/key")?;
    RotationPlan::new(cfg)?.rotate(q, pos)
}

/// Standard 2D-RoPE rotation. The kernel is shared with [`rotate`]; the two
/// mechanisms differ only in the positions fed to it (see
/// [`build_baseline_layout`]).
pub fn rope2d_baseline(q: &[f64], pos: PositionIndex2D, cfg: &RopeConfig) -> Result<Vec<f64>> {
    rotate(q, pos, cfg)
}
