//! Single-head dot-product attention scores under a pluggable position
//! embedding, with per-modality summaries.
//!
//! Only raw pre-softmax scores `S_ij = ⟨q_i, k_j⟩ / √d` are produced; there is
//! no value aggregation. Queries and keys share the content embedding of each
//! token, so with identical contents `S_ij` depends only on index differences.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, ensure_finite, SeededRng};
use crate::rope::{
    build_baseline_layout, build_layout, AffineParams, Modality, PositionIndex2D, RopeConfig,
    RotationPlan, SequenceLayout,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    Mcg,
    Baseline2d,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    layout: SequenceLayout,
    affine: AffineParams,
    embeddings: Vec<Vec<f64>>,
    tags: Vec<Modality>,
}

impl TokenSequence {
    pub fn new(layout: SequenceLayout, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        layout.validate()?;
        if embeddings.len() != layout.total_tokens() {
            return Err(Error::input(format!(
                "layout has {} tokens but {} embeddings were given",
                layout.total_tokens(),
                embeddings.len()
            )));
        }
        if let Some(first) = embeddings.first() {
            if let Some(i) = embeddings.iter().position(|e| e.len() != first.len()) {
                return Err(Error::input(format!(
                    "embedding {i} has length {}, expected {}",
                    embeddings[i].len(),
                    first.len()
                )));
            }
        }
        for e in &embeddings {
            ensure_finite(e, "token embedding")?;
        }
        let tags = (0..layout.total_tokens()).map(|i| layout.modality(i)).collect();
        Ok(Self {
            affine: AffineParams::for_layout(&layout),
            layout,
            embeddings,
            tags,
        })
    }

    /// Every token gets the same content vector.
    pub fn constant(layout: SequenceLayout, content: &[f64]) -> Result<Self> {
        Self::new(layout, vec![content.to_vec(); layout.total_tokens()])
    }

    /// Contents drawn uniformly from `[-1, 1)`.
    pub fn random(layout: SequenceLayout, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        let embeddings = (0..layout.total_tokens())
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Self::new(layout, embeddings)
    }

    pub fn with_affine(mut self, affine: AffineParams) -> Result<Self> {
        affine.validate()?;
        self.affine = affine;
        Ok(self)
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn affine(&self) -> &AffineParams {
        &self.affine
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn tags(&self) -> &[Modality] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// Positions the given mode assigns to each token; `None` for the
    /// unrotated mode.
    pub fn positions(&self, mode: EmbeddingMode) -> Result<Option<Vec<PositionIndex2D>>> {
        match mode {
            EmbeddingMode::Mcg => build_layout(&self.layout, &self.affine).map(Some),
            EmbeddingMode::Baseline2d => build_baseline_layout(&self.layout).map(Some),
            EmbeddingMode::None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDiagnostics {
    pub score_matrix: Vec<Vec<f64>>,
    /// Means over ordered off-diagonal pairs; `None` when no such pair exists.
    pub mean_intra_text: Option<f64>,
    pub mean_intra_image: Option<f64>,
    pub mean_cross_modal: Option<f64>,
}

pub fn attention_scores(
    seq: &TokenSequence,
    cfg: &RopeConfig,
    mode: EmbeddingMode,
) -> Result<AttentionDiagnostics> {
    let positions = seq.positions(mode)?;
    attention_scores_at(seq, positions.as_deref(), cfg)
}

/// Scores with explicit positions (`None` disables rotation).
pub fn attention_scores_at(
    seq: &TokenSequence,
    positions: Option<&[PositionIndex2D]>,
    cfg: &RopeConfig,
) -> Result<AttentionDiagnostics> {
    if seq.is_empty() {
        return Err(Error::input("attention over an empty sequence"));
    }
    let dim = cfg.head_dim();
    if seq.embeddings[0].len() != dim {
        return Err(Error::input(format!(
            "embeddings have length {}, head dimension is {dim}",
            seq.embeddings[0].len()
        )));
    }
    let rotated: Vec<Vec<f64>> = match positions {
        Some(pos) => {
            if pos.len() != seq.len() {
                return Err(Error::input(format!(
                    "{} positions for {} tokens",
                    pos.len(),
                    seq.len()
                )));
            }
            let plan = RotationPlan::new(cfg)?;
            seq.embeddings
                .iter()
                .zip(pos)
                .map(|(e, p)| plan.rotate(e, *p))
                .collect::<Result<_>>()?
        }
        None => seq.embeddings.clone(),
    };
    let scale = 1.0 / (dim as f64).sqrt();
    let score_matrix: Vec<Vec<f64>> = rotated
        .par_iter()
        .map(|q| rotated.iter().map(|k| dot(q, k) * scale).collect())
        .collect();

    let mut sums = [(0.0, 0usize); 3];
    for (i, row) in score_matrix.iter().enumerate() {
        for (j, s) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            let slot = match (seq.tags[i], seq.tags[j]) {
                (Modality::Text, Modality::Text) => 0,
                (Modality::Image, Modality::Image) => 1,
                _ => 2,
            };
            sums[slot].0 += s;
            sums[slot].1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok(AttentionDiagnostics {
        score_matrix,
        mean_intra_text: mean(sums[0]),
        mean_intra_image: mean(sums[1]),
        mean_cross_modal: mean(sums[2]),
    })
}

/// Score of one text/image boundary pair, with both tokens given the text
/// token's content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGap {
    pub text_token: usize,
    pub image_token: usize,
    pub mcg_delta: [f64; 2],
    pub baseline_delta: [f64; 2],
    pub mcg_score: f64,
    pub baseline_score: f64,
    /// `mcg_score - baseline_score`.
    pub score_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub mcg: AttentionDiagnostics,
    pub baseline2d: AttentionDiagnostics,
    pub boundary: BoundaryGap,
}

pub fn modality_separation_report(seq: &TokenSequence, cfg: &RopeConfig) -> Result<SeparationReport> {
    let layout = seq.layout();
    let has_text = layout.prefix_len + layout.suffix_len > 0;
    if !has_text || layout.image_tokens() == 0 {
        return Err(Error::DiagnosticUndefined(
            "separation report needs at least one text and one image token".into(),
        ));
    }
    let mcg_pos = build_layout(layout, seq.affine())?;
    let base_pos = build_baseline_layout(layout)?;
    let mcg = attention_scores_at(seq, Some(&mcg_pos), cfg)?;
    let baseline2d = attention_scores_at(seq, Some(&base_pos), cfg)?;

    // Entry boundary when there is a prefix, otherwise the exit boundary.
    let (text_token, image_token) = if layout.prefix_len > 0 {
        (layout.prefix_len - 1, layout.prefix_len)
    } else {
        (layout.image_tokens(), layout.image_tokens() - 1)
    };
    let plan = RotationPlan::new(cfg)?;
    let content = &seq.embeddings()[text_token];
    let pair_score = |pos: &[PositionIndex2D]| -> Result<f64> {
        let q = plan.rotate(content, pos[text_token])?;
        let k = plan.rotate(content, pos[image_token])?;
        Ok(dot(&q, &k) / (cfg.head_dim() as f64).sqrt())
    };
    let delta = |pos: &[PositionIndex2D]| {
        [
            (pos[image_token].x_h - pos[text_token].x_h).abs(),
            (pos[image_token].x_w - pos[text_token].x_w).abs(),
        ]
    };
    let mcg_score = pair_score(&mcg_pos)?;
    let baseline_score = pair_score(&base_pos)?;
    Ok(SeparationReport {
        mcg,
        baseline2d,
        boundary: BoundaryGap {
            text_token,
            image_token,
            mcg_delta: delta(&mcg_pos),
            baseline_delta: delta(&base_pos),
            mcg_score,
            baseline_score,
            score_gap: mcg_score - baseline_score,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::seeded_rng;

    fn unit(dim: usize) -> Vec<f64> {
        vec![1.0 / (dim as f64).sqrt(); dim]
    }

    #[test]
    fn unrotated_identical_contents_give_flat_scores() {
        let cfg = RopeConfig::symmetric(8);
        let seq = TokenSequence::constant(SequenceLayout::new(2, 2, 2, 2), &unit(8)).unwrap();
        let d = attention_scores(&seq, &cfg, EmbeddingMode::None).unwrap();
        let first = d.score_matrix[0][0];
        assert!(d.score_matrix.iter().flatten().all(|s| (s - first).abs() < 1e-15));
    }

    #[test]
    fn mcg_scores_match_pairwise_rotation_oracle() {
        let cfg = RopeConfig::symmetric(8);
        let layout = SequenceLayout::new(3, 2, 3, 2);
        let content = unit(8);
        let seq = TokenSequence::constant(layout, &content).unwrap();
        let d = attention_scores(&seq, &cfg, EmbeddingMode::Mcg).unwrap();
        let pos = build_layout(&layout, &AffineParams::for_layout(&layout)).unwrap();
        let fh = crate::rope::frequency_table(4, 10_000.0, 1).unwrap();
        // e has equal mass 2/d on every pair: S = (1/√d) Σ (2/d) cos(Δ ω)
        for i in 0..pos.len() {
            for j in 0..pos.len() {
                let dh = pos[j].x_h - pos[i].x_h;
                let dw = pos[j].x_w - pos[i].x_w;
                let expected: f64 = fh.iter().map(|w| (dh * w).cos() + (dw * w).cos()).sum::<f64>()
                    * (2.0 / 8.0)
                    / 8f64.sqrt();
                assert!((d.score_matrix[i][j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_index_differences_give_equal_scores() {
        let cfg = RopeConfig::symmetric(8);
        let layout = SequenceLayout::new(3, 3, 3, 3);
        let seq = TokenSequence::constant(layout, &[0.4, -0.1, 0.9, 0.3, -0.5, 0.2, 0.7, -0.6]).unwrap();
        let d = attention_scores(&seq, &cfg, EmbeddingMode::Mcg).unwrap();
        let pos = seq.positions(EmbeddingMode::Mcg).unwrap().unwrap();
        let mut by_delta: Vec<((f64, f64), f64)> = Vec::new();
        for i in 0..pos.len() {
            for j in 0..pos.len() {
                let key = (pos[j].x_h - pos[i].x_h, pos[j].x_w - pos[i].x_w);
                let s = d.score_matrix[i][j];
                if let Some((_, prev)) = by_delta.iter().find(|(k, _)| *k == key) {
                    assert!((prev - s).abs() < 1e-9);
                } else {
                    by_delta.push((key, s));
                }
                assert!((s - d.score_matrix[j][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifting_positions_leaves_scores_unchanged() {
        let cfg = RopeConfig::symmetric(12);
        let mut rng = seeded_rng(11);
        let seq = TokenSequence::random(SequenceLayout::new(2, 2, 3, 2), 12, &mut rng).unwrap();
        for mode in [EmbeddingMode::Mcg, EmbeddingMode::Baseline2d] {
            let pos = seq.positions(mode).unwrap().unwrap();
            let shifted: Vec<_> = pos.iter().map(|p| p.shifted(17.25, -4.5)).collect();
            let a = attention_scores_at(&seq, Some(&pos), &cfg).unwrap();
            let b = attention_scores_at(&seq, Some(&shifted), &cfg).unwrap();
            for (ra, rb) in a.score_matrix.iter().zip(&b.score_matrix) {
                for (x, y) in ra.iter().zip(rb) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn means_are_exact_averages() {
        let cfg = RopeConfig::symmetric(8);
        let mut rng = seeded_rng(5);
        let seq = TokenSequence::random(SequenceLayout::new(2, 2, 2, 1), 8, &mut rng).unwrap();
        let d = attention_scores(&seq, &cfg, EmbeddingMode::Mcg).unwrap();
        let tags = seq.tags();
        let avg = |want: &dyn Fn(Modality, Modality) -> bool| {
            let v: Vec<f64> = (0..seq.len())
                .flat_map(|i| (0..seq.len()).map(move |j| (i, j)))
                .filter(|&(i, j)| i != j && want(tags[i], tags[j]))
                .map(|(i, j)| d.score_matrix[i][j])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((d.mean_intra_text.unwrap() - avg(&|a, b| a == Modality::Text && b == Modality::Text)).abs() < 1e-12);
        assert!((d.mean_intra_image.unwrap() - avg(&|a, b| a == Modality::Image && b == Modality::Image)).abs() < 1e-12);
        assert!((d.mean_cross_modal.unwrap() - avg(&|a, b| a != b)).abs() < 1e-12);
    }

    #[test]
    fn single_image_patch_has_no_intra_image_mean() {
        let cfg = RopeConfig::symmetric(4);
        let seq = TokenSequence::constant(SequenceLayout::new(1, 1, 1, 0), &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let d = attention_scores(&seq, &cfg, EmbeddingMode::Mcg).unwrap();
        assert_eq!(d.mean_intra_image, None);
        assert_eq!(d.mean_intra_text, None);
        assert!(d.mean_cross_modal.is_some());
    }

    #[test]
    fn report_with_unit_gap_matches_baseline() {
        let cfg = RopeConfig::symmetric(8);
        let mut rng = seeded_rng(2);
        let layout = SequenceLayout::new(3, 2, 2, 2).with_gap(1.0);
        let seq = TokenSequence::random(layout, 8, &mut rng).unwrap();
        let r = modality_separation_report(&seq, &cfg).unwrap();
        assert_eq!(r.mcg, r.baseline2d);
        assert_eq!(r.boundary.score_gap, 0.0);
    }

    #[test]
    fn boundary_gap_closed_form() {
        let cfg = RopeConfig::symmetric(8);
        let content = unit(8);
        let seq = TokenSequence::constant(SequenceLayout::new(3, 2, 2, 2), &content).unwrap();
        let r = modality_separation_report(&seq, &cfg).unwrap();
        assert_eq!(r.boundary.mcg_delta, [2.0, 2.0]);
        assert_eq!(r.boundary.baseline_delta, [1.0, 1.0]);
        let freqs = crate::rope::frequency_table(4, 10_000.0, 1).unwrap();
        // both axes share Δ, each pair carries mass 2/d
        let closed = |delta: f64| 2.0 * freqs.iter().map(|w| (delta * w).cos()).sum::<f64>() * (2.0 / 8.0) / 8f64.sqrt();
        assert!((r.boundary.mcg_score - closed(2.0)).abs() < 1e-12);
        assert!((r.boundary.baseline_score - closed(1.0)).abs() < 1e-12);
        assert!((r.boundary.score_gap - (closed(2.0) - closed(1.0))).abs() < 1e-12);
        assert!(r.boundary.score_gap < 0.0);
    }

    #[test]
    fn report_requires_both_modalities() {
        let cfg = RopeConfig::symmetric(4);
        let seq = TokenSequence::constant(SequenceLayout::new(0, 2, 2, 0), &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(modality_separation_report(&seq, &cfg), Err(Error::DiagnosticUndefined(_))));
    }

    #[test]
    fn exit_boundary_used_without_prefix() {
        let cfg = RopeConfig::symmetric(4);
        let seq = TokenSequence::constant(SequenceLayout::new(0, 1, 1, 2), &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = modality_separation_report(&seq, &cfg).unwrap();
        assert_eq!((r.boundary.text_token, r.boundary.image_token), (1, 0));
        assert_eq!(r.boundary.mcg_delta, [2.0, 2.0]);
        assert_eq!(r.boundary.baseline_delta, [1.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = RopeConfig::symmetric(8);
        let seq = TokenSequence::constant(SequenceLayout::new(1, 1, 1, 1), &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(attention_scores(&seq, &cfg, EmbeddingMode::Mcg), Err(Error::InvalidInput(_))));
    }
}
