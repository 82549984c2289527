//! Grounding and text-generation metrics.
//!
//! Boxes live in normalized image coordinates and are written in answers as
//! `<box>(x1,y1),(x2,y2)</box>`.
//!
//! Recall@0.5 counts the largest one-to-one matching between predicted and
//! label boxes using only pairs with IoU ≥ 0.5. A greedy pass in descending
//! IoU order can strand a label box whose only partner was taken by a
//! better-overlapping neighbour, so the matching is solved exactly with
//! augmenting paths.

use std::collections::HashMap;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECALL_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    /// Strict constructor: coordinates finite, inside `[0, 1]` and ordered.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let c = [x1, y1, x2, y2];
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input(format!("box coordinates must lie in [0, 1], got {c:?}")));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::input(format!("box corners are out of order: {c:?}")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Lenient constructor used by the parser: clamps into `[0, 1]` and swaps
    /// reversed corners.
    pub fn normalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let (x1, x2) = (x1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0));
        let (y1, y2) = (y1.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        Self { x1: x1.min(x2), y1: y1.min(y2), x2: x1.max(x2), y2: y1.max(y2) }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Bitwise equality of all four coordinates.
    pub fn bit_eq(&self, other: &BBox) -> bool {
        self.to_array().iter().zip(other.to_array()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_canonical(&self) -> String {
        format!("<box>({},{}),({},{})</box>", self.x1, self.y1, self.x2, self.y2)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedBoxes {
    pub boxes: Vec<BBox>,
    /// `<box>` openings that did not form a well-formed box.
    pub malformed: usize,
}

static BOX_RE: LazyLock<Regex> = LazyLock::new(|| {
    let num = r"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)";
    Regex::new(&format!(
        r"<box>\s*\(\s*{num}\s*,\s*{num}\s*\)\s*,\s*\(\s*{num}\s*,\s*{num}\s*\)\s*</box>"
    ))
    .expect("box pattern compiles")
});

pub fn parse_boxes_counted(text: &str) -> ParsedBoxes {
    let mut boxes = Vec::new();
    for caps in BOX_RE.captures_iter(text) {
        let v: Vec<f64> = (1..=4).map(|i| caps[i].parse().unwrap_or(f64::NAN)).collect();
        if v.iter().any(|x| x.is_nan()) {
            continue;
        }
        boxes.push(BBox::normalized(v[0], v[1], v[2], v[3]));
    }
    let openings = text.matches("<box>").count();
    ParsedBoxes { malformed: openings.saturating_sub(boxes.len()), boxes }
}

pub fn parse_boxes(text: &str) -> Vec<BBox> {
    parse_boxes_counted(text).boxes
}

/// Lattice steps per unit of normalized coordinate.
const LATTICE: f64 = 1e6;

fn snap(v: f64) -> i64 {
    (v * LATTICE).round() as i64
}

/// Intersection over union.
///
/// Coordinates are snapped to a 10⁻⁶ lattice and areas are counted in
/// integers, so the result is the correctly rounded ratio of two exact
/// counts. Areas stay below 2⁵³, which keeps the final division exact up to
/// one rounding, and a pair sitting exactly on the 0.5 threshold is decided
/// the same way on every platform. Boxes thinner than one lattice step fall
/// back to floating-point areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.to_array().map(snap);
    let [bx1, by1, bx2, by2] = b.to_array().map(snap);
    let w = ax2.min(bx2) - ax1.max(bx1);
    let h = ay2.min(by2) - ay1.max(by1);
    let inter = if w > 0 && h > 0 { w * h } else { 0 };
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union > 0 {
        return inter as f64 / union as f64;
    }
    iou_float(a, b)
}

fn iou_float(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundedAnswer {
    pub text: String,
    pub boxes: Vec<BBox>,
}

impl GroundedAnswer {
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        Self { boxes: parse_boxes(&text), text }
    }
}

/// Size of the largest one-to-one matching between `preds` and `gts` that
/// uses only pairs with IoU ≥ 0.5.
pub fn matched_count(preds: &[BBox], gts: &[BBox]) -> usize {
    // edges per gt, best overlap first so the first augmenting pass mirrors greedy
    let adj: Vec<Vec<usize>> = gts
        .iter()
        .map(|g| {
            let mut e: Vec<(usize, f64)> = preds
                .iter()
                .enumerate()
                .map(|(j, p)| (j, iou(p, g)))
                .filter(|&(_, v)| v >= RECALL_IOU)
                .collect();
            e.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            e.into_iter().map(|(j, _)| j).collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; preds.len()];
    let mut count = 0;
    for g in 0..gts.len() {
        let mut seen = vec![false; preds.len()];
        if augment(g, &adj, &mut owner, &mut seen) {
            count += 1;
        }
    }
    count
}

fn augment(g: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &p in &adj[g] {
        if seen[p] {
            continue;
        }
        seen[p] = true;
        if owner[p].is_none_or(|other| augment(other, adj, owner, seen)) {
            owner[p] = Some(g);
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecallCounts {
    pub matched: usize,
    pub total: usize,
}

impl RecallCounts {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.matched as f64 / self.total as f64
        }
    }
}

fn check_gt(i: usize, gt: &GroundedAnswer) -> Result<()> {
    if gt.boxes.is_empty() {
        return Err(Error::input(format!("label {i} has no box")));
    }
    if let Some(b) = gt.boxes.iter().find(|b| b.area() <= 0.0) {
        return Err(Error::input(format!("label {i} has a zero-area box {:?}", b.to_array())));
    }
    Ok(())
}

pub fn recall_counts(preds: &[GroundedAnswer], gts: &[GroundedAnswer]) -> Result<RecallCounts> {
    if preds.len() != gts.len() {
        return Err(Error::input(format!(
            "prediction and label counts differ: {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    for (i, gt) in gts.iter().enumerate() {
        check_gt(i, gt)?;
    }
    let per: Vec<usize> = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| matched_count(&p.boxes, &g.boxes))
        .collect();
    Ok(RecallCounts {
        matched: per.iter().sum(),
        total: gts.iter().map(|g| g.boxes.len()).sum(),
    })
}

/// Recall@0.5 as a percentage.
pub fn recall_at_half(preds: &[GroundedAnswer], gts: &[GroundedAnswer]) -> Result<f64> {
    recall_counts(preds, gts).map(|c| c.percent())
}

/// Case-insensitive exact-match rate, as a percentage.
pub fn classification_recall<S: AsRef<str>>(preds: &[S], gts: &[S]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::input(format!(
            "prediction and label counts differ: {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.as_ref().trim().to_lowercase() == g.as_ref().trim().to_lowercase())
        .count();
    Ok(100.0 * hits as f64 / gts.len() as f64)
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(cand: &[String], refs: &[String]) -> usize {
    let r = counts(refs);
    counts(cand)
        .into_iter()
        .map(|(t, n)| n.min(r.get(t).copied().unwrap_or(0)))
        .sum()
}

fn tokens_pair(candidate: &str, reference: &str) -> Result<(Vec<String>, Vec<String>)> {
    let r = words(reference);
    if r.is_empty() {
        return Err(Error::input("reference text is empty"));
    }
    Ok((words(candidate), r))
}

/// Clipped unigram precision times the brevity penalty. An empty candidate
/// scores 0.
pub fn bleu1(candidate: &str, reference: &str) -> Result<f64> {
    let (c, r) = tokens_pair(candidate, reference)?;
    if c.is_empty() {
        return Ok(0.0);
    }
    let precision = overlap(&c, &r) as f64 / c.len() as f64;
    let bp = (1.0 - r.len() as f64 / c.len() as f64).min(0.0).exp();
    Ok(precision * bp)
}

/// Harmonic mean of multiset-overlap precision and recall.
pub fn token_f1(candidate: &str, reference: &str) -> Result<f64> {
    let (c, r) = tokens_pair(candidate, reference)?;
    let o = overlap(&c, &r);
    if o == 0 {
        return Ok(0.0);
    }
    let p = o as f64 / c.len() as f64;
    let rec = o as f64 / r.len() as f64;
    Ok(2.0 * p * rec / (p + rec))
}
