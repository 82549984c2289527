//! Command implementations behind the `medkd` binary.
//!
//! Every output file starts with a metadata block holding the command name,
//! the config hash and the seed. Nothing time-dependent is written to disk,
//! so repeated runs produce byte-identical files; wall time goes to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attention::{modality_separation_report, SeparationReport, TokenSequence};
use crate::config::{CorrectorKind, RunConfig, TokenContents};
use crate::error::{Error, Result};
use crate::gate::{
    run_gate, Corrector, GateRecord, GateSample, MockCorrector, RemoteCorrector, TemplateCorrector,
};
use crate::math::seeded_rng;
use crate::metrics::{
    bleu1, classification_recall, parse_boxes_counted, recall_counts, token_f1, BBox,
    GroundedAnswer,
};
use crate::rope::{build_baseline_layout, build_layout, AffineParams, PositionIndex2D, SequenceLayout};
use crate::sasg::{select_best, CandidatePool, HashScorer, QueryContext};
use crate::toy::{FinalMetrics, TrainingTrace};

/// Exit status for a failed command: 2 for bad configuration or input, 3
/// for failures during compute or I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidInput(_) | Error::Json(_) | Error::LayoutConflict(_) => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Meta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

/// Resolved run settings shared by all commands.
#[derive(Debug, Clone)]
pub struct Env {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    /// Fail on the first malformed input line instead of skipping it.
    pub strict: bool,
}

impl Env {
    pub fn new(config: RunConfig) -> Self {
        Self { out_dir: config.output_dir.clone(), config, strict: false }
    }

    fn meta(&self, command: &str) -> Meta {
        Meta {
            command: command.to_string(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
        }
    }

    fn csv_header(&self, command: &str) -> String {
        let m = self.meta(command);
        format!("# command={} config_hash={} seed={}\n", m.command, m.config_hash, m.seed)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(name);
        fs::write(&path, contents)?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }
}

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Text for stdout.
    pub stdout: Option<String>,
    /// Items that failed at runtime after the command ran to completion.
    pub failures: usize,
}

#[derive(Debug, Serialize)]
struct RopeDemoReport {
    meta: Meta,
    layout: SequenceLayout,
    affine: AffineParams,
    positions_mcg: Vec<PositionIndex2D>,
    positions_baseline2d: Vec<PositionIndex2D>,
    report: SeparationReport,
}

pub fn rope_demo(env: &Env) -> Result<Outcome> {
    let section = &env.config.rope;
    let layout = section.layout;
    let affine = section.affine();
    let dim = section.rotary.head_dim();
    let seq = match section.tokens {
        TokenContents::Constant => TokenSequence::constant(layout, &vec![1.0; dim])?,
        TokenContents::Random => TokenSequence::random(layout, dim, &mut seeded_rng(env.config.seed))?,
    }
    .with_affine(affine)?;
    let report = modality_separation_report(&seq, &section.rotary)?;
    let out = RopeDemoReport {
        meta: env.meta("rope-demo"),
        layout,
        affine,
        positions_mcg: build_layout(&layout, &affine)?,
        positions_baseline2d: build_baseline_layout(&layout)?,
        report,
    };
    Ok(Outcome { files: vec![env.write_json("rope_demo.json", &out)?], ..Outcome::default() })
}

#[derive(Debug, Serialize)]
struct KdSummary {
    meta: Meta,
    alpha: f64,
    steps: usize,
    lr: f64,
    initial_mean_kl: f64,
    #[serde(rename = "final")]
    final_metrics: FinalMetrics,
    admitted_first: usize,
    admitted_last: usize,
    admitted_non_decreasing: bool,
}

fn train(env: &Env, alpha: f64) -> Result<TrainingTrace> {
    let cfg = crate::distill::DistillConfig { alpha, ..env.config.distill.loss };
    env.config.distill.experiment().run(&cfg, env.config.seed)
}

pub fn kd_train(env: &Env) -> Result<Outcome> {
    let start = Instant::now();
    let alpha = env.config.distill.loss.alpha;
    let trace = train(env, alpha)?;
    eprintln!("kd-train: {} steps in {:.3} s", trace.rows.len(), start.elapsed().as_secs_f64());

    let mut csv = env.csv_header("kd-train");
    csv.push_str("step,progress,tau,L,L_CE,L_KD,admitted\n");
    for r in &trace.rows {
        writeln!(csv, "{},{},{},{},{},{},{}", r.step, r.progress, r.tau, r.loss, r.ce, r.kd, r.admitted)
            .expect("string write");
    }
    let summary = KdSummary {
        meta: env.meta("kd-train"),
        alpha,
        steps: trace.rows.len(),
        lr: env.config.distill.lr,
        initial_mean_kl: trace.initial_mean_kl,
        final_metrics: trace.final_metrics,
        admitted_first: trace.rows.first().map_or(0, |r| r.admitted),
        admitted_last: trace.rows.last().map_or(0, |r| r.admitted),
        admitted_non_decreasing: trace.admitted_non_decreasing(),
    };
    Ok(Outcome {
        files: vec![env.write("kd_train.csv", &csv)?, env.write_json("kd_train_summary.json", &summary)?],
        ..Outcome::default()
    })
}

/// One training run per `alpha`, all from the run seed.
pub fn kd_sweep(env: &Env, alphas: &[f64]) -> Result<Outcome> {
    if alphas.is_empty() {
        return Err(Error::input("--alpha needs at least one value"));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::input(format!("--alpha values must lie in [0, 1], got {a}")));
    }
    let start = Instant::now();
    let finals: Vec<FinalMetrics> = alphas
        .par_iter()
        .map(|&a| train(env, a).map(|t| t.final_metrics))
        .collect::<Result<_>>()?;
    eprintln!("kd-sweep: {} runs in {:.3} s", alphas.len(), start.elapsed().as_secs_f64());

    let mut csv = env.csv_header("kd-sweep");
    csv.push_str("alpha,final_KL,final_CE,final_L\n");
    for (a, f) in alphas.iter().zip(&finals) {
        writeln!(csv, "{a},{},{},{}", f.mean_kl, f.ce, f.loss).expect("string write");
    }
    Ok(Outcome { files: vec![env.write("kd_sweep.csv", &csv)?], ..Outcome::default() })
}

/// Read line-delimited JSON. Blank lines are ignored; a file with no
/// records is an input error. Malformed lines are reported with their line
/// numbers and skipped, or fail the read when `strict`.
fn read_jsonl<T: DeserializeOwned>(path: &Path, strict: bool) -> Result<Vec<(usize, Option<T>)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(line) {
            Ok(v) => rows.push((i + 1, Some(v))),
            Err(e) => {
                let msg = format!("{}:{}: {e}", path.display(), i + 1);
                eprintln!("warning: skipping malformed line {msg}");
                bad.push(msg);
                rows.push((i + 1, None));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::input(format!("{} contains no records", path.display())));
    }
    if strict && !bad.is_empty() {
        return Err(Error::input(format!("{} malformed line(s): {}", bad.len(), bad.join("; "))));
    }
    Ok(rows)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateLine {
    #[serde(default)]
    id: Option<String>,
    pred_text: String,
    gt_text: String,
    anchor_box: BBox,
}

#[derive(Debug, Serialize)]
struct RetrainItem<'a> {
    id: &'a str,
    text: &'a str,
    gt_text: &'a str,
    anchor_box: BBox,
}

fn build_corrector(env: &Env) -> Result<Option<Box<dyn Corrector>>> {
    let section = &env.config.gate.corrector;
    Ok(match section.kind {
        CorrectorKind::None => None,
        CorrectorKind::Mock => Some(Box::new(MockCorrector)),
        CorrectorKind::Template => {
            Some(Box::new(TemplateCorrector::new(section.seed.unwrap_or(env.config.seed))))
        }
        CorrectorKind::Remote => {
            let remote = section
                .remote
                .clone()
                .ok_or_else(|| Error::config("gate.corrector.remote is required when kind is \"remote\""))?;
            Some(Box::new(RemoteCorrector::new(remote)?))
        }
    })
}

/// Gate every sample, correct the failing ones once, and write the manifest
/// plus the queue of corrected samples for retraining.
pub fn gate_eval(env: &Env, samples: &Path) -> Result<Outcome> {
    let gate = &env.config.gate;
    let cfg = gate.gate_config();
    let embedder = gate.embedder();
    let corrector = build_corrector(env)?;
    let lines: Vec<(usize, Option<GateLine>)> = read_jsonl(samples, env.strict)?;
    let items: Vec<(String, GateSample, BBox)> = lines
        .into_iter()
        .filter_map(|(n, l)| l.map(|l| (n, l)))
        .map(|(n, l)| {
            let id = l.id.unwrap_or_else(|| format!("line{n}"));
            let sample = GateSample::from_texts(l.pred_text, l.gt_text, l.anchor_box, &embedder);
            (id, sample, l.anchor_box)
        })
        .collect();
    let pairs: Vec<(String, GateSample)> = items.iter().map(|(id, s, _)| (id.clone(), s.clone())).collect();
    let records = run_gate(&pairs, &cfg, corrector.as_deref(), &embedder)?;

    let meta = serde_json::json!({ "meta": env.meta("gate-eval") }).to_string();
    let mut manifest = format!("{meta}\n");
    let mut queue = format!("{}\n", serde_json::json!({ "meta": env.meta("gate-eval") }));
    for (record, (_, sample, bx)) in records.iter().zip(&items) {
        manifest.push_str(&serde_json::to_string(record)?);
        manifest.push('\n');
        if let Some(text) = &record.corrected_text {
            let item = RetrainItem { id: &record.id, text, gt_text: &sample.gt_text, anchor_box: *bx };
            queue.push_str(&serde_json::to_string(&item)?);
            queue.push('\n');
        }
    }
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    summarize_gate(&records, failures);
    Ok(Outcome {
        files: vec![env.write("gate_manifest.jsonl", &manifest)?, env.write("retrain_queue.jsonl", &queue)?],
        stdout: None,
        failures,
    })
}

fn summarize_gate(records: &[GateRecord], failures: usize) {
    let corrected = records.iter().filter(|r| r.corrected_text.is_some()).count();
    let flagged = records.iter().filter(|r| r.flagged).count();
    let keep = records.iter().filter(|r| r.decision == crate::gate::GateDecision::Keep).count();
    eprintln!(
        "gate-eval: {} samples, {keep} kept, {corrected} corrected, {flagged} still below threshold, {failures} correction errors",
        records.len()
    );
}

#[derive(Debug, Serialize)]
struct SasgReport {
    meta: Meta,
    context: QueryContext,
    candidates: Vec<String>,
    /// `null` marks a candidate whose scoring failed.
    scores: Vec<f64>,
    selected_index: usize,
    selected_text: String,
}

pub fn sasg_select(env: &Env, pool_path: &Path) -> Result<Outcome> {
    let text = fs::read_to_string(pool_path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", pool_path.display())))?;
    if text.trim().is_empty() {
        return Err(Error::input(format!("{} is empty", pool_path.display())));
    }
    let pool: CandidatePool = serde_json::from_str(&text)
        .map_err(|e| Error::input(format!("{}: {e}", pool_path.display())))?;
    let pool = pool.truncated(env.config.sasg.n)?;
    pool.validate()?;
    let scorer = HashScorer { embedder: env.config.sasg.embedder() };
    let scored = select_best(&pool, &scorer)?;
    let selected_text = pool.candidates[scored.selected_index].clone();
    let report = SasgReport {
        meta: env.meta("sasg-select"),
        context: pool.context,
        candidates: pool.candidates,
        scores: scored.scores,
        selected_index: scored.selected_index,
        selected_text: selected_text.clone(),
    };
    Ok(Outcome {
        files: vec![env.write_json("sasg_select.json", &report)?],
        stdout: Some(selected_text),
        failures: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    /// Visual grounding, Recall@0.5 over boxes.
    Vg,
    /// Referring object classification, label recall.
    Roc,
    /// Free-text answers, BLEU-1 with token F1 alongside.
    Fewshot,
}

impl EvalTask {
    fn name(self) -> &'static str {
        match self {
            EvalTask::Vg => "vg",
            EvalTask::Roc => "roc",
            EvalTask::Fewshot => "fewshot",
        }
    }
}

/// One evaluation record. `boxes` overrides boxes parsed from `text`;
/// `label` takes precedence over `text` for classification.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalLine {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    boxes: Option<Vec<BBox>>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    meta: Meta,
    task: &'static str,
    metric: &'static str,
    value: f64,
    n: usize,
    diagnostics: serde_json::Value,
}

struct Aligned {
    pairs: Vec<(usize, EvalLine, EvalLine)>,
    skipped: usize,
}

fn align(env: &Env, pred: &Path, gt: &Path) -> Result<Aligned> {
    let preds: Vec<(usize, Option<EvalLine>)> = read_jsonl(pred, env.strict)?;
    let gts: Vec<(usize, Option<EvalLine>)> = read_jsonl(gt, env.strict)?;
    if preds.len() != gts.len() {
        return Err(Error::input(format!(
            "{} has {} records but {} has {}",
            pred.display(),
            preds.len(),
            gt.display(),
            gts.len()
        )));
    }
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for ((pn, p), (_, g)) in preds.into_iter().zip(gts) {
        let (Some(p), Some(g)) = (p, g) else {
            skipped += 1;
            continue;
        };
        if let (Some(a), Some(b)) = (&p.id, &g.id) {
            if a != b {
                return Err(Error::input(format!("record {pn}: prediction id {a:?} does not match label id {b:?}")));
            }
        }
        pairs.push((pn, p, g));
    }
    if pairs.is_empty() {
        return Err(Error::input("no valid prediction/label pairs"));
    }
    Ok(Aligned { pairs, skipped })
}

fn field<'a>(line: usize, value: &'a Option<String>, what: &str) -> Result<&'a str> {
    value.as_deref().ok_or_else(|| Error::input(format!("record {line}: missing {what}")))
}

pub fn evaluate(env: &Env, pred: &Path, gt: &Path, task: EvalTask) -> Result<Outcome> {
    let Aligned { pairs, skipped } = align(env, pred, gt)?;
    let n = pairs.len();
    let (metric, value, diagnostics) = match task {
        EvalTask::Vg => {
            let mut malformed = [0usize; 2];
            let mut grounded = |line: &EvalLine, side: usize| match &line.boxes {
                Some(b) => GroundedAnswer { text: line.text.clone().unwrap_or_default(), boxes: b.clone() },
                None => {
                    let text = line.text.clone().unwrap_or_default();
                    let parsed = parse_boxes_counted(&text);
                    malformed[side] += parsed.malformed;
                    GroundedAnswer { text, boxes: parsed.boxes }
                }
            };
            let (mut preds, mut gts) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for (_, p, g) in &pairs {
                preds.push(grounded(p, 0));
                gts.push(grounded(g, 1));
            }
            let counts = recall_counts(&preds, &gts).map_err(|e| match e {
                Error::InvalidInput(m) => Error::input(format!("{}: {m}", gt.display())),
                other => other,
            })?;
            let diag = serde_json::json!({
                "gt_boxes": counts.total,
                "matched": counts.matched,
                "pred_boxes": preds.iter().map(|p| p.boxes.len()).sum::<usize>(),
                "malformed_pred_boxes": malformed[0],
                "malformed_gt_boxes": malformed[1],
                "skipped_records": skipped,
            });
            ("Recall@0.5", counts.percent(), diag)
        }
        EvalTask::Roc => {
            let mut p_labels = Vec::with_capacity(n);
            let mut g_labels = Vec::with_capacity(n);
            for (ln, p, g) in &pairs {
                p_labels.push(field(*ln, if p.label.is_some() { &p.label } else { &p.text }, "label")?);
                g_labels.push(field(*ln, if g.label.is_some() { &g.label } else { &g.text }, "label")?);
            }
            let value = classification_recall(&p_labels, &g_labels)?;
            ("Recall", value, serde_json::json!({ "skipped_records": skipped }))
        }
        EvalTask::Fewshot => {
            let texts: Vec<(usize, &str, &str)> = pairs
                .iter()
                .map(|(ln, p, g)| Ok((*ln, field(*ln, &p.text, "text")?, field(*ln, &g.text, "text")?)))
                .collect::<Result<_>>()?;
            let scores: Vec<(f64, f64)> = texts
                .par_iter()
                .map(|(ln, c, r)| {
                    let tag = |e: Error| Error::input(format!("record {ln}: {e}"));
                    Ok((bleu1(c, r).map_err(tag)?, token_f1(c, r).map_err(tag)?))
                })
                .collect::<Result<_>>()?;
            let bleu = scores.iter().map(|s| s.0).sum::<f64>() / n as f64;
            let f1 = scores.iter().map(|s| s.1).sum::<f64>() / n as f64;
            let diag = serde_json::json!({
                "token_f1": f1,
                "SPICE": "unavailable",
                "mBMR": "unavailable",
                "skipped_records": skipped,
            });
            ("BLEU-1", bleu, diag)
        }
    };
    let report = EvalReport { meta: env.meta("evaluate"), task: task.name(), metric, value, n, diagnostics };
    let name = format!("evaluate_{}.json", task.name());
    Ok(Outcome { files: vec![env.write_json(&name, &report)?], ..Outcome::default() })
}
