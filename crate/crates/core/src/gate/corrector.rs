use std::collections::BTreeSet;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::embed::tokenize;
use crate::error::{Error, Result};
use crate::math::SeededRng;
use crate::metrics::BBox;

pub const DEFAULT_INSTRUCTION: &str =
    "Revise the predicted answer so that it matches the intent of the reference answer. \
     Do not change any box coordinates. Reply with the revised answer text only.";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionRequest {
    pub pred_text: String,
    pub gt_text: String,
    #[serde(skip)]
    pub anchor_box: BBox,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub text: String,
    pub anchor_box: BBox,
}

/// Rewrites a prediction's text toward its label.
pub trait Corrector: Send + Sync {
    fn correct(&self, request: &CorrectionRequest) -> Result<Correction>;
}

/// Returns the label text verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockCorrector;

impl Corrector for MockCorrector {
    fn correct(&self, request: &CorrectionRequest) -> Result<Correction> {
        Ok(Correction {
            text: request.gt_text.clone(),
            anchor_box: request.anchor_box,
        })
    }
}

/// Deterministic lexical merge: the label's tokens in order, with each
/// prediction-only token kept with probability ½ and inserted at a random
/// slot. The stream is seeded by `seed` mixed with a hash of both texts, so
/// the output depends only on `(seed, pred, gt)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateCorrector {
    pub seed: u64,
}

impl TemplateCorrector {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn stream(&self, pred: &str, gt: &str) -> SeededRng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in pred.bytes().chain([0xff]).chain(gt.bytes()) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        SeededRng::seed_from_u64(self.seed ^ h)
    }
}

impl Corrector for TemplateCorrector {
    fn correct(&self, request: &CorrectionRequest) -> Result<Correction> {
        let mut rng = self.stream(&request.pred_text, &request.gt_text);
        let mut merged: Vec<String> = tokenize(&request.gt_text).collect();
        let known: BTreeSet<String> = merged.iter().cloned().collect();
        for token in tokenize(&request.pred_text) {
            if known.contains(&token) || !rng.random_bool(0.5) {
                continue;
            }
            let slot = rng.random_range(0..=merged.len());
            merged.insert(slot, token);
        }
        Ok(Correction {
            text: merged.join(" "),
            anchor_box: request.anchor_box,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub url: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub credential_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub instruction: Option<String>,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_max_retries() -> u32 {
    2
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            credential_env: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            instruction: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.url.starts_with("http://") || self.url.starts_with("https://")) {
            return Err(Error::config(format!(
                "gate.corrector.remote.url must be an http(s) URL, got {:?}",
                self.url
            )));
        }
        if self.timeout_ms == 0 {
            return Err(Error::config("gate.corrector.remote.timeout_ms must be positive"));
        }
        Ok(())
    }
}

/// POSTs `{pred_text, gt_text, instruction}` as JSON and expects a JSON
/// object carrying a string field `revised_text`. An `anchor_box` field in the
/// reply, if present, is passed through so the caller can reject it.
///
/// Transport failures, timeouts and 5xx replies are retried up to
/// `max_retries` times; 4xx replies and malformed bodies fail at once.
#[derive(Debug)]
pub struct RemoteCorrector {
    config: RemoteConfig,
    agent: ureq::Agent,
}

#[derive(Debug, Deserialize)]
struct RemoteReply {
    revised_text: String,
    #[serde(default)]
    anchor_box: Option<[f64; 4]>,
}

impl RemoteCorrector {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent })
    }

    fn credential(&self) -> Result<Option<String>> {
        match &self.config.credential_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| {
                Error::CorrectionFailed(format!("credential variable {var} is not set"))
            }),
        }
    }

    fn attempt(&self, body: &serde_json::Value, token: Option<&str>) -> Attempt {
        let mut req = self.agent.post(&self.config.url);
        if let Some(token) = token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(resp) => resp,
            Err(e) => return Attempt::Retry(format!("request failed: {e}")),
        };
        let status = resp.status().as_u16();
        if status >= 500 {
            return Attempt::Retry(format!("server returned {status}"));
        }
        if status >= 400 {
            return Attempt::Fail(format!("server returned {status}"));
        }
        match resp.body_mut().read_json::<RemoteReply>() {
            Ok(reply) => Attempt::Done(reply),
            Err(e) => Attempt::Fail(format!("malformed reply: {e}")),
        }
    }
}

enum Attempt {
    Done(RemoteReply),
    Retry(String),
    Fail(String),
}

impl Corrector for RemoteCorrector {
    fn correct(&self, request: &CorrectionRequest) -> Result<Correction> {
        let token = self.credential()?;
        let instruction = self.config.instruction.as_deref().unwrap_or(&request.instruction);
        let body = serde_json::json!({
            "pred_text": request.pred_text,
            "gt_text": request.gt_text,
            "instruction": instruction,
        });
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
            }
            match self.attempt(&body, token.as_deref()) {
                Attempt::Done(reply) => {
                    let anchor_box = match reply.anchor_box {
                        Some([x1, y1, x2, y2]) => BBox::new(x1, y1, x2, y2).map_err(|e| {
                            Error::CorrectionFailed(format!("malformed anchor_box in reply: {e}"))
                        })?,
                        None => request.anchor_box,
                    };
                    return Ok(Correction { text: reply.revised_text, anchor_box });
                }
                Attempt::Fail(msg) => return Err(Error::CorrectionFailed(msg)),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(Error::CorrectionFailed(format!(
            "{} after {} attempts",
            last,
            self.config.max_retries + 1
        )))
    }
}
