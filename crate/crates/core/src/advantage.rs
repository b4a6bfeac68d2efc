//! Group-relative advantages, the per-prompt reference score that keeps
//! them from vanishing, and position-dependent token weighting.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::PromptId;

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("group of {0} rewards is too small to normalize (need at least 2)")]
    GroupTooSmall(usize),
    #[error("sequence length must be at least 1")]
    InvalidLength,
    #[error("{advantages} advantages but {lengths} lengths")]
    LengthMismatch { advantages: usize, lengths: usize },
}

/// Token weighting profile over relative position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TasShape {
    UShaped,
    LinearDecay,
    LinearIncline,
    Uniform,
}

impl TasShape {
    pub const ALL: [TasShape; 4] = [TasShape::Uniform, TasShape::LinearDecay, TasShape::LinearIncline, TasShape::UShaped];

    pub fn name(self) -> &'static str {
        match self {
            TasShape::UShaped => "u_shaped",
            TasShape::LinearDecay => "linear_decay",
            TasShape::LinearIncline => "linear_incline",
            TasShape::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// How the reference score enters the advantage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VcrsMode {
    /// Blend the group mean with the prompt's reward history.
    Mix,
    /// Scale the plain group advantage by the clamped history mean.
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvantageConfig {
    pub eps_adv: f64,
    pub lambda_tas: f64,
    pub tas_shape: TasShape,
    /// Weight of the reward history in the baseline.
    pub vcrs_mix: f64,
    pub vcrs_window: usize,
    pub vcrs_mode: VcrsMode,
    /// Reference score reported for a prompt with no history.
    pub vcrs_prior: f64,
    /// Bound on history-baselined advantages.
    pub advantage_clamp: f64,
    pub degenerate_sigma: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            eps_adv: 1e-4,
            lambda_tas: 0.5,
            tas_shape: TasShape::UShaped,
            vcrs_mix: 0.5,
            vcrs_window: 20,
            vcrs_mode: VcrsMode::Mix,
            vcrs_prior: 0.5,
            advantage_clamp: 10.0,
            degenerate_sigma: 1e-8,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<(), String> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.eps_adv) {
            return Err("eps_adv must be positive".into());
        }
        if !(self.lambda_tas.is_finite() && self.lambda_tas >= 0.0) {
            return Err("lambda_tas must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.vcrs_mix) {
            return Err("vcrs_mix must lie in [0, 1]".into());
        }
        if self.vcrs_window == 0 {
            return Err("vcrs_window must be positive".into());
        }
        if !pos(self.degenerate_sigma) || !pos(self.advantage_clamp) {
            return Err("degenerate_sigma and advantage_clamp must be positive".into());
        }
        Ok(())
    }
}

fn mean_and_std(rewards: &[f64]) -> (f64, f64) {
    let k = rewards.len() as f64;
    let mean = if rewards.iter().all(|r| *r == rewards[0]) {
        rewards[0]
    } else {
        rewards.iter().sum::<f64>() / k
    };
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k;
    (mean, var.sqrt())
}

/// True when the group's population standard deviation is at most
/// `degenerate_sigma`.
pub fn is_vanished(rewards: &[f64], cfg: &AdvantageConfig) -> bool {
    if rewards.is_empty() {
        return true;
    }
    mean_and_std(rewards).1 <= cfg.degenerate_sigma
}

/// `(R_i - mean) / (std + eps_adv)` with the population standard deviation.
/// A degenerate group yields exact zeros.
pub fn group_advantages(rewards: &[f64], cfg: &AdvantageConfig) -> Result<Vec<f64>, AdvantageError> {
    if rewards.len() < 2 {
        return Err(AdvantageError::GroupTooSmall(rewards.len()));
    }
    let (mean, std) = mean_and_std(rewards);
    if std <= cfg.degenerate_sigma {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + cfg.eps_adv)).collect())
}

/// Group advantages against a baseline that blends in each rollout's
/// reference score `refs[i]`. With `vcrs_mix = 0` this equals
/// [`group_advantages`] bit for bit.
pub fn vcrs_advantages_with(rewards: &[f64], refs: &[f64], cfg: &AdvantageConfig) -> Result<Vec<f64>, AdvantageError> {
    assert_eq!(rewards.len(), refs.len());
    if rewards.len() < 2 {
        return Err(AdvantageError::GroupTooSmall(rewards.len()));
    }
    let bound = cfg.advantage_clamp;
    match cfg.vcrs_mode {
        VcrsMode::Multiplicative => {
            let base = group_advantages(rewards, cfg)?;
            Ok(base.iter().zip(refs).map(|(a, v)| (a * v.clamp(0.1, 1.0)).clamp(-bound, bound)).collect())
        }
        VcrsMode::Mix => {
            let rho = cfg.vcrs_mix;
            let (mean, std) = mean_and_std(rewards);
            let vanished = std <= cfg.degenerate_sigma;
            Ok(rewards
                .iter()
                .zip(refs)
                .map(|(r, v)| {
                    // r - ((1 - rho) * mean + rho * v), arranged so that rho = 0
                    // and v = mean both cancel exactly. A degenerate group keeps
                    // only its offset from history.
                    let spread = if vanished { 0.0 } else { r - mean };
                    let centered = spread + rho * (mean - v);
                    let a = centered / (std + cfg.eps_adv);
                    if a == 0.0 {
                        0.0
                    } else {
                        a.clamp(-bound, bound)
                    }
                })
                .collect())
        }
    }
}

/// History-baselined advantages for a single-prompt group.
pub fn vcrs_baselined_advantages(
    rewards: &[f64],
    prompt_id: PromptId,
    tracker: &VcrsTracker,
    cfg: &AdvantageConfig,
) -> Result<Vec<f64>, AdvantageError> {
    let v = tracker.mean(prompt_id);
    vcrs_advantages_with(rewards, &vec![v; rewards.len()], cfg)
}

/// Per-token weights over a sequence of `len` tokens.
pub fn tas_weights(len: usize, shape: TasShape, lambda: f64) -> Result<Vec<f64>, AdvantageError> {
    if len == 0 {
        return Err(AdvantageError::InvalidLength);
    }
    if len == 1 {
        return Ok(vec![1.0]);
    }
    let span = (len - 1) as f64;
    Ok((0..len)
        .map(|t| {
            let t = t as f64;
            match shape {
                // (2t - span) / span is computed from an exact integer
                // numerator so that mirrored positions give identical weights.
                TasShape::UShaped => {
                    let u = (2.0 * t - span) / span;
                    1.0 + lambda * (u * u)
                }
                TasShape::LinearDecay => 1.0 + lambda * ((span - t) / span),
                TasShape::LinearIncline => 1.0 + lambda * (t / span),
                TasShape::Uniform => 1.0,
            }
        })
        .collect())
}

/// Per-rollout advantages with their per-token shaped values.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedAdvantages {
    pub advantages: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub shaped: Vec<Vec<f64>>,
}

/// Multiplies each rollout's advantage by the token weights of its
/// completion length.
pub fn shape(advantages: &[f64], lengths: &[usize], cfg: &AdvantageConfig) -> Result<ShapedAdvantages, AdvantageError> {
    if advantages.len() != lengths.len() {
        return Err(AdvantageError::LengthMismatch { advantages: advantages.len(), lengths: lengths.len() });
    }
    let mut weights = Vec::with_capacity(lengths.len());
    let mut shaped = Vec::with_capacity(lengths.len());
    for (&a, &len) in advantages.iter().zip(lengths) {
        // An empty completion contributes no tokens.
        let w = if len == 0 { Vec::new() } else { tas_weights(len, cfg.tas_shape, cfg.lambda_tas)? };
        shaped.push(w.iter().map(|w| w * a).collect());
        weights.push(w);
    }
    Ok(ShapedAdvantages { advantages: advantages.to_vec(), weights, shaped })
}

/// Moving window of recent total rewards per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct VcrsTracker {
    window: usize,
    prior: f64,
    windows: BTreeMap<PromptId, VecDeque<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcrsRecord {
    pub prompt_id: PromptId,
    pub window: Vec<f64>,
}

impl VcrsTracker {
    pub fn new(window: usize, prior: f64) -> Self {
        assert!(window > 0);
        Self { window, prior, windows: BTreeMap::new() }
    }

    pub fn from_config(cfg: &AdvantageConfig) -> Self {
        Self::new(cfg.vcrs_window, cfg.vcrs_prior)
    }

    pub fn push(&mut self, prompt_id: PromptId, reward: f64) {
        let w = self.windows.entry(prompt_id).or_default();
        if w.len() == self.window {
            w.pop_front();
        }
        w.push_back(reward);
    }

    pub fn mean(&self, prompt_id: PromptId) -> f64 {
        match self.windows.get(&prompt_id) {
            Some(w) if !w.is_empty() => w.iter().sum::<f64>() / w.len() as f64,
            _ => self.prior,
        }
    }

    pub fn window(&self, prompt_id: PromptId) -> Option<&VecDeque<f64>> {
        self.windows.get(&prompt_id)
    }

    pub fn records(&self) -> impl Iterator<Item = VcrsRecord> + '_ {
        self.windows.iter().map(|(&prompt_id, w)| VcrsRecord { prompt_id, window: w.iter().copied().collect() })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, window: usize, prior: f64) -> std::io::Result<Self> {
        let mut t = Self::new(window, prior);
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VcrsRecord = serde_json::from_str(&line)?;
            for r in rec.window {
                t.push(rec.prompt_id, r);
            }
        }
        Ok(t)
    }
}
