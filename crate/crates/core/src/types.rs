//! Domain records shared across the crate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::{self, RewardConfig};
use crate::synthenv::Scene;

/// Id into the fixed vocabulary of [`crate::synthenv::vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u8);

pub type PromptId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: PromptId,
    pub task_spec: Scene,
    pub ground_truth_answer: u32,
    pub clue_tokens: Vec<Token>,
    #[serde(default)]
    pub hint_text: Option<Vec<Token>>,
}

impl PromptRecord {
    pub fn new(prompt_id: PromptId, scene: Scene) -> Self {
        Self {
            prompt_id,
            ground_truth_answer: scene.ground_truth_answer,
            clue_tokens: scene.clue_tokens(),
            task_spec: scene,
            hint_text: None,
        }
    }
}

/// Which reward components contribute to the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentMask {
    pub format: bool,
    pub accuracy: bool,
    pub self_reward: bool,
    pub judge: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// -1 or +1 when active.
    pub format: f64,
    pub accuracy: f64,
    /// 0 or 1 when active.
    pub self_reward: f64,
    pub judge: f64,
    pub stage_mask: ComponentMask,
}

impl RewardBreakdown {
    /// Zeroes every component the mask disables.
    pub fn masked(mut self) -> Self {
        let m = self.stage_mask;
        if !m.format {
            self.format = 0.0;
        }
        if !m.accuracy {
            self.accuracy = 0.0;
        }
        if !m.self_reward {
            self.self_reward = 0.0;
        }
        if !m.judge {
            self.judge = 0.0;
        }
        self
    }
}

/// One rollout.
///
/// `tokens` holds the prompt-side prefix (hint block and the prefilled
/// `<think>`) followed by generated tokens; `completion_mask` marks the
/// generated part. Prompt-side positions carry a behavior logprob of 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub prompt_id: PromptId,
    pub tokens: Vec<Token>,
    pub completion_mask: Vec<bool>,
    pub behavior_logprobs: Vec<f64>,
    pub reward: RewardBreakdown,
    pub total_reward: f64,
    pub policy_version: u64,
}

impl Experience {
    pub fn completion_len(&self) -> usize {
        self.completion_mask.iter().filter(|&&m| m).count()
    }

    /// Number of leading prompt-side tokens.
    pub fn prefix_len(&self) -> usize {
        self.completion_mask.iter().take_while(|&&m| !m).count()
    }

    /// Tokens a reader would grade: everything after the hint block.
    pub fn response(&self) -> &[Token] {
        strip_hint(&self.tokens)
    }
}

/// Drops a leading `<hint> ... </hint>` block if present.
pub fn strip_hint(tokens: &[Token]) -> &[Token] {
    use crate::synthenv::vocab::{HINT_CLOSE, HINT_OPEN};
    if tokens.first() == Some(&HINT_OPEN) {
        if let Some(end) = tokens.iter().position(|&t| t == HINT_CLOSE) {
            return &tokens[end + 1..];
        }
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    OnPolicy,
    OffPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt_id: PromptId,
    pub experiences: Vec<Experience>,
    pub origin: Origin,
}

impl GroupBatch {
    pub fn rewards(&self) -> Vec<f64> {
        self.experiences.iter().map(|e| e.total_reward).collect()
    }
}

/// Flat parameter vector with an optimizer-step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros(dim: usize) -> Self {
        Self { theta: vec![0.0; dim], version: 0 }
    }

    /// Gradient-descent step; bumps the version exactly once.
    pub fn descend(&mut self, grad: &[f64], lr: f64) {
        assert_eq!(grad.len(), self.theta.len());
        for (t, g) in self.theta.iter_mut().zip(grad) {
            *t -= lr * g;
        }
        self.version += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("{field} has length {got}, expected {expected} (token count)")]
    LengthMismatch { field: &'static str, expected: usize, got: usize },
    #[error("behavior logprob at position {index} is not finite")]
    NonFiniteLogprob { index: usize },
    #[error("behavior logprob at position {index} is positive ({value})")]
    PositiveLogprob { index: usize, value: f64 },
    #[error("total_reward {stored} does not match aggregated breakdown {recomputed}")]
    AggregationMismatch { stored: f64, recomputed: f64 },
    #[error(transparent)]
    Reward(#[from] rewards::RewardError),
}

/// Tolerance for recomputing `total_reward` from its breakdown.
pub const AGGREGATION_TOL: f64 = 1e-12;

pub fn validate_experience(e: &Experience, cfg: &RewardConfig) -> Result<(), ValidationError> {
    let n = e.tokens.len();
    if e.behavior_logprobs.len() != n {
        return Err(ValidationError::LengthMismatch {
            field: "behavior_logprobs",
            expected: n,
            got: e.behavior_logprobs.len(),
        });
    }
    if e.completion_mask.len() != n {
        return Err(ValidationError::LengthMismatch { field: "completion_mask", expected: n, got: e.completion_mask.len() });
    }
    for (index, &value) in e.behavior_logprobs.iter().enumerate() {
        if !value.is_finite() {
            return Err(ValidationError::NonFiniteLogprob { index });
        }
        if value > 0.0 {
            return Err(ValidationError::PositiveLogprob { index, value });
        }
    }
    let recomputed = rewards::aggregate(&e.reward, cfg)?;
    if !e.total_reward.is_finite() || (recomputed - e.total_reward).abs() > AGGREGATION_TOL {
        return Err(ValidationError::AggregationMismatch { stored: e.total_reward, recomputed });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::Stage;
    use crate::synthenv::vocab::*;
    use crate::synthenv::object_token;

    fn sample() -> (Experience, RewardConfig) {
        let cfg = RewardConfig::for_stage(Stage::One);
        let reward = RewardBreakdown {
            format: 1.0,
            accuracy: 0.5,
            self_reward: 0.0,
            judge: 0.0,
            stage_mask: cfg.mask(),
        };
        let tokens = vec![THINK_OPEN, object_token(0), THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];
        let e = Experience {
            prompt_id: 1,
            completion_mask: vec![false, true, true, true, true],
            behavior_logprobs: vec![0.0, -1.0, -0.5, -0.1, -0.2],
            tokens,
            total_reward: rewards::aggregate(&reward, &cfg).unwrap(),
            reward,
            policy_version: 3,
        };
        (e, cfg)
    }

    #[test]
    fn well_formed_passes() {
        let (e, cfg) = sample();
        assert_eq!(validate_experience(&e, &cfg), Ok(()));
    }

    #[test]
    fn short_logprobs_rejected() {
        let (mut e, cfg) = sample();
        e.behavior_logprobs.pop();
        assert!(matches!(
            validate_experience(&e, &cfg),
            Err(ValidationError::LengthMismatch { field: "behavior_logprobs", expected: 5, got: 4 })
        ));
    }

    #[test]
    fn bad_total_rejected() {
        let (mut e, cfg) = sample();
        e.total_reward += 0.1;
        assert!(matches!(validate_experience(&e, &cfg), Err(ValidationError::AggregationMismatch { .. })));
    }

    #[test]
    fn nan_and_positive_logprobs_rejected() {
        let (mut e, cfg) = sample();
        e.behavior_logprobs[2] = f64::NAN;
        assert_eq!(validate_experience(&e, &cfg), Err(ValidationError::NonFiniteLogprob { index: 2 }));
        e.behavior_logprobs[2] = 0.25;
        assert!(matches!(validate_experience(&e, &cfg), Err(ValidationError::PositiveLogprob { index: 2, .. })));
    }

    #[test]
    fn json_field_names() {
        let (e, _) = sample();
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["behavior_logprobs", "completion_mask", "policy_version", "prompt_id", "reward", "tokens", "total_reward"]
        );
        let batch = GroupBatch { prompt_id: 1, experiences: vec![e], origin: Origin::OffPolicy };
        let v = serde_json::to_value(&batch).unwrap();
        assert_eq!(v["origin"], "off_policy");
    }

    #[test]
    fn strip_hint_block() {
        let t = [HINT_OPEN, LOCATE, HINT_CLOSE, THINK_OPEN];
        assert_eq!(strip_hint(&t), &[THINK_OPEN]);
        assert_eq!(strip_hint(&t[3..]), &[THINK_OPEN]);
    }

    #[test]
    fn descend_bumps_version_once() {
        let mut p = PolicyParams::zeros(3);
        p.descend(&[1.0, -2.0, 0.0], 0.5);
        assert_eq!(p.theta, vec![-0.5, 1.0, 0.0]);
        assert_eq!(p.version, 1);
    }
}
