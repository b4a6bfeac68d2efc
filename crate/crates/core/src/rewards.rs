//! Reward functions and their stage-dependent aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthenv::{answer_block, extract_answer, vocab, TokenKind};
use crate::types::{ComponentMask, Experience, PromptRecord, RewardBreakdown, Token};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("breakdown mask {breakdown:?} does not match the configured components {config:?}")]
    MaskMismatch { breakdown: ComponentMask, config: ComponentMask },
    #[error("reward config has no active component")]
    NoActiveComponent,
    #[error("weight for {0:?} is negative or not finite")]
    BadWeight(Component),
    #[error("active weights sum to {0}, expected 1")]
    WeightSum(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Format,
    Accuracy,
    SelfReward,
    Judge,
}

/// Training stage; selects the default reward components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn components(self) -> &'static [Component] {
        use Component::*;
        match self {
            Stage::One => &[Format, Accuracy],
            Stage::Two => &[Format, Accuracy, SelfReward],
            Stage::Three => &[Format, Judge],
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(format!("stage must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }
}

/// Active components and their weights. Components absent from
/// `component_weights` are inactive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub stage: Stage,
    pub component_weights: BTreeMap<Component, f64>,
    pub numeric_task: bool,
}

impl RewardConfig {
    /// Uniform weights over the stage's default components.
    pub fn for_stage(stage: Stage) -> Self {
        Self::with_components(stage, stage.components())
    }

    /// Uniform weights over an explicit component set.
    pub fn with_components(stage: Stage, components: &[Component]) -> Self {
        let w = 1.0 / components.len() as f64;
        Self { stage, component_weights: components.iter().map(|&c| (c, w)).collect(), numeric_task: true }
    }

    pub fn is_active(&self, c: Component) -> bool {
        self.component_weights.contains_key(&c)
    }

    pub fn mask(&self) -> ComponentMask {
        ComponentMask {
            format: self.is_active(Component::Format),
            accuracy: self.is_active(Component::Accuracy),
            self_reward: self.is_active(Component::SelfReward),
            judge: self.is_active(Component::Judge),
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if self.component_weights.is_empty() {
            return Err(RewardError::NoActiveComponent);
        }
        for (&c, &w) in &self.component_weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(RewardError::BadWeight(c));
            }
        }
        let sum: f64 = self.component_weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(RewardError::WeightSum(sum));
        }
        Ok(())
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self::for_stage(Stage::One)
    }
}

/// +1 iff `tokens` is exactly `<think> body </think> <answer> answer </answer>`
/// with nonempty body and answer free of structural tokens; -1 otherwise.
pub fn format_reward(tokens: &[Token]) -> f64 {
    if is_well_formed(tokens) {
        1.0
    } else {
        -1.0
    }
}

pub fn is_well_formed(tokens: &[Token]) -> bool {
    if tokens.first() != Some(&vocab::THINK_OPEN) || tokens.last() != Some(&vocab::ANSWER_CLOSE) {
        return false;
    }
    let Some(close) = tokens.iter().position(|&t| t == vocab::THINK_CLOSE) else {
        return false;
    };
    let body = &tokens[1..close];
    if tokens.get(close + 1) != Some(&vocab::ANSWER_OPEN) {
        return false;
    }
    let answer = &tokens[close + 2..tokens.len() - 1];
    let clean = |s: &[Token]| !s.is_empty() && s.iter().all(|t| !t.is_structural());
    clean(body) && clean(answer)
}

/// Tokens between `<think>` and `</think>` of a well-formed response.
pub fn think_body(tokens: &[Token]) -> Option<&[Token]> {
    if !is_well_formed(tokens) {
        return None;
    }
    let close = tokens.iter().position(|&t| t == vocab::THINK_CLOSE)?;
    Some(&tokens[1..close])
}

/// Relative-error accuracy for numeric answers, exact match otherwise. An
/// unreadable answer scores 0, and a zero ground truth demands an exact 0.
pub fn accuracy_reward(answer: Option<u32>, ground_truth: u32, numeric: bool) -> f64 {
    let Some(a) = answer else {
        return 0.0;
    };
    if !numeric || ground_truth == 0 {
        return if a == ground_truth { 1.0 } else { 0.0 };
    }
    let rel = (f64::from(a) - f64::from(ground_truth)).abs() / f64::from(ground_truth);
    1.0 - rel.min(1.0)
}

/// Majority-vote agreement. Ties go to the smallest answer value; missing
/// answers never agree.
pub fn self_reward(answers: &[Option<u32>]) -> Vec<f64> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for a in answers.iter().flatten() {
        *counts.entry(*a).or_default() += 1;
    }
    // BTreeMap iterates ascending, so `>` keeps the smallest value on ties.
    let mut majority: Option<(u32, usize)> = None;
    for (&a, &n) in &counts {
        if majority.is_none_or(|(_, best)| n > best) {
            majority = Some((a, n));
        }
    }
    answers
        .iter()
        .map(|a| match (a, majority) {
            (Some(a), Some((m, _))) if *a == m => 1.0,
            _ => 0.0,
        })
        .collect()
}

/// Four-part reasoning scorecard.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeScorecard {
    pub audio_grounding_score: f64,
    pub visual_id_score: f64,
    pub location_acc_score: f64,
    pub caption_corr_score: f64,
}

impl JudgeScorecard {
    pub fn overall(&self) -> f64 {
        (self.audio_grounding_score + self.visual_id_score + self.location_acc_score + self.caption_corr_score) / 4.0
    }
}

/// Grades the reasoning of one rollout.
pub trait Judge: Send + Sync {
    fn score(&self, e: &Experience, p: &PromptRecord) -> JudgeScorecard;
}

/// Deterministic judge that checks the think body against the scene.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleJudge;

impl Judge for RuleJudge {
    fn score(&self, e: &Experience, p: &PromptRecord) -> JudgeScorecard {
        judge_reward(e, p)
    }
}

pub fn judge_reward(e: &Experience, p: &PromptRecord) -> JudgeScorecard {
    let response = e.response();
    let Some(body) = think_body(response) else {
        return JudgeScorecard::default();
    };
    let scene = &p.task_spec;
    let coverage = |clues: Vec<Token>| {
        if clues.is_empty() {
            1.0
        } else {
            clues.iter().filter(|c| body.contains(c)).count() as f64 / clues.len() as f64
        }
    };
    let named_regions: Vec<u8> = answer_block(response)
        .unwrap_or(&[])
        .iter()
        .filter_map(|t| match t.kind() {
            TokenKind::Region(r) => Some(r),
            _ => None,
        })
        .collect();
    let location_ok = match scene.target_region() {
        Some(r) => named_regions.contains(&r) && named_regions.iter().all(|&x| x == r),
        None => named_regions.is_empty(),
    };
    JudgeScorecard {
        audio_grounding_score: coverage(scene.audio_clues()),
        visual_id_score: coverage(scene.visual_clues()),
        location_acc_score: if location_ok { 1.0 } else { 0.0 },
        caption_corr_score: if body.contains(&scene.target_object_token()) { 1.0 } else { 0.0 },
    }
}

/// Weighted sum of active components, with format remapped from ±1 to 0/1.
pub fn aggregate(rb: &RewardBreakdown, cfg: &RewardConfig) -> Result<f64, RewardError> {
    let mask = cfg.mask();
    if rb.stage_mask != mask {
        return Err(RewardError::MaskMismatch { breakdown: rb.stage_mask, config: mask });
    }
    let total: f64 = cfg
        .component_weights
        .iter()
        .map(|(c, w)| {
            let v = match c {
                Component::Format => (rb.format + 1.0) / 2.0,
                Component::Accuracy => rb.accuracy,
                Component::SelfReward => rb.self_reward,
                Component::Judge => rb.judge,
            };
            w * v
        })
        .sum();
    Ok(total.clamp(0.0, 1.0))
}

/// Fills `reward` and `total_reward` for every rollout of one prompt.
pub fn score_group(group: &mut [Experience], p: &PromptRecord, cfg: &RewardConfig, judge: &dyn Judge) {
    let mask = cfg.mask();
    let answers: Vec<Option<u32>> = group.iter().map(|e| extract_answer(e.response())).collect();
    let selfs = if mask.self_reward { self_reward(&answers) } else { vec![0.0; group.len()] };
    for (i, e) in group.iter_mut().enumerate() {
        let response = e.response();
        let judge_score = if mask.judge { judge.score(e, p).overall() } else { 0.0 };
        let rb = RewardBreakdown {
            format: format_reward(response),
            accuracy: accuracy_reward(answers[i], p.ground_truth_answer, cfg.numeric_task),
            self_reward: selfs[i],
            judge: judge_score,
            stage_mask: mask,
        }
        .masked();
        e.total_reward = aggregate(&rb, cfg).expect("mask taken from config");
        e.reward = rb;
    }
}
