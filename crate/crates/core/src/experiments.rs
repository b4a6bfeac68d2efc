//! Seeded comparisons between trainer configurations.
//!
//! Every run is scored by the same held-out metric, [`trainer::eval_reward`]
//! on the training prompts without hints, so runs that optimise different
//! reward mixtures remain comparable.

use serde::{Deserialize, Serialize};

use crate::advantage::{tas_weights, TasShape};
use crate::rewards::{Component, RewardConfig, Stage};
use crate::trainer::{eval_reward, Mode, TrainError, Trainer, TrainerConfig};

/// Reward a perfect policy earns on every prompt.
pub const BEST_ACHIEVABLE_REWARD: f64 = 1.0;

/// Mean reward that counts as "learned the task" in sample-efficiency
/// comparisons: three quarters of the best achievable reward.
pub const REWARD_THRESHOLD: f64 = 0.75 * BEST_ACHIEVABLE_REWARD;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Steps between evaluations.
    pub every: u64,
    /// Rollouts per prompt in each evaluation.
    pub samples: usize,
    /// Rollouts per prompt in the final evaluation.
    pub final_samples: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { every: 10, samples: 4, final_samples: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    /// Fresh rollouts generated before this evaluation.
    pub rollouts: u64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    pub final_reward: f64,
}

impl Curve {
    /// Rollouts spent when the evaluated reward first reaches `threshold`.
    pub fn rollouts_to(&self, threshold: f64) -> Option<u64> {
        self.points.iter().find(|p| p.reward >= threshold).map(|p| p.rollouts)
    }
}

/// Trains under `cfg.mode` for `cfg.steps` steps, evaluating on a fixed
/// stream every `eval.every` steps and once more at the end.
pub fn train_with_eval(cfg: &TrainerConfig, eval: &EvalSpec) -> Result<Curve, TrainError> {
    let eff = cfg.effective();
    let mut t = Trainer::new(eff.clone())?;
    let score = |t: &Trainer, samples: usize| eval_reward(&t.params, &t.dataset, samples, eff.max_len, eff.seed);
    let mut points = vec![CurvePoint { step: 0, rollouts: 0, reward: score(&t, eval.samples) }];
    for s in 1..=eff.steps {
        t.step()?;
        if eval.every > 0 && s % eval.every == 0 {
            points.push(CurvePoint { step: s, rollouts: t.rollouts(), reward: score(&t, eval.samples) });
        }
    }
    Ok(Curve { points, final_reward: score(&t, eval.final_samples) })
}

/// Reward mixtures compared in the cumulative reward ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSuite {
    /// Format and accuracy.
    Base,
    /// Adds majority-vote agreement.
    SelfReward,
    /// Adds the reasoning judge and the reference-score baseline.
    JudgeVcrs,
}

impl RewardSuite {
    pub const ALL: [RewardSuite; 3] = [RewardSuite::Base, RewardSuite::SelfReward, RewardSuite::JudgeVcrs];

    pub fn name(self) -> &'static str {
        match self {
            RewardSuite::Base => "base",
            RewardSuite::SelfReward => "self_reward",
            RewardSuite::JudgeVcrs => "judge_vcrs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    pub fn apply(self, cfg: &mut TrainerConfig, vcrs_mix: f64) {
        use Component::*;
        let (stage, components, mix): (Stage, &[Component], f64) = match self {
            RewardSuite::Base => (Stage::One, &[Format, Accuracy], 0.0),
            RewardSuite::SelfReward => (Stage::Two, &[Format, Accuracy, SelfReward], 0.0),
            RewardSuite::JudgeVcrs => (Stage::Three, &[Format, Accuracy, SelfReward, Judge], vcrs_mix),
        };
        cfg.reward = RewardConfig::with_components(stage, components);
        cfg.advantage.vcrs_mix = mix;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    /// Fresh rollouts per prompt; the rest of the group is replayed.
    OnoffSplit(Vec<usize>),
    TasShape(Vec<TasShape>),
    Lambda(Vec<f64>),
    RewardSuite(Vec<RewardSuite>),
}

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Sweep::OnoffSplit(_) => "onoff_split",
            Sweep::TasShape(_) => "tas_shape",
            Sweep::Lambda(_) => "lambda",
            Sweep::RewardSuite(_) => "reward_suite",
        }
    }

    /// `8-0` through `1-7` for a group of 8.
    pub fn all_splits(group_size: usize) -> Sweep {
        Sweep::OnoffSplit((1..=group_size).rev().collect())
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::OnoffSplit(v) => v.len(),
            Sweep::TasShape(v) => v.len(),
            Sweep::Lambda(v) => v.len(),
            Sweep::RewardSuite(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Label and configuration of the `i`-th condition.
    pub fn condition(&self, base: &TrainerConfig, i: usize) -> (String, TrainerConfig) {
        let mut cfg = base.clone();
        let label = match self {
            Sweep::OnoffSplit(v) => {
                let group = base.group_size();
                cfg.k_on = v[i];
                cfg.k_off = group.saturating_sub(v[i]);
                format!("{}-{}", cfg.k_on, cfg.k_off)
            }
            Sweep::TasShape(v) => {
                cfg.advantage.tas_shape = v[i];
                v[i].name().to_string()
            }
            Sweep::Lambda(v) => {
                cfg.advantage.lambda_tas = v[i];
                format!("{}", v[i])
            }
            Sweep::RewardSuite(v) => {
                v[i].apply(&mut cfg, base.advantage.vcrs_mix);
                v[i].name().to_string()
            }
        };
        (label, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub final_reward: f64,
    /// Fresh rollouts to reach [`REWARD_THRESHOLD`]; empty if never reached.
    pub samples_to_threshold: Option<u64>,
}

/// Endpoint token weight `w_0 = w_{L-1}` of the shaped profile for `lambda`.
pub fn endpoint_weight(lambda: f64) -> f64 {
    tas_weights(2, TasShape::UShaped, lambda).expect("length 2")[0]
}

/// One run per condition per seed. Seeds drive both the dataset and the
/// rollout stream.
pub fn run_sweep(base: &TrainerConfig, sweep: &Sweep, seeds: &[u64], eval: &EvalSpec) -> Result<Vec<SweepRow>, TrainError> {
    let mut rows = Vec::with_capacity(sweep.len() * seeds.len());
    for &seed in seeds {
        for i in 0..sweep.len() {
            let (value, mut cfg) = sweep.condition(base, i);
            cfg.seed = seed;
            cfg.dataset_seed = seed;
            let curve = train_with_eval(&cfg, eval)?;
            rows.push(SweepRow {
                value,
                seed,
                final_reward: curve.final_reward,
                samples_to_threshold: curve.rollouts_to(REWARD_THRESHOLD),
            });
        }
    }
    Ok(rows)
}

/// Rollouts each mode needs to reach the threshold, one entry per seed.
pub fn sample_efficiency(
    base: &TrainerConfig,
    modes: &[Mode],
    seeds: &[u64],
    eval: &EvalSpec,
) -> Result<Vec<Vec<Option<u64>>>, TrainError> {
    modes
        .iter()
        .map(|&mode| {
            seeds
                .iter()
                .map(|&seed| {
                    let cfg = TrainerConfig { mode, seed, dataset_seed: seed, ..base.clone() };
                    Ok(train_with_eval(&cfg, eval)?.rollouts_to(REWARD_THRESHOLD))
                })
                .collect()
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
