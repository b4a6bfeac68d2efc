//! Clipped surrogate loss and the training loop.
//!
//! One step samples a batch of prompts, rolls out `k_on` fresh responses
//! per prompt, replays up to `k_off` stored ones, shapes both sets of
//! advantages over token position and takes one gradient step on
//! `J_on + alpha * J_off + beta * KL(theta || ref)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{self, AdvantageConfig, TasShape, VcrsTracker};
use crate::policy::{self, PARAM_DIM};
use crate::replay::{self, BufferConfig, StratifiedBuffer};
use crate::rewards::{self, RewardConfig, RuleJudge};
use crate::synthenv::{self, DatasetConfig};
use crate::types::{Experience, GroupBatch, Origin, PolicyParams, PromptRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Which parts of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Avatar,
    /// Plain on-policy GRPO with the same group size and no extensions.
    BaselineGrpo,
    NoTas,
    NoOffpolicy,
    NoHinting,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Avatar, Mode::BaselineGrpo, Mode::NoTas, Mode::NoOffpolicy, Mode::NoHinting];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Avatar => "avatar",
            Mode::BaselineGrpo => "baseline_grpo",
            Mode::NoTas => "no_tas",
            Mode::NoOffpolicy => "no_offpolicy",
            Mode::NoHinting => "no_hinting",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Starting parameters; also the frozen reference policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Grammar prior that stands in for supervised warm-up.
    ColdStart,
    /// Uniform policy.
    Zeros,
    /// Deterministic policy that never closes its reasoning block, so
    /// every rollout earns zero reward.
    Collapsed,
}

pub fn initial_params(init: Init) -> PolicyParams {
    match init {
        Init::ColdStart => policy::cold_start(),
        Init::Zeros => PolicyParams::zeros(PARAM_DIM),
        Init::Collapsed => {
            let mut p = PolicyParams::zeros(PARAM_DIM);
            p.theta[usize::from(synthenv::vocab::AND.0)] = 60.0;
            p
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    pub eps_clip: f64,
    pub k_on: usize,
    pub k_off: usize,
    pub learning_rate: f64,
    /// Heavy-ball coefficient; 0 is plain gradient descent.
    pub momentum: f64,
    pub steps: u64,
    pub seed: u64,
    pub prompts_per_step: usize,
    /// Cap on generated tokens per rollout.
    pub max_len: usize,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub init: Init,
    pub dataset: DatasetConfig,
    pub advantage: AdvantageConfig,
    pub buffer: BufferConfig,
    pub reward: RewardConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Avatar,
            alpha: 1.0,
            beta: 0.04,
            eps_clip: 0.2,
            k_on: 4,
            k_off: 4,
            learning_rate: 0.2,
            momentum: 0.0,
            steps: 400,
            seed: 0,
            prompts_per_step: 4,
            max_len: 16,
            dataset_size: 64,
            dataset_seed: 0,
            init: Init::ColdStart,
            dataset: DatasetConfig::default(),
            advantage: AdvantageConfig::default(),
            buffer: BufferConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn group_size(&self) -> usize {
        self.k_on + self.k_off
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be nonnegative");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be nonnegative");
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return bad("eps_clip must lie in (0, 1)");
        }
        if self.k_on == 0 {
            return bad("k_on must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.prompts_per_step == 0 || self.dataset_size == 0 {
            return bad("prompts_per_step and dataset_size must be positive");
        }
        if self.max_len < policy::MIN_MAX_LEN {
            return Err(TrainError::Config(format!("max_len must be at least {}", policy::MIN_MAX_LEN)));
        }
        self.advantage.validate().map_err(TrainError::Config)?;
        self.buffer.validate().map_err(TrainError::Config)?;
        self.reward.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// The configuration actually run once the mode's switches are applied.
    /// Baseline GRPO spends the whole group on fresh rollouts.
    pub fn effective(&self) -> TrainerConfig {
        let mut c = self.clone();
        match self.mode {
            Mode::Avatar | Mode::NoHinting => {}
            Mode::NoTas => c.advantage.tas_shape = TasShape::Uniform,
            Mode::NoOffpolicy => {
                c.k_on = self.group_size();
                c.k_off = 0;
                c.alpha = 0.0;
            }
            Mode::BaselineGrpo => {
                c.k_on = self.group_size();
                c.k_off = 0;
                c.alpha = 0.0;
                c.advantage.vcrs_mix = 0.0;
                c.advantage.tas_shape = TasShape::Uniform;
            }
        }
        c
    }

    fn uses_buffer(&self) -> bool {
        self.mode != Mode::BaselineGrpo
    }

    fn uses_hints(&self) -> bool {
        matches!(self.mode, Mode::Avatar | Mode::NoTas | Mode::NoOffpolicy)
    }
}

/// One scored rollout paired with its shaped per-token advantages.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm<'a> {
    pub prompt: &'a PromptRecord,
    pub experience: &'a Experience,
    /// One value per completion token, in order.
    pub shaped: &'a [f64],
}

/// Sum of clipped-surrogate contributions over every completion token,
/// and its gradient. Ratios are taken against the stored behavior
/// logprobs.
#[derive(Debug, Clone)]
pub struct SurrogateSum {
    pub value: f64,
    pub grad: Vec<f64>,
    pub tokens: usize,
    pub clipped: usize,
}

/// `-min(r * a, clip(r, 1 - eps, 1 + eps) * a)`.
pub fn clipped_contribution(ratio: f64, a: f64, eps: f64) -> f64 {
    -(ratio * a).min(ratio.clamp(1.0 - eps, 1.0 + eps) * a)
}

pub fn surrogate_sum(terms: &[LossTerm], theta: &[f64], eps: f64) -> SurrogateSum {
    let mut out = SurrogateSum { value: 0.0, grad: vec![0.0; theta.len()], tokens: 0, clipped: 0 };
    for term in terms {
        let e = term.experience;
        let steps = policy::trace(theta, term.prompt, &e.tokens, &e.completion_mask);
        assert_eq!(steps.len(), term.shaped.len(), "one shaped advantage per completion token");
        for (s, &a) in steps.iter().zip(term.shaped) {
            let ratio = (s.logprob - e.behavior_logprobs[s.index]).exp();
            let unclipped = ratio * a;
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
            out.value -= unclipped.min(clipped);
            out.tokens += 1;
            if unclipped <= clipped {
                // d(-r a)/d logprob = -r a
                s.accumulate_grad(&mut out.grad, -unclipped);
            } else {
                out.clipped += 1;
            }
        }
    }
    out
}

/// Sum over completion tokens of `k3(ref - current)` and its gradient.
pub fn kl_sum(terms: &[LossTerm], theta: &[f64], theta_ref: &[f64]) -> (f64, Vec<f64>, usize) {
    let mut total = 0.0;
    let mut grad = vec![0.0; theta.len()];
    let mut n = 0;
    for term in terms {
        let e = term.experience;
        let cur = policy::trace(theta, term.prompt, &e.tokens, &e.completion_mask);
        let reference = policy::trace(theta_ref, term.prompt, &e.tokens, &e.completion_mask);
        for (c, r) in cur.iter().zip(&reference) {
            let d = r.logprob - c.logprob;
            total += policy::k3(d);
            c.accumulate_grad(&mut grad, 1.0 - d.exp());
            n += 1;
        }
    }
    (total, grad, n)
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub loss: f64,
    pub policy_loss: f64,
    pub kl: f64,
    pub grad: Vec<f64>,
}

/// Loss of a single group: token-mean clipped surrogate plus `beta` times
/// the token-mean KL to the reference.
pub fn surrogate_loss(
    batch: &GroupBatch,
    shaped: &advantage::ShapedAdvantages,
    prompts: &[PromptRecord],
    theta: &[f64],
    theta_ref: &[f64],
    eps: f64,
    beta: f64,
) -> Result<LossValue, TrainError> {
    let terms: Vec<LossTerm> = batch
        .experiences
        .iter()
        .zip(&shaped.shaped)
        .map(|(e, s)| LossTerm { prompt: prompt_for(prompts, e), experience: e, shaped: s })
        .collect();
    let lv = combine(&terms, &[], &terms, theta, theta_ref, eps, 0.0, beta);
    if !lv.loss.is_finite() {
        return Err(TrainError::NonFinite { step: 0, detail: dump(&terms, &lv) });
    }
    Ok(lv)
}

fn prompt_for<'a>(prompts: &'a [PromptRecord], e: &Experience) -> &'a PromptRecord {
    let p = &prompts[e.prompt_id as usize];
    debug_assert_eq!(p.prompt_id, e.prompt_id);
    p
}

fn mean_into(value: f64, grad: &mut [f64], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    value * inv
}

/// `J_on + alpha * J_off + beta * KL`, each a global token mean; the KL is
/// measured on `kl_terms`.
#[allow(clippy::too_many_arguments)]
fn combine(
    on: &[LossTerm],
    off: &[LossTerm],
    kl_terms: &[LossTerm],
    theta: &[f64],
    theta_ref: &[f64],
    eps: f64,
    alpha: f64,
    beta: f64,
) -> LossValue {
    let mut s_on = surrogate_sum(on, theta, eps);
    let j_on = mean_into(s_on.value, &mut s_on.grad, s_on.tokens);
    let mut grad = s_on.grad;
    let mut policy_loss = j_on;
    if alpha > 0.0 && !off.is_empty() {
        let mut s_off = surrogate_sum(off, theta, eps);
        let j_off = mean_into(s_off.value, &mut s_off.grad, s_off.tokens);
        policy_loss += alpha * j_off;
        for (g, o) in grad.iter_mut().zip(&s_off.grad) {
            *g += alpha * o;
        }
    }
    let mut kl = 0.0;
    if beta > 0.0 {
        let (total, mut kg, n) = kl_sum(kl_terms, theta, theta_ref);
        kl = mean_into(total, &mut kg, n);
        for (g, k) in grad.iter_mut().zip(&kg) {
            *g += beta * k;
        }
    }
    LossValue { loss: policy_loss + beta * kl, policy_loss, kl, grad }
}

fn dump(terms: &[LossTerm], lv: &LossValue) -> String {
    let mut s = format!("policy_loss={} kl={}", lv.policy_loss, lv.kl);
    for t in terms.iter().take(8) {
        let e = t.experience;
        s.push_str(&format!(
            "\n  prompt {} v{} tokens {:?} behavior {:?} shaped {:?}",
            e.prompt_id, e.policy_version, e.tokens, e.behavior_logprobs, t.shaped
        ));
    }
    s
}

/// Per-step record; field order is the metrics CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub vanished_fraction: f64,
    pub mean_kl: f64,
    pub easy_occ: usize,
    pub med_occ: usize,
    pub hard_occ: usize,
    pub hints_active: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub const METRICS_COLUMNS: [&str; 10] = [
    "step",
    "mean_reward",
    "vanished_fraction",
    "mean_kl",
    "easy_occ",
    "med_occ",
    "hard_occ",
    "hints_active",
    "loss",
    "grad_norm",
];

/// Everything one step produced besides its metrics.
#[derive(Debug, Clone, Default)]
pub struct StepTrace {
    /// Fresh groups, scored, in batch order.
    pub on_policy: Vec<GroupBatch>,
    pub off_policy: Vec<GroupBatch>,
    pub on_advantages: Vec<Vec<f64>>,
    pub off_advantages: Vec<Vec<f64>>,
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Mutable state of a run.
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub dataset: Vec<PromptRecord>,
    pub params: PolicyParams,
    reference: Vec<f64>,
    pub buffer: StratifiedBuffer,
    pub tracker: VcrsTracker,
    velocity: Vec<f64>,
    rng: ChaCha8Rng,
    step: u64,
    rollouts: u64,
    pub last: StepTrace,
}

impl Trainer {
    /// `cfg` is taken as given; call [`TrainerConfig::effective`] first to
    /// apply a mode.
    pub fn new(cfg: TrainerConfig) -> Result<Self, TrainError> {
        let dataset = synthenv::generate_dataset_with(cfg.dataset_size, cfg.dataset_seed, &cfg.dataset);
        Self::with_dataset(cfg, dataset)
    }

    pub fn with_dataset(cfg: TrainerConfig, dataset: Vec<PromptRecord>) -> Result<Self, TrainError> {
        cfg.validate()?;
        if dataset.iter().enumerate().any(|(i, p)| p.prompt_id != i as u64) {
            return Err(TrainError::Config("prompt ids must equal dataset positions".into()));
        }
        let params = initial_params(cfg.init);
        Ok(Self {
            reference: params.theta.clone(),
            velocity: vec![0.0; params.theta.len()],
            buffer: StratifiedBuffer::new(cfg.buffer),
            tracker: VcrsTracker::from_config(&cfg.advantage),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            params,
            dataset,
            cfg,
            step: 0,
            rollouts: 0,
            last: StepTrace::default(),
        })
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Fresh rollouts generated so far.
    pub fn rollouts(&self) -> u64 {
        self.rollouts
    }

    fn rollout_prompt(&self, pid: u64) -> PromptRecord {
        let p = &self.dataset[pid as usize];
        let active = self.cfg.uses_hints() && self.buffer.stats(pid).is_some_and(|s| s.hint_active);
        replay::attach_hint(p, active)
    }

    pub fn step(&mut self) -> Result<StepMetrics, TrainError> {
        let cfg = self.cfg.clone();
        let judge = RuleJudge;
        let mut batch_ids: Vec<u64> = (0..self.dataset.len() as u64).collect();
        batch_ids.shuffle(&mut self.rng);
        batch_ids.truncate(cfg.prompts_per_step.min(self.dataset.len()));

        // The behavior policy is the current one; rollouts record its logprobs.
        let old = self.params.clone();

        let mut on_groups = Vec::with_capacity(batch_ids.len());
        let mut rollout_prompts = Vec::with_capacity(batch_ids.len());
        for &pid in &batch_ids {
            let prompt = self.rollout_prompt(pid);
            let mut group = policy::sample(&old, &prompt, cfg.k_on, cfg.max_len, &mut self.rng);
            rewards::score_group(&mut group, &prompt, &cfg.reward, &judge);
            self.rollouts += group.len() as u64;
            on_groups.push(GroupBatch { prompt_id: pid, experiences: group, origin: Origin::OnPolicy });
            rollout_prompts.push(prompt);
        }

        let mut vanished = 0usize;
        let mut on_adv = Vec::with_capacity(on_groups.len());
        for g in &on_groups {
            let r = g.rewards();
            if advantage::is_vanished(&r, &cfg.advantage) {
                vanished += 1;
            }
            // A lone rollout has nothing to be compared against.
            let a = if r.len() < 2 {
                vec![0.0; r.len()]
            } else {
                advantage::vcrs_baselined_advantages(&r, g.prompt_id, &self.tracker, &cfg.advantage)
                    .expect("group of at least two")
            };
            on_adv.push(a);
        }

        let mut off_groups = Vec::new();
        let mut off_adv = Vec::new();
        if cfg.alpha > 0.0 && cfg.k_off > 0 {
            for g in self.buffer.sample_off_policy(&batch_ids, cfg.k_off, old.version, &mut self.rng) {
                if g.experiences.len() < 2 {
                    continue;
                }
                let r = g.rewards();
                let refs: Vec<f64> = g.experiences.iter().map(|e| self.tracker.mean(e.prompt_id)).collect();
                off_adv.push(advantage::vcrs_advantages_with(&r, &refs, &cfg.advantage).expect("group of at least two"));
                off_groups.push(g);
            }
        }

        let shape_all = |groups: &[GroupBatch], adv: &[Vec<f64>]| -> Vec<Vec<Vec<f64>>> {
            groups
                .iter()
                .zip(adv)
                .map(|(g, a)| {
                    let lens: Vec<usize> = g.experiences.iter().map(Experience::completion_len).collect();
                    advantage::shape(a, &lens, &cfg.advantage).expect("lengths match").shaped
                })
                .collect()
        };
        let on_shaped = shape_all(&on_groups, &on_adv);
        let off_shaped = shape_all(&off_groups, &off_adv);

        let mut on_terms = Vec::new();
        for ((g, shaped), prompt) in on_groups.iter().zip(&on_shaped).zip(&rollout_prompts) {
            for (e, s) in g.experiences.iter().zip(shaped) {
                on_terms.push(LossTerm { prompt, experience: e, shaped: s });
            }
        }
        // Replayed rollouts carry any hint in their own tokens, so the bare
        // dataset record is enough to score them.
        let mut off_terms = Vec::new();
        for (g, shaped) in off_groups.iter().zip(&off_shaped) {
            for (e, s) in g.experiences.iter().zip(shaped) {
                off_terms.push(LossTerm { prompt: prompt_for(&self.dataset, e), experience: e, shaped: s });
            }
        }
        // The on-policy term needs a comparison group.
        let on_for_loss: &[LossTerm] = if cfg.k_on >= 2 { &on_terms } else { &[] };
        let lv = combine(on_for_loss, &off_terms, &on_terms, &old.theta, &self.reference, cfg.eps_clip, cfg.alpha, cfg.beta);
        if !lv.loss.is_finite() || lv.grad.iter().any(|g| !g.is_finite()) {
            let mut all = on_terms.clone();
            all.extend(off_terms.iter().copied());
            return Err(TrainError::NonFinite { step: self.step, detail: dump(&all, &lv) });
        }
        let grad_norm = lv.grad.iter().map(|g| g * g).sum::<f64>().sqrt();

        if cfg.momentum > 0.0 {
            for (v, g) in self.velocity.iter_mut().zip(&lv.grad) {
                *v = cfg.momentum * *v + g;
            }
            self.params.descend(&self.velocity, cfg.learning_rate);
        } else {
            self.params.descend(&lv.grad, cfg.learning_rate);
        }
        if !self.params.is_finite() {
            return Err(TrainError::NonFinite { step: self.step, detail: "parameters left the finite range".into() });
        }

        let mut reward_sum = 0.0;
        let mut reward_n = 0usize;
        for (g, prompt) in on_groups.iter().zip(&rollout_prompts) {
            for e in &g.experiences {
                self.tracker.push(g.prompt_id, e.total_reward);
                reward_sum += e.total_reward;
                reward_n += 1;
            }
            if cfg.uses_buffer() {
                self.buffer.insert(g);
                let kl = g
                    .experiences
                    .iter()
                    .map(|e| policy::kl_to(&self.params.theta, &old.theta, prompt, &e.tokens, &e.completion_mask))
                    .sum::<f64>()
                    / g.experiences.len() as f64;
                let bcfg = *self.buffer.config();
                let stats = self.buffer.stats_mut(g.prompt_id);
                stats.record_kl(kl, &bcfg);
                if cfg.uses_hints() {
                    replay::maybe_trigger_hint(stats, &bcfg);
                }
            }
        }

        let occ = self.buffer.occupancy();
        let metrics = StepMetrics {
            step: self.step,
            mean_reward: if reward_n == 0 { 0.0 } else { reward_sum / reward_n as f64 },
            vanished_fraction: vanished as f64 / on_groups.len().max(1) as f64,
            mean_kl: lv.kl,
            easy_occ: occ[0],
            med_occ: occ[1],
            hard_occ: occ[2],
            hints_active: self.buffer.hints_active(),
            loss: lv.loss,
            grad_norm,
        };
        self.last = StepTrace {
            on_policy: on_groups,
            off_policy: off_groups,
            on_advantages: on_adv,
            off_advantages: off_adv,
            loss: lv.loss,
            grad: lv.grad,
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Mean Stage 1 reward of `samples` unhinted rollouts per prompt, drawn with
/// a fixed stream so that different runs are scored on equal terms.
pub fn eval_reward(params: &PolicyParams, dataset: &[PromptRecord], samples: usize, max_len: usize, seed: u64) -> f64 {
    let cfg = RewardConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    let mut total = 0.0;
    let mut n = 0usize;
    for p in dataset {
        let bare = PromptRecord { hint_text: None, ..p.clone() };
        let mut group = policy::sample(params, &bare, samples, max_len, &mut rng);
        rewards::score_group(&mut group, &bare, &cfg, &RuleJudge);
        total += group.iter().map(|e| e.total_reward).sum::<f64>();
        n += group.len();
    }
    total / n.max(1) as f64
}

/// Files written by [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub checkpoint_meta: PathBuf,
    pub buffer: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            checkpoint: dir.join("checkpoint.bin"),
            checkpoint_meta: dir.join("checkpoint.json"),
            buffer: dir.join("buffer.jsonl"),
        }
    }
}

pub struct RunOutput {
    pub metrics: Vec<StepMetrics>,
    pub trainer: Trainer,
    pub artifacts: RunArtifacts,
}

/// Trains for `cfg.steps` steps under `cfg.mode` and writes the metrics
/// CSV, final checkpoint and buffer snapshot into `out_dir`.
pub fn run(cfg: &TrainerConfig, out_dir: &Path) -> Result<RunOutput, TrainError> {
    let mut trainer = Trainer::new(cfg.effective())?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let artifacts = RunArtifacts::in_dir(out_dir);

    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        metrics.push(trainer.step()?);
    }

    write_metrics_csv(&artifacts.metrics, &metrics)?;
    policy::write_checkpoint(&artifacts.checkpoint, &artifacts.checkpoint_meta, &trainer.params, cfg.seed)
        .map_err(io_err(&artifacts.checkpoint))?;
    let f = File::create(&artifacts.buffer).map_err(io_err(&artifacts.buffer))?;
    let mut w = BufWriter::new(f);
    trainer.buffer.write_jsonl(&mut w).map_err(io_err(&artifacts.buffer))?;
    w.flush().map_err(io_err(&artifacts.buffer))?;
    Ok(RunOutput { metrics, trainer, artifacts })
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<(), TrainError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let to_io = |e: csv::Error| TrainError::Io { path: path.to_path_buf(), source: e.into() };
    // serde only emits the header with the first record.
    if metrics.is_empty() {
        w.write_record(METRICS_COLUMNS).map_err(to_io)?;
    }
    for m in metrics {
        w.serialize(m).map_err(to_io)?;
    }
    w.flush().map_err(io_err(path))
}
