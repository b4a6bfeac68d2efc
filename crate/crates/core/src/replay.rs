//! Difficulty-stratified replay buffer.
//!
//! Stored rollouts live in three fixed-capacity FIFO tiers chosen by their
//! prompt's moving-average reward. The hard tier gives each rollout one
//! extra lap before eviction. Per-prompt statistics also drive the hint
//! trigger.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::synthenv::vocab;
use crate::types::{Experience, GroupBatch, Origin, PromptId, PromptRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    /// Position in occupancy and capacity arrays.
    pub fn idx(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierFractions {
    pub easy: f64,
    pub medium: f64,
    pub hard: f64,
}

impl TierFractions {
    fn get(&self, t: Tier) -> f64 {
        match t {
            Tier::Easy => self.easy,
            Tier::Medium => self.medium,
            Tier::Hard => self.hard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferConfig {
    pub total_capacity: usize,
    pub tier_fractions: TierFractions,
    pub easy_threshold: f64,
    pub hard_threshold: f64,
    pub reward_window: usize,
    pub kl_window: usize,
    pub kl_stagnation_threshold: f64,
    pub hard_reward_threshold: f64,
    pub k_off: usize,
    /// Rollouts more than this many policy versions old are never replayed.
    pub max_staleness: u64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            total_capacity: 1000,
            tier_fractions: TierFractions { easy: 0.25, medium: 0.35, hard: 0.40 },
            easy_threshold: 0.75,
            hard_threshold: 0.35,
            reward_window: 20,
            kl_window: 10,
            kl_stagnation_threshold: 0.01,
            hard_reward_threshold: 0.25,
            k_off: 4,
            max_staleness: 50,
        }
    }
}

impl BufferConfig {
    /// Easy and medium capacities are rounded; hard takes the remainder.
    pub fn capacities(&self) -> [usize; 3] {
        let easy = (self.tier_fractions.easy * self.total_capacity as f64).round() as usize;
        let medium = (self.tier_fractions.medium * self.total_capacity as f64).round() as usize;
        let hard = self.total_capacity.saturating_sub(easy + medium);
        [easy, medium, hard]
    }

    pub fn validate(&self) -> Result<(), String> {
        let f = self.tier_fractions;
        if [f.easy, f.medium, f.hard].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("tier fractions must lie in [0, 1]".into());
        }
        if (f.easy + f.medium + f.hard - 1.0).abs() > 1e-9 {
            return Err("tier fractions must sum to 1".into());
        }
        if self.hard_threshold >= self.easy_threshold {
            return Err("hard_threshold must be below easy_threshold".into());
        }
        if self.total_capacity == 0 || self.reward_window == 0 || self.kl_window == 0 {
            return Err("capacity and windows must be positive".into());
        }
        Ok(())
    }
}

/// Easy at or above `easy_threshold`, hard strictly below `hard_threshold`.
pub fn tier_of(r_bar: f64, cfg: &BufferConfig) -> Tier {
    if r_bar >= cfg.easy_threshold {
        Tier::Easy
    } else if r_bar < cfg.hard_threshold {
        Tier::Hard
    } else {
        Tier::Medium
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub prompt_id: PromptId,
    pub reward_window: VecDeque<f64>,
    pub kl_window: VecDeque<f64>,
    pub hint_active: bool,
}

fn push_window(w: &mut VecDeque<f64>, cap: usize, v: f64) {
    if w.len() == cap {
        w.pop_front();
    }
    w.push_back(v);
}

fn window_mean(w: &VecDeque<f64>) -> Option<f64> {
    (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
}

impl PromptStats {
    pub fn new(prompt_id: PromptId) -> Self {
        Self { prompt_id, reward_window: VecDeque::new(), kl_window: VecDeque::new(), hint_active: false }
    }

    /// Moving-average reward; 0 before any observation.
    pub fn r_bar(&self) -> f64 {
        window_mean(&self.reward_window).unwrap_or(0.0)
    }

    pub fn kl_mean(&self) -> f64 {
        window_mean(&self.kl_window).unwrap_or(0.0)
    }

    pub fn record_reward(&mut self, r: f64, cfg: &BufferConfig) {
        push_window(&mut self.reward_window, cfg.reward_window, r);
    }

    pub fn record_kl(&mut self, kl: f64, cfg: &BufferConfig) {
        push_window(&mut self.kl_window, cfg.kl_window, kl);
    }
}

/// Turns the hint on for a prompt that is both failing and no longer
/// moving, and keeps it on until the prompt leaves the hard tier.
pub fn maybe_trigger_hint(stats: &mut PromptStats, cfg: &BufferConfig) -> bool {
    let r_bar = stats.r_bar();
    if stats.hint_active {
        if r_bar >= cfg.hard_threshold {
            stats.hint_active = false;
        }
        return stats.hint_active;
    }
    let populated = 2 * stats.reward_window.len() >= cfg.reward_window && 2 * stats.kl_window.len() >= cfg.kl_window;
    if populated && r_bar < cfg.hard_reward_threshold && stats.kl_mean() < cfg.kl_stagnation_threshold {
        stats.hint_active = true;
    }
    stats.hint_active
}

/// Hint block naming the cue to anchor on: `<hint> locate CUE then count </hint>`.
pub fn hint_tokens(p: &PromptRecord) -> Vec<crate::types::Token> {
    vec![vocab::HINT_OPEN, vocab::LOCATE, p.clue_tokens[0], vocab::THEN, vocab::COUNT, vocab::HINT_CLOSE]
}

/// Returns `p` with its hint populated when `triggered`; idempotent.
pub fn attach_hint(p: &PromptRecord, triggered: bool) -> PromptRecord {
    let mut out = p.clone();
    if triggered && out.hint_text.is_none() {
        out.hint_text = Some(hint_tokens(p));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Slot {
    seq: u64,
    recycled: bool,
    experience: Experience,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvictionReport {
    pub inserted: [usize; 3],
    pub evicted: [usize; 3],
    /// Hard-tier rollouts moved to the tail instead of being dropped.
    pub recycled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedBuffer {
    cfg: BufferConfig,
    capacities: [usize; 3],
    tiers: [VecDeque<Slot>; 3],
    stats: BTreeMap<PromptId, PromptStats>,
    next_seq: u64,
}

impl StratifiedBuffer {
    pub fn new(cfg: BufferConfig) -> Self {
        Self { capacities: cfg.capacities(), cfg, tiers: Default::default(), stats: BTreeMap::new(), next_seq: 0 }
    }

    pub fn config(&self) -> &BufferConfig {
        &self.cfg
    }

    pub fn capacities(&self) -> [usize; 3] {
        self.capacities
    }

    pub fn occupancy(&self) -> [usize; 3] {
        [self.tiers[0].len(), self.tiers[1].len(), self.tiers[2].len()]
    }

    pub fn len(&self) -> usize {
        self.tiers.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self, prompt_id: PromptId) -> Option<&PromptStats> {
        self.stats.get(&prompt_id)
    }

    pub fn stats_mut(&mut self, prompt_id: PromptId) -> &mut PromptStats {
        self.stats.entry(prompt_id).or_insert_with(|| PromptStats::new(prompt_id))
    }

    pub fn all_stats(&self) -> impl Iterator<Item = &PromptStats> {
        self.stats.values()
    }

    pub fn hints_active(&self) -> usize {
        self.stats.values().filter(|s| s.hint_active).count()
    }

    /// Stored rollouts of one tier, oldest first.
    pub fn tier(&self, t: Tier) -> impl Iterator<Item = &Experience> {
        self.tiers[t.idx()].iter().map(|s| &s.experience)
    }

    /// Adds fresh rollouts, updating each prompt's reward window first so
    /// the tier reflects the reward average at insertion time.
    pub fn insert(&mut self, batch: &GroupBatch) -> EvictionReport {
        assert_eq!(batch.origin, Origin::OnPolicy, "only fresh rollouts enter the buffer");
        let mut report = EvictionReport::default();
        for e in &batch.experiences {
            let cfg = self.cfg;
            let stats = self.stats_mut(e.prompt_id);
            stats.record_reward(e.total_reward, &cfg);
            let tier = tier_of(stats.r_bar(), &cfg);
            let seq = self.next_seq;
            self.next_seq += 1;
            self.push(tier, Slot { seq, recycled: false, experience: e.clone() }, &mut report);
        }
        report
    }

    fn push(&mut self, tier: Tier, slot: Slot, report: &mut EvictionReport) {
        let i = tier.idx();
        let cap = self.capacities[i];
        report.inserted[i] += 1;
        if cap == 0 {
            report.evicted[i] += 1;
            return;
        }
        let queue = &mut self.tiers[i];
        if queue.len() == cap {
            if tier == Tier::Hard {
                // Fresh heads go round once more; the first rollout that
                // already had its extra lap is the one dropped.
                loop {
                    let mut head = queue.pop_front().expect("full queue");
                    if head.recycled {
                        break;
                    }
                    head.recycled = true;
                    report.recycled += 1;
                    queue.push_back(head);
                }
            } else {
                queue.pop_front();
            }
            report.evicted[i] += 1;
        }
        queue.push_back(slot);
    }

    /// Up to `k_off` stored rollouts per prompt: its own most recent ones,
    /// then others from its tier, then draws across tiers weighted by tier
    /// fraction. Rollouts older than `max_staleness` versions are skipped.
    pub fn sample_off_policy<R: Rng + ?Sized>(
        &self,
        prompt_ids: &[PromptId],
        k_off: usize,
        current_version: u64,
        rng: &mut R,
    ) -> Vec<GroupBatch> {
        if self.is_empty() || k_off == 0 {
            return Vec::new();
        }
        let fresh = |s: &&Slot| s.experience.policy_version + self.cfg.max_staleness >= current_version;
        let mut out = Vec::new();
        for &pid in prompt_ids {
            let mut taken: HashSet<u64> = HashSet::new();
            let mut picked: Vec<&Slot> = Vec::new();

            let mut own: Vec<&Slot> = self
                .tiers
                .iter()
                .flat_map(|q| q.iter())
                .filter(fresh)
                .filter(|s| s.experience.prompt_id == pid)
                .collect();
            own.sort_by_key(|s| std::cmp::Reverse(s.seq));
            for s in own.into_iter().take(k_off) {
                taken.insert(s.seq);
                picked.push(s);
            }

            if picked.len() < k_off {
                if let Some(stats) = self.stats.get(&pid) {
                    let tier = tier_of(stats.r_bar(), &self.cfg);
                    let mut pool: Vec<&Slot> =
                        self.tiers[tier.idx()].iter().filter(fresh).filter(|s| !taken.contains(&s.seq)).collect();
                    pool.shuffle(rng);
                    for s in pool.into_iter().take(k_off - picked.len()) {
                        taken.insert(s.seq);
                        picked.push(s);
                    }
                }
            }

            if picked.len() < k_off {
                let mut pools: Vec<(Tier, Vec<&Slot>)> = Tier::ALL
                    .iter()
                    .map(|&t| (t, self.tiers[t.idx()].iter().filter(fresh).filter(|s| !taken.contains(&s.seq)).collect()))
                    .collect();
                while picked.len() < k_off {
                    let total: f64 = pools
                        .iter()
                        .filter(|(_, p)| !p.is_empty())
                        .map(|(t, _)| self.cfg.tier_fractions.get(*t))
                        .sum();
                    if total <= 0.0 {
                        break;
                    }
                    let mut u = rng.gen::<f64>() * total;
                    let mut chosen = None;
                    for (i, (t, p)) in pools.iter().enumerate() {
                        if p.is_empty() {
                            continue;
                        }
                        let w = self.cfg.tier_fractions.get(*t);
                        chosen = Some(i);
                        if u < w {
                            break;
                        }
                        u -= w;
                    }
                    let pool = &mut pools[chosen.expect("nonempty pool")].1;
                    let j = rng.gen_range(0..pool.len());
                    picked.push(pool.swap_remove(j));
                }
            }

            if !picked.is_empty() {
                out.push(GroupBatch {
                    prompt_id: pid,
                    experiences: picked.into_iter().map(|s| s.experience.clone()).collect(),
                    origin: Origin::OffPolicy,
                });
            }
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in Tier::ALL {
            for slot in &self.tiers[t.idx()] {
                let line = SnapshotLine::Experience {
                    tier: t,
                    seq: slot.seq,
                    recycled: slot.recycled,
                    experience: slot.experience.clone(),
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        for s in self.stats.values() {
            serde_json::to_writer(&mut out, &SnapshotLine::PromptStats(s.clone()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, cfg: BufferConfig) -> std::io::Result<Self> {
        let mut b = Self::new(cfg);
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<SnapshotLine>(&line)? {
                SnapshotLine::Experience { tier, seq, recycled, experience } => {
                    b.next_seq = b.next_seq.max(seq + 1);
                    b.tiers[tier.idx()].push_back(Slot { seq, recycled, experience });
                }
                SnapshotLine::PromptStats(s) => {
                    b.stats.insert(s.prompt_id, s);
                }
            }
        }
        for (i, q) in b.tiers.iter().enumerate() {
            if q.len() > b.capacities[i] {
                return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "snapshot tier exceeds capacity"));
            }
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SnapshotLine {
    Experience { tier: Tier, seq: u64, recycled: bool, experience: Experience },
    PromptStats(PromptStats),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthenv::{generate_dataset, sound_token, Event, Modality, Scene};
    use crate::types::{ComponentMask, RewardBreakdown};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp(prompt_id: PromptId, reward: f64, version: u64) -> Experience {
        Experience {
            prompt_id,
            tokens: vec![vocab::THINK_OPEN],
            completion_mask: vec![false],
            behavior_logprobs: vec![0.0],
            reward: RewardBreakdown {
                format: 0.0,
                accuracy: 0.0,
                self_reward: 0.0,
                judge: 0.0,
                stage_mask: ComponentMask { format: false, accuracy: false, self_reward: false, judge: false },
            },
            total_reward: reward,
            policy_version: version,
        }
    }

    fn batch(prompt_id: PromptId, rewards: &[f64]) -> GroupBatch {
        GroupBatch {
            prompt_id,
            experiences: rewards.iter().map(|&r| exp(prompt_id, r, 0)).collect(),
            origin: Origin::OnPolicy,
        }
    }

    #[test]
    fn tier_boundaries() {
        let c = BufferConfig::default();
        assert_eq!(tier_of(0.9, &c), Tier::Easy);
        assert_eq!(tier_of(0.75, &c), Tier::Easy);
        assert_eq!(tier_of(0.5, &c), Tier::Medium);
        assert_eq!(tier_of(0.35, &c), Tier::Medium);
        assert_eq!(tier_of(0.3499, &c), Tier::Hard);
        assert_eq!(c.capacities(), [250, 350, 400]);
    }

    #[test]
    fn easy_fifo_eviction() {
        let mut b = StratifiedBuffer::new(BufferConfig::default());
        for i in 0..250 {
            b.insert(&batch(i, &[1.0]));
        }
        assert_eq!(b.occupancy(), [250, 0, 0]);
        let first = b.tier(Tier::Easy).next().unwrap().prompt_id;
        assert_eq!(first, 0);
        let report = b.insert(&batch(250, &[1.0]));
        assert_eq!(report.evicted, [1, 0, 0]);
        assert_eq!(b.tier(Tier::Easy).next().unwrap().prompt_id, 1);
        assert_eq!(b.occupancy(), [250, 0, 0]);
    }

    #[test]
    fn hard_head_gets_a_second_lap() {
        let cfg = BufferConfig { total_capacity: 10, ..BufferConfig::default() };
        let mut b = StratifiedBuffer::new(cfg);
        let hard_cap = b.capacities()[2];
        for i in 0..hard_cap as u64 {
            b.insert(&batch(i, &[0.0]));
        }
        let report = b.insert(&batch(100, &[0.0]));
        // Every fresh head is recycled once; the original head is dropped
        // only after its extra lap.
        assert_eq!(report.recycled, hard_cap);
        assert_eq!(report.evicted, [0, 0, 1]);
        let ids: Vec<_> = b.tier(Tier::Hard).map(|e| e.prompt_id).collect();
        let expected: Vec<u64> = (1..hard_cap as u64).chain([100]).collect();
        assert_eq!(ids, expected);
        // Next overflow evicts the recycled head without further rotation.
        let report = b.insert(&batch(101, &[0.0]));
        assert_eq!(report.recycled, 0);
        assert_eq!(b.tier(Tier::Hard).next().unwrap().prompt_id, 2);
    }

    #[test]
    fn sampling_preferences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = StratifiedBuffer::new(BufferConfig::default());
        assert!(b.sample_off_policy(&[1], 4, 0, &mut rng).is_empty());

        b.insert(&batch(7, &[0.95, 0.9, 0.85, 0.8, 0.9, 1.0]));
        b.insert(&batch(8, &[0.0, 0.0, 0.0, 0.0]));
        let got = b.sample_off_policy(&[7], 4, 0, &mut rng);
        let rewards: Vec<f64> = got[0].experiences.iter().map(|e| e.total_reward).collect();
        assert_eq!(rewards, [1.0, 0.9, 0.8, 0.85]);
        assert_eq!(got[0].origin, Origin::OffPolicy);

        // Prompt 9 has hard-tier statistics but nothing stored.
        b.stats_mut(9).record_reward(0.0, &BufferConfig::default());
        let got = b.sample_off_policy(&[9], 4, 0, &mut rng);
        assert_eq!(got[0].experiences.len(), 4);
        assert!(got[0].experiences.iter().all(|e| e.prompt_id == 8));
    }

    #[test]
    fn stale_rollouts_are_not_replayed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = StratifiedBuffer::new(BufferConfig::default());
        b.insert(&GroupBatch { prompt_id: 1, experiences: vec![exp(1, 0.5, 0), exp(1, 0.5, 10)], origin: Origin::OnPolicy });
        let got = b.sample_off_policy(&[1], 4, 55, &mut rng);
        assert_eq!(got[0].experiences.len(), 1);
        assert_eq!(got[0].experiences[0].policy_version, 10);
    }

    #[test]
    fn hint_trigger_cases() {
        let cfg = BufferConfig::default();
        let make = |r: f64, kl: f64| {
            let mut s = PromptStats::new(0);
            for _ in 0..20 {
                s.record_reward(r, &cfg);
            }
            for _ in 0..10 {
                s.record_kl(kl, &cfg);
            }
            s
        };
        assert!(maybe_trigger_hint(&mut make(0.1, 0.001), &cfg));
        assert!(!maybe_trigger_hint(&mut make(0.1, 0.5), &cfg));
        assert!(!maybe_trigger_hint(&mut make(0.8, 0.001), &cfg));

        let mut s = make(0.1, 0.001);
        assert!(maybe_trigger_hint(&mut s, &cfg));
        // Sticky until the average reaches the hard threshold.
        for _ in 0..20 {
            s.record_reward(0.3, &cfg);
        }
        assert!(maybe_trigger_hint(&mut s, &cfg));
        for _ in 0..20 {
            s.record_reward(0.4, &cfg);
        }
        assert!(!maybe_trigger_hint(&mut s, &cfg));

        let mut sparse = PromptStats::new(0);
        sparse.record_reward(0.0, &cfg);
        sparse.record_kl(0.0, &cfg);
        assert!(!maybe_trigger_hint(&mut sparse, &cfg));
    }

    #[test]
    fn hint_template() {
        let events = vec![Event { object: 0, modality: Modality::Audio, region: 1 }];
        let p = PromptRecord::new(0, Scene::new(events, 0, Modality::Audio));
        let hinted = attach_hint(&p, true);
        let names: Vec<_> = hinted.hint_text.as_ref().unwrap().iter().map(|t| t.name()).collect();
        assert_eq!(names, ["<hint>", "locate", "bark", "then", "count", "</hint>"]);
        assert_eq!(hinted.hint_text.as_ref().unwrap()[2], sound_token(0));
        assert_eq!(attach_hint(&hinted, true), hinted);
        assert_eq!(attach_hint(&p, false), p);
        let q = &generate_dataset(1, 4)[0];
        assert_eq!(attach_hint(q, true).hint_text.unwrap()[2], q.task_spec.target_cue());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut b = StratifiedBuffer::new(BufferConfig::default());
        b.insert(&batch(1, &[0.1, 0.9]));
        b.insert(&batch(2, &[0.8, 0.8]));
        b.stats_mut(1).record_kl(0.25, &BufferConfig::default());
        let mut buf = Vec::new();
        b.write_jsonl(&mut buf).unwrap();
        let back = StratifiedBuffer::read_jsonl(&buf[..], BufferConfig::default()).unwrap();
        assert_eq!(back, b);
    }
}
