//! Autoregressive softmax policy over the synthetic vocabulary.
//!
//! Each step's logits are a single linear map of a sparse feature vector:
//! fixed features of the scene and any hint in the prompt, concatenated
//! with a summary of the tokens generated so far (phase of the response
//! format, position bucket, bag of tokens, and the evidence count implied
//! by the first cue the reasoning anchors on). Parameters are laid out row
//! per feature, `theta[feature * VOCAB_SIZE + token]`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::synthenv::{vocab, Scene, TokenKind, MAX_ANSWER, NUM_OBJECTS};
use crate::types::{ComponentMask, Experience, PolicyParams, PromptRecord, RewardBreakdown, Token};

pub const VOCAB: usize = vocab::VOCAB_SIZE;

const P_BIAS: usize = 0;
const P_TARGET_MODALITY: usize = 1;
const P_TARGET_OBJECT: usize = 3;
const P_HINT: usize = 9;
const P_HINT_CUE: usize = 10;
const P_REGION_MATCH: usize = 22;
const P_FIRST_REGION: usize = 26;
pub const PROMPT_FEATURES: usize = 30;

const C_PHASE: usize = PROMPT_FEATURES;
const C_POSITION: usize = C_PHASE + Phase::COUNT;
const C_BAG: usize = C_POSITION + POSITION_BUCKETS;
const C_EVIDENCE: usize = C_BAG + VOCAB;
pub const CONTEXT_FEATURES: usize = Phase::COUNT + POSITION_BUCKETS + VOCAB + EVIDENCE_BUCKETS;

pub const FEATURES: usize = PROMPT_FEATURES + CONTEXT_FEATURES;
pub const PARAM_DIM: usize = FEATURES * VOCAB;

const POSITION_BUCKETS: usize = 8;
const EVIDENCE_BUCKETS: usize = MAX_ANSWER as usize + 2;

/// Where generation stands within the response format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    ThinkEmpty,
    ThinkBody,
    AfterThink,
    AnswerOpen,
    AfterNumeral,
}

impl Phase {
    const COUNT: usize = 5;

    fn next(self, t: Token) -> Phase {
        match self {
            Phase::ThinkEmpty | Phase::ThinkBody if t == vocab::THINK_CLOSE => Phase::AfterThink,
            Phase::ThinkEmpty | Phase::ThinkBody => Phase::ThinkBody,
            Phase::AfterThink if t == vocab::ANSWER_OPEN => Phase::AnswerOpen,
            Phase::AnswerOpen if matches!(t.kind(), TokenKind::Numeral(_)) => Phase::AfterNumeral,
            p => p,
        }
    }
}

fn position_bucket(pos: usize) -> usize {
    match pos {
        0..=3 => pos,
        4..=5 => 4,
        6..=7 => 5,
        8..=11 => 6,
        _ => 7,
    }
}

/// Cue token named in a prompt-side hint block, if any.
pub fn hint_cue(prefix: &[Token]) -> Option<Token> {
    if prefix.first() != Some(&vocab::HINT_OPEN) {
        return None;
    }
    let end = prefix.iter().position(|&t| t == vocab::HINT_CLOSE)?;
    let block = &prefix[1..end];
    let at = block.iter().position(|&t| t == vocab::LOCATE)?;
    block.get(at + 1).copied().filter(|t| matches!(t.kind(), TokenKind::Object(_) | TokenKind::Sound(_)))
}

fn cue_index(t: Token) -> Option<usize> {
    match t.kind() {
        TokenKind::Object(o) => Some(usize::from(o)),
        TokenKind::Sound(o) => Some(NUM_OBJECTS + usize::from(o)),
        _ => None,
    }
}

/// Sparse feature vector: `(index, value)` pairs with distinct indices.
pub type Features = Vec<(usize, f64)>;

fn prompt_features(scene: &Scene, prefix: &[Token]) -> Features {
    let mut f = vec![(P_BIAS, 1.0)];
    let modality = match scene.target_modality {
        crate::synthenv::Modality::Audio => 0,
        _ => 1,
    };
    f.push((P_TARGET_MODALITY + modality, 1.0));
    f.push((P_TARGET_OBJECT + usize::from(scene.target_object), 1.0));
    if let Some(cue) = hint_cue(prefix).and_then(cue_index) {
        f.push((P_HINT, 1.0));
        f.push((P_HINT_CUE + cue, 1.0));
    }
    for (r, present) in scene.regions_with_match().iter().enumerate() {
        if *present {
            f.push((P_REGION_MATCH + r, 1.0));
        }
    }
    if let Some(r) = scene.target_region() {
        f.push((P_FIRST_REGION + usize::from(r), 1.0));
    }
    f
}

/// Running summary of generated tokens.
#[derive(Debug, Clone)]
struct Context {
    phase: Phase,
    position: usize,
    seen: [bool; VOCAB],
    evidence: Option<u32>,
}

impl Context {
    fn new() -> Self {
        Self { phase: Phase::ThinkEmpty, position: 0, seen: [false; VOCAB], evidence: None }
    }

    fn advance(&mut self, t: Token, scene: &Scene) {
        if matches!(self.phase, Phase::ThinkEmpty | Phase::ThinkBody) && self.evidence.is_none() {
            self.evidence = scene.evidence_count(t);
        }
        self.phase = self.phase.next(t);
        self.position += 1;
        if let Some(s) = self.seen.get_mut(usize::from(t.0)) {
            *s = true;
        }
    }

    fn features(&self, prompt: &Features) -> Features {
        let mut f = prompt.clone();
        f.push((C_PHASE + self.phase as usize, 1.0));
        f.push((C_POSITION + position_bucket(self.position), 1.0));
        f.extend(self.seen.iter().enumerate().filter(|(_, s)| **s).map(|(t, _)| (C_BAG + t, 1.0)));
        let ev = match self.evidence {
            None => 0,
            Some(n) => 1 + n.min(MAX_ANSWER) as usize,
        };
        f.push((C_EVIDENCE + ev, 1.0));
        f
    }
}

/// Softmax over `logits` in place; returns log-sum-exp.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
    max + sum.ln()
}

fn logits(theta: &[f64], features: &Features) -> Vec<f64> {
    let mut z = vec![0.0; VOCAB];
    for &(d, x) in features {
        let row = &theta[d * VOCAB..(d + 1) * VOCAB];
        for (zi, w) in z.iter_mut().zip(row) {
            *zi += x * w;
        }
    }
    z
}

/// Scoring record for one generated token.
#[derive(Debug, Clone)]
pub struct TokenStep {
    /// Index into the scored token sequence.
    pub index: usize,
    pub token: Token,
    pub features: Features,
    pub probs: Vec<f64>,
    pub logprob: f64,
}

impl TokenStep {
    /// Adds `coef * d logprob / d theta` into `grad`.
    pub fn accumulate_grad(&self, grad: &mut [f64], coef: f64) {
        if coef == 0.0 {
            return;
        }
        let tok = usize::from(self.token.0);
        for &(d, x) in &self.features {
            let row = &mut grad[d * VOCAB..(d + 1) * VOCAB];
            let scale = coef * x;
            for (v, (g, p)) in row.iter_mut().zip(&self.probs).enumerate() {
                let indicator = if v == tok { 1.0 } else { 0.0 };
                *g += scale * (indicator - p);
            }
        }
    }
}

fn prefix_len(mask: &[bool]) -> usize {
    mask.iter().take_while(|&&m| !m).count()
}

/// Scores every completion position of `tokens` under `theta`.
pub fn trace(theta: &[f64], prompt: &PromptRecord, tokens: &[Token], mask: &[bool]) -> Vec<TokenStep> {
    assert_eq!(theta.len(), PARAM_DIM, "parameter vector has wrong dimension");
    assert_eq!(tokens.len(), mask.len());
    let scene = &prompt.task_spec;
    let pf = prompt_features(scene, &tokens[..prefix_len(mask)]);
    let mut ctx = Context::new();
    let mut out = Vec::new();
    for (index, (&t, &m)) in tokens.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let features = ctx.features(&pf);
        let mut probs = logits(theta, &features);
        let z_tok = probs[usize::from(t.0)];
        let lse = softmax_in_place(&mut probs);
        out.push(TokenStep { index, token: t, features, probs, logprob: z_tok - lse });
        ctx.advance(t, scene);
    }
    out
}

/// Per-token log-probabilities; prompt-side positions get 0.
pub fn logprobs(theta: &[f64], prompt: &PromptRecord, tokens: &[Token], mask: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; tokens.len()];
    for s in trace(theta, prompt, tokens, mask) {
        out[s.index] = s.logprob;
    }
    out
}

/// Gradient of the summed completion log-probability.
pub fn grad_logprob(theta: &[f64], prompt: &PromptRecord, tokens: &[Token], mask: &[bool]) -> Vec<f64> {
    let mut g = vec![0.0; PARAM_DIM];
    for s in trace(theta, prompt, tokens, mask) {
        s.accumulate_grad(&mut g, 1.0);
    }
    g
}

/// Per-token KL estimate `exp(d) - d - 1` with `d = ref - current`,
/// averaged over completion tokens.
pub fn kl_to(theta: &[f64], theta_ref: &[f64], prompt: &PromptRecord, tokens: &[Token], mask: &[bool]) -> f64 {
    let cur = trace(theta, prompt, tokens, mask);
    if cur.is_empty() {
        return 0.0;
    }
    let reference = trace(theta_ref, prompt, tokens, mask);
    let total: f64 = cur.iter().zip(&reference).map(|(c, r)| k3(r.logprob - c.logprob)).sum();
    total / cur.len() as f64
}

/// `exp(d) - d - 1`, nonnegative for every finite `d`.
pub fn k3(d: f64) -> f64 {
    (d.exp() - d - 1.0).max(0.0)
}

/// Prompt-side tokens for a rollout: the hint block if present, then the
/// prefilled `<think>`.
pub fn rollout_prefix(prompt: &PromptRecord) -> Vec<Token> {
    let mut prefix = prompt.hint_text.clone().unwrap_or_default();
    prefix.push(vocab::THINK_OPEN);
    prefix
}

/// Minimum generated length of a well-formed response.
pub const MIN_MAX_LEN: usize = 5;

fn empty_reward() -> RewardBreakdown {
    let none = ComponentMask { format: false, accuracy: false, self_reward: false, judge: false };
    RewardBreakdown { format: 0.0, accuracy: 0.0, self_reward: 0.0, judge: 0.0, stage_mask: none }
}

/// Draws `k` independent rollouts, each ending at `</answer>` or after
/// `max_len` generated tokens. Rewards are left empty.
pub fn sample<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &PromptRecord,
    k: usize,
    max_len: usize,
    rng: &mut R,
) -> Vec<Experience> {
    assert!(max_len >= MIN_MAX_LEN, "max_len must be at least {MIN_MAX_LEN}");
    let theta = &params.theta;
    let scene = &prompt.task_spec;
    let prefix = rollout_prefix(prompt);
    let pf = prompt_features(scene, &prefix);
    (0..k)
        .map(|_| {
            let mut tokens = prefix.clone();
            let mut mask = vec![false; prefix.len()];
            let mut lps = vec![0.0; prefix.len()];
            let mut ctx = Context::new();
            for _ in 0..max_len {
                let features = ctx.features(&pf);
                let mut probs = logits(theta, &features);
                let raw = probs.clone();
                let lse = softmax_in_place(&mut probs);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut choice = VOCAB - 1;
                for (v, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        choice = v;
                        break;
                    }
                }
                let t = Token(choice as u8);
                tokens.push(t);
                mask.push(true);
                lps.push(raw[choice] - lse);
                ctx.advance(t, scene);
                if t == vocab::ANSWER_CLOSE {
                    break;
                }
            }
            Experience {
                prompt_id: prompt.prompt_id,
                tokens,
                completion_mask: mask,
                behavior_logprobs: lps,
                reward: empty_reward(),
                total_reward: 0.0,
                policy_version: params.version,
            }
        })
        .collect()
}

fn set(theta: &mut [f64], feature: usize, token: Token, value: f64) {
    theta[feature * VOCAB + usize::from(token.0)] = value;
}

fn tokens_where(pred: impl Fn(TokenKind) -> bool) -> Vec<Token> {
    (0..VOCAB as u8).map(Token).filter(|t| pred(t.kind())).collect()
}

/// Format prior standing in for supervised warm-up: it knows the response
/// grammar and how to follow a hint, but nothing about counting.
pub fn cold_start() -> PolicyParams {
    use vocab::*;
    let mut theta = vec![0.0; PARAM_DIM];
    let numerals = tokens_where(|k| matches!(k, TokenKind::Numeral(_)));
    let cues = tokens_where(|k| matches!(k, TokenKind::Object(_) | TokenKind::Sound(_)));
    let regions = tokens_where(|k| matches!(k, TokenKind::Region(_)));
    let fillers = tokens_where(|k| matches!(k, TokenKind::Object(_) | TokenKind::Sound(_) | TokenKind::Modality | TokenKind::Connective));

    for t in [THINK_OPEN, HINT_OPEN, HINT_CLOSE] {
        set(&mut theta, P_BIAS, t, -8.0);
    }
    let phase = |p: Phase| C_PHASE + p as usize;
    for &t in &cues {
        set(&mut theta, phase(Phase::ThinkEmpty), t, 2.0);
    }
    for p in [Phase::ThinkEmpty, Phase::ThinkBody] {
        for t in numerals.iter().copied().chain([ANSWER_OPEN, ANSWER_CLOSE]) {
            set(&mut theta, phase(p), t, -4.0);
        }
    }
    set(&mut theta, phase(Phase::ThinkEmpty), THINK_CLOSE, -4.0);
    set(&mut theta, phase(Phase::ThinkBody), THINK_CLOSE, 2.5);
    set(&mut theta, phase(Phase::AfterThink), ANSWER_OPEN, 8.0);
    for &t in &numerals {
        set(&mut theta, phase(Phase::AnswerOpen), t, 3.0);
    }
    for &t in &regions {
        set(&mut theta, phase(Phase::AnswerOpen), t, 0.5);
    }
    for t in fillers.iter().copied().chain([ANSWER_CLOSE, THINK_CLOSE]) {
        set(&mut theta, phase(Phase::AnswerOpen), t, -2.0);
    }
    set(&mut theta, phase(Phase::AfterNumeral), ANSWER_CLOSE, 8.0);
    for &t in &cues {
        let cue = cue_index(t).expect("cue token");
        set(&mut theta, P_HINT_CUE + cue, t, 3.0);
    }
    PolicyParams { theta, version: 0 }
}

/// Sidecar describing a flat little-endian `f64` checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub features: usize,
    pub vocab: usize,
    pub len: usize,
    pub version: u64,
    pub seed: u64,
}

pub fn write_checkpoint(bin: &Path, sidecar: &Path, params: &PolicyParams, seed: u64) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(bin)?);
    for v in &params.theta {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let meta = CheckpointMeta { features: FEATURES, vocab: VOCAB, len: params.theta.len(), version: params.version, seed };
    std::fs::write(sidecar, serde_json::to_string_pretty(&meta)? + "\n")
}

pub fn read_checkpoint(bin: &Path, sidecar: &Path) -> std::io::Result<(PolicyParams, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    let mut bytes = Vec::new();
    File::open(bin)?.read_to_end(&mut bytes)?;
    if bytes.len() != meta.len * 8 || meta.len != meta.features * meta.vocab {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "checkpoint size does not match sidecar"));
    }
    let theta = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((PolicyParams { theta, version: meta.version }, meta))
}
