//! Synthetic audio-visual counting task.
//!
//! A [`Scene`] is a list of events, each an object observed through a
//! modality (heard, seen, or both) in a screen region. The question asks how
//! many events show a target object through a target modality. Everything a
//! policy reads or writes is a token id from the fixed vocabulary below.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::{PromptRecord, Token};

pub const MAX_EVENTS: usize = 12;
pub const MAX_ANSWER: u32 = 12;

pub const NUM_OBJECTS: usize = 6;
pub const NUM_REGIONS: usize = 4;

/// Fixed vocabulary. Ids are dense in `[0, VOCAB_SIZE)`.
pub mod vocab {
    use crate::types::Token;

    pub const THINK_OPEN: Token = Token(0);
    pub const THINK_CLOSE: Token = Token(1);
    pub const ANSWER_OPEN: Token = Token(2);
    pub const ANSWER_CLOSE: Token = Token(3);
    pub const HINT_OPEN: Token = Token(4);
    pub const HINT_CLOSE: Token = Token(5);

    pub(crate) const OBJECT_BASE: u8 = 6;
    pub(crate) const SOUND_BASE: u8 = 12;
    pub(crate) const REGION_BASE: u8 = 18;
    pub(crate) const MODALITY_BASE: u8 = 22;
    pub(crate) const CONNECTIVE_BASE: u8 = 25;
    pub(crate) const NUMERAL_BASE: u8 = 29;

    pub const LOCATE: Token = Token(CONNECTIVE_BASE);
    pub const THEN: Token = Token(CONNECTIVE_BASE + 1);
    pub const COUNT: Token = Token(CONNECTIVE_BASE + 2);
    pub const AND: Token = Token(CONNECTIVE_BASE + 3);

    pub const VOCAB_SIZE: usize = NUMERAL_BASE as usize + 13;

    pub const NAMES: [&str; VOCAB_SIZE] = [
        "<think>", "</think>", "<answer>", "</answer>", "<hint>", "</hint>", //
        "dog", "cat", "bird", "car", "drum", "bell", //
        "bark", "meow", "chirp", "honk", "beat", "ring", //
        "left", "right", "top", "bottom", //
        "audio", "visual", "both", //
        "locate", "then", "count", "and", //
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Structural,
    Object(u8),
    Sound(u8),
    Region(u8),
    Modality,
    Connective,
    Numeral(u32),
}

impl Token {
    pub fn kind(self) -> TokenKind {
        use vocab::*;
        match self.0 {
            0..=5 => TokenKind::Structural,
            t if t < SOUND_BASE => TokenKind::Object(t - OBJECT_BASE),
            t if t < REGION_BASE => TokenKind::Sound(t - SOUND_BASE),
            t if t < MODALITY_BASE => TokenKind::Region(t - REGION_BASE),
            t if t < CONNECTIVE_BASE => TokenKind::Modality,
            t if t < NUMERAL_BASE => TokenKind::Connective,
            t => TokenKind::Numeral(u32::from(t - NUMERAL_BASE)),
        }
    }

    pub fn is_structural(self) -> bool {
        self.kind() == TokenKind::Structural
    }

    pub fn in_vocab(self) -> bool {
        usize::from(self.0) < vocab::VOCAB_SIZE
    }

    pub fn name(self) -> &'static str {
        vocab::NAMES.get(usize::from(self.0)).copied().unwrap_or("<unk>")
    }

    pub fn numeral(n: u32) -> Token {
        assert!(n <= MAX_ANSWER, "numeral {n} out of range");
        Token(vocab::NUMERAL_BASE + n as u8)
    }
}

/// How an event is perceived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
    Both,
}

impl Modality {
    pub fn includes(self, target: Modality) -> bool {
        self == Modality::Both || self == target
    }

    pub fn token(self) -> Token {
        Token(vocab::MODALITY_BASE + self as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    /// Object index in `0..NUM_OBJECTS`.
    pub object: u8,
    pub modality: Modality,
    /// Region index in `0..NUM_REGIONS`.
    pub region: u8,
}

pub fn object_token(object: u8) -> Token {
    Token(vocab::OBJECT_BASE + object)
}

pub fn sound_token(object: u8) -> Token {
    Token(vocab::SOUND_BASE + object)
}

pub fn region_token(region: u8) -> Token {
    Token(vocab::REGION_BASE + region)
}

/// The token that names `object` as perceived through `modality`: its sound
/// for audio, the object itself for vision.
pub fn cue_token(object: u8, modality: Modality) -> Token {
    match modality {
        Modality::Audio => sound_token(object),
        _ => object_token(object),
    }
}

/// A counting question over a list of events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub events: Vec<Event>,
    pub target_object: u8,
    /// `Audio` or `Visual`; never `Both`.
    pub target_modality: Modality,
    pub ground_truth_answer: u32,
}

impl Scene {
    /// Builds a scene and derives its answer.
    pub fn new(events: Vec<Event>, target_object: u8, target_modality: Modality) -> Self {
        let mut scene = Self { events, target_object, target_modality, ground_truth_answer: 0 };
        scene.ground_truth_answer = scene.matching_events().count() as u32;
        scene
    }

    pub fn matches(&self, e: &Event) -> bool {
        e.object == self.target_object && e.modality.includes(self.target_modality)
    }

    pub fn matching_events(&self) -> impl Iterator<Item = &Event> + '_ {
        self.events.iter().filter(move |e| self.matches(e))
    }

    pub fn target_cue(&self) -> Token {
        cue_token(self.target_object, self.target_modality)
    }

    pub fn target_object_token(&self) -> Token {
        object_token(self.target_object)
    }

    /// Region of the first matching event.
    pub fn target_region(&self) -> Option<u8> {
        self.matching_events().next().map(|e| e.region)
    }

    /// Whether any matching event sits in each region.
    pub fn regions_with_match(&self) -> [bool; NUM_REGIONS] {
        let mut out = [false; NUM_REGIONS];
        for e in self.matching_events() {
            out[usize::from(e.region)] = true;
        }
        out
    }

    /// Number of events a reasoning chain would count after anchoring on
    /// `cue`: a sound token selects heard events of that object, an object
    /// token selects seen ones. Other tokens select nothing.
    pub fn evidence_count(&self, cue: Token) -> Option<u32> {
        let (object, modality) = match cue.kind() {
            TokenKind::Sound(o) => (o, Modality::Audio),
            TokenKind::Object(o) => (o, Modality::Visual),
            _ => return None,
        };
        Some(self.events.iter().filter(|e| e.object == object && e.modality.includes(modality)).count() as u32)
    }

    /// Clues an audio-grounded chain should mention: sound and region of
    /// every heard matching event.
    pub fn audio_clues(&self) -> Vec<Token> {
        let mut out = Vec::new();
        for e in self.matching_events().filter(|e| e.modality.includes(Modality::Audio)) {
            push_unique(&mut out, sound_token(e.object));
            push_unique(&mut out, region_token(e.region));
        }
        out
    }

    /// Clues a visually grounded chain should mention: object and region of
    /// every seen matching event.
    pub fn visual_clues(&self) -> Vec<Token> {
        let mut out = Vec::new();
        for e in self.matching_events().filter(|e| e.modality.includes(Modality::Visual)) {
            push_unique(&mut out, object_token(e.object));
            push_unique(&mut out, region_token(e.region));
        }
        out
    }

    /// All clue tokens in event order, target cue first.
    pub fn clue_tokens(&self) -> Vec<Token> {
        let mut out = vec![self.target_cue()];
        let other = match self.target_modality {
            Modality::Audio => Modality::Visual,
            _ => Modality::Audio,
        };
        for e in self.matching_events() {
            push_unique(&mut out, cue_token(e.object, self.target_modality));
            push_unique(&mut out, region_token(e.region));
            if e.modality == Modality::Both {
                push_unique(&mut out, cue_token(e.object, other));
            }
        }
        out
    }
}

fn push_unique(v: &mut Vec<Token>, t: Token) {
    if !v.contains(&t) {
        v.push(t);
    }
}

/// Knobs for [`generate_dataset_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Probability that a non-matching event reuses the target object under
    /// the other modality, which punishes anchoring on the wrong cue.
    pub distractor_density: f64,
    pub min_events: usize,
    pub max_events: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { distractor_density: 0.5, min_events: 1, max_events: MAX_EVENTS }
    }
}

/// Deterministic dataset of `n` prompts with ids `0..n`.
pub fn generate_dataset(n: usize, seed: u64) -> Vec<PromptRecord> {
    generate_dataset_with(n, seed, &DatasetConfig::default())
}

pub fn generate_dataset_with(n: usize, seed: u64, cfg: &DatasetConfig) -> Vec<PromptRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let scene = random_scene(&mut rng, cfg);
            PromptRecord::new(i as u64, scene)
        })
        .collect()
}

fn random_scene(rng: &mut ChaCha8Rng, cfg: &DatasetConfig) -> Scene {
    let target_object = rng.gen_range(0..NUM_OBJECTS as u8);
    let target_modality = if rng.gen_bool(0.5) { Modality::Audio } else { Modality::Visual };
    let other = if target_modality == Modality::Audio { Modality::Visual } else { Modality::Audio };
    let lo = cfg.min_events.clamp(1, MAX_EVENTS);
    let hi = cfg.max_events.clamp(lo, MAX_EVENTS);
    let n_events = rng.gen_range(lo..=hi);
    let n_match = rng.gen_range(1..=n_events);

    let mut events = Vec::with_capacity(n_events);
    for _ in 0..n_match {
        let modality = if rng.gen_bool(0.5) { target_modality } else { Modality::Both };
        events.push(Event { object: target_object, modality, region: rng.gen_range(0..NUM_REGIONS as u8) });
    }
    for _ in n_match..n_events {
        let region = rng.gen_range(0..NUM_REGIONS as u8);
        if rng.gen_bool(cfg.distractor_density) {
            events.push(Event { object: target_object, modality: other, region });
        } else {
            let mut object = rng.gen_range(0..NUM_OBJECTS as u8 - 1);
            if object >= target_object {
                object += 1;
            }
            let modality = [Modality::Audio, Modality::Visual, Modality::Both][rng.gen_range(0..3)];
            events.push(Event { object, modality, region });
        }
    }
    events.shuffle(rng);
    Scene::new(events, target_object, target_modality)
}

/// Reads the numeral of the first `<answer>` block. The block may also
/// name regions; anything else in it makes the answer unreadable.
pub fn extract_answer(tokens: &[Token]) -> Option<u32> {
    answer_block(tokens).and_then(parse_answer_content)
}

/// Contents of the first `<answer> ... </answer>` block, if closed.
pub fn answer_block(tokens: &[Token]) -> Option<&[Token]> {
    let open = tokens.iter().position(|&t| t == vocab::ANSWER_OPEN)?;
    let rest = &tokens[open + 1..];
    let close = rest.iter().position(|&t| t == vocab::ANSWER_CLOSE)?;
    Some(&rest[..close])
}

fn parse_answer_content(content: &[Token]) -> Option<u32> {
    let mut answer = None;
    for t in content {
        match t.kind() {
            TokenKind::Numeral(n) if answer.is_none() => answer = Some(n),
            TokenKind::Region(_) => {}
            _ => return None,
        }
    }
    answer
}

/// Minimal well-formed answer block for `k`.
pub fn compose_answer(k: u32) -> Vec<Token> {
    vec![vocab::ANSWER_OPEN, Token::numeral(k), vocab::ANSWER_CLOSE]
}
