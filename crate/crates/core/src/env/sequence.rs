//! Sequence generation under four schemes with pluggable rewards.
//!
//! Tokens are indices into a vocabulary of size `m`. For bit sequences
//! each token is a `k`-bit word, expanded most significant bit first.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Environment;
use crate::error::{config, contract, Error, Result};
use crate::metrics::hamming;
use crate::rng::RngKey;
use rand::seq::index::sample as sample_indices;
use rand::Rng;

pub const EMPTY: u8 = u8::MAX;

/// Symbols used for tokens in reward-table files.
pub const TABLE_ALPHABET: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeqScheme {
    AutoregressiveFixed,
    AutoregressiveVariable,
    PrependAppend,
    NonAutoregressive,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SeqState {
    /// Filled prefix for the autoregressive and prepend/append schemes;
    /// one slot per position (with [`EMPTY`]) for the non-autoregressive one.
    pub tokens: Vec<u8>,
    pub stopped: bool,
}

impl SeqState {
    pub fn filled(&self) -> usize {
        self.tokens.iter().filter(|&&t| t != EMPTY).count()
    }
}

/// Mode set for the Hamming-mode reward on bit strings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSet {
    pub modes: Vec<Vec<u8>>,
    pub beta: f64,
}

pub const SEED_WORDS: [&str; 5] = ["00000000", "11111111", "11110000", "00001111", "00111100"];
pub const NUM_MODES: usize = 60;

fn bits_of(word: &str) -> Vec<u8> {
    word.bytes().map(|b| b - b'0').collect()
}

/// Draws [`NUM_MODES`] modes, each a concatenation of `n/8` seed words
/// sampled with replacement. Repeated modes are redrawn whenever enough
/// distinct concatenations exist; for `n = 8` only five do, so repeats stay.
pub fn generate_modes(n: usize, beta: f64, key: RngKey) -> Result<ModeSet> {
    if n == 0 || n % 8 != 0 {
        return config(format!("mode length must be a positive multiple of 8, got {n}"));
    }
    let words: Vec<Vec<u8>> = SEED_WORDS.iter().map(|w| bits_of(w)).collect();
    let blocks = n / 8;
    let distinct = 5f64.powi(blocks as i32);
    let dedupe = distinct >= NUM_MODES as f64;
    let mut rng = key.rng();
    let mut modes: Vec<Vec<u8>> = Vec::with_capacity(NUM_MODES);
    while modes.len() < NUM_MODES {
        let m: Vec<u8> = (0..blocks)
            .flat_map(|_| words[rng.random_range(0..words.len())].clone())
            .collect();
        if dedupe && modes.contains(&m) {
            continue;
        }
        modes.push(m);
    }
    Ok(ModeSet { modes, beta })
}

/// For every mode and every `0 ≤ i < n`, the mode with `i` distinct random
/// bits flipped.
pub fn generate_test_set(modes: &ModeSet, key: RngKey) -> Vec<Vec<u8>> {
    let mut rng = key.rng();
    let mut out = Vec::new();
    for m in &modes.modes {
        let n = m.len();
        for i in 0..n {
            let mut x = m.clone();
            for p in sample_indices(&mut rng, n, i) {
                x[p] ^= 1;
            }
            out.push(x);
        }
    }
    out
}

/// `−β · min_{x' ∈ M} d(x, x') / n`.
pub fn mode_reward_log(bits: &[u8], modes: &ModeSet) -> Result<f64> {
    let mut best = usize::MAX;
    for m in &modes.modes {
        best = best.min(hamming(bits, m)?);
    }
    Ok(-modes.beta * best as f64 / bits.len() as f64)
}

/// Rewards stored per complete sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    pub vocab: usize,
    pub length: usize,
    pub entries: HashMap<Vec<u8>, f64>,
    pub r_min: Option<f64>,
    /// Misses are errors when strict, otherwise they score `r_min`.
    pub strict: bool,
}

impl RewardTable {
    pub fn get(&self, tokens: &[u8]) -> Result<f64> {
        let r = match self.entries.get(tokens) {
            Some(&r) => r,
            None if !self.strict && self.r_min.is_some() => 0.0,
            None => return Err(Error::Missing(format!("sequence {} not in reward table", encode_tokens(tokens)))),
        };
        Ok(match self.r_min {
            Some(lo) => r.max(lo),
            None => r,
        })
    }

    pub fn log_reward(&self, tokens: &[u8]) -> Result<f64> {
        let r = self.get(tokens)?;
        if r <= 0.0 {
            return Err(Error::Numeric(format!("zero reward for {}", encode_tokens(tokens))));
        }
        Ok(r.ln())
    }

    /// Random rewards `exp(scale · u)`, `u ~ U(0,1)`, over every sequence of
    /// exactly `length` tokens.
    pub fn synthetic(vocab: usize, length: usize, scale: f64, key: RngKey) -> Result<Self> {
        let total = (vocab as u128).checked_pow(length as u32).unwrap_or(u128::MAX);
        if vocab == 0 || vocab > TABLE_ALPHABET.len() || total > 1 << 22 {
            return config("synthetic table too large or vocabulary out of range");
        }
        let mut rng = key.rng();
        let mut entries = HashMap::with_capacity(total as usize);
        let mut t = vec![0u8; length];
        for _ in 0..total {
            entries.insert(t.clone(), (scale * rng.random::<f64>()).exp());
            for i in (0..length).rev() {
                t[i] += 1;
                if (t[i] as usize) < vocab {
                    break;
                }
                t[i] = 0;
            }
        }
        Ok(RewardTable { vocab, length, entries, r_min: None, strict: true })
    }

    pub fn to_text(&self) -> String {
        let mut keys: Vec<&Vec<u8>> = self.entries.keys().collect();
        keys.sort();
        let mut s = format!("vocab={} length={}\n", self.vocab, self.length);
        for k in keys {
            let _ = writeln!(s, "{},{}", encode_tokens(k), self.entries[k]);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn encode_tokens(tokens: &[u8]) -> String {
    tokens
        .iter()
        .map(|&t| TABLE_ALPHABET.as_bytes().get(t as usize).map_or('?', |&c| c as char))
        .collect()
}

fn parse_err<T>(path: &Path, line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { path: path.to_path_buf(), line, msg: msg.into() })
}

fn header_field(path: &Path, field: &str, name: &str) -> Result<String> {
    match field.split_once('=') {
        Some((k, v)) if k == name => Ok(v.to_string()),
        _ => parse_err(path, 1, format!("expected `{name}=...`, found `{field}`")),
    }
}

/// Parses a reward table: header `vocab=<m> length=<n>`, then
/// `sequence,reward` rows.
pub fn parse_reward_table(path: &Path, text: &str) -> Result<RewardTable> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return parse_err(path, 1, "empty file");
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 2 {
        return parse_err(path, 1, "header must be `vocab=<m> length=<n>`");
    }
    let num = |f: &str, name: &str| -> Result<usize> {
        header_field(path, f, name)?
            .parse()
            .or_else(|_| parse_err(path, 1, format!("bad {name}")))
    };
    let vocab = num(fields[0], "vocab")?;
    let length = num(fields[1], "length")?;
    if vocab == 0 || vocab > TABLE_ALPHABET.len() || length == 0 {
        return parse_err(path, 1, "vocab must be in 1..=36 and length positive");
    }
    let mut entries = HashMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((seq, rew)) = line.split_once(',') else {
            return parse_err(path, lineno, "expected `sequence,reward`");
        };
        let mut tokens = Vec::with_capacity(seq.len());
        for c in seq.chars() {
            match TABLE_ALPHABET.find(c.to_ascii_uppercase()) {
                Some(t) if t < vocab => tokens.push(t as u8),
                _ => return parse_err(path, lineno, format!("symbol `{c}` outside the vocabulary")),
            }
        }
        if tokens.is_empty() || tokens.len() > length {
            return parse_err(path, lineno, format!("sequence length {} not in 1..={length}", tokens.len()));
        }
        let r: f64 = rew
            .trim()
            .parse()
            .or_else(|_| parse_err(path, lineno, format!("bad reward `{rew}`")))?;
        if !(r.is_finite() && r >= 0.0) {
            return parse_err(path, lineno, "rewards must be finite and nonnegative");
        }
        if entries.insert(tokens, r).is_some() {
            return parse_err(path, lineno, format!("duplicate sequence `{seq}`"));
        }
    }
    Ok(RewardTable { vocab, length, entries, r_min: None, strict: true })
}

pub fn load_reward_table(path: &Path) -> Result<RewardTable> {
    let text = std::fs::read_to_string(path)?;
    parse_reward_table(path, &text)
}

#[derive(Clone, Debug)]
pub enum SeqReward {
    /// Hamming-mode reward on the bit expansion of the tokens.
    Modes { modes: Arc<ModeSet>, word_bits: usize },
    Table(Arc<RewardTable>),
}

#[derive(Clone, Debug)]
pub struct SequenceEnv {
    pub scheme: SeqScheme,
    /// Maximum number of tokens.
    pub length: usize,
    pub vocab: usize,
    pub reward: SeqReward,
}

impl SequenceEnv {
    pub fn new(scheme: SeqScheme, length: usize, vocab: usize, reward: SeqReward) -> Result<Self> {
        if length == 0 || vocab == 0 || vocab >= EMPTY as usize {
            return config(format!("sequence env needs length >= 1 and vocab in 1..255 (got {length}, {vocab})"));
        }
        match &reward {
            SeqReward::Modes { modes, word_bits } => {
                if *word_bits == 0 || *word_bits > 7 || vocab != 1 << word_bits {
                    return config("bit-sequence vocab must be 2^k with 1 <= k <= 7");
                }
                if modes.modes.iter().any(|m| m.len() != length * word_bits) {
                    return config("mode length must equal the sequence length in bits");
                }
            }
            SeqReward::Table(t) => {
                if t.vocab != vocab || t.length != length {
                    return config(format!(
                        "reward table is vocab={} length={}, env is vocab={vocab} length={length}",
                        t.vocab, t.length
                    ));
                }
            }
        }
        Ok(SequenceEnv { scheme, length, vocab, reward })
    }

    /// Bit sequence of `n` bits built from `k`-bit words.
    pub fn bitseq(scheme: SeqScheme, n: usize, k: usize, modes: Arc<ModeSet>) -> Result<Self> {
        if k == 0 || n % k != 0 {
            return config(format!("word size k={k} must divide n={n}"));
        }
        if scheme == SeqScheme::AutoregressiveVariable {
            return config("mode rewards are defined for full-length bit sequences only");
        }
        Self::new(scheme, n / k, 1 << k, SeqReward::Modes { modes, word_bits: k })
    }

    pub fn word_bits(&self) -> Option<usize> {
        match &self.reward {
            SeqReward::Modes { word_bits, .. } => Some(*word_bits),
            SeqReward::Table(_) => None,
        }
    }

    /// Expands tokens to bits, most significant first.
    pub fn to_bits(&self, tokens: &[u8]) -> Vec<u8> {
        let k = self.word_bits().unwrap_or(8);
        tokens
            .iter()
            .flat_map(|&t| (0..k).rev().map(move |b| (t >> b) & 1))
            .collect()
    }

    /// Packs bits into tokens.
    pub fn from_bits(&self, bits: &[u8]) -> Vec<u8> {
        let k = self.word_bits().unwrap_or(8);
        bits.chunks(k).map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | b)).collect()
    }

    /// The terminal state holding exactly `tokens`.
    pub fn terminal_state(&self, tokens: Vec<u8>) -> SeqState {
        SeqState {
            stopped: self.scheme == SeqScheme::AutoregressiveVariable,
            tokens,
        }
    }

    pub fn log_reward_of(&self, tokens: &[u8]) -> Result<f64> {
        match &self.reward {
            SeqReward::Modes { modes, .. } => mode_reward_log(&self.to_bits(tokens), modes),
            SeqReward::Table(t) => t.log_reward(tokens),
        }
    }

    fn content(&self, s: &SeqState) -> Vec<u8> {
        s.tokens.iter().copied().filter(|&t| t != EMPTY).collect()
    }

    fn transition_err<T>(&self, a: &SeqState, act: usize, b: &SeqState) -> Result<T> {
        contract(format!("{a:?} / {act} / {b:?} is not a transition"))
    }
}

impl Environment for SequenceEnv {
    type State = SeqState;

    fn num_actions(&self) -> usize {
        match self.scheme {
            SeqScheme::AutoregressiveFixed => self.vocab,
            SeqScheme::AutoregressiveVariable => self.vocab + 1,
            SeqScheme::PrependAppend => 2 * self.vocab,
            SeqScheme::NonAutoregressive => self.length * self.vocab,
        }
    }

    fn num_backward_actions(&self) -> usize {
        match self.scheme {
            SeqScheme::AutoregressiveFixed => 1,
            SeqScheme::AutoregressiveVariable => 2,
            SeqScheme::PrependAppend => 2,
            SeqScheme::NonAutoregressive => self.length,
        }
    }

    fn obs_dim(&self) -> usize {
        self.length * (self.vocab + 1) + 1
    }

    fn max_steps(&self) -> usize {
        match self.scheme {
            SeqScheme::AutoregressiveVariable => self.length + 1,
            _ => self.length,
        }
    }

    fn stop_action(&self) -> Option<usize> {
        (self.scheme == SeqScheme::AutoregressiveVariable).then_some(self.vocab)
    }

    fn initial_state(&self) -> SeqState {
        let tokens = match self.scheme {
            SeqScheme::NonAutoregressive => vec![EMPTY; self.length],
            _ => Vec::new(),
        };
        SeqState { tokens, stopped: false }
    }

    fn is_terminal(&self, s: &SeqState) -> bool {
        match self.scheme {
            SeqScheme::AutoregressiveVariable => s.stopped,
            SeqScheme::NonAutoregressive => s.tokens.iter().all(|&t| t != EMPTY),
            _ => s.tokens.len() == self.length,
        }
    }

    fn forward_mask(&self, s: &SeqState, out: &mut [bool]) {
        out.fill(false);
        if self.is_terminal(s) {
            return;
        }
        let m = self.vocab;
        match self.scheme {
            SeqScheme::AutoregressiveFixed => out.fill(true),
            SeqScheme::AutoregressiveVariable => {
                let room = s.tokens.len() < self.length;
                out[..m].fill(room);
                out[m] = !s.tokens.is_empty();
            }
            SeqScheme::PrependAppend => {
                out[..m].fill(true);
                out[m..].fill(!s.tokens.is_empty());
            }
            SeqScheme::NonAutoregressive => {
                for (p, &t) in s.tokens.iter().enumerate() {
                    if t == EMPTY {
                        out[p * m..(p + 1) * m].fill(true);
                    }
                }
            }
        }
    }

    fn backward_mask(&self, s: &SeqState, out: &mut [bool]) {
        out.fill(false);
        match self.scheme {
            SeqScheme::AutoregressiveFixed => out[0] = !s.tokens.is_empty(),
            SeqScheme::AutoregressiveVariable => {
                if s.stopped {
                    out[1] = true;
                } else {
                    out[0] = !s.tokens.is_empty();
                }
            }
            SeqScheme::PrependAppend => {
                out[0] = !s.tokens.is_empty();
                out[1] = s.tokens.len() > 1;
            }
            SeqScheme::NonAutoregressive => {
                for (o, &t) in out.iter_mut().zip(&s.tokens) {
                    *o = t != EMPTY;
                }
            }
        }
    }

    fn apply_forward(&self, s: &SeqState, a: usize) -> SeqState {
        let m = self.vocab;
        let mut n = s.clone();
        match self.scheme {
            SeqScheme::AutoregressiveFixed => n.tokens.push(a as u8),
            SeqScheme::AutoregressiveVariable => {
                if a == m {
                    n.stopped = true;
                } else {
                    n.tokens.push(a as u8);
                }
            }
            SeqScheme::PrependAppend => {
                if a < m {
                    n.tokens.insert(0, a as u8);
                } else {
                    n.tokens.push((a - m) as u8);
                }
            }
            SeqScheme::NonAutoregressive => n.tokens[a / m] = (a % m) as u8,
        }
        n
    }

    fn apply_backward(&self, s: &SeqState, b: usize) -> SeqState {
        let mut p = s.clone();
        match self.scheme {
            SeqScheme::AutoregressiveFixed => {
                p.tokens.pop();
            }
            SeqScheme::AutoregressiveVariable => {
                if b == 1 {
                    p.stopped = false;
                } else {
                    p.tokens.pop();
                }
            }
            SeqScheme::PrependAppend => {
                if b == 0 {
                    p.tokens.remove(0);
                } else {
                    p.tokens.pop();
                }
            }
            SeqScheme::NonAutoregressive => p.tokens[b] = EMPTY,
        }
        p
    }

    fn backward_action(&self, s: &SeqState, a: usize, next: &SeqState) -> Result<usize> {
        let m = self.vocab;
        if a >= self.num_actions() || self.apply_forward(s, a) != *next {
            return self.transition_err(s, a, next);
        }
        Ok(match self.scheme {
            SeqScheme::AutoregressiveFixed => 0,
            SeqScheme::AutoregressiveVariable => usize::from(a == m),
            SeqScheme::PrependAppend => usize::from(a >= m),
            SeqScheme::NonAutoregressive => a / m,
        })
    }

    fn forward_action(&self, child: &SeqState, b: usize, parent: &SeqState) -> Result<usize> {
        let m = self.vocab;
        if b >= self.num_backward_actions() || self.apply_backward(child, b) != *parent {
            return self.transition_err(child, b, parent);
        }
        let last = |s: &SeqState| s.tokens.last().copied().map(usize::from);
        let a = match (self.scheme, b) {
            (SeqScheme::AutoregressiveFixed, _) | (SeqScheme::AutoregressiveVariable, 0) => last(child),
            (SeqScheme::AutoregressiveVariable, _) => Some(m),
            (SeqScheme::PrependAppend, 0) => child.tokens.first().map(|&t| t as usize),
            (SeqScheme::PrependAppend, _) => last(child).map(|t| m + t),
            (SeqScheme::NonAutoregressive, p) => Some(p * m + child.tokens[p] as usize),
        };
        a.map_or_else(|| self.transition_err(child, b, parent), Ok)
    }

    fn log_reward(&self, s: &SeqState) -> Result<f64> {
        let tokens = self.content(s);
        if tokens.is_empty() {
            return contract("reward of the empty sequence");
        }
        self.log_reward_of(&tokens)
    }

    fn encode_obs(&self, s: &SeqState, out: &mut [f64]) {
        out.fill(0.0);
        let w = self.vocab + 1;
        for p in 0..self.length {
            let t = s.tokens.get(p).copied().unwrap_or(EMPTY);
            let slot = if t == EMPTY { self.vocab } else { t as usize };
            out[p * w + slot] = 1.0;
        }
        out[self.length * w] = s.filled() as f64 / self.length as f64;
    }

    fn terminal_key(&self, s: &SeqState) -> Vec<u8> {
        self.content(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{backward_rollout, forward_rollout, reset, Environment};
    use crate::policy::UniformPolicy;
    use proptest::prelude::*;
    use rand::Rng;

    fn modes8() -> Arc<ModeSet> {
        Arc::new(generate_modes(8, 3.0, RngKey::new(0)).unwrap())
    }

    fn bitseq(scheme: SeqScheme, n: usize, k: usize) -> SequenceEnv {
        let modes = Arc::new(generate_modes(n.div_ceil(8) * 8, 3.0, RngKey::new(0)).unwrap());
        // truncate modes to n bits for small test envs
        let modes = Arc::new(ModeSet {
            modes: modes.modes.iter().map(|m| m[..n].to_vec()).collect(),
            beta: 3.0,
        });
        SequenceEnv::bitseq(scheme, n, k, modes).unwrap()
    }

    fn table_env(scheme: SeqScheme, vocab: usize, length: usize) -> SequenceEnv {
        let t = RewardTable::synthetic(vocab, length, 2.0, RngKey::new(5)).unwrap();
        SequenceEnv::new(scheme, length, vocab, SeqReward::Table(Arc::new(t))).unwrap()
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(b"000", b"001").unwrap(), 1);
    }

    #[test]
    fn mode_reward_examples() {
        let m = ModeSet { modes: vec![vec![0; 8]], beta: 3.0 };
        assert_eq!(mode_reward_log(&[0; 8], &m).unwrap(), 0.0);
        assert_eq!(mode_reward_log(&[1; 8], &m).unwrap(), -3.0);
        assert_eq!(mode_reward_log(&[1, 1, 0, 0, 0, 0, 0, 0], &m).unwrap(), -0.75);
    }

    #[test]
    fn mode_generation() {
        let m = generate_modes(8, 3.0, RngKey::new(1)).unwrap();
        assert_eq!(m.modes.len(), 60);
        let words: Vec<Vec<u8>> = SEED_WORDS.iter().map(|w| bits_of(w)).collect();
        assert!(m.modes.iter().all(|x| words.contains(x)));
        // 5^3 = 125 distinct concatenations, so repeats are redrawn
        let m24 = generate_modes(24, 3.0, RngKey::new(1)).unwrap();
        let mut distinct = m24.modes.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 60);
        assert!(generate_modes(12, 3.0, RngKey::new(1)).is_err());
        let m16 = generate_modes(16, 3.0, RngKey::new(1)).unwrap();
        assert_eq!(m16.modes.len(), 60);

        let test = generate_test_set(&m16, RngKey::new(2));
        assert_eq!(test.len(), 60 * 16);
        assert!(test.iter().all(|x| x.len() == 16));
        for (j, mode) in m16.modes.iter().enumerate() {
            for i in 0..16 {
                assert_eq!(hamming(&test[j * 16 + i], mode).unwrap(), i);
            }
            assert!(test.contains(mode));
        }
    }

    #[test]
    fn reset_gives_empty_tokens() {
        let env = bitseq(SeqScheme::NonAutoregressive, 8, 2);
        let (_, st) = reset(&env, 2, RngKey::new(0)).unwrap();
        assert!(st.states[0].tokens.iter().all(|&t| t == EMPTY));
        assert_eq!(st.states[0].tokens.len(), 4);
    }

    #[test]
    fn action_space_sizes() {
        let nar = bitseq(SeqScheme::NonAutoregressive, 4, 2);
        assert_eq!(nar.num_actions(), 8);
        assert_eq!(table_env(SeqScheme::AutoregressiveFixed, 4, 3).num_actions(), 4);
        assert_eq!(table_env(SeqScheme::AutoregressiveVariable, 4, 3).num_actions(), 5);
        assert_eq!(table_env(SeqScheme::PrependAppend, 4, 3).num_actions(), 8);
    }

    #[test]
    fn nar_clear_position_and_backward_action() {
        let env = bitseq(SeqScheme::NonAutoregressive, 8, 2);
        let s = env.initial_state();
        let a = 2 * 4 + 3;
        let n = env.apply_forward(&s, a);
        assert_eq!(n.tokens[2], 3);
        assert_eq!(env.backward_action(&s, a, &n).unwrap(), 2);
        let full = SeqState { tokens: vec![1, 2, 3, 0], stopped: false };
        let cleared = env.try_backward(&full, 3).unwrap();
        assert_eq!(cleared.tokens[3], EMPTY);
    }

    #[test]
    fn prepend_append_examples() {
        let env = table_env(SeqScheme::PrependAppend, 2, 3);
        let a = SeqState { tokens: vec![0], stopped: false };
        assert_eq!(env.apply_forward(&a, 1).tokens, vec![1, 0]);
        assert_eq!(env.apply_forward(&a, 2 + 1).tokens, vec![0, 1]);
        assert_eq!(env.backward_action(&a, 1, &env.apply_forward(&a, 1)).unwrap(), 0);
    }

    #[test]
    fn prepend_append_round_trips_every_action_on_length_three() {
        let env = table_env(SeqScheme::PrependAppend, 3, 5);
        for code in 0..27u32 {
            let tokens = vec![(code % 3) as u8, (code / 3 % 3) as u8, (code / 9) as u8];
            let s = SeqState { tokens, stopped: false };
            for a in 0..env.num_actions() {
                let n = env.try_forward(&s, a).unwrap();
                let b = env.backward_action(&s, a, &n).unwrap();
                assert_eq!(env.try_backward(&n, b).unwrap(), s);
                assert_eq!(env.forward_action(&n, b, &s).unwrap(), a);
            }
        }
    }

    #[test]
    fn variable_length_stop_rules() {
        let env = table_env(SeqScheme::AutoregressiveVariable, 2, 3);
        let full = SeqState { tokens: vec![0, 1, 1], stopped: false };
        assert_eq!(env.forward_mask_vec(&full), vec![false, false, true]);
        assert_eq!(env.forward_mask_vec(&env.initial_state()), vec![true, true, false]);
        let t = env.apply_forward(&full, 2);
        assert!(env.is_terminal(&t));
        assert_eq!(env.backward_mask_vec(&t), vec![false, true]);
    }

    #[test]
    fn nar_trajectories_have_fixed_length() {
        let env = bitseq(SeqScheme::NonAutoregressive, 4, 2);
        let p = UniformPolicy { n_fwd: env.num_actions() };
        let b = forward_rollout(&env, &p, 64, RngKey::new(3), 0.0).unwrap();
        assert!(b.lengths.iter().all(|&l| l == 2));
    }

    #[test]
    fn autoregressive_backward_rollout_is_deterministic() {
        let env = table_env(SeqScheme::AutoregressiveFixed, 3, 4);
        let p = UniformPolicy { n_fwd: 3 };
        let x = env.terminal_state(vec![2, 0, 1, 1]);
        let a = backward_rollout(&env, &p, &[x.clone(), x.clone()], RngKey::new(1)).unwrap();
        let b = backward_rollout(&env, &p, &[x], RngKey::new(9)).unwrap();
        assert_eq!(a.states[0], a.states[1]);
        assert_eq!(a.states[0], b.states[0]);
        assert_eq!((0..4).map(|t| a.fwd_action(0, t)).collect::<Vec<_>>(), vec![2, 0, 1, 1]);
    }

    #[test]
    fn prepend_append_path_count() {
        for len in 1..=4usize {
            let env = table_env(SeqScheme::PrependAppend, 2, len);
            let x = env.terminal_state((0..len).map(|i| (i % 2) as u8).collect());
            // count backward paths by recursion over legal backward actions
            fn count(env: &SequenceEnv, s: &SeqState) -> usize {
                if env.is_initial(s) {
                    return 1;
                }
                let m = env.backward_mask_vec(s);
                (0..m.len()).filter(|&b| m[b]).map(|b| count(env, &env.apply_backward(s, b))).sum()
            }
            assert_eq!(count(&env, &x), 1 << (len - 1));
        }
    }

    #[test]
    fn reward_table_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let mut text = String::from("vocab=4 length=2\n");
        let mut expected = HashMap::new();
        for a in 0..4u8 {
            for b in 0..4u8 {
                let r = 0.1 * (a * 4 + b + 1) as f64;
                text.push_str(&format!("{},{}\n", encode_tokens(&[a, b]), r));
                expected.insert(vec![a, b], r);
            }
        }
        std::fs::write(&path, &text).unwrap();
        let t = load_reward_table(&path).unwrap();
        assert_eq!(t.entries.len(), 16);
        for (k, v) in &expected {
            assert_eq!(t.get(k).unwrap(), *v);
        }
        assert!(matches!(t.get(&[0]), Err(Error::Missing(_))));

        let dup = format!("{text}00,1.0\n");
        assert!(matches!(parse_reward_table(&path, &dup), Err(Error::Parse { line: 18, .. })));
        assert!(parse_reward_table(&path, "vocab=2 length=2\n05,1.0\n").is_err());
        assert!(parse_reward_table(&path, "vocab=2\n").is_err());

        let mut clamp = parse_reward_table(&path, "vocab=2 length=1\n0,1e-9\n").unwrap();
        clamp.r_min = Some(1e-3);
        assert_eq!(clamp.get(&[0]).unwrap(), 1e-3);
        clamp.strict = false;
        assert_eq!(clamp.get(&[1]).unwrap(), 1e-3);

        let synth = RewardTable::synthetic(3, 2, 1.0, RngKey::new(0)).unwrap();
        let back = parse_reward_table(&path, &synth.to_text()).unwrap();
        assert_eq!(back, synth);
    }

    #[test]
    fn bits_round_trip() {
        let env = bitseq(SeqScheme::NonAutoregressive, 8, 2);
        assert_eq!(env.to_bits(&[0b10, 0b01]), vec![1, 0, 0, 1]);
        assert_eq!(env.from_bits(&[1, 0, 0, 1]), vec![2, 1]);
        let env8 = SequenceEnv::bitseq(SeqScheme::AutoregressiveFixed, 8, 1, modes8()).unwrap();
        assert_eq!(env8.num_actions(), 2);
    }

    proptest! {
        #[test]
        fn round_trip_fuzz(seed in 0u64..1000, scheme_ix in 0usize..4) {
            let schemes = [
                SeqScheme::AutoregressiveFixed,
                SeqScheme::AutoregressiveVariable,
                SeqScheme::PrependAppend,
                SeqScheme::NonAutoregressive,
            ];
            let env = table_env(schemes[scheme_ix], 3, 4);
            let mut rng = RngKey::new(seed).rng();
            let mut s = env.initial_state();
            while !env.is_terminal(&s) {
                let m = env.forward_mask_vec(&s);
                let legal: Vec<usize> = (0..m.len()).filter(|&a| m[a]).collect();
                let a = legal[rng.random_range(0..legal.len())];
                let n = env.try_forward(&s, a).unwrap();
                let b = env.backward_action(&s, a, &n).unwrap();
                prop_assert_eq!(&env.try_backward(&n, b).unwrap(), &s);
                prop_assert_eq!(env.forward_action(&n, b, &s).unwrap(), a);
                s = n;
            }
        }
    }
}
