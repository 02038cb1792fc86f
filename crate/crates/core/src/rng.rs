//! Explicit-key random number generation.
//!
//! An [`RngKey`] is a 128-bit value. Every stochastic operation in the crate
//! takes a key instead of touching hidden global state. Keys are split or
//! folded to derive independent streams; drawing numbers from a key goes
//! through a ChaCha8 block function indexed by its internal counter, so the
//! same key always yields the same sequence.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generator returned by [`RngKey::rng`].
pub type KeyRng = ChaCha8Rng;

const DOMAIN_DRAW: u64 = 0;
const DOMAIN_SPLIT: u64 = 0x5350_4c49_5400_0001;
const DOMAIN_FOLD: u64 = 0x464f_4c44_0000_0002;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngKey(u128);

impl RngKey {
    /// Expands a 64-bit seed into a full key with SplitMix64.
    pub fn new(seed: u64) -> Self {
        let mut state = seed;
        let hi = splitmix64(&mut state);
        let lo = splitmix64(&mut state);
        RngKey(((hi as u128) << 64) | lo as u128)
    }

    pub fn from_raw(raw: u128) -> Self {
        RngKey(raw)
    }

    pub fn raw(self) -> u128 {
        self.0
    }

    fn cipher(self, domain: u64, data: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..16].copy_from_slice(&self.0.to_le_bytes());
        seed[16..24].copy_from_slice(&domain.to_le_bytes());
        seed[24..].copy_from_slice(&data.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    /// Generator for drawing values under this key.
    pub fn rng(self) -> KeyRng {
        self.cipher(DOMAIN_DRAW, 0)
    }

    pub fn split(self) -> (RngKey, RngKey) {
        let mut keys = self.split_n(2);
        let b = keys.pop().unwrap();
        let a = keys.pop().unwrap();
        (a, b)
    }

    pub fn split_n(self, n: usize) -> Vec<RngKey> {
        let mut rng = self.cipher(DOMAIN_SPLIT, 0);
        (0..n).map(|_| RngKey(next_u128(&mut rng))).collect()
    }

    /// Derives a key bound to `data` (an iteration number, a chain index, ...).
    pub fn fold_in(self, data: u64) -> RngKey {
        let mut rng = self.cipher(DOMAIN_FOLD, data);
        RngKey(next_u128(&mut rng))
    }
}

fn next_u128(rng: &mut ChaCha8Rng) -> u128 {
    let hi = rng.next_u64() as u128;
    let lo = rng.next_u64() as u128;
    (hi << 64) | lo
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) with 53 bits of precision.
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Samples an index from unnormalized nonnegative weights.
pub fn categorical(rng: &mut impl RngCore, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let target = uniform(rng) * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if target < acc {
                return i;
            }
        }
    }
    last
}
