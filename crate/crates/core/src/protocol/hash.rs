//! Seeded Toeplitz hashing over GF(2), used both for key verification and
//! for privacy amplification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn pack_bits(bits: &[bool]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

/// `m x n` Toeplitz matrix `T[i][j] = s[i + n - 1 - j]` defined by
/// `n + m - 1` seed bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Toeplitz {
    input_len: usize,
    output_len: usize,
    /// Seed bits, padded with one spare zero word for unaligned reads.
    seed: Vec<u64>,
}

impl Toeplitz {
    pub fn from_seed(seed: u64, input_len: usize, output_len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nbits = (input_len + output_len).saturating_sub(1);
        let nwords = nbits.div_ceil(64);
        let mut words: Vec<u64> = (0..nwords).map(|_| rng.random()).collect();
        if !nbits.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (nbits % 64)) - 1;
            }
        }
        words.push(0);
        Self {
            input_len,
            output_len,
            seed: words,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    fn seed_word_at(&self, bit: usize) -> u64 {
        let (w, s) = (bit / 64, bit % 64);
        let lo = self.seed[w] >> s;
        if s == 0 {
            lo
        } else {
            lo | self.seed.get(w + 1).copied().unwrap_or(0) << (64 - s)
        }
    }

    /// `T x` for a key of exactly `input_len` bits.
    pub fn apply(&self, key: &[bool]) -> Vec<bool> {
        assert_eq!(key.len(), self.input_len, "key length does not match hash input");
        // row i is seed bits i..i+n against the key read backwards
        let reversed: Vec<bool> = key.iter().rev().copied().collect();
        let x = pack_bits(&reversed);
        (0..self.output_len)
            .map(|i| {
                let acc = x
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (w, &xw)| acc ^ (self.seed_word_at(i + 64 * w) & xw));
                acc.count_ones() % 2 == 1
            })
            .collect()
    }
}

/// 64-bit digest for comparing keys over the public channel.
pub fn verification_hash(key: &[bool], seed: u64) -> u64 {
    Toeplitz::from_seed(seed, key.len(), 64)
        .apply(key)
        .iter()
        .enumerate()
        .fold(0u64, |h, (i, &b)| h | (b as u64) << i)
}
