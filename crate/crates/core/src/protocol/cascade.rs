//! CASCADE reconciliation. Bob drives: he asks for Alice's parities of
//! blocks of permuted positions, bisects every block whose parity differs
//! from his own, and after each correction revisits the blocks of earlier
//! passes that contain the flipped bit.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::channel::{ClassicalChannel, Message, MessageKind, Party};
use super::hash::verification_hash;
use super::ProtocolError;

pub const HASH_BITS: u64 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub passes: usize,
    /// First-pass block size is `block_factor / q`.
    pub block_factor: f64,
    pub min_block: usize,
    /// Passes appended when the verification hash still disagrees.
    pub max_extra_passes: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            passes: 4,
            block_factor: 0.73,
            min_block: 8,
            max_extra_passes: 4,
        }
    }
}

impl CascadeConfig {
    pub fn first_block(&self, n: usize, qber: f64) -> usize {
        let k = (self.block_factor / qber).round() as usize;
        k.min(n / 4).max(self.min_block).min(n.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutcome {
    pub corrected: Vec<bool>,
    pub leaked_bits: u64,
    pub passes_run: usize,
    pub parities_revealed: u64,
    pub hash_checks: u64,
}

struct Pass {
    perm: Vec<u32>,
    inv: Vec<u32>,
    block: usize,
}

impl Pass {
    fn new(n: usize, block: usize, index: usize, seed: u64) -> Self {
        let mut perm: Vec<u32> = (0..n as u32).collect();
        if index > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            perm.shuffle(&mut rng);
        }
        let mut inv = vec![0u32; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p as usize] = i as u32;
        }
        Self { perm, inv, block }
    }

    fn range(&self, j: usize) -> (usize, usize) {
        let s = j * self.block;
        (s, (s + self.block).min(self.perm.len()))
    }

    fn parity(&self, key: &[bool], s: usize, e: usize) -> bool {
        self.perm[s..e].iter().fold(false, |acc, &p| acc ^ key[p as usize])
    }
}

/// Where Bob's questions go: Alice over the live channel, or a recorded transcript.
trait AliceSide {
    fn parity(&mut self, passes: &[Pass], pass: usize, s: usize, e: usize) -> Result<bool, ProtocolError>;
    fn hash(&mut self, seed: u64) -> Result<u64, ProtocolError>;
}

fn encode_request(pass: usize, s: usize, e: usize) -> Vec<u8> {
    let mut v = vec![pass as u8];
    v.extend_from_slice(&(s as u32).to_le_bytes());
    v.extend_from_slice(&(e as u32).to_le_bytes());
    v
}

fn encode_hash(seed: u64, hash: u64) -> Vec<u8> {
    let mut v = seed.to_le_bytes().to_vec();
    v.extend_from_slice(&hash.to_le_bytes());
    v
}

struct Live<'a> {
    alice: &'a [bool],
    channel: &'a mut ClassicalChannel,
}

impl AliceSide for Live<'_> {
    fn parity(&mut self, passes: &[Pass], pass: usize, s: usize, e: usize) -> Result<bool, ProtocolError> {
        self.channel
            .send(MessageKind::ParityReq, Party::Bob, encode_request(pass, s, e), 0);
        let p = passes[pass].parity(self.alice, s, e);
        self.channel
            .send(MessageKind::ParityResp, Party::Alice, vec![p as u8], 1);
        Ok(p)
    }

    fn hash(&mut self, seed: u64) -> Result<u64, ProtocolError> {
        let h = verification_hash(self.alice, seed);
        self.channel
            .send(MessageKind::HashCheck, Party::Alice, encode_hash(seed, h), HASH_BITS);
        Ok(h)
    }
}

struct Replay<'a> {
    messages: std::slice::Iter<'a, Message>,
}

impl Replay<'_> {
    fn next(&mut self, kind: MessageKind) -> Result<&Message, ProtocolError> {
        for m in self.messages.by_ref() {
            if m.kind == kind {
                return Ok(m);
            }
            if matches!(
                m.kind,
                MessageKind::ParityReq | MessageKind::ParityResp | MessageKind::HashCheck
            ) {
                return Err(ProtocolError::Transcript(format!(
                    "expected {kind:?}, found {:?}",
                    m.kind
                )));
            }
        }
        Err(ProtocolError::Transcript(format!("transcript ended before {kind:?}")))
    }
}

impl AliceSide for Replay<'_> {
    fn parity(&mut self, _: &[Pass], pass: usize, s: usize, e: usize) -> Result<bool, ProtocolError> {
        let req = self.next(MessageKind::ParityReq)?;
        if req.payload != encode_request(pass, s, e) {
            return Err(ProtocolError::Transcript(
                "parity request differs from the recorded one".into(),
            ));
        }
        let resp = self.next(MessageKind::ParityResp)?;
        match resp.payload.as_slice() {
            [b] => Ok(*b == 1),
            _ => Err(ProtocolError::Transcript("malformed parity response".into())),
        }
    }

    fn hash(&mut self, seed: u64) -> Result<u64, ProtocolError> {
        let m = self.next(MessageKind::HashCheck)?;
        if m.payload.len() != 16 || m.payload[..8] != seed.to_le_bytes() {
            return Err(ProtocolError::Transcript("unexpected hash check".into()));
        }
        Ok(u64::from_le_bytes(m.payload[8..].try_into().unwrap()))
    }
}

struct Bob<'a, S: AliceSide> {
    key: Vec<bool>,
    passes: Vec<Pass>,
    known: HashMap<(usize, usize, usize), bool>,
    alice: &'a mut S,
    parities: u64,
}

impl<S: AliceSide> Bob<'_, S> {
    fn alice_parity(&mut self, pass: usize, s: usize, e: usize) -> Result<bool, ProtocolError> {
        if let Some(&p) = self.known.get(&(pass, s, e)) {
            return Ok(p);
        }
        let p = self.alice.parity(&self.passes, pass, s, e)?;
        self.parities += 1;
        self.known.insert((pass, s, e), p);
        Ok(p)
    }

    /// Bisects a block with odd error parity and flips the error it finds.
    fn bisect(&mut self, pass: usize, mut s: usize, mut e: usize, mut alice: bool) -> Result<usize, ProtocolError> {
        while e - s > 1 {
            let mid = s + (e - s) / 2;
            let left = self.alice_parity(pass, s, mid)?;
            self.known.insert((pass, mid, e), alice ^ left);
            if left != self.passes[pass].parity(&self.key, s, mid) {
                e = mid;
                alice = left;
            } else {
                s = mid;
                alice ^= left;
            }
        }
        let pos = self.passes[pass].perm[s] as usize;
        self.key[pos] = !self.key[pos];
        Ok(pos)
    }

    fn run_pass(&mut self, index: usize) -> Result<(), ProtocolError> {
        let pass = &self.passes[index];
        let n_blocks = pass.perm.len().div_ceil(pass.block);
        let mut queue = Vec::new();
        for j in 0..n_blocks {
            let (s, e) = self.passes[index].range(j);
            if self.alice_parity(index, s, e)? != self.passes[index].parity(&self.key, s, e) {
                queue.push((index, j));
            }
        }
        queue.reverse();
        while let Some((p, j)) = queue.pop() {
            let (s, e) = self.passes[p].range(j);
            let alice = self.known[&(p, s, e)];
            if alice == self.passes[p].parity(&self.key, s, e) {
                continue;
            }
            let pos = self.bisect(p, s, e, alice)?;
            for q in 0..=index {
                if q != p {
                    let jj = self.passes[q].inv[pos] as usize / self.passes[q].block;
                    queue.push((q, jj));
                }
            }
        }
        Ok(())
    }
}

fn hash_seed(seed: u64, check: u64) -> u64 {
    seed ^ check.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn reconcile<S: AliceSide>(
    bob_key: &[bool],
    qber_hint: f64,
    cfg: &CascadeConfig,
    seed: u64,
    alice: &mut S,
) -> Result<CascadeOutcome, ProtocolError> {
    if !(qber_hint > 0.0 && qber_hint <= 0.25) {
        return Err(ProtocolError::QberHintOutOfRange(qber_hint));
    }
    let n = bob_key.len();
    let mut hash_checks = 0;
    let mut check = |key: &[bool], alice: &mut S| -> Result<bool, ProtocolError> {
        let s = hash_seed(seed, hash_checks);
        hash_checks += 1;
        Ok(alice.hash(s)? == verification_hash(key, s))
    };

    // fewer than one expected error: compare digests before revealing parities
    if qber_hint * (n as f64) < 1.0 && check(bob_key, alice)? {
        return Ok(CascadeOutcome {
            corrected: bob_key.to_vec(),
            leaked_bits: HASH_BITS,
            passes_run: 0,
            parities_revealed: 0,
            hash_checks: 1,
        });
    }
    let first = cfg.first_block(n, qber_hint);
    let mut bob = Bob {
        key: bob_key.to_vec(),
        passes: Vec::new(),
        known: HashMap::new(),
        alice,
        parities: 0,
    };
    let mut agreed = false;
    for p in 0..cfg.passes + cfg.max_extra_passes {
        let block = first.saturating_mul(1 << p.min(40)).min(n.max(1));
        bob.passes.push(Pass::new(n, block, p, seed));
        bob.run_pass(p)?;
        if p + 1 >= cfg.passes {
            let alice = &mut *bob.alice;
            if check(&bob.key, alice)? {
                agreed = true;
                break;
            }
        }
    }
    if !agreed {
        return Err(ProtocolError::ReconciliationFailed);
    }
    Ok(CascadeOutcome {
        passes_run: bob.passes.len(),
        leaked_bits: bob.parities + HASH_BITS * hash_checks,
        parities_revealed: bob.parities,
        corrected: bob.key,
        hash_checks,
    })
}

/// Corrects Bob's key towards Alice's. Every parity and digest goes over
/// `channel`; the result fails if the final digests disagree.
pub fn cascade_correct(
    alice: &[bool],
    bob: &[bool],
    qber_hint: f64,
    channel: &mut ClassicalChannel,
    cfg: &CascadeConfig,
    seed: u64,
) -> Result<CascadeOutcome, ProtocolError> {
    if alice.len() != bob.len() {
        return Err(ProtocolError::LengthMismatch {
            alice: alice.len(),
            bob: bob.len(),
        });
    }
    reconcile(bob, qber_hint, cfg, seed, &mut Live { alice, channel })
}

/// Re-runs Bob's side against a recorded transcript instead of Alice.
pub fn replay_cascade(
    bob: &[bool],
    qber_hint: f64,
    transcript: &[Message],
    cfg: &CascadeConfig,
    seed: u64,
) -> Result<CascadeOutcome, ProtocolError> {
    reconcile(
        bob,
        qber_hint,
        cfg,
        seed,
        &mut Replay {
            messages: transcript.iter(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noisy_pair(n: usize, q: f64, seed: u64) -> (Vec<bool>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let b = a.iter().map(|&x| x ^ rng.random_bool(q)).collect();
        (a, b)
    }

    #[test]
    fn identical_keys_cost_one_digest() {
        let (a, _) = noisy_pair(5000, 0.0, 1);
        let mut ch = ClassicalChannel::new();
        let out = cascade_correct(&a, &a, 1e-6, &mut ch, &CascadeConfig::default(), 3).unwrap();
        assert_eq!(out.corrected, a);
        assert_eq!(out.leaked_bits, HASH_BITS);
        assert_eq!(ch.disclosed_bits(), HASH_BITS);
    }

    #[test]
    fn single_error_found_by_bisection() {
        let (a, mut b) = noisy_pair(4096, 0.0, 2);
        b[1234] = !b[1234];
        let cfg = CascadeConfig {
            passes: 1,
            ..CascadeConfig::default()
        };
        let mut ch = ClassicalChannel::new();
        let out = cascade_correct(&a, &b, 0.73 / 64.0, &mut ch, &cfg, 4).unwrap();
        assert_eq!(out.corrected, a);
        // 64 block parities plus log2(64) for the bad block
        assert_eq!(out.parities_revealed, 64 + 6);
        assert_eq!(ch.disclosed_bits(), out.leaked_bits);
    }

    #[test]
    fn corrects_typical_error_rates() {
        for (i, q) in [0.01, 0.04, 0.069, 0.1].into_iter().enumerate() {
            let (a, b) = noisy_pair(10_000, q, 10 + i as u64);
            let mut ch = ClassicalChannel::new();
            let out = cascade_correct(&a, &b, q, &mut ch, &CascadeConfig::default(), i as u64).unwrap();
            assert_eq!(out.corrected, a, "q = {q}");
            assert_eq!(ch.disclosed_bits(), out.leaked_bits);
        }
    }

    #[test]
    fn replay_reproduces_bob() {
        let (a, b) = noisy_pair(3000, 0.05, 20);
        let cfg = CascadeConfig::default();
        let mut ch = ClassicalChannel::new();
        let live = cascade_correct(&a, &b, 0.05, &mut ch, &cfg, 8).unwrap();
        let replayed = replay_cascade(&b, 0.05, ch.transcript(), &cfg, 8).unwrap();
        assert_eq!(live, replayed);
        // a different Bob key asks different questions
        let mut other = b.clone();
        other[0] = !other[0];
        assert!(replay_cascade(&other, 0.05, ch.transcript(), &cfg, 8).is_err());
    }

    #[test]
    fn input_errors() {
        let mut ch = ClassicalChannel::new();
        let cfg = CascadeConfig::default();
        assert!(matches!(
            cascade_correct(&[true], &[true, false], 0.1, &mut ch, &cfg, 0),
            Err(ProtocolError::LengthMismatch { .. })
        ));
        for q in [0.0, 0.3, f64::NAN] {
            assert!(matches!(
                cascade_correct(&[true], &[true], q, &mut ch, &cfg, 0),
                Err(ProtocolError::QberHintOutOfRange(_))
            ));
        }
    }
}
