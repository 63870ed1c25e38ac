//! BBM92 post-processing: sifting, QBER sampling, CASCADE, privacy
//! amplification, with every public exchange going over a
//! [`ClassicalChannel`].

mod cascade;
mod channel;
mod hash;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::keyrate::{binary_entropy, positive_rate_cutoff, ReconciliationEfficiency};
use crate::timesync::{pair_coincidences, track_drift, DriftTrack, SyncConfig, SyncError};
use crate::timetag::{Basis, TagStream};

pub use cascade::{cascade_correct, replay_cascade, CascadeConfig, CascadeOutcome, HASH_BITS};
pub use channel::{ClassicalChannel, Message, MessageKind, Party, TRANSCRIPT_MAGIC};
pub use hash::{pack_bits, verification_hash, Toeplitz};

pub const SIFTED_RATE_CSV_HEADER: &str = "time_s,sifted_bits,sifted_rate_hz";

/// Below this many compared bits the QBER estimate is flagged as unreliable.
pub const MIN_SAMPLE_BITS: usize = 100;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("key length mismatch: Alice has {alice} entries, Bob {bob}")]
    LengthMismatch { alice: usize, bob: usize },
    #[error("sample fraction must lie in (0, 1], got {0}")]
    BadSampleFraction(f64),
    #[error("QBER hint must lie in (0, 0.25], got {0}")]
    QberHintOutOfRange(f64),
    #[error("keys still differ after reconciliation")]
    ReconciliationFailed,
    #[error("estimated QBER {qber:.4} is above the positive-rate cutoff {cutoff:.4}")]
    AboveCutoff { qber: f64, cutoff: f64 },
    #[error("no coincidences to distill")]
    EmptyKey,
    #[error("bad transcript: {0}")]
    Transcript(String),
    #[error(transparent)]
    Sync(#[from] SyncError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiftedKey {
    pub bits: Vec<bool>,
    pub bases: Vec<Basis>,
    pub origin: Party,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Positions of coincidences measured in the same basis.
pub fn sift_indices(alice: &[(Basis, bool)], bob: &[(Basis, bool)]) -> Result<Vec<usize>, ProtocolError> {
    if alice.len() != bob.len() {
        return Err(ProtocolError::LengthMismatch {
            alice: alice.len(),
            bob: bob.len(),
        });
    }
    Ok((0..alice.len()).filter(|&i| alice[i].0 == bob[i].0).collect())
}

/// Keeps same-basis rounds. Bob inverts his bits, since the singlet gives
/// opposite outcomes in every common basis.
pub fn sift(alice: &[(Basis, bool)], bob: &[(Basis, bool)]) -> Result<(SiftedKey, SiftedKey), ProtocolError> {
    let keep = sift_indices(alice, bob)?;
    let key = |outcomes: &[(Basis, bool)], origin: Party, flip: bool| SiftedKey {
        bits: keep.iter().map(|&i| outcomes[i].1 ^ flip).collect(),
        bases: keep.iter().map(|&i| outcomes[i].0).collect(),
        origin,
    };
    Ok((key(alice, Party::Alice, false), key(bob, Party::Bob, true)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QberEstimate {
    pub qber: f64,
    /// Wilson 95 % interval.
    pub lower: f64,
    pub upper: f64,
    pub sample_bits: usize,
    pub errors: usize,
    /// Set when fewer than [`MIN_SAMPLE_BITS`] bits were compared.
    pub small_sample: bool,
}

fn wilson_interval(errors: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let (k, n) = (errors as f64, n as f64);
    let p = k / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn remove_positions(key: &SiftedKey, drop: &[bool]) -> SiftedKey {
    let keep = |i: &usize| !drop[*i];
    SiftedKey {
        bits: (0..key.len()).filter(keep).map(|i| key.bits[i]).collect(),
        bases: (0..key.len()).filter(keep).map(|i| key.bases[i]).collect(),
        origin: key.origin,
    }
}

/// Alice reveals a random sample of her sifted bits; both parties drop it.
pub fn estimate_qber<R: Rng + ?Sized>(
    alice: &SiftedKey,
    bob: &SiftedKey,
    sample_fraction: f64,
    channel: &mut ClassicalChannel,
    rng: &mut R,
) -> Result<(QberEstimate, SiftedKey, SiftedKey), ProtocolError> {
    if alice.len() != bob.len() {
        return Err(ProtocolError::LengthMismatch {
            alice: alice.len(),
            bob: bob.len(),
        });
    }
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(ProtocolError::BadSampleFraction(sample_fraction));
    }
    let n = alice.len();
    let m = ((sample_fraction * n as f64).round() as usize).min(n);
    let mut positions = rand::seq::index::sample(rng, n, m).into_vec();
    positions.sort_unstable();

    let revealed: Vec<bool> = positions.iter().map(|&i| alice.bits[i]).collect();
    let mut payload = (m as u32).to_le_bytes().to_vec();
    payload.extend(pack_bits(&revealed).iter().flat_map(|w| w.to_le_bytes()));
    channel.send(MessageKind::SampleReveal, Party::Alice, payload, m as u64);

    let errors = positions.iter().filter(|&&i| alice.bits[i] != bob.bits[i]).count();
    let mut drop = vec![false; n];
    for &i in &positions {
        drop[i] = true;
    }
    let (lower, upper) = wilson_interval(errors, m);
    let estimate = QberEstimate {
        qber: if m > 0 { errors as f64 / m as f64 } else { 0.0 },
        lower,
        upper,
        sample_bits: m,
        errors,
        small_sample: m < MIN_SAMPLE_BITS,
    };
    Ok((estimate, remove_positions(alice, &drop), remove_positions(bob, &drop)))
}

/// Secure bits left from `n` reconciled bits: the asymptotic fraction
/// `1 - f H2(q) - H2(q)`, charging the actual leakage instead of `n f H2(q)`
/// when that is larger.
pub fn secure_length(n: usize, qber: f64, f: f64, leaked_bits: u64) -> usize {
    let h = match binary_entropy(qber.clamp(0.0, 1.0)) {
        Ok(h) => h,
        Err(_) => return 0,
    };
    let n = n as f64;
    let ec = (n * f * h).max(leaked_bits as f64);
    let len = (n - ec - n * h).floor();
    if len > 0.0 {
        len as usize
    } else {
        0
    }
}

/// Compresses `key` with a seeded Toeplitz hash to [`secure_length`] bits.
pub fn privacy_amplify(key: &[bool], qber: f64, f: f64, leaked_bits: u64, seed: u64) -> Vec<bool> {
    let m = secure_length(key.len(), qber, f, leaked_bits);
    if m == 0 {
        return Vec::new();
    }
    Toeplitz::from_seed(seed, key.len(), m).apply(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub sample_fraction: f64,
    /// Bin width of the sifted-rate series.
    pub rate_bin_s: f64,
    pub window_ns: f64,
    pub cascade: CascadeConfig,
    /// `f(q)` used to size privacy amplification and to find the cutoff.
    pub error_correction: ReconciliationEfficiency,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            sample_fraction: 0.1,
            rate_bin_s: 0.2,
            window_ns: 1.5,
            cascade: CascadeConfig::default(),
            error_correction: ReconciliationEfficiency::default(),
            seed: 0,
        }
    }
}

/// Bit accounting of one distillation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeyMaterial {
    pub duration_s: f64,
    /// Coincidences found by the pairing step.
    pub raw_len: usize,
    pub sifted_len: usize,
    pub sample_len: usize,
    /// From the revealed sample; this is what the cutoff is checked against.
    pub estimated_qber: f64,
    pub qber_lower: f64,
    pub qber_upper: f64,
    /// Errors in sample and reconciled key over all sifted bits.
    pub measured_qber: f64,
    /// Parities and digests revealed by reconciliation.
    pub leaked_bits: u64,
    /// Everything revealed on the channel, samples included.
    pub disclosed_bits: u64,
    pub reconciliation_passes: usize,
    pub secure_len: usize,
    pub sifted_rate_hz: f64,
    /// Secure bits per second after the QBER sample is sacrificed.
    pub secure_rate_hz: f64,
    /// Same, as if the sample had been kept for the key.
    pub gross_secure_rate_hz: f64,
}

impl KeyMaterial {
    /// `key = value` report, one field per line.
    pub fn to_report(&self) -> String {
        toml::to_string(self).expect("plain numeric struct serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBin {
    pub time_s: f64,
    pub sifted_bits: usize,
}

pub fn write_sifted_rate_csv<W: Write>(out: W, bins: &[RateBin], bin_s: f64) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(SIFTED_RATE_CSV_HEADER.split(','))?;
    for b in bins {
        wtr.write_record([
            format!("{:.3}", b.time_s),
            b.sifted_bits.to_string(),
            format!("{}", b.sifted_bits as f64 / bin_s),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Distillation {
    pub material: KeyMaterial,
    pub alice_key: Vec<bool>,
    pub bob_key: Vec<bool>,
    pub sifted_rate: Vec<RateBin>,
    pub track: DriftTrack,
    pub channel: ClassicalChannel,
}

fn sub_seed(seed: u64, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng.random()
}

/// Clock recovery, pairing, sifting, QBER sampling, CASCADE and privacy
/// amplification on two recorded streams.
pub fn run_distillation(
    alice: &TagStream,
    bob: &TagStream,
    sync: &SyncConfig,
    config: &ProtocolConfig,
) -> Result<Distillation, ProtocolError> {
    let track = track_drift(alice, bob, sync)?;
    let pairs = pair_coincidences(alice, bob, &track, config.window_ns)?;
    if pairs.is_empty() {
        return Err(ProtocolError::EmptyKey);
    }
    let outcomes = |s: &TagStream, idx: &dyn Fn(usize) -> usize| -> Vec<(Basis, bool)> {
        (0..pairs.len())
            .map(|k| {
                let t = s.tags[idx(k)];
                (t.basis(), t.bit())
            })
            .collect()
    };
    let a_out = outcomes(alice, &|k| pairs.pairs[k].alice_index);
    let b_out = outcomes(bob, &|k| pairs.pairs[k].bob_index);
    let kept = sift_indices(&a_out, &b_out)?;
    let (sa, sb) = sift(&a_out, &b_out)?;
    if sa.is_empty() {
        return Err(ProtocolError::EmptyKey);
    }

    let t0 = alice.tags[0].timestamp_ps();
    let duration_s = alice.span_s();
    let n_bins = ((duration_s / config.rate_bin_s).ceil() as usize).max(1);
    let mut sifted_rate: Vec<RateBin> = (0..n_bins)
        .map(|i| RateBin {
            time_s: i as f64 * config.rate_bin_s,
            sifted_bits: 0,
        })
        .collect();
    for &k in &kept {
        let t = (alice.tags[pairs.pairs[k].alice_index].timestamp_ps() - t0) as f64 * 1e-12;
        let i = ((t / config.rate_bin_s) as usize).min(n_bins - 1);
        sifted_rate[i].sifted_bits += 1;
    }

    let mut channel = ClassicalChannel::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 1));
    let (estimate, ka, kb) = estimate_qber(&sa, &sb, config.sample_fraction, &mut channel, &mut rng)?;
    let cutoff = positive_rate_cutoff(&config.error_correction);
    if estimate.qber >= cutoff {
        return Err(ProtocolError::AboveCutoff {
            qber: estimate.qber,
            cutoff,
        });
    }
    let n = ka.len();
    // with no error in the sample, assume half an error
    let hint = if estimate.errors > 0 {
        estimate.qber
    } else {
        0.5 / estimate.sample_bits.max(1) as f64
    }
    .min(0.25);
    let before = channel.disclosed_bits();
    let outcome = cascade_correct(
        &ka.bits,
        &kb.bits,
        hint,
        &mut channel,
        &config.cascade,
        sub_seed(config.seed, 2),
    )?;
    debug_assert_eq!(channel.disclosed_bits() - before, outcome.leaked_bits);

    // Bob knows how many bits he flipped; with the sample this gives the
    // error rate of the whole sifted key
    let corrected_errors = kb.bits.iter().zip(&outcome.corrected).filter(|(x, y)| x != y).count();
    let measured_qber = (estimate.errors + corrected_errors) as f64 / (estimate.sample_bits + n) as f64;
    let f = config.error_correction.factor(measured_qber);
    let pa_seed = sub_seed(config.seed, 3);
    let m = secure_length(n, measured_qber, f, outcome.leaked_bits);
    let mut payload = pa_seed.to_le_bytes().to_vec();
    payload.extend_from_slice(&(m as u64).to_le_bytes());
    payload.extend_from_slice(&(corrected_errors as u64).to_le_bytes());
    channel.send(MessageKind::PaSeed, Party::Bob, payload, 0);
    let alice_key = privacy_amplify(&ka.bits, measured_qber, f, outcome.leaked_bits, pa_seed);
    let bob_key = privacy_amplify(&outcome.corrected, measured_qber, f, outcome.leaked_bits, pa_seed);

    let secure_len = alice_key.len();
    let gross_len = if n > 0 {
        secure_len as f64 * sa.len() as f64 / n as f64
    } else {
        0.0
    };
    let material = KeyMaterial {
        duration_s,
        raw_len: pairs.len(),
        sifted_len: sa.len(),
        sample_len: estimate.sample_bits,
        estimated_qber: estimate.qber,
        qber_lower: estimate.lower,
        qber_upper: estimate.upper,
        measured_qber,
        leaked_bits: outcome.leaked_bits,
        disclosed_bits: channel.disclosed_bits(),
        reconciliation_passes: outcome.passes_run,
        secure_len,
        sifted_rate_hz: sa.len() as f64 / duration_s,
        secure_rate_hz: secure_len as f64 / duration_s,
        gross_secure_rate_hz: gross_len / duration_s,
    };
    Ok(Distillation {
        material,
        alice_key,
        bob_key,
        sifted_rate,
        track,
        channel,
    })
}
