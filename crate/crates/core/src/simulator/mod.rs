//! Event-level Monte Carlo of a continuous-wave entangled-pair link.
//!
//! Pair emission is a homogeneous Poisson process. Each photon survives its
//! arm independently, so the emitted process splits exactly into three
//! independent Poisson processes (both photons, Alice's only, Bob's only)
//! whose rates are evaluated per short segment under the current fading.
//! Accidental coincidences, multi-pair contributions included, arise
//! naturally from overlapping independent pairs and dark counts.

mod fading;

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyrate::db_to_transmittance;
use crate::scenario::{ConfigError, ScenarioConfig};
use crate::timetag::{Basis, Channel, TagStream, TimeTag, MAX_TIMESTAMP_PS};

pub use fading::{apply_fading, Fading, FadingProcess};

/// Both parties' recordings start one second into their clocks so that
/// negative clock offsets stay representable.
pub const RUN_EPOCH_PS: u64 = 1_000_000_000_000;

/// Fading and clock noise are held constant over segments of this length.
pub const SEGMENT_S: f64 = 0.01;

pub const TRUTH_CSV_HEADER: &str = "pair_id,alice_index,bob_index";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("duration must be positive, got {0} s")]
    BadDuration(f64),
    #[error("clock model pushes timestamps outside the representable range")]
    TimestampRange,
}

/// Entangled pair source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    /// Emitted pairs per second.
    pub pair_rate: f64,
    /// Probability that a photon is collected and detected right at the source.
    pub collection_efficiency: f64,
    /// Same-basis anti-correlation contrast of the singlet, including field
    /// degradation.
    pub v_sys: f64,
    /// Spread of the emission time difference between the two photons of a pair.
    pub coherence_window_ns: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub mean_attenuation_db: f64,
    pub fading: Fading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    /// Dark plus background counts of one detector.
    pub dark_rate_per_detector_hz: f64,
    /// Gaussian timing jitter, one sigma.
    pub jitter_ns: f64,
    pub dead_time_ns: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            dark_rate_per_detector_hz: 0.0,
            jitter_ns: 0.0,
            dead_time_ns: 50.0,
        }
    }
}

impl DetectorModel {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("dark_rate_per_detector_hz", self.dark_rate_per_detector_hz),
            ("jitter_ns", self.jitter_ns),
            ("dead_time_ns", self.dead_time_ns),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Bob's clock relative to Alice's: `t_bob = t + offset + drift * t + W(t)`
/// with `W` a random walk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockModel {
    pub offset_ns: f64,
    pub drift_ns_per_s: f64,
    #[serde(default)]
    pub drift_noise_ns_per_sqrt_s: f64,
}

impl ClockModel {
    pub fn validate(&self) -> Result<(), String> {
        if !self.offset_ns.is_finite() || !self.drift_ns_per_s.is_finite() {
            return Err("clock offset and drift must be finite".into());
        }
        if !(self.drift_noise_ns_per_sqrt_s >= 0.0) {
            return Err("drift_noise_ns_per_sqrt_s must be >= 0".into());
        }
        Ok(())
    }
}

/// Indices of the two detections of one pair in the final streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruthPair {
    pub pair_id: u64,
    pub alice_index: usize,
    pub bob_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRun {
    pub alice: TagStream,
    pub bob: TagStream,
    pub truth: Vec<TruthPair>,
}

impl SimulatedRun {
    pub fn write_truth_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(TRUTH_CSV_HEADER.split(','))?;
        for p in &self.truth {
            wtr.write_record([
                p.pair_id.to_string(),
                p.alice_index.to_string(),
                p.bob_index.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Measurement outcomes of one pair. Same basis: anti-correlated with
/// probability `(1 + v_sys) / 2`; different bases: independent fair bits.
pub fn sample_outcome_pair<R: Rng + ?Sized>(
    basis_alice: Basis,
    basis_bob: Basis,
    v_sys: f64,
    rng: &mut R,
) -> (bool, bool) {
    let a: bool = rng.random();
    let b = if basis_alice == basis_bob {
        let anti = rng.random_bool(((1.0 + v_sys) / 2.0).clamp(0.0, 1.0));
        if anti {
            !a
        } else {
            a
        }
    } else {
        rng.random()
    };
    (a, b)
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map_or(0, |d| d.sample(rng) as u64)
}

struct Party {
    tags: Vec<TimeTag>,
    jitter: Option<Normal<f64>>,
    dark_rate: f64,
    dead_time_ps: u64,
}

impl Party {
    fn new(detector: &DetectorModel, expected: f64) -> Self {
        let capacity = (expected * 1.01 + 10.0 * expected.sqrt() + 1024.0) as usize;
        Self {
            tags: Vec::with_capacity(capacity),
            jitter: (detector.jitter_ns > 0.0).then(|| Normal::new(0.0, detector.jitter_ns * 1e3).unwrap()),
            dark_rate: detector.dark_rate_per_detector_hz,
            dead_time_ps: (detector.dead_time_ns * 1e3).round() as u64,
        }
    }

    fn jitter_ps<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.jitter.map_or(0.0, |d| d.sample(rng))
    }

    /// Sorts the nearly ordered stream in place; displacements are bounded
    /// by a few nanoseconds of jitter and clock wander.
    fn finish(mut self, epoch_ps: u64) -> TagStream {
        let tags = &mut self.tags;
        for i in 1..tags.len() {
            let mut j = i;
            while j > 0 && tags[j - 1] > tags[j] {
                tags.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut last_any: Option<u64> = None;
        let mut last_on = [None::<u64>; 2];
        let dead = self.dead_time_ps;
        tags.retain(|tag| {
            let t = tag.timestamp_ps();
            let ch = tag.channel() as usize;
            // the tagger resolves one event per picosecond
            if last_any == Some(t) {
                return false;
            }
            if let Some(prev) = last_on[ch] {
                if t - prev < dead {
                    return false;
                }
            }
            last_any = Some(t);
            last_on[ch] = Some(t);
            true
        });
        tags.shrink_to_fit();
        TagStream::new(epoch_ps, self.tags)
    }
}

fn to_ps(base_ps: u64, delta_ps: f64) -> Result<u64, SimError> {
    let t = base_ps as f64 + delta_ps;
    if t < 0.0 || t > MAX_TIMESTAMP_PS as f64 {
        return Err(SimError::TimestampRange);
    }
    Ok((base_ps as i64 + delta_ps.round() as i64) as u64)
}

/// Simulates both parties' detection records for `duration_s` seconds.
/// Identical arguments reproduce identical streams.
pub fn generate_run(config: &ScenarioConfig, duration_s: f64, seed: u64) -> Result<SimulatedRun, SimError> {
    config.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(SimError::BadDuration(duration_s));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = config.source_model();
    let (ch_a, ch_b) = (config.alice_channel(), config.bob_channel());
    let clock = &config.clock;
    let eta = source.collection_efficiency;
    let p_a_mean = (eta * db_to_transmittance(ch_a.mean_attenuation_db)).min(1.0);
    let p_b_mean = (eta * db_to_transmittance(ch_b.mean_attenuation_db)).min(1.0);

    let mut alice = Party::new(
        &config.alice_detector,
        duration_s * (source.pair_rate * p_a_mean + 2.0 * config.alice_detector.dark_rate_per_detector_hz),
    );
    let mut bob = Party::new(
        &config.bob_detector,
        duration_s * (source.pair_rate * p_b_mean + 2.0 * config.bob_detector.dark_rate_per_detector_hz),
    );
    let mut fade_a = FadingProcess::new(ch_a.fading.clone());
    let mut fade_b = FadingProcess::new(ch_b.fading.clone());
    let walk_step = Normal::new(0.0, 1.0).unwrap();
    let mut walk_ns = 0.0;
    let mut pairs: Vec<(u64, TimeTag, TimeTag)> = Vec::new();
    let mut next_pair_id = 0u64;

    let n_segments = (duration_s / SEGMENT_S).ceil() as u64;
    let seg_ps = (SEGMENT_S * 1e12).round() as u64;
    for k in 0..n_segments {
        let seg_start_s = k as f64 * SEGMENT_S;
        let dt = SEGMENT_S.min(duration_s - seg_start_s);
        let dt_ps = dt * 1e12;
        let base_ps = RUN_EPOCH_PS + k * seg_ps;
        let mid = seg_start_s + 0.5 * dt;
        let att_a = apply_fading(ch_a.mean_attenuation_db, &mut fade_a, mid, &mut rng);
        let att_b = apply_fading(ch_b.mean_attenuation_db, &mut fade_b, mid, &mut rng);
        let p_a = (eta * db_to_transmittance(att_a)).min(1.0);
        let p_b = (eta * db_to_transmittance(att_b)).min(1.0);
        let walk_start = walk_ns;
        let walk_end = walk_ns + clock.drift_noise_ns_per_sqrt_s * dt.sqrt() * walk_step.sample(&mut rng);
        walk_ns = walk_end;
        // Bob's clock offset at a time `u` (fraction of the segment), in ps
        let bob_clock_ps = |u: f64| {
            let t = seg_start_s + u * dt;
            1e3 * (clock.offset_ns + clock.drift_ns_per_s * t + walk_start + (walk_end - walk_start) * u)
        };
        let (a_len, b_len) = (alice.tags.len(), bob.tags.len());

        let rate = source.pair_rate * dt;
        let n_both = poisson(rate * p_a * p_b, &mut rng);
        let n_alice = poisson(rate * p_a * (1.0 - p_b), &mut rng);
        let n_bob = poisson(rate * (1.0 - p_a) * p_b, &mut rng);

        for _ in 0..n_both {
            let u: f64 = rng.random();
            let basis_a = Basis::from_bit(rng.random());
            let basis_b = Basis::from_bit(rng.random());
            let (bit_a, bit_b) = sample_outcome_pair(basis_a, basis_b, source.v_sys, &mut rng);
            let spread = source.coherence_window_ns * 1e3 * (rng.random::<f64>() - 0.5);
            let ta = to_ps(base_ps, u * dt_ps + alice.jitter_ps(&mut rng))?;
            let tb = to_ps(base_ps, u * dt_ps + spread + bob.jitter_ps(&mut rng) + bob_clock_ps(u))?;
            let tag_a = TimeTag::new(ta, Channel::from_bit(bit_a), basis_a);
            let tag_b = TimeTag::new(tb, Channel::from_bit(bit_b), basis_b);
            alice.tags.push(tag_a);
            bob.tags.push(tag_b);
            pairs.push((next_pair_id, tag_a, tag_b));
            next_pair_id += 1;
        }
        for _ in 0..n_alice {
            let u: f64 = rng.random();
            let bits: u8 = rng.random();
            let t = to_ps(base_ps, u * dt_ps + alice.jitter_ps(&mut rng))?;
            alice.tags.push(TimeTag::new(
                t,
                Channel::from_bit(bits & 1 == 1),
                Basis::from_bit(bits & 2 == 2),
            ));
        }
        for _ in 0..n_bob {
            let u: f64 = rng.random();
            let bits: u8 = rng.random();
            let t = to_ps(base_ps, u * dt_ps + bob.jitter_ps(&mut rng) + bob_clock_ps(u))?;
            bob.tags.push(TimeTag::new(
                t,
                Channel::from_bit(bits & 1 == 1),
                Basis::from_bit(bits & 2 == 2),
            ));
        }
        for channel in [Channel::T, Channel::R] {
            for _ in 0..poisson(alice.dark_rate * dt, &mut rng) {
                let u: f64 = rng.random();
                let t = to_ps(base_ps, u * dt_ps)?;
                alice.tags.push(TimeTag::new(t, channel, Basis::from_bit(rng.random())));
            }
            for _ in 0..poisson(bob.dark_rate * dt, &mut rng) {
                let u: f64 = rng.random();
                let t = to_ps(base_ps, u * dt_ps + bob_clock_ps(u))?;
                bob.tags.push(TimeTag::new(t, channel, Basis::from_bit(rng.random())));
            }
        }
        alice.tags[a_len..].sort_unstable();
        bob.tags[b_len..].sort_unstable();
    }

    let alice = alice.finish(RUN_EPOCH_PS);
    let bob_epoch = to_ps(RUN_EPOCH_PS, 1e3 * clock.offset_ns)?;
    let bob = bob.finish(bob_epoch);
    let truth = pairs
        .into_iter()
        .filter_map(|(pair_id, a, b)| {
            Some(TruthPair {
                pair_id,
                alice_index: alice.tags.binary_search(&a).ok()?,
                bob_index: bob.tags.binary_search(&b).ok()?,
            })
        })
        .collect();
    Ok(SimulatedRun { alice, bob, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ScenarioConfig {
        let mut c = ScenarioConfig::preset("at-alice").unwrap();
        c.link.alice_arm_db = 0.0;
        c.link.bob_arm_db = 0.0;
        c.link.bob_fading = Fading::None;
        c.source.local_pair_rate_hz = 2e4;
        c.source.local_singles_rate_hz = 2e4;
        c.source.v_sys = 1.0;
        c.source.field_visibility = 1.0;
        c.alice_detector.dark_rate_per_detector_hz = 0.0;
        c.bob_detector.dark_rate_per_detector_hz = 0.0;
        c.clock = ClockModel::default();
        c
    }

    #[test]
    fn outcome_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let anti = |ba, bb, v, rng: &mut ChaCha8Rng| {
            (0..n)
                .filter(|_| {
                    let (a, b) = sample_outcome_pair(ba, bb, v, rng);
                    a != b
                })
                .count() as f64
                / n as f64
        };
        let d = Basis::Diagonal;
        let r = Basis::Rectilinear;
        assert_eq!(anti(r, r, 1.0, &mut rng), 1.0);
        assert_eq!(anti(d, d, 1.0, &mut rng), 1.0);
        let sigma = |p: f64| (p * (1.0 - p) / n as f64).sqrt();
        let p = anti(r, r, 0.96, &mut rng);
        assert!((p - 0.98).abs() < 4.0 * sigma(0.98), "{p}");
        for v in [0.0, 0.5, 1.0] {
            let p = anti(r, d, v, &mut rng);
            assert!((p - 0.5).abs() < 4.0 * sigma(0.5), "{p}");
        }
    }

    #[test]
    fn ideal_link_is_perfectly_anticorrelated() {
        let run = generate_run(&toy_config(), 1.0, 5).unwrap();
        assert!(run.truth.len() > 1000);
        let (mut same, mut diff_basis, mut diff_agree) = (0, 0, 0);
        for p in &run.truth {
            let a = run.alice.tags[p.alice_index];
            let b = run.bob.tags[p.bob_index];
            if a.basis() == b.basis() {
                assert_ne!(a.bit(), b.bit());
                same += 1;
            } else {
                diff_basis += 1;
                diff_agree += (a.bit() == b.bit()) as u32;
            }
        }
        assert!(same > 0);
        let frac = diff_agree as f64 / diff_basis as f64;
        let sigma = (0.25 / diff_basis as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * sigma, "{frac}");
    }

    #[test]
    fn deterministic_per_seed() {
        let c = ScenarioConfig::preset("middle").unwrap();
        let a = generate_run(&c, 20.0, 9).unwrap();
        let b = generate_run(&c, 20.0, 9).unwrap();
        assert_eq!(a, b);
        let c2 = generate_run(&c, 20.0, 10).unwrap();
        assert_ne!(a.alice, c2.alice);
    }

    #[test]
    fn streams_sorted_and_respect_dead_time() {
        let mut c = ScenarioConfig::preset("at-alice").unwrap();
        c.alice_detector.dead_time_ns = 200.0;
        let run = generate_run(&c, 0.5, 3).unwrap();
        for (s, dead) in [(&run.alice, 200_000), (&run.bob, 50_000)] {
            assert!(s.is_sorted());
            let mut last = [None::<u64>; 2];
            for t in &s.tags {
                let ch = t.channel() as usize;
                if let Some(prev) = last[ch] {
                    assert!(t.timestamp_ps() - prev >= dead);
                }
                last[ch] = Some(t.timestamp_ps());
            }
        }
    }

    #[test]
    fn singles_bookkeeping() {
        let mut c = ScenarioConfig::preset("at-alice").unwrap();
        c.link.bob_fading = Fading::None;
        c.alice_detector.dead_time_ns = 0.0;
        c.bob_detector.dead_time_ns = 0.0;
        let duration = 2.0;
        let run = generate_run(&c, duration, 21).unwrap();
        let src = c.source_model();
        for (stream, channel, det) in [
            (&run.alice, c.alice_channel(), &c.alice_detector),
            (&run.bob, c.bob_channel(), &c.bob_detector),
        ] {
            let expected = duration
                * (src.pair_rate * src.collection_efficiency * db_to_transmittance(channel.mean_attenuation_db)
                    + 2.0 * det.dark_rate_per_detector_hz);
            let got = stream.len() as f64;
            assert!((got - expected).abs() < 3.0 * expected.sqrt(), "{got} vs {expected}");
        }
    }

    #[test]
    fn truth_indices_point_at_pair_partners() {
        let c = ScenarioConfig::preset("at-alice").unwrap();
        let run = generate_run(&c, 1.0, 8).unwrap();
        assert!(!run.truth.is_empty());
        for p in &run.truth {
            let a = run.alice.tags[p.alice_index].timestamp_ps() as f64;
            let b = run.bob.tags[p.bob_index].timestamp_ps() as f64;
            // offset 2300 ns plus drift, jitter well below 1 ns
            assert!((b - a - 2.3e6).abs() < 1e3, "{}", b - a);
        }
        let mut buf = Vec::new();
        run.write_truth_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("pair_id,alice_index,bob_index\n"));
        assert_eq!(text.lines().count(), run.truth.len() + 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = ScenarioConfig::preset("at-alice").unwrap();
        assert!(matches!(generate_run(&c, 0.0, 1), Err(SimError::BadDuration(_))));
        let mut bad = ScenarioConfig::preset("middle").unwrap();
        bad.link.alice_arm_db = 1.0;
        assert!(matches!(generate_run(&bad, 1.0, 1), Err(SimError::Config(_))));
        let mut neg = c.clone();
        neg.clock.offset_ns = -2e9;
        assert!(matches!(generate_run(&neg, 0.1, 1), Err(SimError::TimestampRange)));
    }
}
