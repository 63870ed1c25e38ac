//! Clock recovery between two independently recorded time-tag streams.
//!
//! The relative offset `delta_t = t_bob - t_alice` shows up as a peak in the
//! histogram of pairwise delays. Streams are cut into blocks on Bob's time
//! axis; the first block (and any block after a lost lock) is searched over
//! the full span with a coarse histogram whose best candidates are refined at
//! fine resolution, later blocks are searched in a narrow window around the
//! previous block's offset. Coincidences are then matched one-to-one after
//! subtracting the piecewise-linear offset track.

use std::io::Write;

use thiserror::Error;

use crate::timetag::{TagStream, TimeTag};

pub const DRIFT_CSV_HEADER: &str = "block_start_s,delta_t_ns,significance";
pub const COINCIDENCE_CSV_HEADER: &str = "alice_index,bob_index,delay_ps";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("time-tag stream is empty")]
    EmptyStream,
    #[error("histogram bin width must be positive, got {0} ns")]
    NonPositiveBin(f64),
    #[error("search span must cover at least one bin")]
    EmptySpan,
    #[error("no correlation peak above background (best significance {significance:.2})")]
    NoLock { significance: f64 },
    #[error("coincidence window must be positive, got {0} ns")]
    NonPositiveWindow(f64),
    #[error("block length must be positive, got {0} s")]
    NonPositiveBlock(f64),
}

/// Peak acceptance rule: the best window must stand `threshold_sigma`
/// Poisson deviations above the background and hold `min_excess_counts`
/// counts above it.
#[derive(Debug, Clone, PartialEq)]
pub struct LockCriteria {
    pub threshold_sigma: f64,
    pub min_excess_counts: f64,
    /// Widest peak window (in bins) tried; drift during a block smears the peak.
    pub max_width_bins: usize,
}

impl Default for LockCriteria {
    fn default() -> Self {
        Self {
            threshold_sigma: 5.0,
            min_excess_counts: 10.0,
            max_width_bins: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncConfig {
    pub block_length_s: f64,
    /// Fine histogram bin, also the resolution of the recovered offsets.
    pub bin_ns: f64,
    pub coarse_bin_ns: f64,
    /// Full width of the acquisition search, centered on `initial_offset_ns`.
    pub search_span_ns: f64,
    pub initial_offset_ns: f64,
    /// Full width of the tracking search around the previous block's offset.
    pub track_span_ns: f64,
    /// Coarse bins refined at fine resolution during acquisition.
    pub candidates: usize,
    pub lock: LockCriteria,
    pub window_ns: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            block_length_s: 5.0,
            bin_ns: 0.5,
            coarse_bin_ns: 10.0,
            search_span_ns: 2.0e6,
            initial_offset_ns: 0.0,
            track_span_ns: 200.0,
            candidates: 8,
            lock: LockCriteria::default(),
            window_ns: 1.5,
        }
    }
}

/// Counts of pairwise delays `t_b - t_a` in equal bins around `center_ns`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationHistogram {
    pub bin_width_ns: f64,
    pub center_ns: f64,
    pub bins: Vec<u64>,
}

impl CorrelationHistogram {
    pub fn search_span_ns(&self) -> f64 {
        self.bins.len() as f64 * self.bin_width_ns
    }

    pub fn lower_edge_ns(&self) -> f64 {
        self.center_ns - 0.5 * self.search_span_ns()
    }

    pub fn bin_center_ns(&self, i: usize) -> f64 {
        self.lower_edge_ns() + (i as f64 + 0.5) * self.bin_width_ns
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }
}

/// Delay histogram centered on zero.
pub fn cross_correlate(
    a: &[TimeTag],
    b: &[TimeTag],
    bin_ns: f64,
    span_ns: f64,
) -> Result<CorrelationHistogram, SyncError> {
    cross_correlate_around(a, b, 0.0, bin_ns, span_ns)
}

/// Delay histogram over `center_ns +- span_ns / 2`, by a sorted merge: each
/// of `b`'s tags only visits the tags of `a` inside the span.
pub fn cross_correlate_around(
    a: &[TimeTag],
    b: &[TimeTag],
    center_ns: f64,
    bin_ns: f64,
    span_ns: f64,
) -> Result<CorrelationHistogram, SyncError> {
    if a.is_empty() || b.is_empty() {
        return Err(SyncError::EmptyStream);
    }
    if !(bin_ns > 0.0) {
        return Err(SyncError::NonPositiveBin(bin_ns));
    }
    let n = (span_ns / bin_ns).round();
    if !(n >= 1.0) {
        return Err(SyncError::EmptySpan);
    }
    let mut hist = CorrelationHistogram {
        bin_width_ns: bin_ns,
        center_ns,
        bins: vec![0; n as usize],
    };
    let bin_ps = bin_ns * 1e3;
    let lo_ps = hist.lower_edge_ns() * 1e3;
    let hi_ps = lo_ps + n * bin_ps;
    let mut start = 0;
    for tb in b {
        let tb = tb.timestamp_ps() as i64;
        let delay = |ta: &TimeTag| (tb - ta.timestamp_ps() as i64) as f64;
        while start < a.len() && delay(&a[start]) >= hi_ps {
            start += 1;
        }
        for ta in &a[start..] {
            let d = delay(ta);
            if d < lo_ps {
                break;
            }
            let idx = ((d - lo_ps) / bin_ps) as usize;
            if let Some(c) = hist.bins.get_mut(idx) {
                *c += 1;
            }
        }
    }
    Ok(hist)
}

/// A located correlation peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetEstimate {
    /// Background-subtracted peak centroid, snapped to the nearest bin center.
    pub delta_t_ns: f64,
    pub peak_bin_center_ns: f64,
    /// Excess of the peak window over background, in Poisson sigmas.
    pub significance: f64,
    /// Peak window counts over expected background counts.
    pub peak_to_background: f64,
    pub excess_counts: f64,
    pub width_bins: usize,
}

/// Finds the most significant peak window in `h` (widths 1, 2, 4, ... bins).
pub fn find_offset(h: &CorrelationHistogram, lock: &LockCriteria) -> Result<OffsetEstimate, SyncError> {
    let n = h.bins.len();
    if n == 0 {
        return Err(SyncError::EmptySpan);
    }
    let counts: Vec<f64> = h.bins.iter().map(|&c| c as f64).collect();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + counts[i];
    }
    let window_sum = |s: usize, w: usize| prefix[s + w] - prefix[s];
    let zscore = |sum: f64, w: usize, mu: f64| {
        let bg = w as f64 * mu;
        (sum - bg) / bg.max(1.0).sqrt()
    };
    let mu_all = prefix[n] / n as f64;

    let mut best = (f64::NEG_INFINITY, 0usize, 1usize);
    let mut w = 1;
    while w <= lock.max_width_bins.max(1) && w <= n {
        for s in 0..=n - w {
            let z = zscore(window_sum(s, w), w, mu_all);
            if z > best.0 {
                best = (z, s, w);
            }
        }
        w *= 2;
    }
    let (_, start, width) = best;

    // background away from the peak window
    let guard_lo = start.saturating_sub(width + 2);
    let guard_hi = (start + 2 * width + 2).min(n);
    let outside = n - (guard_hi - guard_lo);
    let mu = if outside > 0 {
        (prefix[guard_lo] + prefix[n] - prefix[guard_hi]) / outside as f64
    } else {
        mu_all
    };
    let sum = window_sum(start, width);
    let significance = zscore(sum, width, mu);
    let excess_counts = sum - width as f64 * mu;

    let (mut wsum, mut wpos) = (0.0, 0.0);
    let mut peak_bin = start;
    for i in start..start + width {
        let excess = (counts[i] - mu).max(0.0);
        wsum += excess;
        wpos += excess * i as f64;
        if counts[i] > counts[peak_bin] {
            peak_bin = i;
        }
    }
    let centroid_bin = if wsum > 0.0 { wpos / wsum } else { peak_bin as f64 };
    let estimate = OffsetEstimate {
        delta_t_ns: h.bin_center_ns((centroid_bin.round() as usize).min(n - 1)),
        peak_bin_center_ns: h.bin_center_ns(peak_bin),
        significance,
        peak_to_background: if mu > 0.0 {
            sum / (width as f64 * mu)
        } else {
            f64::INFINITY
        },
        excess_counts,
        width_bins: width,
    };
    if significance >= lock.threshold_sigma && excess_counts >= lock.min_excess_counts {
        Ok(estimate)
    } else {
        Err(SyncError::NoLock { significance })
    }
}

fn snap(x: f64, grid: f64) -> f64 {
    (x / grid).round() * grid
}

/// Histogram centered on a multiple of `bin_ns` with an odd bin count, so bin
/// centers fall on the `bin_ns` grid.
fn fine_histogram(
    a: &[TimeTag],
    b: &[TimeTag],
    center_ns: f64,
    bin_ns: f64,
    span_ns: f64,
) -> Result<CorrelationHistogram, SyncError> {
    let half = (0.5 * span_ns / bin_ns).round().max(1.0);
    cross_correlate_around(a, b, snap(center_ns, bin_ns), bin_ns, (2.0 * half + 1.0) * bin_ns)
}

/// Two-pass offset search over `center_ns +- span_ns / 2`.
pub fn acquire(
    a: &[TimeTag],
    b: &[TimeTag],
    center_ns: f64,
    span_ns: f64,
    cfg: &SyncConfig,
) -> Result<OffsetEstimate, SyncError> {
    let coarse = cross_correlate_around(a, b, center_ns, cfg.coarse_bin_ns, span_ns)?;
    // rank adjacent bin pairs so a peak straddling a bin edge is not halved
    let pair_sum = |i: usize| coarse.bins[i] + coarse.bins.get(i + 1).copied().unwrap_or(0);
    let mut order: Vec<usize> = (0..coarse.bins.len()).collect();
    order.sort_by(|&i, &j| pair_sum(j).cmp(&pair_sum(i)).then(i.cmp(&j)));
    let mut best: Option<OffsetEstimate> = None;
    let mut best_z = f64::NEG_INFINITY;
    for &i in order.iter().take(cfg.candidates.max(1)) {
        let edge = coarse.lower_edge_ns() + (i + 1) as f64 * cfg.coarse_bin_ns;
        let h = fine_histogram(a, b, edge, cfg.bin_ns, 5.0 * cfg.coarse_bin_ns)?;
        match find_offset(&h, &cfg.lock) {
            Ok(est) if est.significance > best_z => {
                best_z = est.significance;
                best = Some(est);
            }
            Ok(_) => {}
            Err(SyncError::NoLock { significance }) => best_z = best_z.max(significance),
            Err(e) => return Err(e),
        }
    }
    best.ok_or(SyncError::NoLock { significance: best_z })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOffset {
    /// Block start on Bob's clock, seconds after the track origin.
    pub block_start_s: f64,
    /// Midpoint of the data the block covers, same axis.
    pub center_s: f64,
    /// `None` when the block did not lock.
    pub delta_t_ns: Option<f64>,
    pub significance: f64,
}

/// Per-block relative clock offset.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftTrack {
    pub block_length_s: f64,
    pub resolution_ns: f64,
    /// Bob timestamp of the first tag, the zero of the block axis.
    pub origin_ps: u64,
    pub blocks: Vec<BlockOffset>,
}

impl DriftTrack {
    pub fn locked(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.blocks.iter().filter_map(|b| b.delta_t_ns.map(|d| (b.center_s, d)))
    }

    pub fn locked_count(&self) -> usize {
        self.locked().count()
    }

    /// Offset at a Bob timestamp, linear between block centers and held
    /// constant beyond the first and last locked block.
    pub fn offset_at_ps(&self, t_bob_ps: u64) -> Option<f64> {
        let t = (t_bob_ps as f64 - self.origin_ps as f64) * 1e-12;
        let mut prev: Option<(f64, f64)> = None;
        for (c, d) in self.locked() {
            if t <= c {
                return Some(match prev {
                    None => d,
                    Some((c0, d0)) => d0 + (d - d0) * (t - c0) / (c - c0),
                });
            }
            prev = Some((c, d));
        }
        prev.map(|(_, d)| d)
    }

    /// Least-squares slope of the locked offsets, ns per second.
    pub fn drift_slope_ns_per_s(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self.locked().collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    }

    /// One row per block; blocks without lock leave `delta_t_ns` empty.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(DRIFT_CSV_HEADER.split(','))?;
        for b in &self.blocks {
            wtr.write_record([
                format!("{}", b.block_start_s),
                b.delta_t_ns.map(|d| format!("{d}")).unwrap_or_default(),
                format!("{:.3}", b.significance),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Blockwise offset recovery on Bob's time axis.
pub fn track_drift(a: &TagStream, b: &TagStream, cfg: &SyncConfig) -> Result<DriftTrack, SyncError> {
    if a.is_empty() || b.is_empty() {
        return Err(SyncError::EmptyStream);
    }
    if !(cfg.block_length_s > 0.0) {
        return Err(SyncError::NonPositiveBlock(cfg.block_length_s));
    }
    if !(cfg.bin_ns > 0.0) {
        return Err(SyncError::NonPositiveBin(cfg.bin_ns));
    }
    let origin = b.tags[0].timestamp_ps();
    let last = b.tags[b.len() - 1].timestamp_ps();
    let block_ps = (cfg.block_length_s * 1e12).round() as u64;
    let n_blocks = ((last - origin) / block_ps + 1) as usize;
    let alice_slice = |b_lo: u64, b_hi: u64, center_ns: f64, span_ns: f64| {
        let reach = (center_ns.abs() + span_ns) * 1e3;
        let lo = (b_lo as f64 - reach).max(0.0) as u64;
        let hi = b_hi as f64 + reach;
        let i0 = a.lower_bound(lo);
        let i1 = a.tags.partition_point(|t| (t.timestamp_ps() as f64) <= hi);
        &a.tags[i0..i1]
    };

    let mut blocks = Vec::with_capacity(n_blocks);
    let mut prev: Option<f64> = None;
    for k in 0..n_blocks {
        let b_lo = origin + k as u64 * block_ps;
        let b_hi = b_lo + block_ps;
        let bs = &b.tags[b.lower_bound(b_lo)..b.lower_bound(b_hi)];
        let block_start_s = (b_lo - origin) as f64 * 1e-12;
        let center_s = match (bs.first(), bs.last()) {
            (Some(f), Some(l)) => {
                0.5 * ((f.timestamp_ps() - origin) as f64 + (l.timestamp_ps() - origin) as f64) * 1e-12
            }
            _ => block_start_s + 0.5 * cfg.block_length_s,
        };
        let tracked = prev.and_then(|c| {
            let s = alice_slice(b_lo, b_hi, c, cfg.track_span_ns);
            if s.is_empty() || bs.is_empty() {
                return None;
            }
            fine_histogram(s, bs, c, cfg.bin_ns, cfg.track_span_ns)
                .and_then(|h| find_offset(&h, &cfg.lock))
                .ok()
        });
        let result = match tracked {
            Some(est) => Ok(est),
            None => {
                let s = alice_slice(b_lo, b_hi, cfg.initial_offset_ns, cfg.search_span_ns);
                if s.is_empty() || bs.is_empty() {
                    Err(SyncError::NoLock { significance: 0.0 })
                } else {
                    acquire(s, bs, cfg.initial_offset_ns, cfg.search_span_ns, cfg)
                }
            }
        };
        let entry = match result {
            Ok(est) => {
                prev = Some(est.delta_t_ns);
                BlockOffset {
                    block_start_s,
                    center_s,
                    delta_t_ns: Some(est.delta_t_ns),
                    significance: est.significance,
                }
            }
            Err(SyncError::NoLock { significance }) => {
                prev = None;
                BlockOffset {
                    block_start_s,
                    center_s,
                    delta_t_ns: None,
                    significance,
                }
            }
            Err(e) => return Err(e),
        };
        blocks.push(entry);
    }
    Ok(DriftTrack {
        block_length_s: cfg.block_length_s,
        resolution_ns: cfg.bin_ns,
        origin_ps: origin,
        blocks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coincidence {
    pub alice_index: usize,
    pub bob_index: usize,
    /// Raw `t_bob - t_alice` before offset correction.
    pub delay_ps: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceSet {
    /// Ordered by Alice index.
    pub pairs: Vec<Coincidence>,
    pub window_ns: f64,
}

impl CoincidenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(COINCIDENCE_CSV_HEADER.split(','))?;
        for p in &self.pairs {
            wtr.write_record([
                p.alice_index.to_string(),
                p.bob_index.to_string(),
                p.delay_ps.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Matches tags whose offset-corrected times differ by at most half the
/// window. Candidate pairs are accepted greedily, closest first; equal
/// residuals go to the earlier Alice tag.
pub fn pair_coincidences(
    a: &TagStream,
    b: &TagStream,
    track: &DriftTrack,
    window_ns: f64,
) -> Result<CoincidenceSet, SyncError> {
    if !(window_ns > 0.0) {
        return Err(SyncError::NonPositiveWindow(window_ns));
    }
    if track.locked_count() == 0 {
        return Err(SyncError::NoLock { significance: 0.0 });
    }
    let half_ps = 0.5 * window_ns * 1e3;
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    let mut start = 0;
    for (j, tb) in b.tags.iter().enumerate() {
        let tb_ps = tb.timestamp_ps();
        let offset_ps = track.offset_at_ps(tb_ps).unwrap_or(0.0) * 1e3;
        let residual = |ta: &TimeTag| (ta.timestamp_ps() as i64 - tb_ps as i64) as f64 + offset_ps;
        while start < a.tags.len() && residual(&a.tags[start]) < -half_ps {
            start += 1;
        }
        for (i, ta) in a.tags.iter().enumerate().skip(start) {
            let r = residual(ta);
            if r > half_ps {
                break;
            }
            edges.push((r.abs(), i, j));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = std::collections::HashSet::new();
    let mut used_b = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    for (_, i, j) in edges {
        if used_a.contains(&i) || used_b.contains(&j) {
            continue;
        }
        used_a.insert(i);
        used_b.insert(j);
        pairs.push(Coincidence {
            alice_index: i,
            bob_index: j,
            delay_ps: b.tags[j].timestamp_ps() as i64 - a.tags[i].timestamp_ps() as i64,
        });
    }
    pairs.sort_by_key(|p| p.alice_index);
    Ok(CoincidenceSet { pairs, window_ns })
}
