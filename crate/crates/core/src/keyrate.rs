//! Analytic link model: visibility budget, QBER and the asymptotic secure key
//! rate of a BBM92 link as a function of the two arm attenuations.
//!
//! The accidental-coincidence model is a continuous-wave one. For total
//! singles rates `S_A`, `S_B` (signal photons that survived their arm plus
//! dark/background counts of both detectors) and a coincidence window of
//! width `tau`, uncorrelated detections coincide at `S_A * S_B * tau` per
//! second. Half of those land on the "wrong" detector pair, which gives
//!
//! ```text
//! V_acc = C / (C + S_A * S_B * tau)
//! ```
//!
//! with `C` the rate of true (same-pair) coincidences. Multi-pair emission is
//! contained in the singles: a brighter source raises `S_A * S_B`
//! quadratically while `C` only grows linearly.

use std::io::Write;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::ScenarioConfig;

/// Number of single-photon detectors behind each party's analyzer.
pub const DETECTORS_PER_PARTY: f64 = 2.0;

/// Measured CASCADE inefficiency `(qber, f)` pairs. The 4 % and 6.9 % points
/// are the values quoted for the field runs; the rest is the usual table for
/// the original four-pass protocol.
pub const CASCADE_EFFICIENCY_TABLE: [(f64, f64); 6] = [
    (0.01, 1.16),
    (0.04, 1.16),
    (0.05, 1.16),
    (0.069, 1.18),
    (0.10, 1.22),
    (0.15, 1.35),
];

/// Header of the rate-vs-attenuation CSV.
pub const CURVE_CSV_HEADER: &str = "attenuation_db,coincidence_rate_per_s,qber,secure_rate_bits_per_s";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyRateError {
    #[error("{name} = {value} is outside [{lo}, {hi}]")]
    Domain {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("visibility needs at least one coincidence count")]
    ZeroCounts,
    #[error("n_min ({n_min}) exceeds n_max ({n_max})")]
    InvertedCounts { n_max: u64, n_min: u64 },
    #[error("coincidence window must be positive, got {0} ns")]
    NonPositiveWindow(f64),
    #[error("empty attenuation range {start}..={end} dB")]
    EmptyRange { start: f64, end: f64 },
    #[error("step must be positive, got {0} dB")]
    NonPositiveStep(f64),
    #[error("efficiency table must be non-empty, sorted by qber and have f >= 1")]
    BadEfficiencyTable,
}

fn check_range(name: &'static str, value: f64, lo: f64, hi: f64) -> Result<f64, KeyRateError> {
    if value.is_finite() && (lo..=hi).contains(&value) {
        Ok(value)
    } else {
        Err(KeyRateError::Domain { name, value, lo, hi })
    }
}

fn check_fraction(name: &'static str, value: f64) -> Result<f64, KeyRateError> {
    check_range(name, value, 0.0, 1.0)
}

/// `H2(x) = -x log2 x - (1-x) log2 (1-x)`, with `H2(0) = H2(1) = 0`.
pub fn binary_entropy(x: f64) -> Result<f64, KeyRateError> {
    check_fraction("x", x)?;
    Ok(entropy_unchecked(x))
}

fn entropy_unchecked(x: f64) -> f64 {
    let term = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.log2() };
    term(x) + term(1.0 - x)
}

/// `q = (1 - V_tot) / 2`.
pub fn qber_from_visibility(v_tot: f64) -> Result<f64, KeyRateError> {
    check_fraction("v_tot", v_tot)?;
    Ok((1.0 - v_tot) / 2.0)
}

/// Correlation visibility from the coincidence maximum and minimum.
pub fn visibility_from_counts(n_max: u64, n_min: u64) -> Result<f64, KeyRateError> {
    if n_min > n_max {
        return Err(KeyRateError::InvertedCounts { n_max, n_min });
    }
    let total = n_max + n_min;
    if total == 0 {
        return Err(KeyRateError::ZeroCounts);
    }
    Ok((n_max - n_min) as f64 / total as f64)
}

/// `V_tot = V_sys * V_acc`.
pub fn compose_visibility(v_sys: f64, v_acc: f64) -> Result<f64, KeyRateError> {
    Ok(check_fraction("v_sys", v_sys)? * check_fraction("v_acc", v_acc)?)
}

/// Visibility factors of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityBudget {
    /// Systematic (source and analyzer) visibility.
    pub v_sys: f64,
    /// Accidental-coincidence limited visibility.
    pub v_acc: f64,
    /// Visibility actually expected on the link.
    pub v_tot: f64,
    /// Model upper bound `v_sys * v_acc`.
    pub v_th: f64,
}

impl VisibilityBudget {
    /// Budget with an extra in-field degradation factor on top of the model
    /// bound (for example polarization drift in a transmitter fiber).
    pub fn new(v_sys: f64, v_acc: f64, field_visibility: f64) -> Result<Self, KeyRateError> {
        let v_th = compose_visibility(v_sys, v_acc)?;
        let v_tot = v_th * check_fraction("field_visibility", field_visibility)?;
        Ok(Self {
            v_sys,
            v_acc,
            v_tot,
            v_th,
        })
    }
}

/// Where the pair source sits relative to the two receivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    AtAlice,
    Asymmetric,
    Middle,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::AtAlice, Placement::Asymmetric, Placement::Middle];

    /// Alice's arm loss that stays fixed while the link attenuation is swept:
    /// her analyzer module alone, or analyzer plus the 6 km delay fiber.
    pub fn fixed_alice_arm_db(self) -> Option<f64> {
        match self {
            Placement::AtAlice => Some(3.0),
            Placement::Asymmetric => Some(20.0),
            Placement::Middle => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::AtAlice => "at-alice",
            Placement::Asymmetric => "asymmetric",
            Placement::Middle => "middle",
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Placement::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown placement `{s}` (expected at-alice, asymmetric or middle)"))
    }
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Two-photon attenuation split over Alice's and Bob's arms. Detector
/// efficiencies are folded into the arm losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub placement: Placement,
    pub alice_arm_db: f64,
    pub bob_arm_db: f64,
}

impl LinkBudget {
    pub fn new(placement: Placement, alice_arm_db: f64, bob_arm_db: f64) -> Result<Self, KeyRateError> {
        check_range("alice_arm_db", alice_arm_db, 0.0, f64::MAX)?;
        check_range("bob_arm_db", bob_arm_db, 0.0, f64::MAX)?;
        Ok(Self {
            placement,
            alice_arm_db,
            bob_arm_db,
        })
    }

    /// Distributes `total_db` over the arms the way the placement's geometry
    /// does: fixed Alice arm for the asymmetric layouts, equal split for the
    /// source in the middle.
    pub fn for_total(placement: Placement, total_db: f64) -> Result<Self, KeyRateError> {
        match placement.fixed_alice_arm_db() {
            Some(alice) => {
                check_range("total_db", total_db, alice, f64::MAX)?;
                Self::new(placement, alice, total_db - alice)
            }
            None => Self::new(placement, total_db / 2.0, total_db / 2.0),
        }
    }

    pub fn total_db(&self) -> f64 {
        self.alice_arm_db + self.bob_arm_db
    }

    pub fn alice_transmittance(&self) -> f64 {
        db_to_transmittance(self.alice_arm_db)
    }

    pub fn bob_transmittance(&self) -> f64 {
        db_to_transmittance(self.bob_arm_db)
    }
}

pub fn db_to_transmittance(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

/// Error-correction inefficiency `f(q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ReconciliationEfficiency {
    Fixed {
        f: f64,
    },
    /// Piecewise-linear in `q`, held constant outside the table.
    Table {
        points: Vec<(f64, f64)>,
    },
}

impl Default for ReconciliationEfficiency {
    fn default() -> Self {
        ReconciliationEfficiency::Table {
            points: CASCADE_EFFICIENCY_TABLE.to_vec(),
        }
    }
}

impl ReconciliationEfficiency {
    pub fn validate(&self) -> Result<(), KeyRateError> {
        match self {
            ReconciliationEfficiency::Fixed { f } => check_range("f", *f, 1.0, f64::MAX).map(|_| ()),
            ReconciliationEfficiency::Table { points } => {
                let sorted = points.windows(2).all(|w| w[0].0 < w[1].0);
                let sane = points.iter().all(|&(q, f)| (0.0..=0.5).contains(&q) && f >= 1.0);
                if points.is_empty() || !sorted || !sane {
                    Err(KeyRateError::BadEfficiencyTable)
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn factor(&self, qber: f64) -> f64 {
        let f = match self {
            ReconciliationEfficiency::Fixed { f } => *f,
            ReconciliationEfficiency::Table { points } => interpolate(points, qber),
        };
        f.max(1.0)
    }
}

fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let (first, last) = (points[0], points[points.len() - 1]);
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let i = points.partition_point(|&(px, _)| px <= x);
    let (x0, y0) = points[i - 1];
    let (x1, y1) = points[i];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Source brightness, detector noise and post-processing inputs of the
/// analytic model.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDetectorParams {
    /// Pair coincidences detected right at the source, pairs/s.
    pub local_pair_rate: f64,
    /// Singles detected at the source per arm, counts/s.
    pub local_singles_rate_per_arm: f64,
    /// Dark plus background counts per detector at Alice, counts/s.
    pub dark_rate_alice: f64,
    /// Dark plus background counts per detector at Bob, counts/s.
    pub dark_rate_bob: f64,
    pub coincidence_window_ns: f64,
    pub v_sys: f64,
    /// Extra visibility factor seen in the field (1.0 = model bound).
    pub field_visibility: f64,
    pub error_correction: ReconciliationEfficiency,
}

impl SourceDetectorParams {
    pub fn validate(&self) -> Result<(), KeyRateError> {
        if !(self.coincidence_window_ns > 0.0) {
            return Err(KeyRateError::NonPositiveWindow(self.coincidence_window_ns));
        }
        check_range("local_pair_rate", self.local_pair_rate, 0.0, f64::MAX)?;
        check_range(
            "local_singles_rate_per_arm",
            self.local_singles_rate_per_arm,
            self.local_pair_rate,
            f64::MAX,
        )?;
        check_range("dark_rate_alice", self.dark_rate_alice, 0.0, f64::MAX)?;
        check_range("dark_rate_bob", self.dark_rate_bob, 0.0, f64::MAX)?;
        check_fraction("v_sys", self.v_sys)?;
        check_fraction("field_visibility", self.field_visibility)?;
        self.error_correction.validate()
    }

    /// Same parameters with the in-field degradation removed.
    pub fn model_bound(&self) -> Self {
        Self {
            field_visibility: 1.0,
            ..self.clone()
        }
    }
}

/// Expected rates at the two receivers, per second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoincidenceBudget {
    pub true_coincidences: f64,
    pub accidental_coincidences: f64,
    pub singles_alice: f64,
    pub singles_bob: f64,
}

pub fn coincidence_budget(
    params: &SourceDetectorParams,
    budget: &LinkBudget,
) -> Result<CoincidenceBudget, KeyRateError> {
    params.validate()?;
    let (t_a, t_b) = (budget.alice_transmittance(), budget.bob_transmittance());
    let singles_alice = params.local_singles_rate_per_arm * t_a + DETECTORS_PER_PARTY * params.dark_rate_alice;
    let singles_bob = params.local_singles_rate_per_arm * t_b + DETECTORS_PER_PARTY * params.dark_rate_bob;
    Ok(CoincidenceBudget {
        true_coincidences: params.local_pair_rate * t_a * t_b,
        accidental_coincidences: singles_alice * singles_bob * params.coincidence_window_ns * 1e-9,
        singles_alice,
        singles_bob,
    })
}

/// Predicted accidental-limited visibility `C / (C + S_A S_B tau)`.
pub fn accidental_visibility(params: &SourceDetectorParams, budget: &LinkBudget) -> Result<f64, KeyRateError> {
    let rates = coincidence_budget(params, budget)?;
    let total = rates.true_coincidences + rates.accidental_coincidences;
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok(rates.true_coincidences / total)
}

/// The secret fraction `1 - f H2(q) - H2(q)`; negative above the cutoff.
pub fn secret_fraction(qber: f64, f: f64) -> Result<f64, KeyRateError> {
    check_range("qber", qber, 0.0, 0.5)?;
    check_range("f", f, 1.0, f64::MAX)?;
    let h = entropy_unchecked(qber);
    Ok(1.0 - f * h - h)
}

/// Asymptotic Koashi-Preskill rate `max(0, C/2 * (1 - f H2(q) - H2(q)))`.
pub fn koashi_preskill_rate(coincidence_rate: f64, qber: f64, f: f64) -> Result<f64, KeyRateError> {
    check_range("coincidence_rate", coincidence_rate, 0.0, f64::MAX)?;
    if !(0.0..0.5).contains(&qber) {
        return Err(KeyRateError::Domain {
            name: "qber",
            value: qber,
            lo: 0.0,
            hi: 0.5,
        });
    }
    let bracket = secret_fraction(qber, f)?;
    Ok((0.5 * coincidence_rate * bracket).max(0.0))
}

/// Largest QBER with a positive secret fraction under `efficiency`.
pub fn positive_rate_cutoff(efficiency: &ReconciliationEfficiency) -> f64 {
    let g = |q: f64| 1.0 - (1.0 + efficiency.factor(q)) * entropy_unchecked(q);
    let (mut lo, mut hi) = (0.0, 0.5);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePrediction {
    /// Detected coincidences per second, true plus accidental.
    pub coincidence_rate: f64,
    pub sifted_rate: f64,
    pub qber: f64,
    pub error_correction_factor: f64,
    pub secure_rate: f64,
    pub visibility: VisibilityBudget,
}

/// Chains the link budget through the visibility model into QBER and key rate.
pub fn predict(params: &SourceDetectorParams, budget: &LinkBudget) -> Result<RatePrediction, KeyRateError> {
    let rates = coincidence_budget(params, budget)?;
    let v_acc = accidental_visibility(params, budget)?;
    let visibility = VisibilityBudget::new(params.v_sys, v_acc, params.field_visibility)?;
    let qber = qber_from_visibility(visibility.v_tot)?;
    let coincidence_rate = rates.true_coincidences + rates.accidental_coincidences;
    let f = params.error_correction.factor(qber);
    let secure_rate = if qber < 0.5 {
        koashi_preskill_rate(coincidence_rate, qber, f)?
    } else {
        0.0
    };
    Ok(RatePrediction {
        coincidence_rate,
        sifted_rate: coincidence_rate / 2.0,
        qber,
        error_correction_factor: f,
        secure_rate,
        visibility,
    })
}

/// Prediction for a full scenario file.
pub fn predict_scenario(config: &ScenarioConfig) -> Result<RatePrediction, KeyRateError> {
    predict(&config.source_detector_params(), &config.link_budget()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub attenuation_db: f64,
    pub prediction: RatePrediction,
}

/// Secure rate versus total two-photon attenuation for one placement.
///
/// The sweep starts no lower than the placement's fixed Alice arm, so the
/// at-Alice curve begins at 3 dB and the asymmetric one at 20 dB.
pub fn rate_vs_attenuation_curve(
    placement: Placement,
    range_db: RangeInclusive<f64>,
    step_db: f64,
    params: &SourceDetectorParams,
) -> Result<Vec<CurvePoint>, KeyRateError> {
    let (start, end) = (*range_db.start(), *range_db.end());
    check_range("range start", start, 0.0, 100.0)?;
    check_range("range end", end, 0.0, 100.0)?;
    if !(step_db > 0.0) {
        return Err(KeyRateError::NonPositiveStep(step_db));
    }
    let first = start.max(placement.fixed_alice_arm_db().unwrap_or(0.0));
    if first > end {
        return Err(KeyRateError::EmptyRange { start, end });
    }
    let n = ((end - first) / step_db + 1e-9).floor() as usize + 1;
    (0..n)
        .map(|i| {
            let attenuation_db = first + i as f64 * step_db;
            let budget = LinkBudget::for_total(placement, attenuation_db)?;
            Ok(CurvePoint {
                attenuation_db,
                prediction: predict(params, &budget)?,
            })
        })
        .collect()
}

/// Formats `x` with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

pub fn write_curve_csv<W: Write>(out: W, points: &[CurvePoint]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CURVE_CSV_HEADER.split(','))?;
    for p in points {
        wtr.write_record([
            format_sig6(p.attenuation_db),
            format_sig6(p.prediction.coincidence_rate),
            format_sig6(p.prediction.qber),
            format_sig6(p.prediction.secure_rate),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ideal_params() -> SourceDetectorParams {
        SourceDetectorParams {
            local_pair_rate: 1e6,
            local_singles_rate_per_arm: 1e6,
            dark_rate_alice: 0.0,
            dark_rate_bob: 0.0,
            coincidence_window_ns: 1e-9,
            v_sys: 1.0,
            field_visibility: 1.0,
            error_correction: ReconciliationEfficiency::Fixed { f: 1.0 },
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.5).unwrap() - 1.0).abs() < 1e-15);
        // mpmath, 40 digits: 0.36218071725715643612...
        assert!((binary_entropy(0.069).unwrap() - 0.362_180_717_257_156_4).abs() < 1e-12);
        assert!(binary_entropy(-0.01).is_err());
        assert!(binary_entropy(1.5).is_err());
        assert!(binary_entropy(f64::NAN).is_err());
    }

    #[test]
    fn qber_examples() {
        assert_eq!(qber_from_visibility(1.0).unwrap(), 0.0);
        assert!((qber_from_visibility(0.862).unwrap() - 0.069).abs() < 1e-12);
        assert!((qber_from_visibility(0.92).unwrap() - 0.04).abs() < 1e-12);
        assert!(qber_from_visibility(1.01).is_err());
    }

    #[test]
    fn visibility_from_count_examples() {
        assert_eq!(visibility_from_counts(100, 100).unwrap(), 0.0);
        assert_eq!(visibility_from_counts(100, 0).unwrap(), 1.0);
        assert!((visibility_from_counts(97, 3).unwrap() - 0.94).abs() < 1e-12);
        assert_eq!(visibility_from_counts(0, 0), Err(KeyRateError::ZeroCounts));
        assert!(matches!(
            visibility_from_counts(3, 97),
            Err(KeyRateError::InvertedCounts { .. })
        ));
    }

    #[test]
    fn compose_examples() {
        assert!((compose_visibility(0.96, 0.98).unwrap() - 0.9408).abs() < 1e-15);
        assert_eq!(compose_visibility(0.77, 1.0).unwrap(), 0.77);
        assert!((compose_visibility(0.94, 0.936).unwrap() - 0.880).abs() < 5e-4);
        assert!(compose_visibility(1.2, 0.5).is_err());
    }

    #[test]
    fn accidental_visibility_ideal_link() {
        let budget = LinkBudget::new(Placement::AtAlice, 3.0, 10.0).unwrap();
        let v = accidental_visibility(&ideal_params(), &budget).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn accidental_visibility_rejects_zero_window() {
        let params = SourceDetectorParams {
            coincidence_window_ns: 0.0,
            ..ideal_params()
        };
        let budget = LinkBudget::new(Placement::AtAlice, 3.0, 10.0).unwrap();
        assert_eq!(
            accidental_visibility(&params, &budget),
            Err(KeyRateError::NonPositiveWindow(0.0))
        );
    }

    #[test]
    fn koashi_preskill_examples() {
        let c = 1000.0;
        assert!((koashi_preskill_rate(c, 0.0, 1.0).unwrap() - c / 2.0).abs() < 1e-12);
        let r = koashi_preskill_rate(c, 0.069, 1.18).unwrap();
        // bracket 0.21044603637939896925 (mpmath)
        assert!((r - 0.210_446_036_379_399 * c / 2.0).abs() < 1e-9);
        assert!((r - 0.210 * c / 2.0).abs() <= 0.002 * c);
        let middle = koashi_preskill_rate(0.071, 0.04, 1.16).unwrap();
        assert!((middle - 0.016_921_034_941_160_44).abs() < 1e-12);
        assert!((middle - 0.02).abs() <= 0.3 * 0.02);
        assert_eq!(koashi_preskill_rate(c, 0.2, 1.18).unwrap(), 0.0);
        assert!(koashi_preskill_rate(c, 0.5, 1.0).is_err());
        assert!(koashi_preskill_rate(c, 0.05, 0.9).is_err());
    }

    #[test]
    fn cutoff_for_fixed_efficiency() {
        let q = positive_rate_cutoff(&ReconciliationEfficiency::Fixed { f: 1.18 });
        // mpmath findroot: 0.096783435388202154268
        assert!((q - 0.096_783_435_388_202_15).abs() < 1e-12);
        assert!(q > 0.09 && q < 0.11);
    }

    #[test]
    fn efficiency_table_hits_quoted_points() {
        let table = ReconciliationEfficiency::default();
        assert!((table.factor(0.069) - 1.18).abs() < 1e-12);
        assert!((table.factor(0.04) - 1.16).abs() < 1e-12);
        assert_eq!(table.factor(0.0), 1.16);
        assert_eq!(table.factor(0.4), 1.35);
        assert!(table.validate().is_ok());
        let unsorted = ReconciliationEfficiency::Table {
            points: vec![(0.1, 1.2), (0.05, 1.1)],
        };
        assert_eq!(unsorted.validate(), Err(KeyRateError::BadEfficiencyTable));
    }

    #[test]
    fn link_budget_splits() {
        let b = LinkBudget::for_total(Placement::AtAlice, 35.0).unwrap();
        assert_eq!((b.alice_arm_db, b.bob_arm_db), (3.0, 32.0));
        let b = LinkBudget::for_total(Placement::Asymmetric, 58.0).unwrap();
        assert_eq!((b.alice_arm_db, b.bob_arm_db), (20.0, 38.0));
        let b = LinkBudget::for_total(Placement::Middle, 71.0).unwrap();
        assert_eq!((b.alice_arm_db, b.bob_arm_db), (35.5, 35.5));
        assert_eq!(b.total_db(), 71.0);
        assert!(LinkBudget::for_total(Placement::AtAlice, 2.0).is_err());
        assert!(LinkBudget::new(Placement::Middle, -1.0, 3.0).is_err());
    }

    #[test]
    fn curve_rejects_bad_ranges() {
        let p = ideal_params();
        assert!(matches!(
            rate_vs_attenuation_curve(Placement::Middle, 10.0..=5.0, 1.0, &p),
            Err(KeyRateError::EmptyRange { .. })
        ));
        assert!(rate_vs_attenuation_curve(Placement::Middle, 0.0..=120.0, 1.0, &p).is_err());
        assert!(rate_vs_attenuation_curve(Placement::Middle, 0.0..=10.0, 0.0, &p).is_err());
        let c = rate_vs_attenuation_curve(Placement::AtAlice, 0.0..=10.0, 1.0, &p).unwrap();
        assert_eq!(c[0].attenuation_db, 3.0);
        assert_eq!(c.last().unwrap().attenuation_db, 10.0);
        assert_eq!(c.len(), 8);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(173.929), "173.929");
        assert_eq!(format_sig6(0.0690123456), "0.0690123");
        assert_eq!(format_sig6(3.0), "3");
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.23456789e-7), "1.23457e-7");
        assert_eq!(format_sig6(87_456_123.0), "8.74561e7");
    }

    proptest! {
        #[test]
        fn entropy_is_symmetric(x in 0.0f64..=1.0) {
            let a = binary_entropy(x).unwrap();
            let b = binary_entropy(1.0 - x).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&a));
        }

        #[test]
        fn qber_visibility_roundtrip(q in 0.0f64..=0.5) {
            let back = qber_from_visibility(1.0 - 2.0 * q).unwrap();
            prop_assert!((back - q).abs() < 1e-12);
        }

        #[test]
        fn kp_rate_non_negative_and_decreasing(c in 0.0f64..1e6, q1 in 0.0f64..0.49, dq in 1e-4f64..0.01, f in 1.0f64..2.0) {
            let q2 = (q1 + dq).min(0.4999);
            let r1 = koashi_preskill_rate(c, q1, f).unwrap();
            let r2 = koashi_preskill_rate(c, q2, f).unwrap();
            prop_assert!(r1 >= 0.0 && r2 >= 0.0);
            if c > 0.0 && secret_fraction(q2, f).unwrap() > 0.0 {
                prop_assert!(r1 > r2);
            }
        }
    }
}
