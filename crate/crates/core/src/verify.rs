//! Closed-loop verification: Monte Carlo regulation runs, frequency metrics
//! and violation classification.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{expm, hinf_norm, loop_margins, AnalysisError, FreqMetrics};
use crate::model::{PlantModel, SpecSet};
use crate::serde_ext;

/// Settling band as a fraction of the peak state norm.
pub const SETTLING_FRACTION: f64 = 0.02;
/// State norm beyond which a trial counts as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("gain is {rows}x{cols}; expected {m}x{n} (state) or {m}x{ny} (output)")]
    Shape { rows: usize, cols: usize, m: usize, n: usize, ny: String },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_trials: usize,
    pub horizon_s: f64,
    pub dt_s: f64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_trials: 50, horizon_s: 20.0, dt_s: 0.01, seed: 42 }
    }
}

impl McConfig {
    pub fn steps(&self) -> usize {
        (self.horizon_s / self.dt_s).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub n_trials: usize,
    #[serde(with = "serde_ext::float")]
    pub settling_time_median_s: f64,
    #[serde(with = "serde_ext::float")]
    pub settling_time_max_s: f64,
    #[serde(with = "serde_ext::float")]
    pub overshoot_median: f64,
    #[serde(with = "serde_ext::float")]
    pub overshoot_max: f64,
    pub diverged_count: usize,
    pub seed: u64,
}

/// Unit-norm initial state of trial `index`; depends only on `(seed, index)`.
pub fn initial_state(seed: u64, index: usize, n: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Settling time and overshoot of one trajectory, plus a divergence flag.
fn run_trial(phi: &DMatrix<f64>, x0: DVector<f64>, cfg: &McConfig) -> (f64, f64, bool) {
    let steps = cfg.steps();
    let mut norms = Vec::with_capacity(steps + 1);
    let mut x = x0;
    norms.push(x.norm());
    for _ in 0..steps {
        x = phi * &x;
        let nx = x.norm();
        if !(nx <= DIVERGENCE_NORM) {
            let peak = norms.iter().copied().fold(0.0, f64::max).max(nx);
            let over = if peak.is_finite() { (peak - norms[0]) / norms[0] } else { f64::INFINITY };
            return (f64::INFINITY, over.max(0.0), true);
        }
        norms.push(nx);
    }
    let peak = norms.iter().copied().fold(0.0, f64::max);
    let overshoot = ((peak - norms[0]) / norms[0]).max(0.0);
    let band = SETTLING_FRACTION * peak;
    let settling = match norms.iter().rposition(|v| *v > band) {
        None => 0.0,
        Some(last) if last == steps => f64::INFINITY,
        Some(last) => (last + 1) as f64 * cfg.dt_s,
    };
    (settling, overshoot, false)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        let (a, b) = (sorted[n / 2 - 1], sorted[n / 2]);
        if a.is_infinite() || b.is_infinite() {
            b
        } else {
            0.5 * (a + b)
        }
    }
}

/// Regulation runs of `x' = (A + BK) x` from unit-norm random initial states,
/// stepped with the exact transition matrix `expm((A + BK) dt)`.
pub fn monte_carlo(p: &PlantModel, k: &DMatrix<f64>, cfg: &McConfig) -> McStats {
    let n = p.n_states();
    let a_cl = p.closed_loop(k);
    let phi = expm(&(a_cl * cfg.dt_s)).ok();
    let mut settling = Vec::with_capacity(cfg.n_trials);
    let mut overshoot = Vec::with_capacity(cfg.n_trials);
    let mut diverged = 0;
    for i in 0..cfg.n_trials {
        let (s, o, d) = match &phi {
            Some(phi) => run_trial(phi, initial_state(cfg.seed, i, n), cfg),
            None => (f64::INFINITY, f64::INFINITY, true),
        };
        settling.push(s);
        overshoot.push(o);
        diverged += usize::from(d);
    }
    settling.sort_by(f64::total_cmp);
    overshoot.sort_by(f64::total_cmp);
    McStats {
        n_trials: cfg.n_trials,
        settling_time_median_s: median(&settling),
        settling_time_max_s: settling.last().copied().unwrap_or(f64::NAN),
        overshoot_median: median(&overshoot),
        overshoot_max: overshoot.last().copied().unwrap_or(f64::NAN),
        diverged_count: diverged,
        seed: cfg.seed,
    }
}

/// Frequency metrics; the branch follows the column count of `K`.
///
/// `n_x` columns: `||(Cz + Dz K)(sI - A - BK)^-1 E||_inf`.
/// `n_y` columns: sensitivity peaks and margins of `u = K y`.
pub fn freq_check(p: &PlantModel, k: &DMatrix<f64>) -> Result<FreqMetrics, VerifyError> {
    let (n, m) = (p.n_states(), p.n_inputs());
    if k.nrows() == m && k.ncols() == n {
        let norm = hinf_norm(&p.closed_loop(k), &p.e, &p.closed_loop_output(k), &DMatrix::zeros(p.n_regulated(), p.n_disturbances()))?;
        return Ok(FreqMetrics::state_feedback(norm));
    }
    if let Some(ny) = p.n_measured() {
        if k.nrows() == m && k.ncols() == ny {
            return Ok(loop_margins(p, k)?);
        }
    }
    Err(VerifyError::Shape {
        rows: k.nrows(),
        cols: k.ncols(),
        m,
        n,
        ny: p.n_measured().map_or("-".into(), |v| v.to_string()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Low,
    Medium,
    High,
    Critical,
}

impl Severity {
    /// Classifies the relative excess `(measured - target) / max(|target|, 1e-9)`.
    pub fn classify(measured: f64, target: f64) -> Self {
        let r = (measured - target) / target.abs().max(1e-9);
        if r <= 0.10 {
            Severity::Low
        } else if r <= 0.50 {
            Severity::Medium
        } else if r <= 2.0 {
            Severity::High
        } else {
            Severity::Critical
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    SettlingTime,
    Overshoot,
    Hinf,
    InfeasibleSynthesis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(with = "serde_ext::float")]
    pub measured: f64,
    #[serde(with = "serde_ext::float")]
    pub target: f64,
    pub severity: Severity,
}

impl Violation {
    pub fn new(kind: ViolationKind, measured: f64, target: f64) -> Self {
        Self { kind, measured, target, severity: Severity::classify(measured, target) }
    }

    /// Synthesis produced no controller; always critical.
    pub fn infeasible(gamma_target: f64) -> Self {
        Self {
            kind: ViolationKind::InfeasibleSynthesis,
            measured: f64::INFINITY,
            target: gamma_target,
            severity: Severity::Critical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub mc: McStats,
    pub freq: FreqMetrics,
    pub violations: Vec<Violation>,
}

/// Median settling and overshoot are compared against `target + slack`; the
/// disturbance rejection against the bare `hinf` target.
pub fn check(mc: &McStats, freq: &FreqMetrics, specs: &SpecSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let st = &specs.settling_time;
    if !(mc.settling_time_median_s <= st.target + st.slack) {
        out.push(Violation::new(ViolationKind::SettlingTime, mc.settling_time_median_s, st.target));
    }
    let os = &specs.overshoot;
    if !(mc.overshoot_median <= os.target + os.slack) {
        out.push(Violation::new(ViolationKind::Overshoot, mc.overshoot_median, os.target));
    }
    if let Some(dr) = freq.disturbance_rejection {
        if !(dr <= specs.hinf.target) {
            out.push(Violation::new(ViolationKind::Hinf, dr, specs.hinf.target));
        }
    }
    out
}

/// Monte Carlo, frequency branch and classification in one call.
pub fn verify(p: &PlantModel, k: &DMatrix<f64>, specs: &SpecSet, cfg: &McConfig) -> Result<VerificationReport, VerifyError> {
    let freq = freq_check(p, k)?;
    let mc = monte_carlo(p, k, cfg);
    let violations = check(&mc, &freq, specs);
    Ok(VerificationReport { mc, freq, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Priority, SpecEntry, TimeDomain};
    use nalgebra::dmatrix;

    fn plant(a: DMatrix<f64>) -> PlantModel {
        let n = a.nrows();
        PlantModel::continuous("t", a, DMatrix::identity(n, n), DMatrix::identity(n, n), DMatrix::identity(n, n), DMatrix::zeros(n, n))
            .unwrap()
    }

    fn specs(ts: f64, os: f64, gt: f64) -> SpecSet {
        SpecSet {
            hinf: SpecEntry::new(gt, 0.0, Priority::High),
            hinf_min: 0.0,
            settling_time: SpecEntry::new(ts, 0.0, Priority::Medium),
            overshoot: SpecEntry::new(os, 0.0, Priority::Low),
            decay_rate: None,
        }
    }

    #[test]
    fn minus_identity_settles_at_ln50() {
        let p = plant(-DMatrix::identity(3, 3));
        let mc = monte_carlo(&p, &DMatrix::zeros(3, 3), &McConfig::default());
        assert!((mc.settling_time_median_s - 50f64.ln()).abs() <= 0.01);
        assert!((mc.settling_time_max_s - 50f64.ln()).abs() <= 0.01);
        assert_eq!(mc.overshoot_max, 0.0);
        assert_eq!(mc.diverged_count, 0);
    }

    #[test]
    fn scaled_decay_settles_at_ln50_over_c() {
        for c in [0.5, 2.0, 4.0] {
            let p = plant(-DMatrix::identity(2, 2) * c);
            let mc = monte_carlo(&p, &DMatrix::zeros(2, 2), &McConfig::default());
            assert!((mc.settling_time_median_s - 50f64.ln() / c).abs() <= 0.01, "c={c} {}", mc.settling_time_median_s);
        }
    }

    #[test]
    fn marginal_never_settles() {
        let p = plant(dmatrix![0.0, 1.0; -1.0, 0.0]);
        let mc = monte_carlo(&p, &DMatrix::zeros(2, 2), &McConfig::default());
        assert!(mc.settling_time_median_s.is_infinite());
        assert_eq!(mc.diverged_count, 0);
    }

    #[test]
    fn unstable_diverges() {
        let p = plant(dmatrix![2.0]);
        let mc = monte_carlo(&p, &dmatrix![0.0], &McConfig::default());
        assert_eq!(mc.diverged_count, 50);
        assert!(mc.settling_time_max_s.is_infinite());
    }

    #[test]
    fn deterministic_for_seed() {
        let p = plant(dmatrix![-1.0, 3.0; 0.0, -2.0]);
        let k = DMatrix::zeros(2, 2);
        let cfg = McConfig::default();
        assert_eq!(monte_carlo(&p, &k, &cfg), monte_carlo(&p, &k, &cfg));
        let other = monte_carlo(&p, &k, &McConfig { seed: 7, ..cfg });
        assert_ne!(other.overshoot_max, monte_carlo(&p, &k, &cfg).overshoot_max);
    }

    #[test]
    fn initial_states_are_unit_and_independent_of_count() {
        let a = initial_state(42, 3, 4);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(a, initial_state(42, 3, 4));
        assert_ne!(a, initial_state(42, 4, 4));
    }

    #[test]
    fn zero_gain_gives_open_loop_norm() {
        let p = PlantModel::continuous("s", dmatrix![-2.0], dmatrix![1.0], dmatrix![3.0], dmatrix![1.0], dmatrix![0.0]).unwrap();
        let f = freq_check(&p, &dmatrix![0.0]).unwrap();
        assert!((f.disturbance_rejection.unwrap() - 1.5).abs() < 1e-6);
    }

    #[test]
    fn output_shaped_gain_uses_margins() {
        let p = PlantModel::new(
            "o",
            dmatrix![-1.0, 0.0; 0.0, -2.0],
            dmatrix![1.0; 1.0],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            Some(dmatrix![1.0, 1.0]),
            TimeDomain::Continuous,
            None,
        )
        .unwrap();
        let f = freq_check(&p, &dmatrix![0.5]).unwrap();
        assert!(f.disturbance_rejection.is_none());
        assert!(f.ms.is_some() && f.pm_deg.is_some());
        assert!(matches!(freq_check(&p, &dmatrix![1.0, 2.0, 3.0]), Err(VerifyError::Shape { .. })));
    }

    #[test]
    fn severity_bands() {
        assert_eq!(Severity::classify(16.8, 16.0), Severity::Low);
        assert_eq!(Severity::classify(0.939, 0.10), Severity::Critical);
        assert_eq!(Severity::classify(1.5, 1.0), Severity::Medium);
        assert_eq!(Severity::classify(1.51, 1.0), Severity::High);
        assert_eq!(Severity::classify(3.0, 1.0), Severity::High);
        assert_eq!(Severity::classify(3.01, 1.0), Severity::Critical);
    }

    #[test]
    fn check_applies_slack_to_time_specs_only() {
        let mc = McStats {
            n_trials: 1,
            settling_time_median_s: 16.8,
            settling_time_max_s: 16.8,
            overshoot_median: 0.05,
            overshoot_max: 0.05,
            diverged_count: 0,
            seed: 42,
        };
        let mut s = specs(16.0, 0.1, 5.0);
        let v = check(&mc, &FreqMetrics::state_feedback(5.0), &s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::SettlingTime);
        assert_eq!(v[0].severity, Severity::Low);
        s.settling_time.slack = 1.0;
        assert!(check(&mc, &FreqMetrics::state_feedback(5.0), &s).is_empty());
        s.hinf.slack = 10.0;
        let v = check(&mc, &FreqMetrics::state_feedback(5.01), &s);
        assert_eq!(v[0].kind, ViolationKind::Hinf);
    }
}
