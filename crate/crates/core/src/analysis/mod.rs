//! Numerical analysis kernel: spectra, matrix exponential, frequency
//! response, H-infinity norm, loop margins and the CARE solver.

mod hinf;
mod margins;
mod riccati;

pub use hinf::{hamiltonian_imaginary_frequencies, hinf_norm};
pub use margins::loop_margins;
pub use riccati::{care, care_lqr, solve_lyapunov};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serde_ext;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("eigenvalue iteration did not converge ({0})")]
    EigenNonConvergence(&'static str),
    #[error("matrix exponential overflow (1-norm {0:.3e})")]
    Overflow(f64),
    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),
    #[error("controller shape selects the wrong analysis branch: {0}")]
    Branch(String),
}

/// Eigenvalues of a real square matrix and their largest real part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    #[serde(with = "complex_list")]
    pub eigenvalues: Vec<Complex64>,
    #[serde(with = "serde_ext::float")]
    pub max_real_part: f64,
}

impl Spectrum {
    pub fn is_hurwitz(&self) -> bool {
        self.max_real_part < 0.0
    }
}

mod complex_list {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Complex64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|c| [c.re, c.im]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Complex64>, D::Error> {
        Ok(Vec::<[f64; 2]>::deserialize(d)?
            .into_iter()
            .map(|[re, im]| Complex64::new(re, im))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerType {
    StateFb,
    OutputFb,
}

/// Frequency-domain metrics; only the active branch's fields are populated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqMetrics {
    pub controller_type: ControllerType,
    #[serde(with = "serde_ext::opt_float", default, skip_serializing_if = "Option::is_none")]
    pub disturbance_rejection: Option<f64>,
    #[serde(rename = "Ms", with = "serde_ext::opt_float", default, skip_serializing_if = "Option::is_none")]
    pub ms: Option<f64>,
    #[serde(rename = "Mt", with = "serde_ext::opt_float", default, skip_serializing_if = "Option::is_none")]
    pub mt: Option<f64>,
    #[serde(rename = "GM_dB", with = "serde_ext::opt_float", default, skip_serializing_if = "Option::is_none")]
    pub gm_db: Option<f64>,
    #[serde(rename = "PM_deg", with = "serde_ext::opt_float", default, skip_serializing_if = "Option::is_none")]
    pub pm_deg: Option<f64>,
}

impl FreqMetrics {
    pub fn state_feedback(disturbance_rejection: f64) -> Self {
        Self {
            controller_type: ControllerType::StateFb,
            disturbance_rejection: Some(disturbance_rejection),
            ms: None,
            mt: None,
            gm_db: None,
            pm_deg: None,
        }
    }
}

const SCHUR_MAX_ITER: usize = 10_000;

/// Diagonal similarity by powers of two that equalizes row and column norms
/// (Parlett-Reinsch). Eigenvalues are preserved exactly.
fn balance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut b = m.clone();
    let radix = 2.0_f64;
    let mut converged = false;
    let mut sweeps = 0;
    while !converged && sweeps < 100 {
        converged = true;
        sweeps += 1;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += b[(j, i)].abs();
                    r += b[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / radix;
            let mut cc = c;
            while cc < g {
                f *= radix;
                cc *= radix * radix;
            }
            g = r * radix;
            while cc > g {
                f /= radix;
                cc /= radix * radix;
            }
            if (cc + r / f) / f < 0.95 * s {
                converged = false;
                for j in 0..n {
                    b[(i, j)] /= f;
                }
                for j in 0..n {
                    b[(j, i)] *= f;
                }
            }
        }
    }
    b
}

/// Eigenvalues of a real square matrix via balancing and real Schur form.
pub fn eigvals(m: &DMatrix<f64>) -> Result<Spectrum, AnalysisError> {
    if !m.is_square() {
        return Err(AnalysisError::NotSquare(m.nrows(), m.ncols()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite("eigvals"));
    }
    if m.nrows() == 0 {
        return Ok(Spectrum { eigenvalues: Vec::new(), max_real_part: f64::NEG_INFINITY });
    }
    let schur = balance(m)
        .try_schur(f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or(AnalysisError::EigenNonConvergence("real Schur"))?;
    let mut eigenvalues: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    let max_real_part = eigenvalues.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
    Ok(Spectrum { eigenvalues, max_real_part })
}

/// Matrix exponential by Pade scaling-and-squaring.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>, AnalysisError> {
    if !m.is_square() {
        return Err(AnalysisError::NotSquare(m.nrows(), m.ncols()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite("expm"));
    }
    let norm1 = (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    // e^710 overflows f64; beyond that no scaling can help.
    if norm1 > 1e6 {
        return Err(AnalysisError::Overflow(norm1));
    }
    let out = m.exp();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::Overflow(norm1));
    }
    Ok(out)
}

/// Frequency response `C (jw I - A)^-1 B + D`.
pub fn freq_response(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    omega: f64,
) -> Option<DMatrix<Complex64>> {
    let n = a.nrows();
    let jw = Complex64::new(0.0, omega);
    let lhs = DMatrix::<Complex64>::from_fn(n, n, |i, j| {
        let diag = if i == j { jw } else { Complex64::new(0.0, 0.0) };
        diag - Complex64::new(a[(i, j)], 0.0)
    });
    let rhs = b.map(|v| Complex64::new(v, 0.0));
    let x = lhs.lu().solve(&rhs)?;
    Some(c.map(|v| Complex64::new(v, 0.0)) * x + d.map(|v| Complex64::new(v, 0.0)))
}

/// Largest singular value of a complex matrix.
pub fn sigma_max_complex(m: &DMatrix<Complex64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Largest singular value of a real matrix.
pub fn sigma_max(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Peak gain `sigma_max(G(jw))` at a single frequency; `inf` at a pole.
pub fn gain_at(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    omega: f64,
) -> f64 {
    freq_response(a, b, c, d, omega).map_or(f64::INFINITY, |g| sigma_max_complex(&g))
}

/// `count` log-spaced points from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (l0, l1) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| 10f64.powf(l0 + (l1 - l0) * i as f64 / (count - 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn diagonal_spectrum() {
        let s = eigvals(&dmatrix![-1.0, 0.0; 0.0, -2.0]).unwrap();
        assert_eq!(s.max_real_part, -1.0);
        assert_eq!(s.eigenvalues.len(), 2);
        assert!((s.eigenvalues[1].re + 2.0).abs() < 1e-14);
    }

    #[test]
    fn rotation_spectrum() {
        let s = eigvals(&dmatrix![0.0, 1.0; -1.0, 0.0]).unwrap();
        assert!(s.max_real_part.abs() < 1e-14);
        let mut ims: Vec<f64> = s.eigenvalues.iter().map(|c| c.im).collect();
        ims.sort_by(f64::total_cmp);
        assert!((ims[0] + 1.0).abs() < 1e-14 && (ims[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eigvals_rejects_rectangular_and_nan() {
        assert!(matches!(eigvals(&DMatrix::zeros(2, 3)), Err(AnalysisError::NotSquare(2, 3))));
        assert!(eigvals(&dmatrix![f64::NAN]).is_err());
    }

    #[test]
    fn expm_basics() {
        let z = expm(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(z, DMatrix::identity(3, 3));
        let d = expm(&DMatrix::from_diagonal(&nalgebra::dvector![1.0, -2.0, 0.5])).unwrap();
        for (i, a) in [1.0f64, -2.0, 0.5].iter().enumerate() {
            assert!((d[(i, i)] - a.exp()).abs() <= 1e-14 * a.exp());
        }
    }

    #[test]
    fn expm_overflow_reported() {
        assert!(matches!(expm(&dmatrix![1e7]), Err(AnalysisError::Overflow(_))));
        assert!(matches!(expm(&dmatrix![800.0, 0.0; 0.0, 1.0]), Err(AnalysisError::Overflow(_))));
    }

    #[test]
    fn first_order_gain() {
        let (a, b, c, d) = (dmatrix![-1.0], dmatrix![1.0], dmatrix![1.0], dmatrix![0.0]);
        assert!((gain_at(&a, &b, &c, &d, 0.0) - 1.0).abs() < 1e-15);
        assert!((gain_at(&a, &b, &c, &d, 1.0) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn balance_keeps_spectrum() {
        let m = dmatrix![1.0, 1e6, 0.0; 1e-6, 2.0, 1e4; 0.0, 1e-4, 3.0];
        let b = balance(&m);
        let tr_m: f64 = (0..3).map(|i| m[(i, i)]).sum();
        let tr_b: f64 = (0..3).map(|i| b[(i, i)]).sum();
        assert_eq!(tr_m, tr_b);
        assert!(b.iter().all(|v| v.abs() < 1e4));
    }
}
