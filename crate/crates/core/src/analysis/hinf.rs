use nalgebra::DMatrix;

use super::{eigvals, gain_at, logspace, sigma_max, AnalysisError};

/// Relative width of the final gamma bracket.
const BRACKET_TOL: f64 = 1e-7;
/// Eigenvalues with `|Re| <= IMAG_AXIS_TOL * ||H||` count as imaginary.
const IMAG_AXIS_TOL: f64 = 1e-7;

fn check_dims(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<(), AnalysisError> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(AnalysisError::NotSquare(a.nrows(), a.ncols()));
    }
    if b.nrows() != n || c.ncols() != n || d.nrows() != c.nrows() || d.ncols() != b.ncols() {
        return Err(AnalysisError::Dimension(format!(
            "A {}x{}, B {}x{}, C {}x{}, D {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            c.nrows(),
            c.ncols(),
            d.nrows(),
            d.ncols()
        )));
    }
    for m in [a, b, c, d] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite("hinf_norm"));
        }
    }
    Ok(())
}

/// Frequencies `w >= 0` at which `gamma` is a singular value of `G(jw)`,
/// read off the imaginary-axis eigenvalues of the associated Hamiltonian.
/// Requires `gamma > sigma_max(D)`.
pub fn hamiltonian_imaginary_frequencies(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    gamma: f64,
) -> Result<Vec<f64>, AnalysisError> {
    let n = a.nrows();
    let m = b.ncols();
    let r = DMatrix::<f64>::identity(m, m) * (gamma * gamma) - d.transpose() * d;
    let r_inv = r
        .try_inverse()
        .ok_or_else(|| AnalysisError::Dimension("gamma^2 I - D'D is singular".into()))?;
    let a_h = a + b * &r_inv * d.transpose() * c;
    let top_right = b * &r_inv * b.transpose();
    let bottom_left = -(c.transpose() * (DMatrix::identity(c.nrows(), c.nrows()) + d * &r_inv * d.transpose()) * c);
    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&a_h);
    h.view_mut((0, n), (n, n)).copy_from(&top_right);
    h.view_mut((n, 0), (n, n)).copy_from(&bottom_left);
    h.view_mut((n, n), (n, n)).copy_from(&(-a_h.transpose()));
    let scale = h.norm().max(f64::MIN_POSITIVE);
    let spec = eigvals(&h)?;
    let mut freqs: Vec<f64> = spec
        .eigenvalues
        .iter()
        .filter(|l| l.re.abs() <= IMAG_AXIS_TOL * scale)
        .map(|l| l.im.abs())
        .collect();
    freqs.sort_by(f64::total_cmp);
    freqs.dedup_by(|x, y| (*x - *y).abs() <= 1e-12 * scale);
    Ok(freqs)
}

/// H-infinity norm of `G(s) = C (sI - A)^-1 B + D`.
///
/// Returns `+inf` when `A` is not Hurwitz (and the transfer is not static).
/// The value is located by bisection on gamma with the Hamiltonian
/// imaginary-eigenvalue test; whenever gamma is below the norm, the gains at
/// the detected crossing frequencies lift the lower bracket.
pub fn hinf_norm(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<f64, AnalysisError> {
    check_dims(a, b, c, d)?;
    let d_norm = sigma_max(d);
    if b.iter().all(|v| *v == 0.0) || c.iter().all(|v| *v == 0.0) {
        return Ok(d_norm);
    }
    let spec = eigvals(a)?;
    if !spec.is_hurwitz() {
        return Ok(f64::INFINITY);
    }

    // Coarse grid peak: a valid lower bound on the norm.
    let mut candidates = vec![0.0];
    candidates.extend(spec.eigenvalues.iter().map(|l| l.im.abs()).filter(|w| *w > 0.0));
    candidates.extend(spec.eigenvalues.iter().map(|l| l.norm()));
    candidates.extend(logspace(1e-4, 1e4, 81));
    let mut lo = d_norm;
    for w in candidates {
        lo = lo.max(gain_at(a, b, c, d, w));
    }
    if lo == 0.0 {
        return Ok(0.0);
    }

    let lift = |lo: f64, freqs: &[f64]| {
        freqs.iter().fold(lo, |acc, &w| acc.max(gain_at(a, b, c, d, w)))
    };

    let mut hi = 2.0 * lo;
    let mut doublings = 0;
    loop {
        let freqs = hamiltonian_imaginary_frequencies(a, b, c, d, hi)?;
        if freqs.is_empty() {
            break;
        }
        lo = lift(lo.max(hi), &freqs);
        hi = 2.0 * lo;
        doublings += 1;
        if doublings > 200 {
            return Err(AnalysisError::EigenNonConvergence("hinf upper bracket"));
        }
    }

    for _ in 0..200 {
        if hi - lo <= BRACKET_TOL * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let freqs = hamiltonian_imaginary_frequencies(a, b, c, d, mid)?;
        if freqs.is_empty() {
            hi = mid;
        } else {
            lo = lift(mid, &freqs).min(hi);
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn first_order_lag_is_one() {
        let g = hinf_norm(&dmatrix![-1.0], &dmatrix![1.0], &dmatrix![1.0], &dmatrix![0.0]).unwrap();
        assert!((g - 1.0).abs() <= 1e-6, "{g}");
    }

    #[test]
    fn static_gain() {
        let z = DMatrix::zeros(2, 1);
        let g = hinf_norm(&dmatrix![-1.0, 0.0; 0.0, -2.0], &z, &DMatrix::zeros(1, 2), &dmatrix![-3.5]).unwrap();
        assert_eq!(g, 3.5);
    }

    #[test]
    fn unstable_is_infinite() {
        let g = hinf_norm(&dmatrix![0.5], &dmatrix![1.0], &dmatrix![1.0], &dmatrix![0.0]).unwrap();
        assert!(g.is_infinite());
    }

    #[test]
    fn resonant_peak() {
        // 1 / (s^2 + 2 z s + 1) peaks at 1 / (2 z sqrt(1 - z^2)).
        let z: f64 = 0.05;
        let a = dmatrix![0.0, 1.0; -1.0, -2.0 * z];
        let g = hinf_norm(&a, &dmatrix![0.0; 1.0], &dmatrix![1.0, 0.0], &dmatrix![0.0]).unwrap();
        let exact = 1.0 / (2.0 * z * (1.0 - z * z).sqrt());
        assert!((g - exact).abs() <= 1e-6 * exact, "{g} vs {exact}");
    }

    #[test]
    fn feedthrough_hamiltonian() {
        // G = 1/(s+1) + 1 has |G(0)| = 2.
        let g = hinf_norm(&dmatrix![-1.0], &dmatrix![1.0], &dmatrix![1.0], &dmatrix![1.0]).unwrap();
        assert!((g - 2.0).abs() <= 2e-6, "{g}");
    }

    #[test]
    fn dimension_error() {
        assert!(hinf_norm(&dmatrix![-1.0], &dmatrix![1.0; 1.0], &dmatrix![1.0], &dmatrix![0.0]).is_err());
    }
}
