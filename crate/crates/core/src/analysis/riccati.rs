use nalgebra::DMatrix;

use super::{eigvals, AnalysisError};

const SIGN_MAX_ITER: usize = 100;
const SIGN_TOL: f64 = 1e-13;

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves `A'X + XA + Q = 0` through the Kronecker form.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, AnalysisError> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) {
        return Err(AnalysisError::Dimension("Lyapunov operands".into()));
    }
    // vec(A'X + XA) = (I kron A' + A' kron I) vec(X), column-major vec.
    let at = a.transpose();
    let mut big = DMatrix::<f64>::zeros(n * n, n * n);
    for j in 0..n {
        for i in 0..n {
            let row = j * n + i;
            for k in 0..n {
                // (A' X)_{ij} = sum_k A'_{ik} X_{kj}
                big[(row, j * n + k)] += at[(i, k)];
                // (X A)_{ij} = sum_k X_{ik} A_{kj}
                big[(row, k * n + i)] += a[(k, j)];
            }
        }
    }
    let rhs = DMatrix::from_iterator(n * n, 1, q.iter().map(|v| -v));
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or_else(|| AnalysisError::NoStabilizingSolution("singular Lyapunov operator".into()))?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Stabilizing solution of `A'X + XA - X B R^-1 B' X + Q = 0`.
///
/// The stable invariant subspace of the Hamiltonian is extracted with the
/// matrix sign function (Newton iteration with determinant scaling), then
/// refined with Newton-Kleinman steps.
pub fn care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, AnalysisError> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(AnalysisError::Dimension("CARE operands".into()));
    }
    for mat in [a, b, q, r] {
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite("care"));
        }
    }
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or_else(|| AnalysisError::NoStabilizingSolution("R is not positive definite".into()))?
        .inverse();
    let g = b * &r_inv * b.transpose();

    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut z = h;
    let dim = (2 * n) as f64;
    let mut converged = false;
    for _ in 0..SIGN_MAX_ITER {
        let lu = z.clone().lu();
        let det = lu.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(AnalysisError::NoStabilizingSolution(
                "Hamiltonian has eigenvalues on the imaginary axis".into(),
            ));
        }
        let inv = lu
            .try_inverse()
            .ok_or_else(|| AnalysisError::NoStabilizingSolution("singular sign iterate".into()))?;
        let c = det.abs().powf(-1.0 / dim);
        let next = (&z * c + inv / c) * 0.5;
        let delta = one_norm(&(&next - &z));
        z = next;
        if delta <= SIGN_TOL * one_norm(&z) {
            converged = true;
            break;
        }
    }
    if !converged || z.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NoStabilizingSolution("sign iteration did not converge".into()));
    }

    // (W + I) [I; X] = 0  =>  [W12; W22 + I] X = -[W11 + I; W21]
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::<f64>::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::<f64>::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(z.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    let svd = lhs.svd(true, true);
    let smin = svd.singular_values.min();
    let smax = svd.singular_values.max();
    if !(smin > 1e-12 * smax.max(1.0)) {
        return Err(AnalysisError::NoStabilizingSolution("stable subspace is not a graph".into()));
    }
    let x = svd
        .solve(&rhs, 0.0)
        .map_err(|e| AnalysisError::NoStabilizingSolution(e.to_string()))?;
    let mut x = (&x + x.transpose()) * 0.5;

    // Newton-Kleinman refinement.
    for _ in 0..3 {
        let k = &r_inv * b.transpose() * &x;
        let acl = a - b * &k;
        if !eigvals(&acl)?.is_hurwitz() {
            break;
        }
        let rhs = q + k.transpose() * r * &k;
        match solve_lyapunov(&acl, &rhs) {
            Ok(next) if next.iter().all(|v| v.is_finite()) => x = next,
            _ => break,
        }
    }

    let acl = a - &g * &x;
    if !eigvals(&acl)?.is_hurwitz() {
        return Err(AnalysisError::NoStabilizingSolution("closed loop not Hurwitz".into()));
    }
    Ok(x)
}

/// LQR gain for `u = Kx`: `K = -R^-1 B' X` with `X` the stabilizing CARE solution.
pub fn care_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, AnalysisError> {
    let x = care(a, b, q, r)?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| AnalysisError::NoStabilizingSolution("R singular".into()))?;
    Ok(-(r_inv * b.transpose() * &x))
}
