//! Output-feedback loop analysis: sensitivity peaks and classical margins.
//!
//! Multi-loop systems are analyzed one diagonal channel `L_ii` at a time and
//! the worst channel is reported.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{freq_response, hinf_norm, logspace, AnalysisError, ControllerType, FreqMetrics};
use crate::model::PlantModel;

const GRID_POINTS: usize = 4000;
const REFINE_STEPS: usize = 80;

/// `Ms = ||(I+L)^-1||`, `Mt = ||L (I+L)^-1||`, gain and phase margins for the
/// loop `L = G K` with `G = Cy (sI - A)^-1 B` and output feedback `u = K y`.
pub fn loop_margins(p: &PlantModel, k: &DMatrix<f64>) -> Result<FreqMetrics, AnalysisError> {
    let cy = p
        .cy
        .as_ref()
        .ok_or_else(|| AnalysisError::Branch("plant has no measured output Cy".into()))?;
    let ny = cy.nrows();
    let (m, n) = (p.n_inputs(), p.n_states());
    if k.nrows() != m || k.ncols() != ny {
        let hint = if k.ncols() == n { " (state-feedback shaped)" } else { "" };
        return Err(AnalysisError::Branch(format!(
            "K is {}x{}{hint}, output feedback needs {m}x{ny}",
            k.nrows(),
            k.ncols()
        )));
    }

    let bk = &p.b * k;
    let a_cl = &p.a - &bk * cy;
    let eye = DMatrix::<f64>::identity(ny, ny);
    let ms = hinf_norm(&a_cl, &bk, &(-cy), &eye)?;
    let mt = hinf_norm(&a_cl, &bk, cy, &DMatrix::zeros(ny, ny))?;

    let mut gm_db = f64::INFINITY;
    let mut pm_deg = f64::INFINITY;
    let zero = DMatrix::<f64>::zeros(1, 1);
    for i in 0..ny {
        let b_i = DMatrix::from_column_slice(n, 1, bk.column(i).as_slice());
        let c_i = DMatrix::from_fn(1, n, |_, j| cy[(i, j)]);
        let loop_at = |w: f64| -> Option<Complex64> {
            freq_response(&p.a, &b_i, &c_i, &zero, w).map(|g| g[(0, 0)])
        };
        let (gm, pm) = siso_margins(&loop_at);
        gm_db = gm_db.min(gm);
        pm_deg = pm_deg.min(pm);
    }

    Ok(FreqMetrics {
        controller_type: ControllerType::OutputFb,
        disturbance_rejection: None,
        ms: Some(ms),
        mt: Some(mt),
        gm_db: Some(gm_db),
        pm_deg: Some(pm_deg),
    })
}

/// Refines a sign change of `f` on `[lo, hi]` by bisection in log-frequency.
fn refine(f: &dyn Fn(f64) -> Option<f64>, mut lo: f64, mut hi: f64) -> f64 {
    let Some(mut f_lo) = f(lo) else { return lo };
    for _ in 0..REFINE_STEPS {
        let mid = (lo * hi).sqrt();
        match f(mid) {
            Some(v) if (v > 0.0) == (f_lo > 0.0) => {
                lo = mid;
                f_lo = v;
            }
            Some(_) => hi = mid,
            None => break,
        }
    }
    (lo * hi).sqrt()
}

/// Gain margin (dB) and phase margin (deg) of a scalar loop; `inf` when the
/// corresponding crossover does not exist.
fn siso_margins(l: &dyn Fn(f64) -> Option<Complex64>) -> (f64, f64) {
    let grid = logspace(1e-4, 1e4, GRID_POINTS);
    let mag = |w: f64| l(w).map(|v| v.norm() - 1.0);
    let imag = |w: f64| l(w).map(|v| v.im);

    let mut pm = f64::INFINITY;
    let mut gm = f64::INFINITY;
    for pair in grid.windows(2) {
        let (w0, w1) = (pair[0], pair[1]);
        let (Some(l0), Some(l1)) = (l(w0), l(w1)) else { continue };

        if (l0.norm() - 1.0).signum() != (l1.norm() - 1.0).signum() {
            let wc = refine(&mag, w0, w1);
            if let Some(v) = l(wc) {
                let phase = v.im.atan2(v.re).to_degrees();
                pm = pm.min(180.0 + phase);
            }
        }
        let crosses = l0.im == 0.0 || l0.im.signum() != l1.im.signum();
        if crosses && (l0.re < 0.0 || l1.re < 0.0) {
            let wp = if l0.im == 0.0 { w0 } else { refine(&imag, w0, w1) };
            if let Some(v) = l(wp) {
                if v.re < 0.0 {
                    gm = gm.min(-20.0 * v.norm().log10());
                }
            }
        }
    }
    (gm, pm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeDomain;
    use nalgebra::dmatrix;

    fn siso(a: DMatrix<f64>, b: DMatrix<f64>, cy: DMatrix<f64>) -> PlantModel {
        let n = a.nrows();
        PlantModel::new(
            "loop",
            a,
            b,
            DMatrix::identity(n, n),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, 1),
            Some(cy),
            TimeDomain::Continuous,
            None,
        )
        .unwrap()
    }

    #[test]
    fn integrator_has_ninety_degrees() {
        let p = siso(dmatrix![0.0], dmatrix![1.0], dmatrix![1.0]);
        let f = loop_margins(&p, &dmatrix![1.0]).unwrap();
        assert!((f.pm_deg.unwrap() - 90.0).abs() < 1e-6, "{:?}", f.pm_deg);
        assert!(f.gm_db.unwrap().is_infinite());
        assert!((f.ms.unwrap() - 1.0).abs() < 1e-5);
        assert!((f.mt.unwrap() - 1.0).abs() < 1e-5);
        assert_eq!(f.controller_type, ControllerType::OutputFb);
        assert!(f.disturbance_rejection.is_none());
    }

    #[test]
    fn zero_loop() {
        let p = siso(dmatrix![-1.0], dmatrix![1.0], dmatrix![1.0]);
        let f = loop_margins(&p, &dmatrix![0.0]).unwrap();
        assert_eq!(f.ms, Some(1.0));
        assert_eq!(f.mt, Some(0.0));
    }

    #[test]
    fn first_order_never_reaches_minus_180() {
        let p = siso(dmatrix![-1.0], dmatrix![1.0], dmatrix![1.0]);
        let f = loop_margins(&p, &dmatrix![2.0]).unwrap();
        assert!(f.gm_db.unwrap().is_infinite());
        // |2/(jw+1)| = 1 at w = sqrt(3): phase -60 deg.
        assert!((f.pm_deg.unwrap() - 120.0).abs() < 1e-6);
    }

    #[test]
    fn third_order_gain_margin() {
        // L = k/(s+1)^3 crosses -180 deg at w = sqrt(3) with |L| = k/8.
        let a = dmatrix![-1.0, 1.0, 0.0; 0.0, -1.0, 1.0; 0.0, 0.0, -1.0];
        let p = siso(a, dmatrix![0.0; 0.0; 1.0], dmatrix![1.0, 0.0, 0.0]);
        let f = loop_margins(&p, &dmatrix![2.0]).unwrap();
        let expected = -20.0 * (2.0f64 / 8.0).log10();
        assert!((f.gm_db.unwrap() - expected).abs() < 1e-6, "{:?}", f.gm_db);
    }

    #[test]
    fn state_shaped_gain_is_branch_error() {
        let a = dmatrix![-1.0, 0.0; 0.0, -2.0];
        let p = siso(a, dmatrix![1.0; 1.0], dmatrix![1.0, 0.0]);
        assert!(matches!(loop_margins(&p, &dmatrix![1.0, 1.0]), Err(AnalysisError::Branch(_))));
    }
}
