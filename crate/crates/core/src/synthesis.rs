//! Bounded-real-lemma state-feedback synthesis with a decay-rate constraint.
//!
//! With `Y = KP` the closed loop `A + BK` has H-infinity norm below `gamma`
//! from `w` to `z` whenever `Psi(P, Y, gamma) ≺ 0` and `P ≻ 0`; the extra
//! block `sym(AP + BY) + 2 alpha P ≺ 0` places every closed-loop pole left of
//! `-alpha`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{eigvals, AnalysisError, Spectrum};
use crate::model::{PlantModel, SpecSet, TimeDomain};
use crate::sdp::{self, max_eig, min_eig, LmiBlock, LmiProblem, SdpError, SolveOptions, VarLayout};
use crate::serde_ext;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("synthesis needs a continuous-time plant; convert discrete plants first")]
    Discrete,
    #[error("invalid synthesis input: {0}")]
    Input(String),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    m + m.transpose()
}

fn check_py(p: &PlantModel, pm: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(), SynthesisError> {
    let (n, m) = (p.n_states(), p.n_inputs());
    if pm.shape() != (n, n) || y.shape() != (m, n) {
        return Err(SynthesisError::Dimension(format!(
            "P is {:?}, Y is {:?}; expected ({n}, {n}) and ({m}, {n})",
            pm.shape(),
            y.shape()
        )));
    }
    Ok(())
}

fn psi_unchecked(p: &PlantModel, pm: &DMatrix<f64>, y: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let (n, w, z) = (p.n_states(), p.n_disturbances(), p.n_regulated());
    let mut out = DMatrix::zeros(n + w + z, n + w + z);
    let top = sym(&(&p.a * pm + &p.b * y));
    let czp = &p.cz * pm + &p.dz * y;
    out.view_mut((0, 0), (n, n)).copy_from(&top);
    out.view_mut((0, n), (n, w)).copy_from(&p.e);
    out.view_mut((n, 0), (w, n)).copy_from(&p.e.transpose());
    out.view_mut((0, n + w), (n, z)).copy_from(&czp.transpose());
    out.view_mut((n + w, 0), (z, n)).copy_from(&czp);
    for i in n..n + w + z {
        out[(i, i)] = -gamma;
    }
    out
}

fn decay_unchecked(p: &PlantModel, pm: &DMatrix<f64>, y: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    sym(&(&p.a * pm + &p.b * y)) + pm * (2.0 * alpha)
}

/// The BRL block `[[sym(AP+BY), E, (CzP+DzY)'], [E', -gI, 0], [CzP+DzY, 0, -gI]]`.
pub fn assemble_psi(
    p: &PlantModel,
    pm: &DMatrix<f64>,
    y: &DMatrix<f64>,
    gamma: f64,
) -> Result<DMatrix<f64>, SynthesisError> {
    check_py(p, pm, y)?;
    Ok(psi_unchecked(p, pm, y, gamma))
}

/// The decay block `sym(AP+BY) + 2 alpha P`.
pub fn assemble_decay(
    p: &PlantModel,
    pm: &DMatrix<f64>,
    y: &DMatrix<f64>,
    alpha: f64,
) -> Result<DMatrix<f64>, SynthesisError> {
    check_py(p, pm, y)?;
    if !(alpha >= 0.0) {
        return Err(SynthesisError::Input(format!("decay rate {alpha} must be >= 0")));
    }
    Ok(decay_unchecked(p, pm, y, alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisStatus {
    Success,
    Infeasible,
    Failure,
}

/// Result of one synthesis call. On success `(P, Y, gamma)` prove the claims
/// independently of the solver that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisCertificate {
    pub status: SynthesisStatus,
    #[serde(rename = "K", with = "serde_ext::opt_matrix", default)]
    pub k: Option<DMatrix<f64>>,
    #[serde(rename = "P", with = "serde_ext::opt_matrix", default)]
    pub p: Option<DMatrix<f64>>,
    #[serde(rename = "Y", with = "serde_ext::opt_matrix", default)]
    pub y: Option<DMatrix<f64>>,
    #[serde(with = "serde_ext::opt_float", default)]
    pub gamma: Option<f64>,
    pub alpha: f64,
    #[serde(default)]
    pub closed_loop_spectrum: Option<Spectrum>,
    #[serde(with = "serde_ext::opt_float", default)]
    pub psi_max_eig: Option<f64>,
    #[serde(with = "serde_ext::opt_float", default)]
    pub decay_lmi_max_eig: Option<f64>,
    pub gamma_target: f64,
    pub gamma_min: f64,
    pub solver_iterations: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub message: String,
}

impl SynthesisCertificate {
    pub fn is_success(&self) -> bool {
        self.status == SynthesisStatus::Success
    }

    fn without_solution(status: SynthesisStatus, bounds: (f64, f64, f64), iters: usize, msg: String) -> Self {
        let (gamma_target, gamma_min, alpha) = bounds;
        Self {
            status,
            k: None,
            p: None,
            y: None,
            gamma: None,
            alpha,
            closed_loop_spectrum: None,
            psi_max_eig: None,
            decay_lmi_max_eig: None,
            gamma_target,
            gamma_min,
            solver_iterations: iters,
            message: msg,
        }
    }
}

/// Synthesis knobs beyond the specification set.
#[derive(Debug, Clone, Copy, Default)]
pub struct SynthesisOptions {
    pub solver: SolveOptions,
}

/// Synthesizes with the targets of `specs`: `gamma_target = hinf.target`,
/// `gamma_min = hinf_min`, `alpha = specs.alpha()`.
pub fn synthesize(p: &PlantModel, specs: &SpecSet) -> Result<SynthesisCertificate, SynthesisError> {
    specs.validate().map_err(|e| SynthesisError::Input(e.to_string()))?;
    synthesize_with(p, specs.hinf.target, specs.hinf_min, specs.alpha(), SynthesisOptions::default())
}

/// Minimizes gamma over `[gamma_min, gamma_target]` subject to the BRL and
/// decay blocks and `P ⪰ 0.1 I`; returns `K = Y P^-1` with its certificate.
pub fn synthesize_with(
    p: &PlantModel,
    gamma_target: f64,
    gamma_min: f64,
    alpha: f64,
    opts: SynthesisOptions,
) -> Result<SynthesisCertificate, SynthesisError> {
    if p.domain != TimeDomain::Continuous {
        return Err(SynthesisError::Discrete);
    }
    p.validate().map_err(|e| SynthesisError::Input(e.to_string()))?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(SynthesisError::Input(format!("decay rate {alpha} must be finite and >= 0")));
    }
    if !(gamma_min >= 0.0) || gamma_target.is_nan() {
        return Err(SynthesisError::Input(format!("gamma bounds [{gamma_min}, {gamma_target}]")));
    }
    let bounds = (gamma_target, gamma_min, alpha);
    let layout = VarLayout::new(p.n_states(), p.n_inputs());
    let psi = LmiBlock::from_affine("psi", layout, |pm, y, g| psi_unchecked(p, pm, y, g))?;
    let decay = LmiBlock::from_affine("decay", layout, |pm, y, _| decay_unchecked(p, pm, y, alpha))?;
    let problem = LmiProblem::new(layout, vec![psi, decay], gamma_min, gamma_target)?;
    let sol = sdp::solve(&problem, opts.solver)?;

    let (pm, y, gamma) = match (sol.status, sol.p, sol.y, sol.gamma) {
        (sdp::SdpStatus::Optimal | sdp::SdpStatus::Feasible, Some(pm), Some(y), Some(g)) => (pm, y, g),
        (sdp::SdpStatus::Infeasible, ..) => {
            let msg = format!("LMI infeasible for gamma in [{gamma_min}, {gamma_target}] with alpha {alpha}");
            return Ok(SynthesisCertificate::without_solution(
                SynthesisStatus::Infeasible,
                bounds,
                sol.iterations,
                msg,
            ));
        }
        _ => {
            return Ok(SynthesisCertificate::without_solution(
                SynthesisStatus::Failure,
                bounds,
                sol.iterations,
                "solver returned no certified point".into(),
            ));
        }
    };

    // K = Y P^-1, i.e. P K' = Y' with P symmetric positive definite.
    let chol = pm
        .clone()
        .cholesky()
        .ok_or_else(|| SynthesisError::Input("certified P is not positive definite".into()))?;
    let k = chol.solve(&y.transpose()).transpose();
    let spectrum = eigvals(&p.closed_loop(&k))?;
    let psi_max = max_eig(&psi_unchecked(p, &pm, &y, gamma));
    let decay_max = max_eig(&decay_unchecked(p, &pm, &y, alpha));

    let sound = psi_max < 0.0 && decay_max < 0.0 && min_eig(&pm) >= sdp::P_FLOOR - 1e-6 && spectrum.is_hurwitz();
    let status = if sound { SynthesisStatus::Success } else { SynthesisStatus::Failure };
    let message = if sound { String::new() } else { "certificate recheck failed".into() };
    Ok(SynthesisCertificate {
        status,
        k: Some(k),
        p: Some(pm),
        y: Some(y),
        gamma: Some(gamma),
        alpha,
        closed_loop_spectrum: Some(spectrum),
        psi_max_eig: Some(psi_max),
        decay_lmi_max_eig: Some(decay_max),
        gamma_target,
        gamma_min,
        solver_iterations: sol.iterations,
        message,
    })
}
