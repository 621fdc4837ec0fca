//! Dense log-det barrier solver for small block-LMI problems in `(P, Y, gamma)`.
//!
//! Every constraint block is an affine symmetric expression
//! `F(x, gamma) = F0 + gamma * Fg + sum_i x_i * F_i` required to satisfy
//! `F ⪯ -eps_cert * I`, where `x` packs the upper triangle of `P` followed by
//! the entries of `Y`. Gamma is minimized by bisection; each bisection step is
//! a phase-1 feasibility problem `min t s.t. F_k(x) ⪯ t I` solved by a
//! path-following Newton method. A returned point is always re-checked by a
//! symmetric eigendecomposition of every block before it is reported.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Strict-inequality margin: `≺ 0` is enforced as `⪯ -EPS_CERT * I`.
pub const EPS_CERT: f64 = 1e-7;
/// Conditioning floor `P ⪰ P_FLOOR * I`.
pub const P_FLOOR: f64 = 0.1;
/// Maximum number of outer bisection steps on gamma.
pub const MAX_BISECTIONS: usize = 60;
/// Default Newton step cap per feasibility solve.
pub const DEFAULT_NEWTON_CAP: usize = 200;

/// Box bound `|x_i| <= VAR_BOUND` keeping the barrier bounded below.
const VAR_BOUND: f64 = 1e6;
const BARRIER_GROWTH: f64 = 10.0;
const CENTER_TOL: f64 = 1e-7;
const ARMIJO: f64 = 0.25;

/// Layout of the decision vector: `P` (symmetric `n x n`, upper triangle in
/// column order) followed by `Y` (`m x n`, column-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub n: usize,
    pub m: usize,
}

impl VarLayout {
    pub fn new(n: usize, m: usize) -> Self {
        Self { n, m }
    }

    pub fn n_p(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn n_vars(&self) -> usize {
        self.n_p() + self.m * self.n
    }

    pub fn unpack(&self, x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n;
        let mut p = DMatrix::zeros(n, n);
        let mut idx = 0;
        for j in 0..n {
            for i in 0..=j {
                p[(i, j)] = x[idx];
                p[(j, i)] = x[idx];
                idx += 1;
            }
        }
        let y = DMatrix::from_column_slice(self.m, n, &x[idx..idx + self.m * n]);
        (p, y)
    }

    /// Packs `P` (upper triangle is read) and `Y` into a decision vector.
    pub fn pack(&self, p: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n_vars());
        for j in 0..self.n {
            for i in 0..=j {
                x.push(p[(i, j)]);
            }
        }
        x.extend(y.iter().copied());
        x
    }

    fn unit(&self, k: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.n_vars()];
        x[k] = 1.0;
        x
    }
}

/// One affine constraint block `F0 + gamma * Fg + sum_i x_i F_i ⪯ -eps I`.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub name: String,
    pub f0: DMatrix<f64>,
    pub f_gamma: DMatrix<f64>,
    /// Non-zero coefficient matrices, keyed by variable index.
    pub f_vars: Vec<(usize, DMatrix<f64>)>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SdpError {
    #[error("block {0} is not symmetric")]
    NotSymmetric(String),
    #[error("block {name} has inconsistent shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("block {0} grows with gamma; bisection needs a nonpositive gamma coefficient")]
    NotMonotone(String),
    #[error("problem data is not finite")]
    NonFinite,
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * scale
}

impl LmiBlock {
    /// Extracts the affine basis of `f` by evaluating it at the origin, at
    /// `gamma = 1`, and at each unit decision vector. `f` must be affine in
    /// `(P, Y, gamma)` jointly and return symmetric matrices of a fixed size.
    pub fn from_affine<F>(name: &str, layout: VarLayout, f: F) -> Result<Self, SdpError>
    where
        F: Fn(&DMatrix<f64>, &DMatrix<f64>, f64) -> DMatrix<f64>,
    {
        let zero = vec![0.0; layout.n_vars()];
        let (p0, y0) = layout.unpack(&zero);
        let f0 = f(&p0, &y0, 0.0);
        let check = |m: &DMatrix<f64>| -> Result<(), SdpError> {
            if m.shape() != f0.shape() {
                return Err(SdpError::Shape { name: name.into(), got: m.shape(), expected: f0.shape() });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(SdpError::NonFinite);
            }
            if !is_symmetric(m) {
                return Err(SdpError::NotSymmetric(name.into()));
            }
            Ok(())
        };
        check(&f0)?;
        let fg_full = f(&p0, &y0, 1.0);
        check(&fg_full)?;
        let f_gamma = fg_full - &f0;
        let mut f_vars = Vec::new();
        for k in 0..layout.n_vars() {
            let (p, y) = layout.unpack(&layout.unit(k));
            let fk = f(&p, &y, 0.0);
            check(&fk)?;
            let coef = fk - &f0;
            if coef.iter().any(|v| *v != 0.0) {
                f_vars.push((k, coef));
            }
        }
        Ok(Self { name: name.into(), f0, f_gamma, f_vars })
    }

    pub fn size(&self) -> usize {
        self.f0.nrows()
    }

    pub fn eval(&self, x: &[f64], gamma: f64) -> DMatrix<f64> {
        let mut out = &self.f0 + &self.f_gamma * gamma;
        for (k, fk) in &self.f_vars {
            out += fk * x[*k];
        }
        out
    }
}

/// Minimize gamma over `gamma_min <= gamma <= gamma_target` subject to
/// every block being `⪯ -eps_cert * I`. The conditioning block
/// `P_FLOOR * I - P` is always present (first in `blocks`).
#[derive(Debug, Clone)]
pub struct LmiProblem {
    pub layout: VarLayout,
    pub blocks: Vec<LmiBlock>,
    pub gamma_min: f64,
    pub gamma_target: f64,
    pub eps_cert: f64,
}

impl LmiProblem {
    pub fn new(
        layout: VarLayout,
        mut blocks: Vec<LmiBlock>,
        gamma_min: f64,
        gamma_target: f64,
    ) -> Result<Self, SdpError> {
        let n = layout.n;
        let floor = LmiBlock::from_affine("p_floor", layout, |p, _, _| {
            DMatrix::identity(n, n) * P_FLOOR - p
        })?;
        blocks.insert(0, floor);
        for b in &blocks {
            if max_eig(&b.f_gamma) > 1e-12 * b.f_gamma.amax().max(1.0) {
                return Err(SdpError::NotMonotone(b.name.clone()));
            }
        }
        if gamma_min.is_nan() || gamma_target.is_nan() {
            return Err(SdpError::NonFinite);
        }
        Ok(Self { layout, blocks, gamma_min, gamma_target, eps_cert: EPS_CERT })
    }

    /// Largest eigenvalue of each block at `(x, gamma)`.
    pub fn residuals(&self, x: &[f64], gamma: f64) -> Vec<f64> {
        self.blocks.iter().map(|b| max_eig(&b.eval(x, gamma))).collect()
    }

    fn barrier_degree(&self) -> f64 {
        let lmi: usize = self.blocks.iter().map(LmiBlock::size).sum();
        (lmi + 2 * self.layout.n_vars()) as f64
    }
}

pub fn max_eig(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NEG_INFINITY;
    }
    m.clone().symmetric_eigenvalues().max()
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    m.clone().symmetric_eigenvalues().min()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    Feasible,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub p: Option<DMatrix<f64>>,
    pub y: Option<DMatrix<f64>>,
    pub gamma: Option<f64>,
    pub status: SdpStatus,
    /// Largest eigenvalue per block (same order as `LmiProblem::blocks`).
    pub residuals: Vec<f64>,
    /// Total Newton steps across all feasibility solves.
    pub iterations: usize,
}

impl SdpSolution {
    fn failed(status: SdpStatus, iterations: usize) -> Self {
        Self { p: None, y: None, gamma: None, status, residuals: Vec::new(), iterations }
    }

    pub fn is_success(&self) -> bool {
        matches!(self.status, SdpStatus::Optimal | SdpStatus::Feasible)
    }
}

enum Phase1 {
    /// Strictly feasible point with every block below `-eps_cert`.
    Feasible(Vec<f64>),
    /// Certified by a dual bound: no point reaches `-eps_cert` at this gamma.
    Infeasible,
    /// Newton cap exceeded or the iteration broke down without a decision.
    Failed,
}

/// Affine lower bound `t*(g) >= d0 + g * dg` on the phase-1 optimum. The dual
/// point behind it does not depend on gamma, so the bound holds for every
/// gamma at once.
#[derive(Debug, Clone, Copy)]
struct DualCut {
    d0: f64,
    dg: f64,
}

impl DualCut {
    fn at(&self, g: f64) -> f64 {
        self.d0 + g * self.dg
    }

    /// Every gamma below the returned value is certified infeasible.
    fn infeasible_below(&self, eps: f64) -> f64 {
        if self.dg < 0.0 {
            (self.d0 + eps) / -self.dg
        } else if self.d0 > -eps {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    }
}

#[derive(Clone, Copy)]
enum Mode {
    /// Stop at a decision; feasible points are deepened until the stage gap
    /// is below the given fraction of `|t|`.
    Decide(f64),
    /// Follow the path until the gap is below the given fraction of `|t|`.
    Polish(f64),
}

struct Phase1Out {
    outcome: Phase1,
    cut: Option<DualCut>,
    /// Final iterate, kept for polishing.
    last: Option<Vec<f64>>,
    steps: usize,
}

struct Factored {
    slack: Vec<DMatrix<f64>>,
    inv: Vec<DMatrix<f64>>,
}

struct Workspace<'a> {
    prob: &'a LmiProblem,
    gamma: f64,
    /// Constant part of each block at the fixed gamma.
    consts: Vec<DMatrix<f64>>,
    nv: usize,
}

impl<'a> Workspace<'a> {
    fn new(prob: &'a LmiProblem, gamma: f64) -> Self {
        let consts = prob.blocks.iter().map(|b| &b.f0 + &b.f_gamma * gamma).collect();
        Self { prob, gamma, consts, nv: prob.layout.n_vars() }
    }

    fn block(&self, k: usize, x: &[f64]) -> DMatrix<f64> {
        let mut out = self.consts[k].clone();
        for (i, fi) in &self.prob.blocks[k].f_vars {
            let c = x[*i];
            out.zip_apply(fi, |o, v| *o += c * v);
        }
        out
    }

    fn max_eig_all(&self, x: &[f64]) -> f64 {
        (0..self.consts.len()).map(|k| max_eig(&self.block(k, x))).fold(f64::NEG_INFINITY, f64::max)
    }

    fn slack(&self, k: usize, x: &[f64], t: f64) -> DMatrix<f64> {
        let mut s = -self.block(k, x);
        for i in 0..s.nrows() {
            s[(i, i)] += t;
        }
        s
    }

    fn in_box(x: &[f64]) -> bool {
        x.iter().all(|v| v.abs() < VAR_BOUND)
    }

    /// `-log det` of all slacks, or `None` outside the domain.
    fn log_barrier(&self, x: &[f64], t: f64) -> Option<f64> {
        if !Self::in_box(x) || !t.is_finite() {
            return None;
        }
        let mut phi = 0.0;
        for k in 0..self.consts.len() {
            let l = self.slack(k, x, t).cholesky()?;
            phi -= 2.0 * l.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        for v in x {
            phi -= (VAR_BOUND - v).ln() + (VAR_BOUND + v).ln();
        }
        Some(phi)
    }

    fn factor(&self, x: &[f64], t: f64) -> Option<Factored> {
        if !Self::in_box(x) || !t.is_finite() {
            return None;
        }
        let mut slack = Vec::with_capacity(self.consts.len());
        let mut inv = Vec::with_capacity(self.consts.len());
        for k in 0..self.consts.len() {
            let s = self.slack(k, x, t);
            let si = s.clone().cholesky()?.inverse();
            slack.push(s);
            inv.push(si);
        }
        Some(Factored { slack, inv })
    }

    /// Newton direction of `tau * t - sum log det S_k - box` at `(x, t)`;
    /// returns `(dz, decrement^2)`.
    fn newton_direction(&self, tau: f64, x: &[f64], f: &Factored) -> Option<(DVector<f64>, f64)> {
        let nv = self.nv;
        let dim = nv + 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        g[nv] = tau;
        for (k, sinv) in f.inv.iter().enumerate() {
            // M_a = S^-1 D_a with D_t = I, D_i = -F_i; H_ab = tr(M_a M_b),
            // gradient -tr(M_a).
            let mut ms: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(self.prob.blocks[k].f_vars.len() + 1);
            for (i, fi) in &self.prob.blocks[k].f_vars {
                ms.push((*i, -(sinv * fi)));
            }
            ms.push((nv, sinv.clone()));
            let mts: Vec<DMatrix<f64>> = ms.iter().map(|(_, m)| m.transpose()).collect();
            for a in 0..ms.len() {
                let (ia, ma) = &ms[a];
                g[*ia] -= ma.trace();
                for b in a..ms.len() {
                    let ib = ms[b].0;
                    let v = ma.dot(&mts[b]);
                    h[(*ia, ib)] += v;
                    if *ia != ib {
                        h[(ib, *ia)] += v;
                    }
                }
            }
        }
        for (i, v) in x.iter().enumerate() {
            let (up, lo) = (VAR_BOUND - v, VAR_BOUND + v);
            g[i] += 1.0 / up - 1.0 / lo;
            h[(i, i)] += 1.0 / (up * up) + 1.0 / (lo * lo);
        }
        let scale = h.diagonal().amax().max(1e-300);
        let mut reg = 0.0;
        for _ in 0..8 {
            let mut hr = h.clone();
            for i in 0..dim {
                hr[(i, i)] += reg;
            }
            if let Some(ch) = hr.cholesky() {
                let dz = -ch.solve(&g);
                let dec = -g.dot(&dz);
                if dz.iter().all(|v| v.is_finite()) {
                    return Some((dz, dec.max(0.0)));
                }
            }
            reg = if reg == 0.0 { 1e-12 * scale } else { reg * 100.0 };
        }
        None
    }

    /// Dual point from the Newton step: `Z_k = S^-1 (S - dS) S^-1 / tau` and
    /// the matching box multipliers satisfy the dual equality constraints up
    /// to the rounding of the Newton solve. The equality residual `r` enters
    /// the Lagrangian as `x' r`; it is evaluated at the current `x`, which is
    /// exact at the central path and first-order accurate near it (a
    /// worst case over the box would scale the rounding by the box size).
    fn dual_cut(&self, tau: f64, x: &[f64], f: &Factored, dz: &DVector<f64>) -> Option<DualCut> {
        let nv = self.nv;
        let dt = dz[nv];
        let mut trace = 0.0;
        let mut zs = Vec::with_capacity(f.inv.len());
        for (k, sinv) in f.inv.iter().enumerate() {
            let s = sinv.nrows();
            let mut ds = DMatrix::<f64>::identity(s, s) * dt;
            for (i, fi) in &self.prob.blocks[k].f_vars {
                let c = dz[*i];
                ds.zip_apply(fi, |o, v| *o -= c * v);
            }
            let rest = &f.slack[k] - &ds;
            rest.clone().cholesky()?;
            let z = sinv * rest * sinv;
            let z = (&z + z.transpose()) * (0.5 / tau);
            trace += z.trace();
            zs.push(z);
        }
        if !(trace > 0.0) {
            return None;
        }
        let mut resid = vec![0.0; nv];
        let mut box_term = 0.0;
        for (i, v) in x.iter().enumerate() {
            let (up, lo) = (VAR_BOUND - v, VAR_BOUND + v);
            let u_up = (1.0 / up + dz[i] / (up * up)) / tau;
            let u_lo = (1.0 / lo - dz[i] / (lo * lo)) / tau;
            if u_up < 0.0 || u_lo < 0.0 {
                return None;
            }
            box_term += VAR_BOUND * (u_up + u_lo);
            resid[i] = u_up - u_lo;
        }
        let (mut d0, mut dg) = (0.0, 0.0);
        for (k, z) in zs.iter().enumerate() {
            let blk = &self.prob.blocks[k];
            d0 += z.dot(&blk.f0);
            dg += z.dot(&blk.f_gamma);
            for (i, fi) in &blk.f_vars {
                resid[*i] += z.dot(fi);
            }
        }
        let correction: f64 = x.iter().zip(&resid).map(|(xi, ri)| xi * ri).sum();
        Some(DualCut { d0: (d0 + correction - box_term) / trace, dg: dg / trace })
    }

    fn phase1(&self, x0: &[f64], cap: usize, eps: f64, mode: Mode) -> Phase1Out {
        let mut x = x0.to_vec();
        let lam = self.max_eig_all(&x);
        // In decide mode a certified point found earlier is still an answer
        // when deepening runs out of budget.
        let mut found: Option<(Vec<f64>, usize)> = None;
        let fail = |found: Option<(Vec<f64>, usize)>, last, cut, steps| match found {
            Some((xf, _)) => Phase1Out { outcome: Phase1::Feasible(xf.clone()), cut, last: Some(xf), steps },
            None => Phase1Out { outcome: Phase1::Failed, cut, last, steps },
        };
        if !lam.is_finite() {
            return fail(None, None, None, 0);
        }
        let mut t = lam + 1e-2 * lam.abs().max(1.0);
        let degree = self.prob.barrier_degree();
        let mut tau = degree / t.abs().max(1.0);
        let mut steps = 0;
        let mut best_cut: Option<DualCut> = None;
        loop {
            // Centering.
            loop {
                if t < -eps && matches!(mode, Mode::Decide(_)) {
                    match &mut found {
                        Some((xf, since)) => {
                            *xf = x.clone();
                            if steps - *since >= DEEPEN_STEPS {
                                return fail(found, Some(x), best_cut, steps);
                            }
                        }
                        None => found = Some((x.clone(), steps)),
                    }
                }
                if steps >= cap {
                    return fail(found, Some(x), best_cut, steps);
                }
                steps += 1;
                let Some(fac) = self.factor(&x, t) else {
                    return fail(found, None, best_cut, steps);
                };
                let Some((dz, dec)) = self.newton_direction(tau, &x, &fac) else {
                    return fail(found, Some(x), best_cut, steps);
                };
                if let Some(cut) = self.dual_cut(tau, &x, &fac, &dz) {
                    if best_cut.is_none_or(|b| cut.at(self.gamma) > b.at(self.gamma)) {
                        best_cut = Some(cut);
                    }
                    if matches!(mode, Mode::Decide(_)) && cut.at(self.gamma) > -eps {
                        return Phase1Out { outcome: Phase1::Infeasible, cut: best_cut, last: Some(x), steps };
                    }
                }
                if dec / 2.0 <= CENTER_TOL {
                    break;
                }
                let phi0 = tau * t + self.log_barrier(&x, t).unwrap_or(f64::INFINITY);
                let mut step = 1.0;
                let mut accepted = false;
                while step > 1e-14 {
                    let xn: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + step * dz[i]).collect();
                    let tn = t + step * dz[self.nv];
                    if let Some(phi) = self.log_barrier(&xn, tn) {
                        if tau * tn + phi <= phi0 - ARMIJO * step * dec {
                            x = xn;
                            t = tn;
                            accepted = true;
                            break;
                        }
                    }
                    step *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            let gap = degree / tau;
            let rel = match mode {
                Mode::Decide(r) | Mode::Polish(r) => r,
            };
            if gap <= rel * t.abs().max(10.0 * eps) {
                let outcome = if t < -eps { Phase1::Feasible(x.clone()) } else { Phase1::Infeasible };
                if matches!(mode, Mode::Polish(_)) || t < -eps {
                    return Phase1Out { outcome, cut: best_cut, last: Some(x), steps };
                }
            }
            tau *= BARRIER_GROWTH;
        }
    }

    /// All blocks are `≺ -eps I` at `(x, gamma)` by Cholesky.
    fn certifies(&self, x: &[f64], eps: f64) -> bool {
        (0..self.consts.len()).all(|k| {
            let mut m = -self.block(k, x);
            for i in 0..m.nrows() {
                m[(i, i)] -= eps;
            }
            m.cholesky().is_some()
        })
    }
}

/// Smallest gamma in `[lo, hi]` at which the fixed point `x` still certifies
/// every block; `x` must certify at `hi`.
fn shrink_gamma(prob: &LmiProblem, x: &[f64], lo: f64, hi: f64) -> f64 {
    let eps = prob.eps_cert;
    if Workspace::new(prob, lo).certifies(x, eps) {
        return lo;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..60 {
        if b - a <= 1e-13 * b.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (a + b);
        if Workspace::new(prob, mid).certifies(x, eps) {
            b = mid;
        } else {
            a = mid;
        }
    }
    b
}

/// Options for [`solve`].
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Relative bisection tolerance on gamma (`tol * max(1, gamma)`).
    pub tol: f64,
    /// Newton step cap per feasibility solve.
    pub max_iter: usize,
    /// Run a final max-margin centering at the returned gamma.
    pub polish: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: DEFAULT_NEWTON_CAP, polish: true }
    }
}

/// Gap fraction to which feasible bisection points are deepened before the
/// fixed-point gamma shrink.
const DEEPEN: f64 = 0.25;
/// Position of the trial point inside `[lo, hi]`. The lower end comes from
/// dual cuts that sit close to the optimum, so trials lean towards it.
const TRIAL_FRACTION: f64 = 0.25;
/// Newton step budget of the final centering.
const POLISH_STEPS: usize = 60;
/// Newton steps allowed for deepening after the first certified point.
const DEEPEN_STEPS: usize = 30;

/// Bisection on gamma over `[eps_cert, gamma_target]`.
///
/// Each feasibility solve also tightens the bracket: a feasible point lowers
/// the upper end to the smallest gamma it still certifies, and the dual bound
/// of any solve raises the lower end. The floor is tested first; when it is
/// infeasible the search ignores it entirely, so the returned gamma is
/// `gamma_min` or the floor-independent optimum, which makes it monotone in
/// the floor.
pub fn solve(prob: &LmiProblem, opts: SolveOptions) -> Result<SdpSolution, SdpError> {
    if !(opts.tol > 0.0) {
        return Err(SdpError::Tolerance(opts.tol));
    }
    let eps = prob.eps_cert;
    let layout = prob.layout;
    if !(prob.gamma_target >= prob.gamma_min.max(eps)) {
        return Ok(SdpSolution::failed(SdpStatus::Infeasible, 0));
    }

    let mut steps = 0;
    let x_init = layout.pack(&DMatrix::identity(layout.n, layout.n), &DMatrix::zeros(layout.m, layout.n));
    let decide = |gamma: f64, start: &[f64], steps: &mut usize| -> Phase1Out {
        let out = Workspace::new(prob, gamma).phase1(start, opts.max_iter, eps, Mode::Decide(DEEPEN));
        *steps += out.steps;
        out
    };

    let first = decide(prob.gamma_target, &x_init, &mut steps);
    let Phase1::Feasible(mut x_best) = first.outcome else {
        return Ok(SdpSolution::failed(SdpStatus::Infeasible, steps));
    };
    let mut lo = eps;
    let raise = |lo: f64, cut: Option<DualCut>| cut.map_or(lo, |c| lo.max(c.infeasible_below(eps)));
    let mut status = SdpStatus::Optimal;
    let mut gamma;

    let at_floor = if prob.gamma_min > eps {
        match decide(prob.gamma_min, &x_best, &mut steps).outcome {
            Phase1::Feasible(x) => Some(x),
            _ => None,
        }
    } else {
        None
    };
    if let Some(x) = at_floor {
        x_best = x;
        gamma = prob.gamma_min;
    } else {
        lo = raise(lo, first.cut).min(prob.gamma_target);
        let mut hi = shrink_gamma(prob, &x_best, lo, prob.gamma_target);
        let mut converged = false;
        for _ in 0..MAX_BISECTIONS {
            if hi - lo <= opts.tol * hi.max(1.0) {
                converged = true;
                break;
            }
            let mid = lo + TRIAL_FRACTION * (hi - lo);
            let out = decide(mid, &x_best, &mut steps);
            lo = raise(lo, out.cut).min(hi);
            match out.outcome {
                Phase1::Feasible(x) => {
                    hi = shrink_gamma(prob, &x, lo, mid);
                    x_best = x;
                }
                Phase1::Infeasible | Phase1::Failed => lo = lo.max(mid),
            }
        }
        if !converged && hi - lo > opts.tol * hi.max(1.0) {
            status = SdpStatus::Feasible;
        }
        gamma = hi;
        if gamma < prob.gamma_min {
            // Feasibility is monotone in gamma, so x_best still certifies.
            gamma = prob.gamma_min;
        }
    }

    let mut candidates = Vec::new();
    if opts.polish {
        let cap = opts.max_iter.min(POLISH_STEPS);
        let out = Workspace::new(prob, gamma).phase1(&x_best, cap, eps, Mode::Polish(1e-2));
        steps += out.steps;
        if let Some(x) = out.last {
            candidates.push(x);
        }
    }
    candidates.push(x_best);

    for x in candidates {
        let residuals = prob.residuals(&x, gamma);
        let (p, y) = layout.unpack(&x);
        let ok = residuals.iter().all(|r| *r <= -eps / 2.0) && min_eig(&p) >= P_FLOOR - 1e-6;
        if ok {
            return Ok(SdpSolution { p: Some(p), y: Some(y), gamma: Some(gamma), status, residuals, iterations: steps });
        }
    }
    Ok(SdpSolution::failed(SdpStatus::NumericalFailure, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    /// Scalar BRL block for A=a, B=b, E=e, Cz=c, Dz=0.
    fn scalar_psi(a: f64, b: f64, e: f64, c: f64) -> impl Fn(&DMatrix<f64>, &DMatrix<f64>, f64) -> DMatrix<f64> {
        move |p, y, g| {
            let (p, y) = (p[(0, 0)], y[(0, 0)]);
            dmatrix![2.0 * (a * p + b * y), e, c * p; e, -g, 0.0; c * p, 0.0, -g]
        }
    }

    fn scalar_problem(a: f64, b: f64, alpha: f64, gmin: f64, gt: f64) -> LmiProblem {
        let layout = VarLayout::new(1, 1);
        let psi = LmiBlock::from_affine("psi", layout, scalar_psi(a, b, 1.0, 1.0)).unwrap();
        let decay = LmiBlock::from_affine("decay", layout, move |p, y, _| {
            dmatrix![2.0 * (a * p[(0, 0)] + b * y[(0, 0)]) + 2.0 * alpha * p[(0, 0)]]
        })
        .unwrap();
        LmiProblem::new(layout, vec![psi, decay], gmin, gt).unwrap()
    }

    #[test]
    fn layout_round_trip() {
        let l = VarLayout::new(3, 2);
        assert_eq!(l.n_vars(), 6 + 6);
        let x: Vec<f64> = (0..l.n_vars()).map(|i| i as f64).collect();
        let (p, y) = l.unpack(&x);
        assert_eq!(p, p.transpose());
        assert_eq!(l.pack(&p, &y), x);
    }

    #[test]
    fn affine_basis_reproduces_function() {
        let l = VarLayout::new(1, 1);
        let f = scalar_psi(-1.0, 2.0, 0.5, 3.0);
        let blk = LmiBlock::from_affine("psi", l, &f).unwrap();
        let x = [0.7, -0.3];
        let (p, y) = l.unpack(&x);
        assert!((blk.eval(&x, 1.7) - f(&p, &y, 1.7)).amax() < 1e-14);
    }

    #[test]
    fn asymmetric_block_rejected() {
        let l = VarLayout::new(1, 1);
        let err = LmiBlock::from_affine("bad", l, |p, _, _| dmatrix![p[(0, 0)], 1.0; 0.0, 0.0]).unwrap_err();
        assert_eq!(err, SdpError::NotSymmetric("bad".into()));
    }

    #[test]
    fn scalar_open_loop_is_near_one() {
        // Oracle: at P=1, Y=0, gamma=1.01 the block [[-2,1,1],[1,-g,0],[1,0,-g]]
        // has max eigenvalue -g + ... < 0, so gamma* <= 1.01.
        let oracle = max_eig(&dmatrix![-2.0, 1.0, 1.0; 1.0, -1.01, 0.0; 1.0, 0.0, -1.01]);
        assert!(oracle < 0.0);
        let sol = solve(&scalar_problem(-1.0, 1.0, 0.0, 0.0, 10.0), SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let g = sol.gamma.unwrap();
        assert!(g <= 1.01, "{g}");
    }

    #[test]
    fn negative_target_is_infeasible() {
        let sol = solve(&scalar_problem(-1.0, 1.0, 0.0, 0.0, -1.0), SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
        assert!(sol.p.is_none());
    }

    #[test]
    fn unstabilizable_decay_is_infeasible() {
        // 2p + 0.2p < 0 has no solution with p >= 0.1.
        let sol = solve(&scalar_problem(1.0, 0.0, 0.1, 0.0, 10.0), SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
    }

    #[test]
    fn residuals_match_recheck() {
        let prob = scalar_problem(0.5, 1.0, 0.3, 0.0, 20.0);
        let sol = solve(&prob, SolveOptions::default()).unwrap();
        assert!(sol.is_success());
        let x = prob.layout.pack(sol.p.as_ref().unwrap(), sol.y.as_ref().unwrap());
        let again = prob.residuals(&x, sol.gamma.unwrap());
        for (a, b) in again.iter().zip(&sol.residuals) {
            assert!((a - b).abs() <= 1e-9);
            assert!(*a <= -EPS_CERT / 2.0);
        }
        assert!(min_eig(sol.p.as_ref().unwrap()) >= P_FLOOR - 1e-6);
    }

    #[test]
    fn floor_binds_exactly() {
        let sol = solve(&scalar_problem(-1.0, 1.0, 0.0, 9.0, 10.0), SolveOptions::default()).unwrap();
        assert_eq!(sol.gamma, Some(9.0));
    }

    #[test]
    fn raising_floor_never_lowers_gamma() {
        let mut last = 0.0;
        for gmin in [0.0, 0.2, 0.5, 0.9, 1.0, 1.5, 3.0] {
            let sol = solve(&scalar_problem(-1.0, 1.0, 0.2, gmin, 10.0), SolveOptions::default()).unwrap();
            let g = sol.gamma.unwrap();
            assert!(g >= last, "gmin {gmin}: {g} < {last}");
            assert!(g >= gmin);
            last = g;
        }
    }
}
