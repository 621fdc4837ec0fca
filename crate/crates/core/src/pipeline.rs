//! The design loop: synthesize, verify, adapt, remember, and fall back to the
//! best recorded design.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{relax_on_infeasible, AdaptDecision, Adapter, DesignSummary};
use crate::analysis::{care_lqr, eigvals, FreqMetrics};
use crate::codegen::{self, GeneratedArtifact, Target};
use crate::llm::LlmClient;
use crate::model::{tustin_d2c, ModelError, PlantModel, SpecSet, TimeDomain};
use crate::serde_ext;
use crate::specint::{parse_llm, parse_rules, to_specset, ParsedSpec, RequirementText};
use crate::synthesis::{synthesize, synthesize_with, SynthesisCertificate, SynthesisError, SynthesisOptions, SynthesisStatus};
use crate::verify::{check, freq_check, monte_carlo, McConfig, VerificationReport, VerifyError};

pub const MEMORY_CAPACITY: usize = 20;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Iteration budget of the convergence-rate metric.
pub const CONVERGENCE_WINDOW: usize = 6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("no design recorded: {0}")]
    Unrecoverable(String),
    #[error("design memory is empty")]
    EmptyMemory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_iter: usize,
    pub seed: u64,
    pub mc: McConfig,
    /// Raise the gamma floor on transient violations.
    pub floor_enabled: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { max_iter: 10, seed: 42, mc: McConfig::default(), floor_enabled: true }
    }
}

impl RunConfig {
    fn mc(&self) -> McConfig {
        McConfig { seed: self.seed, ..self.mc }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRecord {
    pub iteration: usize,
    pub specs_snapshot: SpecSet,
    pub certificate: SynthesisCertificate,
    pub report: VerificationReport,
    pub adapt: Option<AdaptDecision>,
}

impl DesignRecord {
    fn summary(&self) -> DesignSummary {
        DesignSummary {
            iteration: self.iteration,
            gamma: self.certificate.gamma,
            gamma_min: self.certificate.gamma_min,
            settling_median_s: Some(self.report.mc.settling_time_median_s),
            overshoot_median: Some(self.report.mc.overshoot_median),
            violations: self.report.violations.len(),
        }
    }
}

/// Bounded history; the oldest record is evicted first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMemory {
    capacity: usize,
    records: VecDeque<DesignRecord>,
}

impl Default for DesignMemory {
    fn default() -> Self {
        Self::with_capacity(MEMORY_CAPACITY)
    }
}

impl DesignMemory {
    pub fn with_capacity(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), records: VecDeque::new() }
    }

    pub fn add(&mut self, rec: DesignRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DesignRecord> {
        self.records.iter()
    }

    pub fn last_mut(&mut self) -> Option<&mut DesignRecord> {
        self.records.back_mut()
    }

    pub fn summaries(&self) -> Vec<DesignSummary> {
        self.records.iter().map(DesignRecord::summary).collect()
    }
}

/// Fewest violations, then lowest certified gamma, then earliest iteration.
pub fn select_best(memory: &DesignMemory) -> Result<&DesignRecord, PipelineError> {
    memory
        .iter()
        .min_by(|a, b| {
            let ga = a.certificate.gamma.unwrap_or(f64::INFINITY);
            let gb = b.certificate.gamma.unwrap_or(f64::INFINITY);
            a.report
                .violations
                .len()
                .cmp(&b.report.violations.len())
                .then(ga.total_cmp(&gb))
                .then(a.iteration.cmp(&b.iteration))
        })
        .ok_or(PipelineError::EmptyMemory)
}

/// Benchmark metrics of one design, normalized to a reference spec set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    #[serde(with = "serde_ext::opt_float")]
    pub gamma: Option<f64>,
    #[serde(with = "serde_ext::opt_float")]
    pub gamma_over_target: Option<f64>,
    #[serde(with = "serde_ext::opt_float")]
    pub decay_sat: Option<f64>,
    #[serde(with = "serde_ext::opt_float")]
    pub disturbance_rejection: Option<f64>,
    #[serde(with = "serde_ext::opt_float")]
    pub settling_median_s: Option<f64>,
    #[serde(with = "serde_ext::opt_float")]
    pub overshoot_median: Option<f64>,
    /// A stabilizing controller was obtained.
    pub success: bool,
    /// All enforced specs met.
    pub converged: bool,
    pub iterations: usize,
}

impl MetricSet {
    pub fn unavailable(iterations: usize) -> Self {
        Self {
            gamma: None,
            gamma_over_target: None,
            decay_sat: None,
            disturbance_rejection: None,
            settling_median_s: None,
            overshoot_median: None,
            success: false,
            converged: false,
            iterations,
        }
    }

    /// Met every spec within [`CONVERGENCE_WINDOW`] iterations.
    pub fn converged_within_window(&self) -> bool {
        self.success && self.converged && self.iterations <= CONVERGENCE_WINDOW
    }
}

/// `decay_sat = -max Re lambda(A + BK) / alpha`.
pub fn decay_sat(max_real_part: f64, alpha: f64) -> Option<f64> {
    (alpha > 0.0 && max_real_part.is_finite()).then(|| -max_real_part / alpha)
}

/// Metrics of `rec` against `specs`; unavailable unless the certificate is a
/// success with a gain.
pub fn compute_metrics(rec: &DesignRecord, specs: &SpecSet) -> MetricSet {
    let cert = &rec.certificate;
    let (Some(_), true) = (cert.k.as_ref(), cert.is_success()) else {
        return MetricSet::unavailable(rec.iteration);
    };
    let max_re = cert.closed_loop_spectrum.as_ref().map_or(f64::NAN, |s| s.max_real_part);
    MetricSet {
        gamma: cert.gamma,
        gamma_over_target: cert.gamma.map(|g| g / specs.hinf.target),
        decay_sat: decay_sat(max_re, specs.alpha()),
        disturbance_rejection: rec.report.freq.disturbance_rejection,
        settling_median_s: Some(rec.report.mc.settling_time_median_s),
        overshoot_median: Some(rec.report.mc.overshoot_median),
        success: max_re < 0.0,
        converged: rec.report.violations.is_empty(),
        iterations: rec.iteration,
    }
}

/// Per-iteration line of the run trace, including infeasible iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub status: SynthesisStatus,
    #[serde(with = "serde_ext::opt_float")]
    pub gamma: Option<f64>,
    pub gamma_min: f64,
    pub gamma_target: f64,
    pub alpha: f64,
    #[serde(with = "serde_ext::opt_float")]
    pub max_real_part: Option<f64>,
    #[serde(with = "serde_ext::opt_float")]
    pub disturbance_rejection: Option<f64>,
    #[serde(with = "serde_ext::opt_float")]
    pub overshoot_median: Option<f64>,
    #[serde(with = "serde_ext::opt_float")]
    pub settling_median_s: Option<f64>,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub tool_version: String,
    /// Continuous-time plant the design was computed for.
    pub plant: PlantModel,
    pub parsed: Option<ParsedSpec>,
    pub initial_specs: SpecSet,
    #[serde(with = "serde_ext::matrix", rename = "K")]
    pub final_k: DMatrix<f64>,
    pub final_certificate: SynthesisCertificate,
    pub final_report: VerificationReport,
    pub selected_iteration: usize,
    pub converged: bool,
    pub iterations_used: usize,
    pub trace: Vec<IterationTrace>,
    pub history: DesignMemory,
    pub metrics: MetricSet,
    pub artifact: Option<GeneratedArtifact>,
}

/// Continuous-time version of `p`, converting discrete plants.
pub fn continuous_plant(p: &PlantModel) -> Result<PlantModel, ModelError> {
    match p.domain {
        TimeDomain::Continuous => Ok(p.clone()),
        TimeDomain::Discrete => tustin_d2c(p),
    }
}

fn verification(p: &PlantModel, k: &DMatrix<f64>, specs: &SpecSet, cfg: &RunConfig) -> Result<VerificationReport, VerifyError> {
    let freq: FreqMetrics = freq_check(p, k)?;
    let mc = monte_carlo(p, k, &cfg.mc());
    let violations = check(&mc, &freq, specs);
    Ok(VerificationReport { mc, freq, violations })
}

/// Interprets `req` and runs the design loop.
pub fn run(p: &PlantModel, req: &RequirementText, cfg: &RunConfig, client: Option<&dyn LlmClient>) -> Result<RunResult, PipelineError> {
    let parsed = match client {
        Some(c) => parse_llm(req, c),
        None => parse_rules(req),
    };
    let specs = to_specset(&parsed.spec)?;
    let mut out = run_specs(p, &specs, cfg, client)?;
    out.parsed = Some(parsed);
    Ok(out)
}

/// The design loop from a given spec set.
///
/// Each iteration synthesizes; an infeasible synthesis relaxes the specs and
/// consumes the iteration. Feasible designs are verified and recorded; the
/// loop stops at the first design without violations, otherwise the specs
/// are refined and the floor raised. Without convergence the best recorded
/// design is returned.
pub fn run_specs(p: &PlantModel, initial: &SpecSet, cfg: &RunConfig, client: Option<&dyn LlmClient>) -> Result<RunResult, PipelineError> {
    let plant = continuous_plant(p)?;
    initial.validate()?;
    let adapter = Adapter { client, floor_enabled: cfg.floor_enabled };
    let mut specs = *initial;
    let mut memory = DesignMemory::default();
    let mut trace = Vec::new();
    let mut converged_at = None;
    let mut last_failure = String::from("no iterations were run");

    for i in 1..=cfg.max_iter {
        let cert = synthesize(&plant, &specs)?;
        let mut line = IterationTrace {
            iteration: i,
            status: cert.status,
            gamma: cert.gamma,
            gamma_min: specs.hinf_min,
            gamma_target: specs.hinf.target,
            alpha: specs.alpha(),
            max_real_part: cert.closed_loop_spectrum.as_ref().map(|s| s.max_real_part),
            disturbance_rejection: None,
            overshoot_median: None,
            settling_median_s: None,
            violations: 0,
        };
        let (true, Some(k)) = (cert.is_success(), cert.k.clone()) else {
            last_failure = format!("iteration {i}: {}", cert.message);
            line.violations = 1;
            trace.push(line);
            specs = relax_on_infeasible(&specs);
            continue;
        };
        let report = verification(&plant, &k, &specs, cfg)?;
        line.disturbance_rejection = report.freq.disturbance_rejection;
        line.overshoot_median = Some(report.mc.overshoot_median);
        line.settling_median_s = Some(report.mc.settling_time_median_s);
        line.violations = report.violations.len();
        trace.push(line);
        let gamma_last = cert.gamma.unwrap_or(f64::NAN);
        let violations = report.violations.clone();
        memory.add(DesignRecord { iteration: i, specs_snapshot: specs, certificate: cert, report, adapt: None });
        if violations.is_empty() {
            converged_at = Some(i);
            break;
        }
        if i < cfg.max_iter {
            let decision = adapter.refine(&specs, &violations, &memory.summaries(), gamma_last, i);
            specs = decision.updated_specs;
            if let Some(rec) = memory.last_mut() {
                rec.adapt = Some(decision);
            }
        }
    }

    let best = match converged_at {
        Some(i) => memory.iter().find(|r| r.iteration == i).ok_or(PipelineError::EmptyMemory)?,
        None => select_best(&memory).map_err(|_| PipelineError::Unrecoverable(last_failure))?,
    }
    .clone();
    let mut metrics = compute_metrics(&best, initial);
    metrics.iterations = converged_at.unwrap_or(trace.len());
    let artifact = codegen::generate(&best, &plant, Target::Python).ok();
    Ok(RunResult {
        schema_version: REPORT_SCHEMA_VERSION,
        tool_version: crate::TOOL_VERSION.to_string(),
        plant,
        parsed: None,
        initial_specs: *initial,
        final_k: best.certificate.k.clone().unwrap_or_else(|| DMatrix::zeros(0, 0)),
        final_certificate: best.certificate.clone(),
        final_report: best.report.clone(),
        selected_iteration: best.iteration,
        converged: converged_at.is_some(),
        iterations_used: trace.len(),
        trace,
        history: memory,
        metrics,
        artifact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Brl,
    BrlAlpha,
    S2cNofloor,
    S2cFull,
    LqrH2,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Brl, Method::BrlAlpha, Method::S2cNofloor, Method::S2cFull, Method::LqrH2];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Brl => "brl",
            Method::BrlAlpha => "brl_alpha",
            Method::S2cNofloor => "s2c_nofloor",
            Method::S2cFull => "s2c_full",
            Method::LqrH2 => "lqr_h2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s.trim())
    }

    pub fn is_iterative(&self) -> bool {
        matches!(self, Method::S2cNofloor | Method::S2cFull)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub method: Method,
    pub metrics: MetricSet,
    pub record: Option<DesignRecord>,
    pub error: Option<String>,
}

fn single_shot(plant: &PlantModel, specs: &SpecSet, cert: SynthesisCertificate, cfg: &RunConfig, method: Method) -> Result<BaselineOutcome, PipelineError> {
    let Some(k) = cert.k.clone().filter(|_| cert.is_success()) else {
        return Ok(BaselineOutcome { method, metrics: MetricSet::unavailable(1), record: None, error: Some(cert.message.clone()) });
    };
    let report = verification(plant, &k, specs, cfg)?;
    let rec = DesignRecord { iteration: 1, specs_snapshot: *specs, certificate: cert, report, adapt: None };
    Ok(BaselineOutcome { method, metrics: compute_metrics(&rec, specs), record: Some(rec), error: None })
}

/// LQR gain for `Q = Cz' Cz`, `R = I`, packaged as a certificate whose gamma
/// is the closed-loop norm (no LMI certificate exists).
fn lqr_certificate(plant: &PlantModel, specs: &SpecSet) -> Result<SynthesisCertificate, String> {
    let q = plant.cz.transpose() * &plant.cz;
    let r = DMatrix::identity(plant.n_inputs(), plant.n_inputs());
    let k = care_lqr(&plant.a, &plant.b, &q, &r).map_err(|e| e.to_string())?;
    let spectrum = eigvals(&plant.closed_loop(&k)).map_err(|e| e.to_string())?;
    let norm = freq_check(plant, &k).map_err(|e| e.to_string())?.disturbance_rejection;
    let stable = spectrum.is_hurwitz();
    Ok(SynthesisCertificate {
        status: if stable { SynthesisStatus::Success } else { SynthesisStatus::Failure },
        k: Some(k),
        p: None,
        y: None,
        gamma: norm,
        alpha: 0.0,
        closed_loop_spectrum: Some(spectrum),
        psi_max_eig: None,
        decay_lmi_max_eig: None,
        gamma_target: specs.hinf.target,
        gamma_min: 0.0,
        solver_iterations: 0,
        message: if stable { String::new() } else { "LQR closed loop is not Hurwitz".into() },
    })
}

/// One baseline on one plant; failures become `success = false`.
pub fn run_baseline(
    p: &PlantModel,
    specs: &SpecSet,
    method: Method,
    cfg: &RunConfig,
    client: Option<&dyn LlmClient>,
) -> BaselineOutcome {
    let fail = |e: String| BaselineOutcome { method, metrics: MetricSet::unavailable(0), record: None, error: Some(e) };
    let plant = match continuous_plant(p) {
        Ok(pl) => pl,
        Err(e) => return fail(e.to_string()),
    };
    let outcome = match method {
        Method::Brl => synthesize_with(&plant, specs.hinf.target, 0.0, 0.0, SynthesisOptions::default())
            .map_err(PipelineError::from)
            .and_then(|c| single_shot(&plant, specs, c, cfg, method)),
        Method::BrlAlpha => synthesize(&plant, specs)
            .map_err(PipelineError::from)
            .and_then(|c| single_shot(&plant, specs, c, cfg, method)),
        Method::S2cNofloor | Method::S2cFull => {
            let cfg = RunConfig { floor_enabled: method == Method::S2cFull, ..*cfg };
            run_specs(&plant, specs, &cfg, client).map(|r| {
                let rec = r.history.iter().find(|h| h.iteration == r.selected_iteration).cloned();
                BaselineOutcome { method, metrics: r.metrics, record: rec, error: None }
            })
        }
        Method::LqrH2 => match lqr_certificate(&plant, specs) {
            Ok(c) => single_shot(&plant, specs, c, cfg, method),
            Err(e) => Ok(fail(e)),
        },
    };
    outcome.unwrap_or_else(|e| fail(e.to_string()))
}
