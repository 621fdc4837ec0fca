//! Synthetic benchmark suites.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use serde::{Deserialize, Serialize};

use crate::analysis::eigvals;
use crate::llm::LlmClient;
use crate::model::PlantModel;
use crate::pipeline::{run_baseline, BaselineOutcome, Method, MetricSet, RunConfig};
use crate::specint::{parse_llm, parse_rules, to_specset, RequirementText};

/// Inclusive ranges for generated plant dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimRange {
    pub n: (usize, usize),
    pub m: (usize, usize),
}

impl Default for DimRange {
    fn default() -> Self {
        Self { n: (2, 4), m: (1, 2) }
    }
}

impl DimRange {
    /// Parses `"n:2..4,m:1..2"`; omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut out = Self::default();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, range) = part.split_once(':').ok_or_else(|| format!("bad dims entry {part:?}"))?;
            let (lo, hi) = range
                .split_once("..")
                .ok_or_else(|| format!("bad range {range:?}"))?;
            let lo: usize = lo.trim().parse().map_err(|_| format!("bad bound {lo:?}"))?;
            let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| format!("bad bound {hi:?}"))?;
            if lo == 0 || lo > hi {
                return Err(format!("empty range {part:?}"));
            }
            match key.trim() {
                "n" => out.n = (lo, hi),
                "m" => out.m = (lo, hi),
                other => return Err(format!("unknown dimension {other:?}")),
            }
        }
        Ok(out)
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Numerical rank test on the controllability matrix `[B, AB, ..., A^(n-1) B]`.
pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    let sv = ctrb.singular_values();
    let tol = sv.max() * 1e-9 * (n * m) as f64;
    sv.iter().filter(|s| **s > tol).count() == n
}

/// One random plant with `z = [C1 x; u]` (so `Dz = [0; I]`) and `w = n`.
///
/// Entries are standard normal; the spectrum of `A` is then shifted so its
/// largest real part equals `+margin` (unstable) or `-margin` (stable), with
/// `margin` uniform in `[0.1, 1.0]`. Plants failing the controllability test
/// are redrawn.
pub fn random_plant(rng: &mut ChaCha8Rng, name: &str, n: usize, m: usize, unstable: bool) -> PlantModel {
    let nz = n.min(2);
    loop {
        let a_raw = normal_matrix(rng, n, n);
        let b = normal_matrix(rng, n, m);
        let e = normal_matrix(rng, n, n);
        let c1 = normal_matrix(rng, nz, n);
        let margin: f64 = rng.random_range(0.1..1.0);
        let Ok(spec) = eigvals(&a_raw) else { continue };
        let target = if unstable { margin } else { -margin };
        let a = &a_raw + DMatrix::identity(n, n) * (target - spec.max_real_part);
        if !is_controllable(&a, &b) {
            continue;
        }
        let mut cz = DMatrix::zeros(nz + m, n);
        cz.view_mut((0, 0), (nz, n)).copy_from(&c1);
        let mut dz = DMatrix::zeros(nz + m, m);
        dz.view_mut((nz, 0), (m, m)).fill_with_identity();
        if let Ok(p) = PlantModel::continuous(name, a, b, e, cz, dz) {
            return p;
        }
    }
}

/// `count` seeded plants of which exactly `n_unstable` have an unstable `A`.
pub fn generate_suite(count: usize, seed: u64, dims: DimRange, n_unstable: usize) -> Vec<PlantModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flags: Vec<bool> = (0..count).map(|i| i < n_unstable.min(count)).collect();
    flags.shuffle(&mut rng);
    flags
        .iter()
        .enumerate()
        .map(|(i, &unstable)| {
            let n = rng.random_range(dims.n.0..=dims.n.1);
            let m = rng.random_range(dims.m.0..=dims.m.1).min(n);
            random_plant(&mut rng, &format!("P{:02}", i + 1), n, m, unstable)
        })
        .collect()
}

/// Number of unstable plants for a requested fraction, rounded to nearest.
pub fn unstable_count(count: usize, frac: f64) -> usize {
    ((count as f64) * frac.clamp(0.0, 1.0)).round() as usize
}

/// One `(plant, requirements)` pair; paths are relative to the suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub plant: String,
    pub requirements: String,
}

/// Benchmark suite manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSuite {
    pub schema_version: u32,
    pub entries: Vec<SuiteEntry>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![42]
}

pub const SUITE_SCHEMA_VERSION: u32 = 1;

impl BenchSuite {
    pub fn new(entries: Vec<SuiteEntry>) -> Self {
        Self { schema_version: SUITE_SCHEMA_VERSION, entries, methods: default_methods(), seeds: default_seeds() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.entries.is_empty() {
            return Err("suite has no entries".into());
        }
        if self.methods.is_empty() {
            return Err("suite has no methods".into());
        }
        if self.seeds.is_empty() {
            return Err("suite has no seeds".into());
        }
        Ok(())
    }
}

/// One benchmark problem ready to run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub plant: PlantModel,
    pub requirements: RequirementText,
}

/// One `(problem, method, seed)` result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub problem: String,
    pub method: Method,
    pub seed: u64,
    pub metrics: MetricSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const CSV_HEADER: &str =
    "problem,method,success,iterations,gamma,gamma_over_target,decay_sat,dist_rej,settling_median,overshoot_median";

fn csv_num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.17e}"),
        Some(x) if x.is_nan() => "nan".into(),
        Some(x) if x > 0.0 => "inf".into(),
        Some(_) => "-inf".into(),
        None => String::new(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let m = &self.metrics;
        [
            csv_field(&self.problem),
            self.method.to_string(),
            m.success.to_string(),
            m.iterations.to_string(),
            csv_num(m.gamma),
            csv_num(m.gamma_over_target),
            csv_num(m.decay_sat),
            csv_num(m.disturbance_rejection),
            csv_num(m.settling_median_s),
            csv_num(m.overshoot_median),
        ]
        .join(",")
    }
}

pub fn rows_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Median of the finite values; `None` when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Panel metrics of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub rows: usize,
    pub success_rate: f64,
    pub converged_within_6_rate: f64,
    pub dist_rej_median: Option<f64>,
    /// `dist_rej_median / dist_rej_median(brl)`.
    pub dist_rej_normalized: Option<f64>,
    pub gamma_over_target_median: Option<f64>,
    pub decay_sat_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub problems: usize,
    pub methods: Vec<MethodSummary>,
}

impl AggregateReport {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

/// Rates are means over all rows of a method; medians use the rows where
/// the value exists (successful designs).
pub fn aggregate(rows: &[BenchRow], methods: &[Method]) -> AggregateReport {
    let of = |m: Method| rows.iter().filter(move |r| r.method == m);
    let brl_median = median(of(Method::Brl).filter_map(|r| r.metrics.disturbance_rejection));
    let summaries = methods
        .iter()
        .map(|&m| {
            let n = of(m).count();
            let rate = |f: &dyn Fn(&BenchRow) -> bool| if n == 0 { 0.0 } else { of(m).filter(|r| f(r)).count() as f64 / n as f64 };
            let dist = median(of(m).filter_map(|r| r.metrics.disturbance_rejection));
            MethodSummary {
                method: m,
                rows: n,
                success_rate: rate(&|r| r.metrics.success),
                converged_within_6_rate: rate(&|r| r.metrics.converged_within_window()),
                dist_rej_median: dist,
                dist_rej_normalized: match (dist, brl_median) {
                    (Some(d), Some(b)) if b > 0.0 => Some(d / b),
                    _ => None,
                },
                gamma_over_target_median: median(of(m).filter_map(|r| r.metrics.gamma_over_target)),
                decay_sat_median: median(of(m).filter_map(|r| r.metrics.decay_sat)),
            }
        })
        .collect();
    let mut problems: Vec<&str> = rows.iter().map(|r| r.problem.as_str()).collect();
    problems.sort_unstable();
    problems.dedup();
    AggregateReport {
        schema_version: SUITE_SCHEMA_VERSION,
        tool_version: crate::TOOL_VERSION.to_string(),
        problems: problems.len(),
        methods: summaries,
    }
}

/// Tidy `method,value` tables, one per results panel.
pub fn panel_csvs(report: &AggregateReport) -> Vec<(&'static str, String)> {
    type Pick = fn(&MethodSummary) -> Option<f64>;
    let panels: [(&'static str, Pick); 5] = [
        ("panel_a_success_rate.csv", |s| Some(s.success_rate)),
        ("panel_b_dist_rej_normalized.csv", |s| s.dist_rej_normalized),
        ("panel_c_gamma_over_target.csv", |s| s.gamma_over_target_median),
        ("panel_d_decay_sat.csv", |s| s.decay_sat_median),
        ("panel_e_converged_within_6.csv", |s| Some(s.converged_within_6_rate)),
    ];
    panels
        .iter()
        .map(|(name, pick)| {
            let mut out = String::from("method,value\n");
            for s in &report.methods {
                out.push_str(&format!("{},{}\n", s.method, csv_num(pick(s))));
            }
            (*name, out)
        })
        .collect()
}

/// Result of one benchmark job, including the full baseline outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub row: BenchRow,
    pub outcome: BaselineOutcome,
}

fn run_one(problem: &Problem, method: Method, seed: u64, label: String, base: &RunConfig, client: Option<&dyn LlmClient>) -> BenchRun {
    let cfg = RunConfig { seed, ..*base };
    let parsed = match client {
        Some(c) => parse_llm(&problem.requirements, c),
        None => parse_rules(&problem.requirements),
    };
    let outcome = match to_specset(&parsed.spec) {
        Ok(specs) => run_baseline(&problem.plant, &specs, method, &cfg, client),
        Err(e) => BaselineOutcome { method, metrics: MetricSet::unavailable(0), record: None, error: Some(e.to_string()) },
    };
    let row = BenchRow { problem: label, method, seed, metrics: outcome.metrics.clone(), error: outcome.error.clone() };
    BenchRun { row, outcome }
}

/// Runs every `(problem, method, seed)` on `jobs` worker threads. Results
/// come back in suite order regardless of scheduling.
pub fn run_suite(
    problems: &[Problem],
    methods: &[Method],
    seeds: &[u64],
    base: &RunConfig,
    jobs: usize,
    client: Option<&dyn LlmClient>,
) -> Vec<BenchRun> {
    let mut tasks = Vec::new();
    for p in problems {
        for &s in seeds {
            for &m in methods {
                let label = if seeds.len() > 1 { format!("{}#{s}", p.name) } else { p.name.clone() };
                tasks.push((p, m, s, label));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<BenchRun>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((p, m, s, label)) = tasks.get(i) else { break };
                let run = run_one(p, *m, *s, label.clone(), base, client);
                *slots[i].lock().expect("result slot poisoned") = Some(run);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot poisoned").expect("every task ran"))
        .collect()
}

/// Requirement text used for generated plants that come without one.
pub const DEFAULT_REQUIREMENTS: &str = "Keep disturbance rejection tight (H-infinity norm less than 5, high priority); \
settling time under 8 seconds with 2s tolerance; overshoot below 20%.\n";
