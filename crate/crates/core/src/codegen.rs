//! Controller source emission and certificate manifests.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{eigvals, hinf_norm, Spectrum};
use crate::model::{PlantModel, SpecSet};
use crate::pipeline::{compute_metrics, DesignRecord, MetricSet};
use crate::sdp::{max_eig, min_eig, P_FLOOR};
use crate::serde_ext;
use crate::synthesis::{assemble_decay, assemble_psi};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Relative slack of the closed-loop norm check against the certified gamma.
pub const NORM_CHECK_SLACK: f64 = 1e-3;
/// Relative tolerance of `K = Y P^-1` in re-verification.
pub const GAIN_CHECK_TOL: f64 = 1e-8;
/// Decay-rate tolerance of the spectrum check.
pub const SPECTRUM_TOL: f64 = 1e-6;

const PY_TEMPLATE: &str = include_str!("../assets/templates/controller.py.tmpl");
const C_TEMPLATE: &str = include_str!("../assets/templates/controller.h.tmpl");

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("record from iteration {0} has no successful certificate")]
    NotCertified(usize),
    #[error("manifest does not match plant: {0}")]
    Dimension(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Python,
    CHeader,
}

impl Target {
    pub fn extension(&self) -> &'static str {
        match self {
            Target::Python => "py",
            Target::CHeader => "h",
        }
    }
}

/// Everything needed to re-check the controller without the solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub plant: String,
    pub target: Target,
    pub n_states: usize,
    pub n_inputs: usize,
    #[serde(rename = "K", with = "serde_ext::matrix")]
    pub k: DMatrix<f64>,
    #[serde(rename = "P", with = "serde_ext::matrix")]
    pub p: DMatrix<f64>,
    #[serde(rename = "Y", with = "serde_ext::matrix")]
    pub y: DMatrix<f64>,
    pub gamma: f64,
    pub alpha: f64,
    pub closed_loop_spectrum: Spectrum,
    #[serde(with = "serde_ext::opt_float")]
    pub psi_max_eig: Option<f64>,
    #[serde(with = "serde_ext::opt_float")]
    pub decay_lmi_max_eig: Option<f64>,
    pub metrics: MetricSet,
    pub specs: SpecSet,
    /// SHA-256 of the controller source, hex encoded.
    pub source_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedArtifact {
    pub file_stem: String,
    pub controller_source: String,
    pub certificate_manifest: CertificateManifest,
}

impl GeneratedArtifact {
    pub fn source_file_name(&self) -> String {
        format!("{}_controller.{}", self.file_stem, self.certificate_manifest.target.extension())
    }

    pub fn manifest_file_name(&self) -> String {
        format!("{}_certificate.json", self.file_stem)
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.certificate_manifest).expect("manifest serialization is infallible")
    }
}

/// 17 significant digits; parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// File-name and identifier friendly version of a plant name.
pub fn sanitize(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    match s.chars().next() {
        Some(c) if c.is_ascii_alphabetic() => s,
        _ => format!("plant_{s}"),
    }
}

fn gain_rows(k: &DMatrix<f64>, open: &str, close: &str, indent: &str) -> String {
    (0..k.nrows())
        .map(|i| {
            let vals: Vec<String> = (0..k.ncols()).map(|j| format_f64(k[(i, j)])).collect();
            format!("{indent}{open}{}{close},", vals.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render(target: Target, name: &str, k: &DMatrix<f64>, gamma: f64, alpha: f64) -> String {
    let ident = sanitize(name);
    let prefix = ident.to_uppercase();
    let (template, rows_key, rows) = match target {
        Target::Python => (PY_TEMPLATE, "{{K_ROWS_PY}}", gain_rows(k, "[", "]", "    ")),
        Target::CHeader => (C_TEMPLATE, "{{K_ROWS_C}}", gain_rows(k, "{", "}", "    ")),
    };
    template
        .replace(rows_key, &rows)
        .replace("{{GUARD}}", &format!("{prefix}_CONTROLLER_H"))
        .replace("{{PREFIX_LOWER}}", &ident.to_lowercase())
        .replace("{{PREFIX}}", &prefix)
        .replace("{{NAME}}", &ident)
        .replace("{{TOOL_VERSION}}", crate::TOOL_VERSION)
        .replace("{{N}}", &k.ncols().to_string())
        .replace("{{M}}", &k.nrows().to_string())
        .replace("{{GAMMA}}", &format_f64(gamma))
        .replace("{{ALPHA}}", &format_f64(alpha))
}

/// Controller source plus manifest for a certified record.
pub fn generate(rec: &DesignRecord, p: &PlantModel, target: Target) -> Result<GeneratedArtifact, CodegenError> {
    let c = &rec.certificate;
    let (true, Some(k), Some(pm), Some(y), Some(gamma), Some(spectrum)) =
        (c.is_success(), c.k.as_ref(), c.p.as_ref(), c.y.as_ref(), c.gamma, c.closed_loop_spectrum.as_ref())
    else {
        return Err(CodegenError::NotCertified(rec.iteration));
    };
    let source = render(target, &p.name, k, gamma, c.alpha);
    let manifest = CertificateManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool_version: crate::TOOL_VERSION.to_string(),
        plant: p.name.clone(),
        target,
        n_states: p.n_states(),
        n_inputs: p.n_inputs(),
        k: k.clone(),
        p: pm.clone(),
        y: y.clone(),
        gamma,
        alpha: c.alpha,
        closed_loop_spectrum: spectrum.clone(),
        psi_max_eig: c.psi_max_eig,
        decay_lmi_max_eig: c.decay_lmi_max_eig,
        metrics: compute_metrics(rec, &rec.specs_snapshot),
        specs: rec.specs_snapshot,
        source_sha256: sha256_hex(&source),
    };
    Ok(GeneratedArtifact { file_stem: sanitize(&p.name), controller_source: source, certificate_manifest: manifest })
}

/// Outcome of each re-verification check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverifyReport {
    pub source_hash: bool,
    /// Gains embedded in the source equal the manifest `K`.
    pub source_gains: bool,
    pub psi_negative: bool,
    pub decay_negative: bool,
    pub p_floor: bool,
    pub gain_matches: bool,
    pub spectrum: bool,
    pub norm_within_gamma: bool,
}

impl ReverifyReport {
    pub fn all(&self) -> bool {
        self.source_hash
            && self.source_gains
            && self.psi_negative
            && self.decay_negative
            && self.p_floor
            && self.gain_matches
            && self.spectrum
            && self.norm_within_gamma
    }
}

/// Every check from the manifest alone against `p`.
pub fn reverify_detailed(artifact: &GeneratedArtifact, p: &PlantModel) -> Result<ReverifyReport, CodegenError> {
    let m = &artifact.certificate_manifest;
    let (n, nu) = (p.n_states(), p.n_inputs());
    let shapes = [("K", m.k.shape(), (nu, n)), ("P", m.p.shape(), (n, n)), ("Y", m.y.shape(), (nu, n))];
    for (label, got, want) in shapes {
        if got != want {
            return Err(CodegenError::Dimension(format!("{label} is {}x{}, plant needs {}x{}", got.0, got.1, want.0, want.1)));
        }
    }
    if !(m.gamma.is_finite() && m.alpha.is_finite()) {
        return Err(CodegenError::Manifest("non-finite gamma or alpha".into()));
    }
    let psi = assemble_psi(p, &m.p, &m.y, m.gamma).map_err(|e| CodegenError::Dimension(e.to_string()))?;
    let decay = assemble_decay(p, &m.p, &m.y, m.alpha).map_err(|e| CodegenError::Dimension(e.to_string()))?;
    let gain_matches = match m.p.clone().cholesky() {
        Some(ch) => {
            let k = ch.solve(&m.y.transpose()).transpose();
            (&k - &m.k).norm() <= GAIN_CHECK_TOL * k.norm().max(1.0)
        }
        None => false,
    };
    let a_cl = p.closed_loop(&m.k);
    let spectrum = eigvals(&a_cl).is_ok_and(|s| s.max_real_part < -m.alpha + SPECTRUM_TOL && s.is_hurwitz());
    let zero = DMatrix::zeros(p.n_regulated(), p.n_disturbances());
    let norm_within_gamma = spectrum
        && hinf_norm(&a_cl, &p.e, &p.closed_loop_output(&m.k), &zero).is_ok_and(|v| v <= m.gamma * (1.0 + NORM_CHECK_SLACK));
    Ok(ReverifyReport {
        source_hash: sha256_hex(&artifact.controller_source) == m.source_sha256,
        source_gains: embedded_gains(&artifact.controller_source) == m.k.transpose().iter().copied().collect::<Vec<_>>(),
        psi_negative: max_eig(&psi) < 0.0,
        decay_negative: max_eig(&decay) < 0.0,
        p_floor: min_eig(&m.p) >= P_FLOOR - 1e-6,
        gain_matches,
        spectrum,
        norm_within_gamma,
    })
}

/// True iff every check of [`reverify_detailed`] passes.
pub fn reverify(artifact: &GeneratedArtifact, p: &PlantModel) -> Result<bool, CodegenError> {
    reverify_detailed(artifact, p).map(|r| r.all())
}

/// Gain values embedded in generated source, in row-major order.
pub fn embedded_gains(source: &str) -> Vec<f64> {
    let Some(start) = source.find("K = [").or_else(|| source.find("_K[")) else {
        return Vec::new();
    };
    let body = &source[start..];
    let open = body.find(['[', '{']).map_or(0, |i| i);
    let body = &body[open..];
    let body = match body.find("\n]").or_else(|| body.find("\n};")) {
        Some(end) => &body[..end],
        None => body,
    };
    let body = body.split_once('\n').map_or("", |(_, rest)| rest);
    body.split(|c: char| matches!(c, ',' | '[' | ']' | '{' | '}') || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .filter_map(|t| t.parse::<f64>().ok())
        .collect()
}
