//! Plant and specification types, plant files, and discrete-to-continuous
//! conversion.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serde_ext::{matrix_to_rows, rows_to_matrix};

/// Largest admissible 2-norm condition number of `A_d + I` in Tustin conversion.
pub const TUSTIN_COND_CAP: f64 = 1e8;

/// Settling-time to decay-rate factor for the 2% criterion: `alpha = 3.9 / Ts`.
pub const SETTLING_DECAY_FACTOR: f64 = 3.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("A_d + I is near-singular (condition number {cond:.3e} exceeds {cap:.0e})")]
    NearSingular { cond: f64, cap: f64 },
    #[error("range error: {0}")]
    Range(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeDomain {
    Continuous,
    Discrete,
}

/// LTI plant `dx = Ax + Bu + Ew`, `z = Cz x + Dz u`, with an optional
/// measured output `y = Cy x` used only by output-feedback analysis.
///
/// Constructed through [`PlantModel::new`], which enforces dimension
/// consistency, finiteness, and the sampling-period rule.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub name: String,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub cz: DMatrix<f64>,
    pub dz: DMatrix<f64>,
    pub cy: Option<DMatrix<f64>>,
    pub domain: TimeDomain,
    pub ts: Option<f64>,
}

impl PlantModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        e: DMatrix<f64>,
        cz: DMatrix<f64>,
        dz: DMatrix<f64>,
        cy: Option<DMatrix<f64>>,
        domain: TimeDomain,
        ts: Option<f64>,
    ) -> Result<Self, ModelError> {
        let plant = Self { name: name.into(), a, b, e, cz, dz, cy, domain, ts };
        plant.validate()?;
        Ok(plant)
    }

    /// Continuous plant without a measured output.
    pub fn continuous(
        name: impl Into<String>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        e: DMatrix<f64>,
        cz: DMatrix<f64>,
        dz: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        Self::new(name, a, b, e, cz, dz, None, TimeDomain::Continuous, None)
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_disturbances(&self) -> usize {
        self.e.ncols()
    }

    pub fn n_regulated(&self) -> usize {
        self.cz.nrows()
    }

    pub fn n_measured(&self) -> Option<usize> {
        self.cy.as_ref().map(DMatrix::nrows)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.a.nrows();
        if n == 0 || self.a.ncols() != n {
            return Err(ModelError::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        let check_rows = |label: &str, m: &DMatrix<f64>| {
            if m.nrows() != n {
                Err(ModelError::Dimension(format!("{label} has {} rows, expected {n}", m.nrows())))
            } else if m.ncols() == 0 {
                Err(ModelError::Dimension(format!("{label} has no columns")))
            } else {
                Ok(())
            }
        };
        check_rows("B", &self.b)?;
        check_rows("E", &self.e)?;
        if self.cz.ncols() != n || self.cz.nrows() == 0 {
            return Err(ModelError::Dimension(format!(
                "Cz is {}x{}, expected z x {n} with z >= 1",
                self.cz.nrows(),
                self.cz.ncols()
            )));
        }
        if self.dz.nrows() != self.cz.nrows() || self.dz.ncols() != self.b.ncols() {
            return Err(ModelError::Dimension(format!(
                "Dz is {}x{}, expected {}x{}",
                self.dz.nrows(),
                self.dz.ncols(),
                self.cz.nrows(),
                self.b.ncols()
            )));
        }
        if let Some(cy) = &self.cy {
            if cy.ncols() != n || cy.nrows() == 0 {
                return Err(ModelError::Dimension(format!(
                    "Cy is {}x{}, expected y x {n} with y >= 1",
                    cy.nrows(),
                    cy.ncols()
                )));
            }
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        for (label, m) in [("A", &self.a), ("B", &self.b), ("E", &self.e), ("Cz", &self.cz), ("Dz", &self.dz)] {
            if !finite(m) {
                return Err(ModelError::NonFinite(label));
            }
        }
        if self.cy.as_ref().is_some_and(|m| !finite(m)) {
            return Err(ModelError::NonFinite("Cy"));
        }
        match (self.domain, self.ts) {
            (TimeDomain::Discrete, Some(ts)) if ts.is_finite() && ts > 0.0 => Ok(()),
            (TimeDomain::Discrete, Some(ts)) => {
                Err(ModelError::Domain(format!("discrete plant needs Ts > 0, got {ts}")))
            }
            (TimeDomain::Discrete, None) => {
                Err(ModelError::Domain("discrete plant without sampling period Ts".into()))
            }
            (TimeDomain::Continuous, Some(_)) => {
                Err(ModelError::Domain("continuous plant must not carry Ts".into()))
            }
            (TimeDomain::Continuous, None) => Ok(()),
        }
    }

    /// Closed-loop state matrix `A + BK`.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a + &self.b * k
    }

    /// Closed-loop regulated output matrix `Cz + Dz K`.
    pub fn closed_loop_output(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.cz + &self.dz * k
    }
}

/// Disturbance / regulated-output triple `(E, Cz, Dz)`, also known as
/// `(B1, C1, D12)` in the standard H-infinity partition.
pub fn alias_matrices(p: &PlantModel) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    (p.e.clone(), p.cz.clone(), p.dz.clone())
}

#[derive(Serialize, Deserialize)]
struct PlantFile {
    name: String,
    domain: TimeDomain,
    #[serde(rename = "Ts", default, skip_serializing_if = "Option::is_none")]
    ts: Option<f64>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "E")]
    e: Vec<Vec<f64>>,
    #[serde(rename = "Cz")]
    cz: Vec<Vec<f64>>,
    #[serde(rename = "Dz")]
    dz: Vec<Vec<f64>>,
    #[serde(rename = "Cy", default, skip_serializing_if = "Option::is_none")]
    cy: Option<Vec<Vec<f64>>>,
}

impl Serialize for PlantModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PlantFile {
            name: self.name.clone(),
            domain: self.domain,
            ts: self.ts,
            a: matrix_to_rows(&self.a),
            b: matrix_to_rows(&self.b),
            e: matrix_to_rows(&self.e),
            cz: matrix_to_rows(&self.cz),
            dz: matrix_to_rows(&self.dz),
            cy: self.cy.as_ref().map(matrix_to_rows),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PlantModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let f = PlantFile::deserialize(d)?;
        plant_from_file(f).map_err(D::Error::custom)
    }
}

fn plant_from_file(f: PlantFile) -> Result<PlantModel, ModelError> {
    let mat = |label: &str, rows: &[Vec<f64>]| {
        rows_to_matrix(rows).map_err(|e| ModelError::Dimension(format!("{label}: {e}")))
    };
    PlantModel::new(
        f.name,
        mat("A", &f.a)?,
        mat("B", &f.b)?,
        mat("E", &f.e)?,
        mat("Cz", &f.cz)?,
        mat("Dz", &f.dz)?,
        f.cy.as_deref().map(|r| mat("Cy", r)).transpose()?,
        f.domain,
        f.ts,
    )
}

/// Parses a plant document, separating syntax errors from invariant violations.
pub fn parse_plant(text: &str) -> Result<PlantModel, ModelError> {
    let f: PlantFile = serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
    plant_from_file(f)
}

pub fn load_plant(path: impl AsRef<Path>) -> Result<PlantModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    parse_plant(&text)
}

pub fn plant_to_json(p: &PlantModel) -> String {
    serde_json::to_string_pretty(p).expect("plant serialization is infallible")
}

pub fn write_plant(p: &PlantModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    std::fs::write(path, plant_to_json(p) + "\n")
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

/// 2-norm condition number from singular values; `inf` when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Bilinear (Tustin) discrete-to-continuous conversion.
///
/// Both input channels (`B` and `E`) use the input formula; `Cz`, `Dz` and
/// `Cy` use the output/feedthrough formulas. The disturbance feedthrough
/// `-Cz (A_d + I)^-1 E` that the map produces has no slot in the plant
/// structure and is dropped.
pub fn tustin_d2c(p: &PlantModel) -> Result<PlantModel, ModelError> {
    let ts = match (p.domain, p.ts) {
        (TimeDomain::Discrete, Some(ts)) => ts,
        _ => return Err(ModelError::Domain("Tustin conversion needs a discrete plant".into())),
    };
    let n = p.n_states();
    let eye = DMatrix::<f64>::identity(n, n);
    let shifted = &p.a + &eye;
    let cond = condition_number(&shifted);
    if !(cond <= TUSTIN_COND_CAP) {
        return Err(ModelError::NearSingular { cond, cap: TUSTIN_COND_CAP });
    }
    let lu = shifted.lu();
    let inv = lu
        .try_inverse()
        .ok_or(ModelError::NearSingular { cond: f64::INFINITY, cap: TUSTIN_COND_CAP })?;
    let scale = 2.0 / ts;
    let a = (&p.a - &eye) * &inv * scale;
    let b = &inv * &p.b * scale;
    let e = &inv * &p.e * scale;
    let cz = &p.cz * &inv;
    let dz = &p.dz - &p.cz * &inv * &p.b;
    let cy = p.cy.as_ref().map(|c| c * &inv);
    PlantModel::new(p.name.clone(), a, b, e, cz, dz, cy, TimeDomain::Continuous, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    Low,
    Medium,
    High,
    Critical,
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Priority::Low => "low",
            Priority::Medium => "medium",
            Priority::High => "high",
            Priority::Critical => "critical",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecEntry {
    pub target: f64,
    pub slack: f64,
    pub priority: Priority,
}

impl SpecEntry {
    pub fn new(target: f64, slack: f64, priority: Priority) -> Self {
        Self { target, slack, priority }
    }
}

/// Performance specification set driving synthesis and verification.
///
/// `hinf_min` is the gamma floor; it never exceeds `0.9 * hinf.target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecSet {
    pub hinf: SpecEntry,
    pub hinf_min: f64,
    pub settling_time: SpecEntry,
    pub overshoot: SpecEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_rate: Option<f64>,
}

/// Fraction of the H-infinity target the floor may reach.
pub const FLOOR_CAP_RATIO: f64 = 0.9;

impl SpecSet {
    /// Decay rate used by synthesis: the explicit override when present,
    /// otherwise `3.9 / settling_time.target`.
    pub fn alpha(&self) -> f64 {
        self.decay_rate
            .unwrap_or(SETTLING_DECAY_FACTOR / self.settling_time.target)
    }

    pub fn floor_cap(&self) -> f64 {
        FLOOR_CAP_RATIO * self.hinf.target
    }

    /// Clamps the floor into `[0, 0.9 * hinf.target]`.
    pub fn cap_floor(&mut self) {
        self.hinf_min = self.hinf_min.clamp(0.0, self.floor_cap().max(0.0));
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let entries = [("h_infinity_norm", &self.hinf), ("settling_time", &self.settling_time), ("overshoot", &self.overshoot)];
        for (label, e) in entries {
            if !e.target.is_finite() || !e.slack.is_finite() {
                return Err(ModelError::Range(format!("{label} has non-finite fields")));
            }
            if e.slack < 0.0 {
                return Err(ModelError::Range(format!("{label} slack {} < 0", e.slack)));
            }
        }
        if !(self.hinf.target > 0.0) {
            return Err(ModelError::Range(format!("h_infinity_norm target {} <= 0", self.hinf.target)));
        }
        if !(self.settling_time.target > 0.0) {
            return Err(ModelError::Range(format!(
                "settling_time target {} <= 0",
                self.settling_time.target
            )));
        }
        if !(0.0..1.0).contains(&self.overshoot.target) {
            return Err(ModelError::Range(format!(
                "overshoot target {} outside [0, 1)",
                self.overshoot.target
            )));
        }
        if !(self.hinf_min >= 0.0 && self.hinf_min <= self.floor_cap() * (1.0 + 1e-12)) {
            return Err(ModelError::Range(format!(
                "gamma floor {} outside [0, 0.9 * {}]",
                self.hinf_min, self.hinf.target
            )));
        }
        if let Some(a) = self.decay_rate {
            if !(a.is_finite() && a >= 0.0) {
                return Err(ModelError::Range(format!("decay rate {a} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}
