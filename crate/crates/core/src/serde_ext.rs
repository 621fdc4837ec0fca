//! Serde adapters shared by the file formats.
//!
//! Matrices are written row-major as nested arrays. Non-finite floats (the
//! `+inf` sentinels used for unsettled trajectories, unstable loops and
//! missing crossovers) are written as the strings `"inf"`, `"-inf"`, `"nan"`
//! since JSON has no literal for them.

use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Converts a matrix into row-major nested vectors.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Builds a matrix from row-major nested vectors; all rows must share a length.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(format!("row {i} has {} entries, expected {ncols}", r.len()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        rows_to_matrix(&rows).map_err(D::Error::custom)
    }
}

pub mod opt_matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(matrix_to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        match Option::<Vec<Vec<f64>>>::deserialize(d)? {
            Some(rows) => rows_to_matrix(&rows).map(Some).map_err(D::Error::custom),
            None => Ok(None),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FloatRepr {
    Num(f64),
    Text(String),
}

fn to_repr(v: f64) -> FloatRepr {
    if v.is_finite() {
        FloatRepr::Num(v)
    } else if v.is_nan() {
        FloatRepr::Text("nan".into())
    } else if v > 0.0 {
        FloatRepr::Text("inf".into())
    } else {
        FloatRepr::Text("-inf".into())
    }
}

fn from_repr(r: FloatRepr) -> Result<f64, String> {
    match r {
        FloatRepr::Num(v) => Ok(v),
        FloatRepr::Text(t) => match t.as_str() {
            "inf" | "+inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(format!("invalid float literal {other:?}")),
        },
    }
}

/// `f64` that may be infinite.
pub mod float {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(FloatRepr::deserialize(d)?).map_err(D::Error::custom)
    }
}

/// `Option<f64>` that may be infinite.
pub mod opt_float {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(to_repr).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<FloatRepr>::deserialize(d)? {
            Some(r) => from_repr(r).map(Some).map_err(D::Error::custom),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Holder {
        #[serde(with = "float")]
        v: f64,
        #[serde(with = "opt_float", default)]
        o: Option<f64>,
    }

    #[test]
    fn infinity_survives_json() {
        let h = Holder { v: f64::INFINITY, o: Some(f64::NEG_INFINITY) };
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, r#"{"v":"inf","o":"-inf"}"#);
        assert_eq!(serde_json::from_str::<Holder>(&s).unwrap(), h);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(rows_to_matrix(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
