//! Serde adapters that store matrices as `{rows, cols, data}` with row-major data.
//!
//! Floats go through `serde_json`'s shortest round-trip formatting and
//! `float_roundtrip` parsing, so documents reload bit-exactly.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::matstats::{Matrix, Vector};

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&Matrix> for MatrixRepr {
    fn from(m: &Matrix) -> Self {
        MatrixRepr {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }
}

impl MatrixRepr {
    fn into_matrix<E: serde::de::Error>(self) -> Result<Matrix, E> {
        if self.rows * self.cols != self.data.len() {
            return Err(E::custom(format!(
                "matrix {}x{} has {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(Matrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        MatrixRepr::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        MatrixRepr::deserialize(d)?.into_matrix()
    }
}

pub mod matrices {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[Matrix], s: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(MatrixRepr::from).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Matrix>, D::Error> {
        Vec::<MatrixRepr>::deserialize(d)?
            .into_iter()
            .map(MatrixRepr::into_matrix)
            .collect()
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub mod vectors {
    use super::*;

    pub fn serialize<S: Serializer>(vs: &[Vector], s: S) -> Result<S::Ok, S::Error> {
        vs.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
        Ok(Vec::<Vec<f64>>::deserialize(d)?
            .into_iter()
            .map(Vector::from_vec)
            .collect())
    }
}
