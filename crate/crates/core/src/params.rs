use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Index of a linear layer within a model's registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinearId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: DenseMatrix,
}

/// Named parameter tensors owned by a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bitwise_eq(&b.value))
    }

    /// Flat coordinate access used by the finite-difference oracle.
    pub fn coord(&self, coord: ParamCoord) -> Result<f64> {
        self.check_coord(coord)?;
        Ok(self.get(coord.param).get(coord.row, coord.col))
    }

    pub fn set_coord(&mut self, coord: ParamCoord, v: f64) -> Result<()> {
        self.check_coord(coord)?;
        self.get_mut(coord.param).set(coord.row, coord.col, v);
        Ok(())
    }

    fn check_coord(&self, coord: ParamCoord) -> Result<()> {
        if coord.param.0 >= self.params.len() {
            return Err(Error::Index {
                what: "parameter id",
                index: coord.param.0,
                len: self.params.len(),
            });
        }
        let m = self.get(coord.param);
        if coord.row >= m.rows() {
            return Err(Error::Index {
                what: "parameter row",
                index: coord.row,
                len: m.rows(),
            });
        }
        if coord.col >= m.cols() {
            return Err(Error::Index {
                what: "parameter column",
                index: coord.col,
                len: m.cols(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCoord {
    pub param: ParamId,
    pub row: usize,
    pub col: usize,
}

/// Registry entry for a linear layer `y = x·W (+ b)` with `W` shaped
/// `(inputs, outputs)`: rows of `W` are input neurons, columns are output
/// neurons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearSpec {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    /// Decoder layer index for scheduling; `None` for the output head and
    /// for layers outside the decoder stack.
    pub block: Option<usize>,
}
