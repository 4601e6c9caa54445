//! Named parameter storage, initialization and gradient buffers.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owned, named 2D parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_records(&self) -> BTreeMap<String, TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), TensorRecord::from_array(v)))
            .collect()
    }

    /// Overwrites every parameter from `records`; names and shapes must match.
    pub fn load_records(&mut self, records: &BTreeMap<String, TensorRecord>) -> Result<()> {
        if records.len() != self.len() {
            return Err(validation(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                self.len()
            )));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let rec = records
                .get(name)
                .ok_or_else(|| validation(format!("checkpoint is missing tensor {name}")))?;
            let arr = rec.to_array()?;
            if arr.dim() != value.dim() {
                return Err(validation(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    arr.dim(),
                    value.dim()
                )));
            }
            *value = arr;
        }
        Ok(())
    }
}

/// Serialized tensor: shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn from_array(a: &Array2<f64>) -> Self {
        Self {
            shape: vec![a.nrows(), a.ncols()],
            values: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        let [r, c] = self.shape[..] else {
            return Err(validation(format!("expected 2D tensor, got shape {:?}", self.shape)));
        };
        Array2::from_shape_vec((r, c), self.values.clone())
            .map_err(|e| validation(format!("bad tensor payload: {e}")))
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Array2<f64>>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.scaled_add(scale, t),
                    None => *mine = Some(t * scale),
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

/// Seeded initializer: truncated normal (cut at two standard deviations).
pub struct Initializer {
    rng: ChaCha8Rng,
    pub std: f64,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn trunc_normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let std = self.std;
        Array2::from_shape_simple_fn((rows, cols), || loop {
            let z: f64 = self.rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
    }
}
