//! Time-series containers, instance normalization, patching and label
//! granularity conversion.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Default patch length (timesteps per temporal token).
pub const DEFAULT_PATCH_SIZE: usize = 16;
/// Default normalization epsilon.
pub const DEFAULT_NORM_EPS: f64 = 1e-8;

/// A non-empty univariate series of finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    values: Vec<f64>,
}

impl Series {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(validation("series must contain at least one value"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(validation(format!("non-finite value at index {i}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Validates that every label is 0 or 1.
pub fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&l| l > 1) {
        Some(i) => Err(validation(format!(
            "label at index {i} is {}, expected 0 or 1",
            labels[i]
        ))),
        None => Ok(()),
    }
}

/// A series with point-level binary anomaly labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries {
    pub series: Series,
    pub labels: Vec<u8>,
}

impl LabeledSeries {
    pub fn new(series: Series, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != series.len() {
            return Err(validation(format!(
                "label length {} does not match series length {}",
                labels.len(),
                series.len()
            )));
        }
        check_labels(&labels)?;
        Ok(Self { series, labels })
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Equal-length variables sharing one label track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateSeries {
    variables: Vec<Series>,
    pub labels: Option<Vec<u8>>,
}

impl MultivariateSeries {
    pub fn new(variables: Vec<Series>, labels: Option<Vec<u8>>) -> Result<Self> {
        let first = variables
            .first()
            .ok_or_else(|| validation("multivariate series needs at least one variable"))?;
        let len = first.len();
        if let Some(v) = variables.iter().position(|s| s.len() != len) {
            return Err(validation(format!(
                "variable {v} has length {}, expected {len}",
                variables[v].len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(validation(format!(
                    "label length {} does not match series length {len}",
                    l.len()
                )));
            }
            check_labels(l)?;
        }
        Ok(Self { variables, labels })
    }

    pub fn variables(&self) -> &[Series] {
        &self.variables
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn len(&self) -> usize {
        self.variables[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<LabeledSeries> for MultivariateSeries {
    fn from(ls: LabeledSeries) -> Self {
        Self {
            variables: vec![ls.series],
            labels: Some(ls.labels),
        }
    }
}

/// Statistics needed to undo [`instance_normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub epsilon: f64,
}

impl NormStats {
    /// True when the series was too flat to scale and was mapped to zeros.
    pub fn is_degenerate(&self) -> bool {
        self.std <= self.epsilon
    }
}

/// Zero-mean, unit-variance scaling using the population standard deviation.
///
/// Series with `std <= epsilon` map to all zeros.
pub fn instance_normalize(s: &Series, epsilon: f64) -> Result<(Series, NormStats)> {
    if !(epsilon > 0.0) {
        return Err(validation("normalization epsilon must be positive"));
    }
    let n = s.len() as f64;
    let mean = s.values().iter().sum::<f64>() / n;
    let var = s.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let stats = NormStats { mean, std, epsilon };
    let out = if stats.is_degenerate() {
        vec![0.0; s.len()]
    } else {
        s.values().iter().map(|v| (v - mean) / std).collect()
    };
    Ok((Series { values: out }, stats))
}

/// Inverse of [`instance_normalize`].
pub fn denormalize(s: &Series, stats: &NormStats) -> Series {
    let values = if stats.is_degenerate() {
        s.values().iter().map(|_| stats.mean).collect()
    } else {
        s.values()
            .iter()
            .map(|v| v * stats.std + stats.mean)
            .collect()
    };
    Series { values }
}

/// Token matrix of consecutive non-overlapping patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// N_TS x patch_size.
    pub tokens: Array2<f64>,
    pub patch_size: usize,
    /// Count of appended timesteps in the last patch.
    pub pad_len: usize,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.tokens.nrows()
    }

    /// Original series length.
    pub fn series_len(&self) -> usize {
        self.n_patches() * self.patch_size - self.pad_len
    }
}

/// Number of patches covering `len` timesteps.
pub fn patch_count(len: usize, patch_size: usize) -> usize {
    len.div_ceil(patch_size)
}

/// Splits a series into rows of `patch_size`; the trailing partial patch is
/// right-padded by repeating the last observed value.
pub fn patchify(s: &Series, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(validation("patch_size must be at least 1"));
    }
    let len = s.len();
    let n = patch_count(len, patch_size);
    let last = s.values()[len - 1];
    let tokens = Array2::from_shape_fn((n, patch_size), |(i, j)| {
        s.values().get(i * patch_size + j).copied().unwrap_or(last)
    });
    Ok(PatchGrid {
        tokens,
        patch_size,
        pad_len: n * patch_size - len,
    })
}

/// Flattens a patch grid back to the original length, dropping padding.
pub fn unpatchify(grid: &PatchGrid) -> Series {
    let len = grid.series_len();
    let values = grid.tokens.iter().take(len).copied().collect();
    Series { values }
}

/// Patch-level anomaly flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLabels {
    pub flags: Vec<u8>,
}

impl PatchLabels {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }
}

/// A patch is anomalous if any timestep inside it is.
pub fn point_labels_to_patch_labels(labels: &[u8], patch_size: usize) -> Result<PatchLabels> {
    if patch_size == 0 {
        return Err(validation("patch_size must be at least 1"));
    }
    check_labels(labels)?;
    let flags = labels
        .chunks(patch_size)
        .map(|c| c.iter().copied().max().unwrap_or(0))
        .collect();
    Ok(PatchLabels { flags })
}

/// Concatenates per-token rows of per-timestep values and truncates to `len`.
///
/// `token_values` is N_TS x patch_size; this is the fixed reshaping half of
/// token projection, applied after the learnable map.
pub fn tokens_to_sequence(token_values: &Array2<f64>, len: usize) -> Result<Vec<f64>> {
    let total = token_values.len();
    if total < len {
        return Err(Error::Internal(format!(
            "{} token values cannot cover series length {len}",
            total
        )));
    }
    Ok(token_values.iter().take(len).copied().collect())
}
