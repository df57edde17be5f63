use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

/// Coordinates `indices` (strictly increasing, `< dim`) with their values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseUpdate {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseUpdate {
    pub fn new(dim: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<SparseUpdate> {
        if indices.len() != values.len() {
            return Err(Error::Shape(format!("{} indices but {} values", indices.len(), values.len())));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("sparse indices must be strictly increasing".into()));
        }
        if indices.last().is_some_and(|&i| i as usize >= dim) {
            return Err(Error::Range(format!("sparse index beyond dimension {dim}")));
        }
        Ok(SparseUpdate { dim, indices, values })
    }

    pub fn empty(dim: usize) -> SparseUpdate {
        SparseUpdate { dim, indices: Vec::new(), values: Vec::new() }
    }

    pub fn from_dense(values: &[f64]) -> SparseUpdate {
        SparseUpdate { dim: values.len(), indices: (0..values.len() as u32).collect(), values: values.to_vec() }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }

    /// Value at `index`, zero when absent.
    pub fn get(&self, index: u32) -> f64 {
        self.indices.binary_search(&index).map_or(0.0, |pos| self.values[pos])
    }

    fn check_dim(&self, other: &SparseUpdate) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!("sparse dimensions {} and {} differ", self.dim, other.dim)));
        }
        Ok(())
    }

    /// `self - previous` over the support of `self`.
    pub fn diff_on_support(&self, previous: &SparseUpdate) -> Result<SparseUpdate> {
        self.check_dim(previous)?;
        let values = self.indices.iter().zip(&self.values).map(|(&i, &v)| v - previous.get(i)).collect();
        Ok(SparseUpdate { dim: self.dim, indices: self.indices.clone(), values })
    }

    /// `previous + self` over the support of `self`.
    pub fn apply_on_support(&self, previous: &SparseUpdate) -> Result<SparseUpdate> {
        self.check_dim(previous)?;
        let values = self.indices.iter().zip(&self.values).map(|(&i, &d)| previous.get(i) + d).collect();
        Ok(SparseUpdate { dim: self.dim, indices: self.indices.clone(), values })
    }
}

/// Keeps the `k` largest-magnitude coordinates of `delta + residual` (ties to
/// the lower index) and returns the untransmitted remainder as the new residual.
pub fn topk_sparsify(delta: &ParamVector, k: usize, residual: &ParamVector) -> Result<(SparseUpdate, ParamVector)> {
    delta.ensure_same_layout(residual)?;
    let dim = delta.len();
    if k > dim {
        return Err(Error::InvalidParameter(format!("k = {k} exceeds dimension {dim}")));
    }
    let combined: Vec<f64> = delta.values().iter().zip(residual.values()).map(|(a, b)| a + b).collect();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| combined[b].abs().total_cmp(&combined[a].abs()).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();

    let mut rest = combined.clone();
    let mut values = Vec::with_capacity(k);
    for &i in &kept {
        values.push(combined[i]);
        rest[i] = 0.0;
    }
    let sparse = SparseUpdate { dim, indices: kept.into_iter().map(|i| i as u32).collect(), values };
    Ok((sparse, delta.with_values(rest)?))
}

/// One coordinate of a delta payload. `Literal` carries the current value
/// directly where `previous + diff` would not reproduce it bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DeltaEntry {
    Diff(f64),
    Literal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPayload {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub entries: Vec<DeltaEntry>,
}

impl DeltaPayload {
    pub fn is_all_zero(&self) -> bool {
        self.entries.iter().all(|e| matches!(e, DeltaEntry::Diff(d) if *d == 0.0))
    }
}

/// Encodes `current` relative to `previous`. Coordinates outside the support
/// of `current` are implicitly zero after decoding.
pub fn delta_encode(current: &SparseUpdate, previous: &SparseUpdate) -> Result<DeltaPayload> {
    let diff = current.diff_on_support(previous)?;
    let entries = current
        .indices
        .iter()
        .zip(current.values.iter().zip(&diff.values))
        .map(|(&i, (&c, &d))| {
            if (previous.get(i) + d).to_bits() == c.to_bits() {
                DeltaEntry::Diff(d)
            } else {
                DeltaEntry::Literal(c)
            }
        })
        .collect();
    Ok(DeltaPayload { dim: current.dim, indices: current.indices.clone(), entries })
}

pub fn delta_decode(payload: &DeltaPayload, previous: &SparseUpdate) -> Result<SparseUpdate> {
    if payload.dim != previous.dim {
        return Err(Error::Shape(format!("payload dimension {} vs previous {}", payload.dim, previous.dim)));
    }
    let values = payload
        .indices
        .iter()
        .zip(&payload.entries)
        .map(|(&i, e)| match *e {
            DeltaEntry::Diff(d) => previous.get(i) + d,
            DeltaEntry::Literal(c) => c,
        })
        .collect();
    SparseUpdate::new(payload.dim, payload.indices.clone(), values)
}
