use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A contiguous `rows x cols` block inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Weight (`out x in`, row-major) and bias (`out x 1`) blocks of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBlocks {
    pub weight: Block,
    pub bias: Block,
}

/// Per-layer placement of every weight matrix and bias vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    layers: Vec<LayerBlocks>,
    total: usize,
}

impl Layout {
    /// Packs `W1, b1, W2, b2, ...` back to back for consecutive layer widths.
    pub fn for_dims(dims: &[usize]) -> Layout {
        let mut offset = 0;
        let mut layers = Vec::with_capacity(dims.len().saturating_sub(1));
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = Block { offset, rows: fan_out, cols: fan_in };
            offset += weight.len();
            let bias = Block { offset, rows: fan_out, cols: 1 };
            offset += bias.len();
            layers.push(LayerBlocks { weight, bias });
        }
        Layout { layers, total: offset }
    }

    /// A single-block layout, handy for treating raw vectors as parameters.
    pub fn flat(len: usize) -> Layout {
        Layout {
            layers: vec![LayerBlocks {
                weight: Block { offset: 0, rows: len, cols: 1 },
                bias: Block { offset: len, rows: 0, cols: 1 },
            }],
            total: len,
        }
    }

    pub fn layers(&self) -> &[LayerBlocks] {
        &self.layers
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Checks that blocks are contiguous, non-overlapping, and cover `total`.
    pub fn is_contiguous(&self) -> bool {
        let mut cursor = 0;
        for layer in &self.layers {
            for block in [layer.weight, layer.bias] {
                if block.offset != cursor {
                    return false;
                }
                cursor += block.len();
            }
        }
        cursor == self.total
    }
}

/// Flat, finite model parameters (or parameter deltas) plus their layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> ParamVector {
        ParamVector { values: vec![0.0; layout.total()], layout }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<ParamVector> {
        if values.len() != layout.total() {
            return Err(Error::Shape(format!(
                "layout holds {} parameters, got {}",
                layout.total(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(ParamVector { values, layout })
    }

    /// Wraps a raw vector in a single-block layout.
    pub fn from_flat(values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::from_values(Layout::flat(values.len()), values)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Shape(format!(
                "layouts differ ({} vs {} parameters)",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.layers[layer].weight.range()]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.layers[layer].bias.range()]
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        self.ensure_same_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.ensure_same_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(ParamVector { values, layout: self.layout.clone() })
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Cosine similarity; a zero vector on either side counts as aligned (1.0).
    pub fn cosine(&self, other: &ParamVector) -> f64 {
        let (na, nb) = (self.norm_l2(), other.norm_l2());
        if na == 0.0 || nb == 0.0 {
            return 1.0;
        }
        (self.dot(other) / (na * nb)).clamp(-1.0, 1.0)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::from_values(self.layout.clone(), values)
    }
}
