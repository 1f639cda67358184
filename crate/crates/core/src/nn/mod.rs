//! Differentiable building blocks: group convolution over voxel batches,
//! perceptrons, activations, dropout and masked cross-entropy, wired
//! together by a small reverse-mode [`Tape`].

mod checkpoint;
mod conv;
mod params;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{ConvGrads, GroupConv};
pub use params::{glorot_uniform, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

use crate::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {:?} needs {} values, got {}", shape, n, data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

/// `x · W + b` for `x: rows × in`, `W: in × out`.
pub fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let out = b.len();
    if out == 0 || !w.len().is_multiple_of(out) {
        return Err(Error::Shape(format!("weight of {} values for {} outputs", w.len(), out)));
    }
    let inp = w.len() / out;
    if x.len() != rows * inp {
        return Err(Error::Shape(format!("input of {} values, expected {} × {}", x.len(), rows, inp)));
    }
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let yr = &mut y[r * out..(r + 1) * out];
        for (i, &xv) in x[r * inp..(r + 1) * inp].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yv, &wv) in yr.iter_mut().zip(&w[i * out..(i + 1) * out]) {
                *yv += xv * wv;
            }
        }
        for (yv, &bv) in yr.iter_mut().zip(b) {
            *yv += bv;
        }
    }
    Ok(y)
}

/// Perceptron layer: affine map followed by the optional rectifier.
pub fn mlp_forward(x: &[f64], rows: usize, w: &[f64], b: &[f64], act: Activation) -> Result<Vec<f64>> {
    let mut y = linear(x, rows, w, b)?;
    if act == Activation::Relu {
        y.iter_mut().for_each(|v| *v = relu(*v));
    }
    Ok(y)
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Mean over unmasked rows of `-log softmax(logits)[label]`.
/// Returns `(loss, unmasked row count)`; a fully masked input yields 0.
pub fn softmax_cross_entropy(logits: &[f64], cols: usize, labels: &[usize], mask: &[bool]) -> Result<(f64, usize)> {
    let rows = labels.len();
    if logits.len() != rows * cols || mask.len() != rows {
        return Err(Error::Shape(format!(
            "{} logits, {} labels, {} mask entries, {} classes",
            logits.len(),
            rows,
            mask.len(),
            cols
        )));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (r, row) in logits.chunks_exact(cols).enumerate() {
        if !mask[r] {
            continue;
        }
        if labels[r] >= cols {
            return Err(Error::IndexOutOfRange { index: labels[r], len: cols });
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[r]];
        count += 1;
    }
    Ok((if count == 0 { 0.0 } else { total / count as f64 }, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_perceptron() {
        let x = vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0];
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(mlp_forward(&x, 2, &w, &[0.0; 3], Activation::None).unwrap(), x);
        assert!(linear(&x, 3, &w, &[0.0; 3]).is_err());
    }

    #[test]
    fn rectifier() {
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(2.0), 2.0);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let (l, n) = softmax_cross_entropy(&[0.3; 10], 5, &[1, 4], &[true, true]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert_eq!(n, 2);
        let (l, n) = softmax_cross_entropy(&[0.3; 10], 5, &[1, 4], &[false, false]).unwrap();
        assert_eq!((l, n), (0.0, 0));
    }
}
