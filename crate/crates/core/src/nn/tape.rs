use rand::Rng as _;

use super::{conv::GroupConv, linear, params::ParamId, relu, softmax_rows, ParamStore, Tensor};
use crate::rng::Rng;
use crate::voxelizer::{voxelize_backward, VoxelBatch};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

enum Node<'a> {
    Leaf,
    Voxelize {
        input: Var,
        batch: VoxelBatch,
    },
    Conv {
        grids: Var,
        conv: &'a GroupConv,
        weight: ParamId,
        bias: ParamId,
    },
    Linear {
        x: Var,
        weight: ParamId,
        bias: ParamId,
    },
    Relu {
        x: Var,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    /// Column-wise max over rows.
    MaxRows {
        x: Var,
        argmax: Vec<u32>,
    },
    /// Max over the innermost orientation axis of width `n`.
    OrientMax {
        x: Var,
        n: usize,
        argmax: Vec<u32>,
    },
    /// Replicates each channel `n` times along a new innermost axis.
    Broadcast {
        x: Var,
        n: usize,
    },
    /// Column concatenation `[a | b]`.
    Concat {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

/// Record of one forward pass; values are stored in execution order so
/// the reverse sweep is a plain backwards iteration.
pub struct Tape<'a> {
    params: &'a ParamStore,
    values: Vec<Tensor>,
    nodes: Vec<Node<'a>>,
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One buffer per parameter, in store order.
    pub params: Vec<Vec<f64>>,
    /// Gradients of every recorded value (empty where none flowed).
    pub values: Vec<Vec<f64>>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Tape { params, values: Vec::new(), nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, node: Node<'a>) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Node::Leaf)
    }

    /// Records a voxelization of the point features `input` (one row per
    /// point); `batch` must have been computed from the same features.
    pub fn voxelize(&mut self, input: Var, batch: VoxelBatch) -> Result<Var> {
        let x = self.value(input);
        if x.cols() != batch.input_channels {
            return Err(Error::Shape(format!("{} feature channels, batch built for {}", x.cols(), batch.input_channels)));
        }
        let t = Tensor::matrix(batch.len(), batch.row_len(), batch.grids())?;
        Ok(self.push(t, Node::Voxelize { input, batch }))
    }

    pub fn conv(&mut self, grids: Var, conv: &'a GroupConv, weight: ParamId, bias: ParamId) -> Result<Var> {
        let g = self.value(grids);
        let n = g.rows();
        let out = conv.forward(&g.data, n, self.params.get(weight), self.params.get(bias))?;
        let t = Tensor::matrix(n, conv.out_width(), out)?;
        Ok(self.push(t, Node::Conv { grids, conv, weight, bias }))
    }

    pub fn linear(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.rows();
        let b = self.params.get(bias);
        let y = linear(&xv.data, rows, self.params.get(weight), b)?;
        let t = Tensor::matrix(rows, b.len(), y)?;
        Ok(self.push(t, Node::Linear { x, weight, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|&v| relu(v)).collect() };
        self.push(t, Node::Relu { x })
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1/(1 − rate)`. Identity when not training or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let scale: Vec<f64> = (0..xv.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let t = Tensor { shape: xv.shape.clone(), data: xv.data.iter().zip(&scale).map(|(a, s)| a * s).collect() };
        Ok(self.push(t, Node::Dropout { x, scale }))
    }

    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if rows == 0 {
            return Err(Error::EmptyInput);
        }
        let mut best = xv.row(0).to_vec();
        let mut argmax = vec![0u32; cols];
        for r in 1..rows {
            for (c, &v) in xv.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    argmax[c] = r as u32;
                }
            }
        }
        let t = Tensor::matrix(1, cols, best)?;
        Ok(self.push(t, Node::MaxRows { x, argmax }))
    }

    pub fn orient_max(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 1 {
            return Ok(x);
        }
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if n == 0 || cols % n != 0 {
            return Err(Error::Shape(format!("{cols} columns do not factor by {n} orientations")));
        }
        let mut out = Vec::with_capacity(xv.len() / n);
        let mut argmax = Vec::with_capacity(xv.len() / n);
        for group in xv.data.chunks_exact(n) {
            let mut b = 0;
            for h in 1..n {
                if group[h] > group[b] {
                    b = h;
                }
            }
            out.push(group[b]);
            argmax.push(b as u32);
        }
        let t = Tensor::matrix(rows, cols / n, out)?;
        Ok(self.push(t, Node::OrientMax { x, n, argmax }))
    }

    pub fn broadcast(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 1 {
            return Ok(x);
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let cols = xv.cols();
        let data: Vec<f64> = xv.data.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let t = Tensor::matrix(rows, cols * n, data)?;
        Ok(self.push(t, Node::Broadcast { x, n }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Shape(format!("concat of {} and {} rows", av.rows(), bv.rows())));
        }
        let rows = av.rows();
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let t = Tensor::matrix(rows, ca + cb, data)?;
        Ok(self.push(t, Node::Concat { a, b }))
    }

    /// Mean masked softmax cross-entropy. A fully masked input yields a
    /// zero loss (and zero gradient) with a warning.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let cols = lv.cols();
        let (loss, count) = super::softmax_cross_entropy(&lv.data, cols, labels, mask)?;
        if count == 0 {
            log::warn!("cross-entropy over a fully masked batch");
        }
        let probs = softmax_rows(&lv.data, cols);
        let t = Tensor::new(vec![1], vec![loss])?;
        Ok(self.push(t, Node::CrossEntropy { logits, labels: labels.to_vec(), mask: mask.to_vec(), probs, count }))
    }

    /// Reverse sweep from the scalar `output` (seeded with gradient 1).
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.values.len()];
        let mut pgrads = self.params.zeros_like();
        let out = self.value(output);
        grads[output.0] = vec![1.0; out.len()];

        fn acc(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut Vec<f64> {
            let g = &mut grads[v.0];
            if g.is_empty() {
                *g = vec![0.0; len];
            }
            g
        }

        for idx in (0..=output.0).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            match &self.nodes[idx] {
                Node::Leaf => {
                    grads[idx] = g;
                    continue;
                }
                Node::Voxelize { input, batch } => {
                    let n_points = self.value(*input).rows();
                    let back = voxelize_backward(&g, batch, n_points)?;
                    let dst = acc(&mut grads, *input, back.len());
                    dst.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
                Node::Conv { grids, conv, weight, bias } => {
                    let gv = self.value(*grids);
                    let cg = conv.backward(&gv.data, gv.rows(), self.params.get(*weight), &g)?;
                    add_into(&mut pgrads[weight.0], &cg.weight);
                    add_into(&mut pgrads[bias.0], &cg.bias);
                    let dst = acc(&mut grads, *grids, cg.grids.len());
                    add_into(dst, &cg.grids);
                }
                Node::Linear { x, weight, bias } => {
                    let xv = self.value(*x);
                    let w = self.params.get(*weight);
                    let out = self.params.get(*bias).len();
                    let inp = w.len() / out;
                    let rows = xv.rows();
                    let mut gx = vec![0.0; xv.len()];
                    {
                        let gw = &mut pgrads[weight.0];
                        for r in 0..rows {
                            let gr = &g[r * out..(r + 1) * out];
                            let xr = &xv.data[r * inp..(r + 1) * inp];
                            for i in 0..inp {
                                let wi = &w[i * out..(i + 1) * out];
                                gx[r * inp + i] = wi.iter().zip(gr).map(|(a, b)| a * b).sum();
                                if xr[i] != 0.0 {
                                    for (a, &b) in gw[i * out..(i + 1) * out].iter_mut().zip(gr) {
                                        *a += xr[i] * b;
                                    }
                                }
                            }
                        }
                    }
                    let gb = &mut pgrads[bias.0];
                    for gr in g.chunks_exact(out) {
                        add_into(gb, gr);
                    }
                    add_into(acc(&mut grads, *x, gx.len()), &gx);
                }
                Node::Relu { x } => {
                    let xv = &self.values[x.0].data;
                    let gx: Vec<f64> = g.iter().zip(xv).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect();
                    add_into(acc(&mut grads, *x, gx.len()), &gx);
                }
                Node::Dropout { x, scale } => {
                    let gx: Vec<f64> = g.iter().zip(scale).map(|(a, b)| a * b).collect();
                    add_into(acc(&mut grads, *x, gx.len()), &gx);
                }
                Node::MaxRows { x, argmax } => {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let dst = acc(&mut grads, *x, xv.len());
                    for (c, &r) in argmax.iter().enumerate() {
                        dst[r as usize * cols + c] += g[c];
                    }
                }
                Node::OrientMax { x, n, argmax } => {
                    let len = self.value(*x).len();
                    let dst = acc(&mut grads, *x, len);
                    for (i, &h) in argmax.iter().enumerate() {
                        dst[i * n + h as usize] += g[i];
                    }
                }
                Node::Broadcast { x, n } => {
                    let gx: Vec<f64> = g.chunks_exact(*n).map(|c| c.iter().sum()).collect();
                    add_into(acc(&mut grads, *x, gx.len()), &gx);
                }
                Node::Concat { a, b } => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let rows = self.value(*a).rows();
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for row in g.chunks_exact(ca + cb) {
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    add_into(acc(&mut grads, *a, ga.len()), &ga);
                    add_into(acc(&mut grads, *b, gb.len()), &gb);
                }
                Node::CrossEntropy { logits, labels, mask, probs, count } => {
                    let lv = self.value(*logits);
                    let cols = lv.cols();
                    let mut gl = vec![0.0; lv.len()];
                    if *count > 0 {
                        let s = g[0] / *count as f64;
                        for (r, &lab) in labels.iter().enumerate() {
                            if !mask[r] {
                                continue;
                            }
                            for c in 0..cols {
                                let t = if c == lab { 1.0 } else { 0.0 };
                                gl[r * cols + c] = (probs[r * cols + c] - t) * s;
                            }
                        }
                    }
                    add_into(acc(&mut grads, *logits, gl.len()), &gl);
                }
            }
            grads[idx] = g;
        }
        Ok(Gradients { params: pgrads, values: grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn dropout_identities() {
        let store = ParamStore::default();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut rng = stream(0, Stream::Dropout, &[]);
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_preserves_mean() {
        let store = ParamStore::default();
        let mut tape = Tape::new(&store);
        let n = 100_000;
        let x = tape.input(Tensor::matrix(1, n, vec![1.0; n]).unwrap());
        let y = tape.dropout(x, 0.5, true, &mut stream(3, Stream::Dropout, &[])).unwrap();
        let mean = tape.value(y).data.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn masked_rows_get_no_gradient() {
        let store = ParamStore::default();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::matrix(3, 2, vec![0.1, 0.5, -0.2, 0.3, 2.0, -1.0]).unwrap());
        let loss = tape.cross_entropy(x, &[0, 1, 1], &[true, false, true]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(&g.values[x.0][2..4], &[0.0, 0.0]);
        assert!(g.values[x.0][0] != 0.0);

        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::matrix(1, 2, vec![0.1, 0.5]).unwrap());
        let loss = tape.cross_entropy(x, &[0], &[false]).unwrap();
        assert_eq!(tape.value(loss).data[0], 0.0);
        assert!(tape.backward(loss).unwrap().values[x.0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perceptron_gradient_matches_finite_differences() {
        let mut store = ParamStore::default();
        let mut rng = stream(9, Stream::Init, &[]);
        let w = store.add("w", vec![3, 4], super::super::glorot_uniform(12, 3, 4, &mut rng));
        let b = store.add("b", vec![4], vec![0.1, -0.2, 0.05, 0.0]);
        let x = vec![0.3, -0.7, 1.1, 0.9, 0.2, -0.4];
        let labels = [2usize, 0];
        let eval = |store: &ParamStore, x: &[f64]| -> (f64, Gradients, Var) {
            let mut tape = Tape::new(store);
            let xi = tape.input(Tensor::matrix(2, 3, x.to_vec()).unwrap());
            let h = tape.linear(xi, w, b).unwrap();
            let h = tape.relu(h);
            let l = tape.cross_entropy(h, &labels, &[true, true]).unwrap();
            (tape.value(l).data[0], tape.backward(l).unwrap(), xi)
        };
        let (_, g, xi) = eval(&store, &x);
        let hstep = 1e-6;
        for pi in 0..2 {
            for i in 0..store.params[pi].value.len() {
                let mut sp = store.clone();
                sp.params[pi].value[i] += hstep;
                let mut sm = store.clone();
                sm.params[pi].value[i] -= hstep;
                let fd = (eval(&sp, &x).0 - eval(&sm, &x).0) / (2.0 * hstep);
                assert!((fd - g.params[pi][i]).abs() < 1e-7, "param {pi}[{i}]: {fd} vs {}", g.params[pi][i]);
            }
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += hstep;
            let mut xm = x.clone();
            xm[i] -= hstep;
            let fd = (eval(&store, &xp).0 - eval(&store, &xm).0) / (2.0 * hstep);
            assert!((fd - g.values[xi.0][i]).abs() < 1e-7);
        }
    }
}
