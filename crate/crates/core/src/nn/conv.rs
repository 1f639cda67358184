use crate::groups::{Group, KernelPermutations, KernelStack, LayerKind};
use crate::{Error, Result};

/// Group convolution of voxel grids with a shared base kernel.
///
/// Grids arrive as `N × (S³·C_in)` rows, the base kernel `W` is
/// `rows × C_out` and the output is `N × (C_out·n)` with the orientation
/// axis innermost: `out[p][c·n + g] = Σ_k W[k, c] · F[p, g·k] + b[c]`.
///
/// Summing over base-kernel rows `k` in a fixed order (rather than over the
/// rows of each transformed copy `W_g`) makes the layer exactly equivariant
/// in floating point: permuting the input by `g'` permutes the addends of
/// every output identically.
#[derive(Debug, Clone)]
pub struct GroupConv {
    pub perms: KernelPermutations,
    pub c_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grids: Vec<f64>,
}

impl GroupConv {
    pub fn new(group: &Group, s: usize, c_in_base: usize, kind: LayerKind, c_out: usize) -> Result<Self> {
        Ok(GroupConv { perms: KernelPermutations::new(group, s, c_in_base, kind)?, c_out })
    }

    /// Base kernel rows; also the grid row length expected on input.
    pub fn rows(&self) -> usize {
        self.perms.rows()
    }

    pub fn order(&self) -> usize {
        self.perms.order()
    }

    pub fn out_width(&self) -> usize {
        self.c_out * self.order()
    }

    pub fn weight_len(&self) -> usize {
        self.rows() * self.c_out
    }

    fn check(&self, grids: &[f64], n_kernels: usize, w: &[f64], bias: &[f64]) -> Result<()> {
        if grids.len() != n_kernels * self.rows() {
            return Err(Error::Shape(format!(
                "grids hold {} values, expected {} kernels × {}",
                grids.len(),
                n_kernels,
                self.rows()
            )));
        }
        if w.len() != self.weight_len() || bias.len() != self.c_out {
            return Err(Error::Shape(format!(
                "kernel {} / bias {} values, expected {} / {}",
                w.len(),
                bias.len(),
                self.weight_len(),
                self.c_out
            )));
        }
        Ok(())
    }

    pub fn forward(&self, grids: &[f64], n_kernels: usize, w: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
        self.check(grids, n_kernels, w, bias)?;
        let rows = self.rows();
        let (c_out, n) = (self.c_out, self.order());
        let mut out = vec![0.0; n_kernels * c_out * n];
        let mut acc = vec![0.0; c_out];
        for p in 0..n_kernels {
            let f = &grids[p * rows..(p + 1) * rows];
            let o = &mut out[p * c_out * n..(p + 1) * c_out * n];
            for (g, perm) in self.perms.perms.iter().enumerate() {
                acc.iter_mut().for_each(|v| *v = 0.0);
                for (k, &src) in perm.iter().enumerate() {
                    let x = f[src as usize];
                    if x == 0.0 {
                        continue;
                    }
                    for (a, &wv) in acc.iter_mut().zip(&w[k * c_out..(k + 1) * c_out]) {
                        *a += x * wv;
                    }
                }
                for c in 0..c_out {
                    o[c * n + g] = acc[c] + bias[c];
                }
            }
        }
        Ok(out)
    }

    /// Gradients for the base kernel (shared across all `n` copies), the bias
    /// and the input grids.
    pub fn backward(&self, grids: &[f64], n_kernels: usize, w: &[f64], upstream: &[f64]) -> Result<ConvGrads> {
        let (c_out, n) = (self.c_out, self.order());
        self.check(grids, n_kernels, w, &vec![0.0; c_out])?;
        if upstream.len() != n_kernels * c_out * n {
            return Err(Error::Shape(format!("upstream has {} values, expected {}", upstream.len(), n_kernels * c_out * n)));
        }
        let rows = self.rows();
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; c_out];
        let mut gf = vec![0.0; grids.len()];
        let mut u = vec![0.0; c_out];
        for p in 0..n_kernels {
            let f = &grids[p * rows..(p + 1) * rows];
            let gfp = &mut gf[p * rows..(p + 1) * rows];
            let up = &upstream[p * c_out * n..(p + 1) * c_out * n];
            for (g, perm) in self.perms.perms.iter().enumerate() {
                for c in 0..c_out {
                    u[c] = up[c * n + g];
                    gb[c] += u[c];
                }
                if u.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for (k, &src) in perm.iter().enumerate() {
                    let src = src as usize;
                    let wk = &w[k * c_out..(k + 1) * c_out];
                    let x = f[src];
                    if x != 0.0 {
                        for (a, &uv) in gw[k * c_out..(k + 1) * c_out].iter_mut().zip(&u) {
                            *a += x * uv;
                        }
                    }
                    gfp[src] += wk.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Ok(ConvGrads { weight: gw, bias: gb, grids: gf })
    }

    /// Forward pass through the materialized transformed kernels `W_G`.
    pub fn forward_expanded(&self, grids: &[f64], n_kernels: usize, stack: &KernelStack, bias: &[f64]) -> Result<Vec<f64>> {
        self.check(grids, n_kernels, &stack.base, bias)?;
        let rows = self.rows();
        let (c_out, n) = (self.c_out, self.order());
        let mut out = vec![0.0; n_kernels * c_out * n];
        for p in 0..n_kernels {
            let f = &grids[p * rows..(p + 1) * rows];
            for (g, wg) in stack.transformed.iter().enumerate() {
                for c in 0..c_out {
                    let s: f64 = (0..rows).map(|i| wg[i * c_out + c] * f[i]).sum();
                    out[(p * c_out + c) * n + g] = s + bias[c];
                }
            }
        }
        Ok(out)
    }

    /// Base-kernel gradient computed per transformed copy and mapped back
    /// through each copy's permutation.
    pub fn weight_grad_expanded(&self, grids: &[f64], n_kernels: usize, upstream: &[f64]) -> Vec<f64> {
        let rows = self.rows();
        let (c_out, n) = (self.c_out, self.order());
        let mut gw = vec![0.0; rows * c_out];
        for (g, perm) in self.perms.perms.iter().enumerate() {
            let mut gwg = vec![0.0; rows * c_out];
            for p in 0..n_kernels {
                for i in 0..rows {
                    let x = grids[p * rows + i];
                    for c in 0..c_out {
                        gwg[i * c_out + c] += x * upstream[(p * c_out + c) * n + g];
                    }
                }
            }
            for (k, &dst) in perm.iter().enumerate() {
                for c in 0..c_out {
                    gw[k * c_out + c] += gwg[dst as usize * c_out + c];
                }
            }
        }
        gw
    }

    pub fn kind(&self) -> LayerKind {
        self.perms.kind
    }
}
