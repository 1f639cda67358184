//! The p4 and p4m symmetry groups lifted to Z³.
//!
//! Elements are rotations by `r·π/2` about the z-axis, optionally preceded
//! by the mirror `x → -x`. The homogeneous matrix of `(r, m)` is
//!
//! ```text
//! | (-1)^m cos  -(-1)^m sin  0  0 |
//! |   sin          cos       0  0 |
//! |    0            0        1  0 |
//! |    0            0        0  1 |
//! ```
//!
//! evaluated with exact integer trigonometry. The trivial group (identity
//! only) stands in for plain 3D convolution.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Trivial,
    P4,
    P4m,
}

impl GroupKind {
    pub fn order(self) -> usize {
        match self {
            GroupKind::Trivial => 1,
            GroupKind::P4 => 4,
            GroupKind::P4m => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement {
    /// Rotation index, multiples of π/2 about z.
    pub r: u8,
    /// Mirror bit.
    pub m: u8,
}

const COS: [i32; 4] = [1, 0, -1, 0];
const SIN: [i32; 4] = [0, 1, 0, -1];

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement { r: 0, m: 0 };

    pub fn new(r: u8, m: u8) -> Self {
        GroupElement { r: r % 4, m: m % 2 }
    }

    pub fn matrix(&self) -> [[i32; 4]; 4] {
        let c = COS[self.r as usize];
        let s = SIN[self.r as usize];
        let sign = if self.m == 1 { -1 } else { 1 };
        [
            [sign * c, -sign * s, 0, 0],
            [s, c, 0, 0],
            [0, 0, 1, 0],
            [0, 0, 0, 1],
        ]
    }

    /// The 3×3 linear part.
    pub fn linear(&self) -> [[i32; 3]; 3] {
        let m = self.matrix();
        std::array::from_fn(|i| std::array::from_fn(|j| m[i][j]))
    }

    pub fn apply(&self, v: [i32; 3]) -> [i32; 3] {
        let m = self.linear();
        std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
    }
}

fn mat_mul(a: &[[i32; 4]; 4], b: &[[i32; 4]; 4]) -> [[i32; 4]; 4] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..4).map(|k| a[i][k] * b[k][j]).sum()))
}

/// An enumerated group with its composition table.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub kind: GroupKind,
    /// `(r = 0..3, m = 0)` then `(r = 0..3, m = 1)`; identity first.
    pub elements: Vec<GroupElement>,
    /// `cayley[a][b]` is the index of `a ∘ b` (apply `b` first).
    pub cayley: Vec<Vec<usize>>,
    pub inverse: Vec<usize>,
}

impl Group {
    pub fn enumerate(kind: GroupKind) -> Group {
        let elements: Vec<GroupElement> = match kind {
            GroupKind::Trivial => vec![GroupElement::IDENTITY],
            GroupKind::P4 => (0..4).map(|r| GroupElement::new(r, 0)).collect(),
            GroupKind::P4m => (0..2).flat_map(|m| (0..4).map(move |r| GroupElement::new(r, m))).collect(),
        };
        let mats: Vec<_> = elements.iter().map(GroupElement::matrix).collect();
        let find = |m: &[[i32; 4]; 4]| mats.iter().position(|x| x == m).expect("group is closed");
        let cayley: Vec<Vec<usize>> = mats.iter().map(|a| mats.iter().map(|b| find(&mat_mul(a, b))).collect()).collect();
        let inverse = (0..elements.len())
            .map(|a| (0..elements.len()).find(|&b| cayley[a][b] == 0).expect("every element has an inverse"))
            .collect();
        Group { kind, elements, cayley, inverse }
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn compose(&self, a: usize, b: usize) -> usize {
        self.cayley[a][b]
    }

    pub fn index_of(&self, g: GroupElement) -> Option<usize> {
        self.elements.iter().position(|&e| e == g)
    }

    /// Regular-representation action on orientation indices: `h ↦ g ∘ h`.
    pub fn act_on_orientation(&self, g: usize, h: usize) -> usize {
        self.cayley[g][h]
    }

    /// Flattened cell permutation: `perm[cell] = g · cell` for cells laid out
    /// as `(i·S + j)·S + k`.
    pub fn cell_permutation(&self, g: usize, s: usize) -> Result<Vec<usize>> {
        let el = self.elements[g];
        let mut perm = vec![0; s * s * s];
        for i in 0..s {
            for j in 0..s {
                for k in 0..s {
                    let [a, b, c] = act_on_cell(el, [i, j, k], s)?;
                    perm[flat_cell([i, j, k], s)] = flat_cell([a, b, c], s);
                }
            }
        }
        Ok(perm)
    }
}

#[inline]
pub fn flat_cell(c: [usize; 3], s: usize) -> usize {
    (c[0] * s + c[1]) * s + c[2]
}

#[inline]
pub fn unflat_cell(idx: usize, s: usize) -> [usize; 3] {
    [idx / (s * s), (idx / s) % s, idx % s]
}

/// Acts with `g` on a grid cell about the center of an `S³` kernel.
pub fn act_on_cell(g: GroupElement, cell: [usize; 3], s: usize) -> Result<[usize; 3]> {
    if s.is_multiple_of(2) {
        return Err(Error::EvenKernelSize(s));
    }
    let half = (s as i32 - 1) / 2;
    let centered = cell.map(|v| v as i32 - half);
    let moved = g.apply(centered);
    Ok(moved.map(|v| (v + half) as usize))
}

/// Whether the layer's input carries orientation channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// Plain grid features; only cells move under the group.
    Lifting,
    /// Input channels factor as `C_base × n`, orientation innermost; cells
    /// and orientations move together.
    Group,
}

/// Index permutations realizing `W_g = g·W` for every group element.
///
/// A base kernel row index is `(cell·C + c)·n_in + h` with `n_in = 1` for
/// lifting layers. `perms[g][k]` is where base entry `k` lands in `W_g`,
/// i.e. `W_g[perms[g][k]] = W[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPermutations {
    pub s: usize,
    pub c_in_base: usize,
    pub n_in: usize,
    pub kind: LayerKind,
    pub perms: Vec<Vec<u32>>,
}

impl KernelPermutations {
    pub fn new(group: &Group, s: usize, c_in_base: usize, kind: LayerKind) -> Result<Self> {
        let n = group.order();
        let n_in = match kind {
            LayerKind::Lifting => 1,
            LayerKind::Group => n,
        };
        let cells = s * s * s;
        let rows = cells * c_in_base * n_in;
        let mut perms = Vec::with_capacity(n);
        for g in 0..n {
            let cell_perm = group.cell_permutation(g, s)?;
            let mut p = vec![0u32; rows];
            for cell in 0..cells {
                for c in 0..c_in_base {
                    for h in 0..n_in {
                        let h2 = if n_in == 1 { 0 } else { group.act_on_orientation(g, h) };
                        p[(cell * c_in_base + c) * n_in + h] = ((cell_perm[cell] * c_in_base + c) * n_in + h2) as u32;
                    }
                }
            }
            perms.push(p);
        }
        Ok(KernelPermutations { s, c_in_base, n_in, kind, perms })
    }

    /// Rows of the base kernel: `S³ · C_in_base · n_in`.
    pub fn rows(&self) -> usize {
        self.s * self.s * self.s * self.c_in_base * self.n_in
    }

    pub fn order(&self) -> usize {
        self.perms.len()
    }
}

/// Transforms a base kernel `rows × c_out` by element `g`:
/// lifting `W_g(cell) = W(g⁻¹·cell)`, group `W_g(cell, h) = W(g⁻¹·cell, g⁻¹∘h)`.
pub fn transform_kernel(w: &[f64], c_out: usize, perms: &KernelPermutations, g: usize) -> Result<Vec<f64>> {
    let rows = perms.rows();
    if w.len() != rows * c_out {
        return Err(Error::Shape(format!(
            "kernel has {} values, expected {} rows × {} outputs",
            w.len(),
            rows,
            c_out
        )));
    }
    let mut out = vec![0.0; w.len()];
    for (k, &dst) in perms.perms[g].iter().enumerate() {
        let dst = dst as usize;
        out[dst * c_out..(dst + 1) * c_out].copy_from_slice(&w[k * c_out..(k + 1) * c_out]);
    }
    Ok(out)
}

/// The base kernel together with its `n` transformed copies `W_G`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    pub base: Vec<f64>,
    pub c_out: usize,
    pub transformed: Vec<Vec<f64>>,
    pub kind: LayerKind,
}

impl KernelStack {
    pub fn build(base: &[f64], c_out: usize, perms: &KernelPermutations) -> Result<Self> {
        let transformed = (0..perms.order())
            .map(|g| transform_kernel(base, c_out, perms, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(KernelStack { base: base.to_vec(), c_out, transformed, kind: perms.kind })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn orders() {
        assert_eq!(Group::enumerate(GroupKind::P4).order(), 4);
        assert_eq!(Group::enumerate(GroupKind::P4m).order(), 8);
        assert_eq!(Group::enumerate(GroupKind::Trivial).order(), 1);
    }

    #[test]
    fn mirror_free_matrix_is_rotation() {
        for r in 0..4u8 {
            let m = GroupElement::new(r, 0).matrix();
            let a = r as f64 * std::f64::consts::FRAC_PI_2;
            assert_eq!(m[0][0] as f64, a.cos().round());
            assert_eq!(m[0][1] as f64, (-a.sin()).round());
            assert_eq!(m[1][0] as f64, a.sin().round());
            assert_eq!(m[2], [0, 0, 1, 0]);
        }
    }

    #[test]
    fn compositions() {
        let g = Group::enumerate(GroupKind::P4m);
        let r1 = g.index_of(GroupElement::new(1, 0)).unwrap();
        let r2 = g.index_of(GroupElement::new(2, 0)).unwrap();
        let r3 = g.index_of(GroupElement::new(3, 0)).unwrap();
        let m = g.index_of(GroupElement::new(0, 1)).unwrap();
        assert_eq!(g.compose(r1, r1), r2);
        assert_eq!(g.compose(m, m), 0);
        assert_eq!(g.act_on_orientation(r1, r2), r3);
        assert_eq!(g.act_on_orientation(0, 5), 5);
    }

    #[test]
    fn p4m_closure_and_axioms() {
        let g = Group::enumerate(GroupKind::P4m);
        let mats: Vec<_> = g.elements.iter().map(|e| e.matrix()).collect();
        for a in 0..8 {
            assert_eq!(g.inverse[g.inverse[a]], a);
            for b in 0..8 {
                let prod = mat_mul(&mats[a], &mats[b]);
                assert_eq!(mats[g.compose(a, b)], prod);
                for c in 0..8 {
                    assert_eq!(g.compose(g.compose(a, b), c), g.compose(a, g.compose(b, c)));
                }
            }
        }
    }

    #[test]
    fn cell_actions() {
        let rot = GroupElement::new(1, 0);
        let mir = GroupElement::new(0, 1);
        assert_eq!(act_on_cell(rot, [1, 1, 1], 3).unwrap(), [1, 1, 1]);
        assert_eq!(act_on_cell(rot, [2, 1, 1], 3).unwrap(), [1, 2, 1]);
        assert_eq!(act_on_cell(mir, [2, 1, 1], 3).unwrap(), [0, 1, 1]);
        assert!(matches!(act_on_cell(rot, [0, 0, 0], 4), Err(Error::EvenKernelSize(4))));
        let g = Group::enumerate(GroupKind::P4m);
        for e in &g.elements {
            for idx in 0..27 {
                let c = unflat_cell(idx, 3);
                assert_eq!(act_on_cell(*e, c, 3).unwrap()[2], c[2]);
            }
        }
    }

    fn random_kernel(rows: usize, c_out: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..rows * c_out).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn transform_identity_inverse_and_permutation() {
        let group = Group::enumerate(GroupKind::P4m);
        for kind in [LayerKind::Lifting, LayerKind::Group] {
            let perms = KernelPermutations::new(&group, 3, 2, kind).unwrap();
            let w = random_kernel(perms.rows(), 3, 4);
            assert_eq!(transform_kernel(&w, 3, &perms, 0).unwrap(), w);
            for g in 0..8 {
                let wg = transform_kernel(&w, 3, &perms, g).unwrap();
                let back = transform_kernel(&wg, 3, &perms, group.inverse[g]).unwrap();
                assert_eq!(back, w);
                let mut a = w.clone();
                let mut b = wg.clone();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn transform_is_a_homomorphism() {
        let group = Group::enumerate(GroupKind::P4m);
        let perms = KernelPermutations::new(&group, 3, 2, LayerKind::Group).unwrap();
        let w = random_kernel(perms.rows(), 2, 8);
        for g1 in 0..8 {
            let w1 = transform_kernel(&w, 2, &perms, g1).unwrap();
            for g2 in 0..8 {
                let lhs = transform_kernel(&w1, 2, &perms, g2).unwrap();
                let rhs = transform_kernel(&w, 2, &perms, group.compose(g2, g1)).unwrap();
                assert_eq!(lhs, rhs);
            }
        }
    }

    #[test]
    fn lifting_transform_matches_definition() {
        let group = Group::enumerate(GroupKind::P4);
        let perms = KernelPermutations::new(&group, 3, 1, LayerKind::Lifting).unwrap();
        let w: Vec<f64> = (0..27).map(|v| v as f64).collect();
        for g in 0..4 {
            let wg = transform_kernel(&w, 1, &perms, g).unwrap();
            let inv = group.elements[group.inverse[g]];
            for (idx, &v) in wg.iter().enumerate() {
                let src = flat_cell(act_on_cell(inv, unflat_cell(idx, 3), 3).unwrap(), 3);
                assert_eq!(v, w[src]);
            }
        }
    }

    #[test]
    fn asymmetric_kernel_orientations_are_distinct() {
        let group = Group::enumerate(GroupKind::P4m);
        let perms = KernelPermutations::new(&group, 3, 1, LayerKind::Lifting).unwrap();
        let mut w = vec![0.0; 27];
        w[flat_cell([2, 1, 1], 3)] = 1.0;
        w[flat_cell([2, 2, 0], 3)] = 2.0;
        let stack = KernelStack::build(&w, 1, &perms).unwrap();
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(stack.transformed[a], stack.transformed[b]);
            }
        }
    }
}
