//! Brute-force reference implementations and fixtures shared by the
//! integration tests. None of these call into the library's algorithms.
#![allow(dead_code)]

use dvconv::geom::{Point, PointCloud};
use dvconv::groups::GroupElement;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn d2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub fn random_cloud(r: &mut ChaCha8Rng, n: usize, channels: usize) -> PointCloud {
    let pos = (0..n).map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))).collect();
    let feat = (0..n * channels).map(|_| r.random_range(-1.0..1.0)).collect();
    PointCloud::new(pos, feat, channels).unwrap()
}

/// Points on a small integer lattice, so distance ties are common.
pub fn lattice_cloud(r: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| std::array::from_fn(|_| r.random_range(-3i32..=3) as f64)).collect()
}

/// Greedy max-min sampling written with an explicit "taken" set; the first
/// maximum in index order wins.
pub fn fps_oracle(pos: &[Point], m: usize, start: usize) -> Vec<usize> {
    let mut taken = vec![false; pos.len()];
    let mut out = vec![start];
    taken[start] = true;
    let mut nearest: Vec<f64> = pos.iter().map(|p| d2(p, &pos[start])).collect();
    while out.len() < m {
        let mut best: Option<usize> = None;
        for i in 0..pos.len() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if nearest[i] <= nearest[b] => {}
                _ => best = Some(i),
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
        for i in 0..pos.len() {
            nearest[i] = nearest[i].min(d2(&pos[i], &pos[b]));
        }
    }
    out
}

/// Full sort by (squared distance, index).
pub fn knn_oracle(pos: &[Point], q: &Point, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = pos.iter().enumerate().map(|(i, p)| (d2(p, q), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d, i)| (i, d.sqrt())).collect()
}

/// One voxelized neighborhood computed by direct enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleKernel {
    pub centroid: Point,
    pub radius: f64,
    pub members: Vec<Vec<u32>>,
    pub grid: Vec<f64>,
    pub winners: Vec<Option<u32>>,
}

/// Deterministic-mode layer: FPS from index 0, strided dilation, radius of
/// the farthest kept point, floor-form cell index, nearest `cap` points per
/// cell, channel-wise max with the first maximum winning.
pub fn voxelize_oracle(cloud: &PointCloud, n_centroids: usize, k: usize, d: usize, s: usize, cap: usize) -> Vec<OracleKernel> {
    let pos = &cloud.positions;
    let c = cloud.channels;
    fps_oracle(pos, n_centroids, 0)
        .into_iter()
        .map(|ci| {
            let centroid = pos[ci];
            let nb = knn_oracle(pos, &centroid, k * d);
            let kept: Vec<(usize, f64)> = if k >= nb.len() {
                nb.clone()
            } else {
                let stride = if nb.len() >= k * d { d } else { (nb.len() / k).max(1) };
                (0..k).map(|j| nb[j * stride]).collect()
            };
            let mut radius = kept.iter().map(|x| x.1).fold(0.0, f64::max);
            if radius == 0.0 {
                radius = 1e-6;
            }
            let mut members = vec![Vec::new(); s * s * s];
            for &(i, _) in &kept {
                let cell: Vec<usize> = (0..3)
                    .map(|a| {
                        let v = ((pos[i][a] - centroid[a] + radius) * s as f64 / (2.0 * radius)).floor() as i64;
                        v.clamp(0, s as i64 - 1) as usize
                    })
                    .collect();
                let flat = (cell[0] * s + cell[1]) * s + cell[2];
                if members[flat].len() < cap {
                    members[flat].push(i as u32);
                }
            }
            let mut grid = vec![0.0; s * s * s * c];
            let mut winners = vec![None; s * s * s * c];
            for (cell, m) in members.iter().enumerate() {
                for ch in 0..c {
                    let mut best: Option<(f64, u32)> = None;
                    for &i in m {
                        let v = cloud.features[i as usize * c + ch];
                        if best.is_none_or(|b| v > b.0) {
                            best = Some((v, i));
                        }
                    }
                    if let Some((v, i)) = best {
                        grid[cell * c + ch] = v;
                        winners[cell * c + ch] = Some(i);
                    }
                }
            }
            OracleKernel { centroid, radius, members, grid, winners }
        })
        .collect()
}

/// 3×3 integer linear part of an element, taken from its homogeneous matrix.
pub fn linear(g: GroupElement) -> [[i32; 3]; 3] {
    let m = g.matrix();
    std::array::from_fn(|i| std::array::from_fn(|j| m[i][j]))
}

pub fn mat3(a: &[[i32; 3]; 3], b: &[[i32; 3]; 3]) -> [[i32; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Index of the product `a·b` among `elements`, found by matrix search.
pub fn compose_by_matrix(elements: &[GroupElement], a: usize, b: usize) -> usize {
    let p = mat3(&linear(elements[a]), &linear(elements[b]));
    elements.iter().position(|&e| linear(e) == p).expect("closed")
}

/// `g · cell` about the center of an `S³` grid (S odd), flat layout.
pub fn move_cell(g: GroupElement, cell: usize, s: usize) -> usize {
    let half = (s as i32 - 1) / 2;
    let v = [(cell / (s * s)) as i32 - half, ((cell / s) % s) as i32 - half, (cell % s) as i32 - half];
    let m = linear(g);
    let w: Vec<i32> = (0..3).map(|i| (0..3).map(|j| m[i][j] * v[j]).sum::<i32>() + half).collect();
    ((w[0] as usize * s) + w[1] as usize) * s + w[2] as usize
}

/// Acts on a batch of grid rows laid out `(cell·C + c)·n_in + h`:
/// `(g·F)[g·cell, c, g∘h] = F[cell, c, h]` (orientation part only when
/// `n_in > 1`).
pub fn act_on_grids(elements: &[GroupElement], g: usize, grids: &[f64], s: usize, c: usize, n_in: usize) -> Vec<f64> {
    let row = s * s * s * c * n_in;
    let mut out = vec![0.0; grids.len()];
    for (src, dst) in grids.chunks(row).zip(out.chunks_mut(row)) {
        for cell in 0..s * s * s {
            let cell2 = move_cell(elements[g], cell, s);
            for ch in 0..c {
                for h in 0..n_in {
                    let h2 = if n_in == 1 { 0 } else { compose_by_matrix(elements, g, h) };
                    dst[(cell2 * c + ch) * n_in + h2] = src[(cell * c + ch) * n_in + h];
                }
            }
        }
    }
    out
}

/// Acts on layer outputs laid out `c·n + h`: `(g·y)[c, g∘h] = y[c, h]`.
pub fn act_on_outputs(elements: &[GroupElement], g: usize, y: &[f64], c_out: usize) -> Vec<f64> {
    let n = elements.len();
    let mut out = vec![0.0; y.len()];
    for (src, dst) in y.chunks(c_out * n).zip(out.chunks_mut(c_out * n)) {
        for c in 0..c_out {
            for h in 0..n {
                dst[c * n + compose_by_matrix(elements, g, h)] = src[c * n + h];
            }
        }
    }
    out
}
