//! Dynamic voxelization.
//!
//! For each sampling centroid the `K·D` nearest neighbors are drawn, `K` of
//! them are kept, and the kept points are binned into an `S³` grid centered
//! on the centroid whose half-side `R` just reaches the farthest kept point.
//! Per cell at most `cap` points (nearest first) are considered and pooled
//! channel-wise; the winning point of every cell/channel is recorded so the
//! backward pass can route gradients exactly.

use serde::{Deserialize, Serialize};

use crate::geom::{dilated_select, dist2, farthest_point_sample, knn_query, DilationMode, Point, PointCloud};
use crate::groups::flat_cell;
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Radius used when every kept point coincides with the centroid.
pub const DEGENERATE_RADIUS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Average,
}

/// How the kernel half-side is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RadiusRule {
    /// Farthest of the `K` kept points.
    #[default]
    Selected,
    /// Farthest of all `K·D` neighbors.
    AllNeighbors,
    /// Layer-constant radius; neighbors farther than it are dropped.
    Fixed(f64),
}

/// Borrowed point positions with a row-major feature matrix.
#[derive(Debug, Clone, Copy)]
pub struct Points<'a> {
    pub positions: &'a [Point],
    pub features: &'a [f64],
    pub channels: usize,
}

impl<'a> Points<'a> {
    pub fn new(positions: &'a [Point], features: &'a [f64], channels: usize) -> Result<Self> {
        if features.len() != positions.len() * channels {
            return Err(Error::Shape(format!(
                "{} feature values for {} points × {} channels",
                features.len(),
                positions.len(),
                channels
            )));
        }
        Ok(Points { positions, features, channels })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn feature(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }
}

impl<'a> From<&'a PointCloud> for Points<'a> {
    fn from(c: &'a PointCloud) -> Self {
        Points { positions: &c.positions, features: &c.features, channels: c.channels }
    }
}

/// Per-kernel voxelization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    pub s: usize,
    pub pooling: Pooling,
    pub cap: usize,
    /// Append `(p − centroid)/R` as three extra channels.
    pub relative_offsets: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions { s: 3, pooling: Pooling::Max, cap: 5, relative_offsets: false }
    }
}

/// Per-layer voxelization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerOptions {
    pub k: usize,
    pub d: usize,
    pub radius: RadiusRule,
    pub kernel: KernelOptions,
}

impl Default for LayerOptions {
    fn default() -> Self {
        LayerOptions { k: 32, d: 2, radius: RadiusRule::Selected, kernel: KernelOptions::default() }
    }
}

/// How stochastic choices are made during one voxelization pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// FPS starts at index 0 and dilation is strided.
    Deterministic,
    /// FPS start and dilation are drawn from seeded sub-streams.
    Random { seed: u64 },
}

/// Cell coordinates of `p` in the `S³` grid of half-side `r` around `centroid`.
///
/// Per axis the cell is `floor((p − c + R)·S/(2R))` clamped to `[0, S−1]`.
/// The offset from the center cell is computed as `round((p − c)·S/(2R))`,
/// which agrees with the floor form everywhere except exactly on interior
/// cell faces and is odd-symmetric, so mirrored and rotated points land in
/// mirrored and rotated cells bit-for-bit.
pub fn cell_index(p: &Point, centroid: &Point, r: f64, s: usize) -> Result<[usize; 3]> {
    if r.is_nan() || r <= 0.0 || s == 0 {
        return Err(Error::InvalidArgument(format!("radius {r}, S {s}")));
    }
    let tol = r * 1e-9;
    let mut out = [0usize; 3];
    for a in 0..3 {
        let d = p[a] - centroid[a];
        if d.abs() > r + tol {
            return Err(Error::OutsideKernel);
        }
        out[a] = axis_cell(d, r, s);
    }
    Ok(out)
}

#[inline]
fn axis_cell(d: f64, r: f64, s: usize) -> usize {
    let max = s as i64 - 1;
    let pos = if s % 2 == 1 {
        let half = max / 2;
        (d * s as f64 / (2.0 * r)).round() as i64 + half
    } else {
        ((d + r) * s as f64 / (2.0 * r)).floor() as i64
    };
    pos.clamp(0, max) as usize
}

/// One voxelized neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelKernel {
    pub centroid: Point,
    pub radius: f64,
    /// `S³ × C` row-major.
    pub grid: Vec<f64>,
    /// Per cell and channel the point whose value was selected (max pooling).
    pub winners: Vec<Option<u32>>,
    /// CSR offsets into `members`, one range per cell.
    pub member_offsets: Vec<u32>,
    /// Considered points per cell, nearest first.
    pub members: Vec<u32>,
    /// Number of selected points after dilation.
    pub selected: usize,
}

impl VoxelKernel {
    pub fn cell_members(&self, cell: usize) -> &[u32] {
        &self.members[self.member_offsets[cell] as usize..self.member_offsets[cell + 1] as usize]
    }

    pub fn occupancy(&self, cell: usize) -> usize {
        (self.member_offsets[cell + 1] - self.member_offsets[cell]) as usize
    }

    pub fn nonzero_cells(&self) -> usize {
        (0..self.member_offsets.len() - 1).filter(|&c| self.occupancy(c) > 0).count()
    }
}

/// `N` voxelized kernels sharing `S` and `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBatch {
    pub s: usize,
    /// Grid channels, including relative-offset channels when enabled.
    pub channels: usize,
    /// Channels that map back to input point features.
    pub input_channels: usize,
    pub pooling: Pooling,
    pub kernels: Vec<VoxelKernel>,
    /// Sampling-centroid point indices, when centroids are input points.
    pub centroid_indices: Option<Vec<usize>>,
    pub short: bool,
}

impl VoxelBatch {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.s * self.s * self.s
    }

    /// Row length of one flattened kernel grid.
    pub fn row_len(&self) -> usize {
        self.cells() * self.channels
    }

    /// All grids as one `N × (S³·C)` matrix.
    pub fn grids(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.row_len());
        for k in &self.kernels {
            out.extend_from_slice(&k.grid);
        }
        out
    }

    pub fn centroids(&self) -> Vec<Point> {
        self.kernels.iter().map(|k| k.centroid).collect()
    }
}

/// Voxelizes `selected` (ascending by distance) around `centroid` with a
/// given half-side.
pub fn voxelize_at(points: Points<'_>, centroid: Point, selected: &[usize], radius: f64, opts: &KernelOptions) -> Result<VoxelKernel> {
    if selected.is_empty() {
        return Err(Error::EmptyInput);
    }
    if opts.s == 0 || opts.cap == 0 {
        return Err(Error::InvalidArgument("S and cap must be positive".into()));
    }
    let radius = if radius > 0.0 { radius } else { DEGENERATE_RADIUS };
    let s = opts.s;
    let cells = s * s * s;
    let c_in = points.channels;
    let c = c_in + if opts.relative_offsets { 3 } else { 0 };

    let mut cell_of = Vec::with_capacity(selected.len());
    for &i in selected {
        if i >= points.len() {
            return Err(Error::IndexOutOfRange { index: i, len: points.len() });
        }
        cell_of.push(flat_cell(cell_index(&points.positions[i], &centroid, radius, s)?, s));
    }

    let mut counts = vec![0u32; cells];
    let mut considered = Vec::with_capacity(selected.len());
    for (n, &cell) in cell_of.iter().enumerate() {
        if (counts[cell] as usize) < opts.cap {
            counts[cell] += 1;
            considered.push((cell, selected[n]));
        }
    }
    let mut member_offsets = vec![0u32; cells + 1];
    for cell in 0..cells {
        member_offsets[cell + 1] = member_offsets[cell] + counts[cell];
    }
    let mut fill = member_offsets.clone();
    let mut members = vec![0u32; considered.len()];
    for &(cell, i) in &considered {
        members[fill[cell] as usize] = i as u32;
        fill[cell] += 1;
    }

    let offset_value = |i: usize, ch: usize| (points.positions[i][ch] - centroid[ch]) / radius;
    let value = |i: usize, ch: usize| {
        if ch < c_in {
            points.feature(i)[ch]
        } else {
            offset_value(i, ch - c_in)
        }
    };

    let mut grid = vec![0.0; cells * c];
    let mut winners = vec![None; if opts.pooling == Pooling::Max { cells * c } else { 0 }];
    for cell in 0..cells {
        let m = &members[member_offsets[cell] as usize..member_offsets[cell + 1] as usize];
        if m.is_empty() {
            continue;
        }
        let row = &mut grid[cell * c..(cell + 1) * c];
        match opts.pooling {
            Pooling::Max => {
                for ch in 0..c {
                    let mut best = m[0];
                    let mut best_v = value(m[0] as usize, ch);
                    for &i in &m[1..] {
                        let v = value(i as usize, ch);
                        if v > best_v {
                            best_v = v;
                            best = i;
                        }
                    }
                    row[ch] = best_v;
                    winners[cell * c + ch] = Some(best);
                }
            }
            Pooling::Average => {
                let w = 1.0 / m.len() as f64;
                for (ch, out) in row.iter_mut().enumerate() {
                    *out = m.iter().map(|&i| value(i as usize, ch)).sum::<f64>() * w;
                }
            }
        }
    }

    Ok(VoxelKernel { centroid, radius, grid, winners, member_offsets, members, selected: selected.len() })
}

/// Voxelizes one neighborhood of the input point `centroid_index`; the
/// half-side is the largest Euclidean distance to a selected point.
pub fn voxelize_kernel(points: Points<'_>, centroid_index: usize, selected: &[usize], opts: &KernelOptions) -> Result<VoxelKernel> {
    if centroid_index >= points.len() {
        return Err(Error::IndexOutOfRange { index: centroid_index, len: points.len() });
    }
    let c = points.positions[centroid_index];
    let r = selected
        .iter()
        .map(|&i| points.positions.get(i).map(|p| dist2(p, &c).sqrt()))
        .try_fold(0.0f64, |acc, d| d.map(|d| acc.max(d)))
        .ok_or(Error::IndexOutOfRange { index: usize::MAX, len: points.len() })?;
    voxelize_at(points, c, selected, r, opts)
}

fn neighborhood_kernel(
    points: Points<'_>,
    centroid: Point,
    opts: &LayerOptions,
    mode: DilationMode,
    rng: &mut rng::Rng,
) -> Result<(VoxelKernel, bool)> {
    let mut nb = knn_query(points.positions, centroid, opts.k * opts.d.max(1))?;
    if let RadiusRule::Fixed(r) = opts.radius {
        let keep = nb.distances.iter().take_while(|&&d| d <= r).count().max(1);
        nb.indices.truncate(keep);
        nb.distances.truncate(keep);
    }
    let (picks, short) = dilated_select(&nb, opts.k, opts.d, mode, rng);
    let selected: Vec<usize> = picks.iter().map(|&p| nb.indices[p]).collect();
    let radius = match opts.radius {
        RadiusRule::Selected => picks.iter().map(|&p| nb.distances[p]).fold(0.0, f64::max),
        RadiusRule::AllNeighbors => nb.distances.iter().copied().fold(0.0, f64::max),
        RadiusRule::Fixed(r) => r,
    };
    Ok((voxelize_at(points, centroid, &selected, radius, &opts.kernel)?, short))
}

fn dilation_mode(sampling: Sampling) -> DilationMode {
    match sampling {
        Sampling::Deterministic => DilationMode::Strided,
        Sampling::Random { .. } => DilationMode::Random,
    }
}

fn dilation_rng(sampling: Sampling, kernel: usize) -> rng::Rng {
    let seed = match sampling {
        Sampling::Deterministic => 0,
        Sampling::Random { seed } => seed,
    };
    rng::stream(seed, Stream::Dilation, &[kernel as u64])
}

fn assemble(points: Points<'_>, opts: &LayerOptions, results: Vec<(VoxelKernel, bool)>, centroid_indices: Option<Vec<usize>>) -> VoxelBatch {
    let short = results.iter().any(|r| r.1);
    VoxelBatch {
        s: opts.kernel.s,
        channels: points.channels + if opts.kernel.relative_offsets { 3 } else { 0 },
        input_channels: points.channels,
        pooling: opts.kernel.pooling,
        kernels: results.into_iter().map(|r| r.0).collect(),
        centroid_indices,
        short,
    }
}

/// Draws `n_centroids` sampling centroids by FPS and voxelizes the
/// neighborhood of each.
pub fn voxelize_layer(points: Points<'_>, n_centroids: usize, opts: &LayerOptions, sampling: Sampling) -> Result<VoxelBatch> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let start = match sampling {
        Sampling::Deterministic => 0,
        Sampling::Random { seed } => {
            use rand::Rng as _;
            rng::stream(seed, Stream::Fps, &[]).random_range(0..points.len())
        }
    };
    let centroids = farthest_point_sample(points.positions, n_centroids, start)?;
    let mode = dilation_mode(sampling);
    let results = centroids
        .iter()
        .enumerate()
        .map(|(n, &ci)| neighborhood_kernel(points, points.positions[ci], opts, mode, &mut dilation_rng(sampling, n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(points, opts, results, Some(centroids)))
}

/// Voxelizes `points` around externally supplied centroid positions (the
/// decoder half of a conv/deconv pair).
pub fn voxelize_at_positions(points: Points<'_>, centroids: &[Point], opts: &LayerOptions, sampling: Sampling) -> Result<VoxelBatch> {
    if points.is_empty() || centroids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mode = dilation_mode(sampling);
    let results = centroids
        .iter()
        .enumerate()
        .map(|(n, &c)| neighborhood_kernel(points, c, opts, mode, &mut dilation_rng(sampling, n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(points, opts, results, None))
}

/// Routes grid gradients back onto point features.
///
/// Max pooling sends each cell/channel gradient to its recorded winner;
/// average pooling splits it equally among the considered points. Gradients
/// of relative-offset channels are dropped (positions are not trained).
pub fn voxelize_backward(grad_grids: &[f64], batch: &VoxelBatch, cloud_size: usize) -> Result<Vec<f64>> {
    let row = batch.row_len();
    if grad_grids.len() != batch.len() * row {
        return Err(Error::Shape(format!(
            "grid gradient has {} values, batch needs {} × {}",
            grad_grids.len(),
            batch.len(),
            row
        )));
    }
    let c = batch.channels;
    let c_in = batch.input_channels;
    let mut out = vec![0.0; cloud_size * c_in];
    for (kernel, g) in batch.kernels.iter().zip(grad_grids.chunks_exact(row)) {
        for cell in 0..batch.cells() {
            let m = kernel.cell_members(cell);
            if m.is_empty() {
                continue;
            }
            let gc = &g[cell * c..cell * c + c_in];
            match batch.pooling {
                Pooling::Max => {
                    for (ch, &gv) in gc.iter().enumerate() {
                        if let Some(w) = kernel.winners[cell * c + ch] {
                            let w = w as usize;
                            if w >= cloud_size {
                                return Err(Error::IndexOutOfRange { index: w, len: cloud_size });
                            }
                            out[w * c_in + ch] += gv;
                        }
                    }
                }
                Pooling::Average => {
                    let share = 1.0 / m.len() as f64;
                    for &i in m {
                        let i = i as usize;
                        if i >= cloud_size {
                            return Err(Error::IndexOutOfRange { index: i, len: cloud_size });
                        }
                        for (ch, &gv) in gc.iter().enumerate() {
                            out[i * c_in + ch] += gv * share;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
