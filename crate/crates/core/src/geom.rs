//! Spatial primitives: point clouds, farthest point sampling, exact k-NN,
//! dilated neighbor selection and geometric augmentation.
//!
//! Distance ties are broken by the lower point index everywhere, which makes
//! every routine here a deterministic function of its inputs and seed.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    /// One class id for the whole cloud (classification).
    Cloud(usize),
    /// One class id per point (segmentation).
    Points(Vec<usize>),
}

/// Positions plus per-point feature channels, optional labels and a validity
/// mask (`false` marks padding or ambient points that carry no loss).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point>,
    /// Row-major `len × channels`.
    pub features: Vec<f64>,
    pub channels: usize,
    pub labels: Option<Labels>,
    pub mask: Option<Vec<bool>>,
    /// Object category, used to restrict part predictions to the
    /// category's part group.
    pub category: Option<usize>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point>, features: Vec<f64>, channels: usize) -> Result<Self> {
        let cloud = PointCloud {
            positions,
            features,
            channels,
            labels: None,
            mask: None,
            category: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    /// A cloud whose only feature is a constant 1 per point.
    pub fn from_positions(positions: Vec<Point>) -> Self {
        let n = positions.len();
        PointCloud {
            positions,
            features: vec![1.0; n],
            channels: 1,
            labels: None,
            mask: None,
            category: None,
        }
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        self.labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.mask = Some(mask);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.features.len() != n * self.channels {
            return Err(Error::Shape(format!(
                "{} feature values for {} points × {} channels",
                self.features.len(),
                n,
                self.channels
            )));
        }
        if let Some(Labels::Points(l)) = &self.labels {
            if l.len() != n {
                return Err(Error::Shape(format!("{} labels for {} points", l.len(), n)));
            }
        }
        if let Some(m) = &self.mask {
            if m.len() != n {
                return Err(Error::Shape(format!("{} mask entries for {} points", m.len(), n)));
            }
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(())
    }

    /// Copies the points at `indices` (duplicates allowed) into a new cloud.
    pub fn gather(&self, indices: &[usize]) -> PointCloud {
        let c = self.channels;
        let mut features = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            features.extend_from_slice(self.feature(i));
        }
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            features,
            channels: c,
            labels: match &self.labels {
                Some(Labels::Points(l)) => Some(Labels::Points(indices.iter().map(|&i| l[i]).collect())),
                other => other.clone(),
            },
            mask: self.mask.as_ref().map(|m| indices.iter().map(|&i| m[i]).collect()),
            category: self.category,
        }
    }

    pub fn centroid(&self) -> Point {
        let n = self.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.positions {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    /// Translates the cloud so its mean position is the origin.
    pub fn center(&mut self) {
        let c = self.centroid();
        for p in &mut self.positions {
            for a in 0..3 {
                p[a] -= c[a];
            }
        }
    }

    /// Applies an integer 3×3 linear map to every position. Entries in
    /// {-1, 0, 1} keep the result exact.
    pub fn transform_positions(&self, m: &[[i32; 3]; 3]) -> PointCloud {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p = apply_int_matrix(m, p);
        }
        out
    }
}

pub(crate) fn apply_int_matrix(m: &[[i32; 3]; 3], p: &Point) -> Point {
    let mut q = [0.0; 3];
    for (r, row) in m.iter().enumerate() {
        let mut acc = 0.0;
        let mut first = true;
        for (c, &e) in row.iter().enumerate() {
            let term = match e {
                0 => continue,
                1 => p[c],
                -1 => -p[c],
                e => e as f64 * p[c],
            };
            acc = if first { term } else { acc + term };
            first = false;
        }
        q[r] = acc;
    }
    q
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min farthest point sampling.
///
/// Starting from `start`, each next index maximizes the minimum Euclidean
/// distance to the already selected set; ties go to the lower index.
pub fn farthest_point_sample(positions: &[Point], n_centroids: usize, start: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if n_centroids == 0 {
        return Err(Error::InvalidArgument("n_centroids must be at least 1".into()));
    }
    if n_centroids > n {
        return Err(Error::TooMany { requested: n_centroids, available: n });
    }
    if start >= n {
        return Err(Error::IndexOutOfRange { index: start, len: n });
    }
    let mut selected = Vec::with_capacity(n_centroids);
    selected.push(start);
    let mut min_d2: Vec<f64> = positions.iter().map(|p| dist2(p, &positions[start])).collect();
    // Selected indices never win again, even among coincident points.
    min_d2[start] = f64::NEG_INFINITY;
    while selected.len() < n_centroids {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        min_d2[best] = f64::NEG_INFINITY;
        let q = positions[best];
        for (i, p) in positions.iter().enumerate() {
            let d = dist2(p, &q);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    Ok(selected)
}

/// The `K·D` (or fewer) nearest neighbors of a sampling centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub center_index: Option<usize>,
    pub center: Point,
    /// Ascending by distance, ties by index.
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// Fewer points were available than requested.
    pub short: bool,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact k-NN around an arbitrary query position.
pub fn knn_query(positions: &[Point], query: Point, k: usize) -> Result<NeighborSet> {
    if positions.is_empty() {
        return Err(Error::EmptyInput);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let short = k > positions.len();
    let k = k.min(positions.len());
    let mut cand: Vec<(f64, usize)> = positions.iter().enumerate().map(|(i, p)| (dist2(p, &query), i)).collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_dist_then_index);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_dist_then_index);
    Ok(NeighborSet {
        center_index: None,
        center: query,
        indices: cand.iter().map(|c| c.1).collect(),
        distances: cand.iter().map(|c| c.0.sqrt()).collect(),
        short,
    })
}

/// Exact k-NN around the point `centroid_index`, which is itself eligible
/// and comes first at distance 0 (unless another point coincides with it
/// and has a lower index).
pub fn knn_search(positions: &[Point], centroid_index: usize, k: usize) -> Result<NeighborSet> {
    if centroid_index >= positions.len() {
        return Err(Error::IndexOutOfRange { index: centroid_index, len: positions.len() });
    }
    let mut set = knn_query(positions, positions[centroid_index], k)?;
    set.center_index = Some(centroid_index);
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DilationMode {
    /// Uniform sample without replacement.
    Random,
    /// Every D-th neighbor starting from the nearest.
    Strided,
}

/// Picks `k` of the `k·d` neighbors. The output keeps ascending-distance
/// order and holds positions into `neighbors.indices`.
pub fn dilated_select(neighbors: &NeighborSet, k: usize, d: usize, mode: DilationMode, rng: &mut Rng) -> (Vec<usize>, bool) {
    let len = neighbors.len();
    if k >= len {
        return ((0..len).collect(), k > len || neighbors.short);
    }
    let short = neighbors.short || len < k * d.max(1);
    let picks = match mode {
        DilationMode::Strided => {
            let stride = if len >= k * d.max(1) { d.max(1) } else { (len / k).max(1) };
            (0..k).map(|i| i * stride).collect()
        }
        DilationMode::Random => {
            let mut v = index::sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
    };
    (picks, short)
}

/// Multiplies positions component-wise by per-axis factors drawn uniformly
/// from `[low, high]`. Features, labels and mask are left untouched.
pub fn anisotropic_scale(cloud: &PointCloud, low: f64, high: f64, rng: &mut Rng) -> Result<PointCloud> {
    if !(low > 0.0 && low <= high) {
        return Err(Error::InvalidArgument(format!("scale range [{low}, {high}]")));
    }
    let factors: [f64; 3] = if low == high {
        [low; 3]
    } else {
        std::array::from_fn(|_| rng.random_range(low..=high))
    };
    let mut out = cloud.clone();
    if factors != [1.0; 3] {
        for p in &mut out.positions {
            for a in 0..3 {
                p[a] *= factors[a];
            }
        }
    }
    Ok(out)
}
