//! Dataset ingestion, the `DVPC` binary container, padding/subsampling,
//! scene tiling and synthetic desk-scale datasets.
//!
//! Directory convention: `<root>/meta.json` plus `<root>/<split>/<name>.dvpc`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{Labels, Point, PointCloud};
use crate::model::Task;
use crate::rng::{self, Rng, Stream};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"DVPC";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: Task,
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Part labels belonging to each object category (part segmentation).
    #[serde(default)]
    pub part_groups: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub meta: DatasetMeta,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.clouds.first().map(|c| c.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.channels();
        for (i, c) in self.clouds.iter().enumerate() {
            c.validate()?;
            if Some(c.channels) != ch {
                return Err(Error::Shape(format!("cloud {i} has {} channels, expected {:?}", c.channels, ch)));
            }
            let bad = match &c.labels {
                Some(Labels::Cloud(l)) => (*l >= self.meta.num_classes).then_some(*l),
                Some(Labels::Points(ls)) => ls.iter().copied().find(|&l| l >= self.meta.num_classes),
                None => None,
            };
            if let Some(l) = bad {
                return Err(Error::InvalidArgument(format!(
                    "cloud {i}: label {l} outside {} classes",
                    self.meta.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn save_dir(&self, root: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
        let root = root.as_ref();
        let dir = root.join(self.split.as_str());
        fs::create_dir_all(&dir)?;
        fs::write(root.join("meta.json"), serde_json::to_string_pretty(&self.meta)?)?;
        let path = dir.join(format!("{name}.dvpc"));
        save_bin(self, &path)?;
        Ok(path)
    }

    /// Reads every `*.dvpc` file under `<root>/<split>/` (sorted by name).
    pub fn load_dir(root: impl AsRef<Path>, split: Split) -> Result<Dataset> {
        let root = root.as_ref();
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(root.join("meta.json"))?)?;
        let dir = root.join(split.as_str());
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "dvpc"))
            .collect();
        files.sort();
        let mut clouds = Vec::new();
        for f in files {
            clouds.extend(load_bin(&f)?);
        }
        let ds = Dataset { clouds, meta, split };
        ds.validate()?;
        Ok(ds)
    }
}

/// Column kinds of the text point format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    Xyz,
    Normals,
    Rgb,
    Label,
    Feature,
}

impl Column {
    fn width(self) -> usize {
        match self {
            Column::Xyz | Column::Normals | Column::Rgb => 3,
            Column::Label | Column::Feature => 1,
        }
    }
}

fn parse_header(line: &str, path: &Path) -> Result<Vec<Column>> {
    let rest = line
        .trim_start_matches('#')
        .trim()
        .strip_prefix("cols:")
        .ok_or_else(|| Error::Parse { path: path.into(), line: 1, msg: "expected '# cols: ...' header".into() })?;
    let cols = rest
        .split_whitespace()
        .map(|t| match t {
            "xyz" => Ok(Column::Xyz),
            "normals" => Ok(Column::Normals),
            "rgb" => Ok(Column::Rgb),
            "label" => Ok(Column::Label),
            "f" => Ok(Column::Feature),
            other => Err(Error::Parse { path: path.into(), line: 1, msg: format!("unknown column '{other}'") }),
        })
        .collect::<Result<Vec<_>>>()?;
    if cols.iter().filter(|&&c| c == Column::Xyz).count() != 1 || cols.iter().filter(|&&c| c == Column::Label).count() > 1 {
        return Err(Error::Parse { path: path.into(), line: 1, msg: "header needs exactly one xyz and at most one label".into() });
    }
    Ok(cols)
}

/// Reads the whitespace-separated text format: a `# cols: xyz [normals]
/// [rgb] [f ...] [label]` header, then one point per line. `rgb` columns
/// are multiplied by `rgb_scale`.
pub fn load_xyz(path: impl AsRef<Path>, rgb_scale: f64) -> Result<PointCloud> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or(Error::UnexpectedEnd("point file"))??;
    let cols = parse_header(&header, path)?;
    let width: usize = cols.iter().map(|c| c.width()).sum();
    let channels: usize = cols.iter().filter(|c| !matches!(c, Column::Xyz | Column::Label)).map(|c| c.width()).sum();
    let has_label = cols.contains(&Column::Label);

    let mut positions = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let lineno = n + 2;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.into(), line: lineno, msg };
        let toks: Vec<&str> = t.split_whitespace().collect();
        if toks.len() != width {
            return Err(err(format!("{} columns, header declares {}", toks.len(), width)));
        }
        let mut it = toks.into_iter();
        for col in &cols {
            let mut vals = [0.0; 3];
            for v in vals.iter_mut().take(col.width()) {
                let tok = it.next().expect("width checked");
                if *col == Column::Label {
                    labels.push(tok.parse::<usize>().map_err(|_| err(format!("bad label '{tok}'")))?);
                    continue;
                }
                *v = tok.parse::<f64>().map_err(|_| err(format!("bad number '{tok}'")))?;
                if !v.is_finite() {
                    return Err(err(format!("non-finite value '{tok}'")));
                }
            }
            match col {
                Column::Xyz => positions.push(vals),
                Column::Normals | Column::Feature => features.extend_from_slice(&vals[..col.width()]),
                Column::Rgb => features.extend(vals.iter().map(|v| v * rgb_scale)),
                Column::Label => {}
            }
        }
    }
    let mut cloud = PointCloud::new(positions, features, channels)?;
    if has_label {
        cloud = cloud.with_labels(Labels::Points(labels))?;
    }
    Ok(cloud)
}

/// Writes a cloud in the text format with raw `f` feature columns, so a
/// subsequent [`load_xyz`] reproduces it exactly.
pub fn write_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    let labels = match &cloud.labels {
        Some(Labels::Points(l)) => Some(l),
        _ => None,
    };
    write!(w, "# cols: xyz")?;
    for _ in 0..cloud.channels {
        write!(w, " f")?;
    }
    writeln!(w, "{}", if labels.is_some() { " label" } else { "" })?;
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        for v in cloud.feature(i) {
            write!(w, " {v}")?;
        }
        if let Some(l) = labels {
            write!(w, " {}", l[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

const FLAG_CLOUD_LABEL: u8 = 1;
const FLAG_POINT_LABELS: u8 = 2;
const FLAG_MASK: u8 = 4;
const FLAG_CATEGORY: u8 = 8;

/// Serializes clouds into the `DVPC` container:
///
/// ```text
/// "DVPC" | version u16 | cloud_count u32
/// per cloud: point_count u32 | channels u16 | flags u8
///            | f32 positions (3·n) | f32 features (C·n)
///            | u16 label (per-cloud) or u16 × n (per-point)
///            | u8 × n mask | u16 category
/// ```
///
/// Flag bits: 1 per-cloud label, 2 per-point labels, 4 mask, 8 category.
pub fn write_bin<W: Write>(mut w: W, clouds: &[PointCloud]) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(clouds.len() as u32).to_le_bytes())?;
    for c in clouds {
        w.write_all(&(c.len() as u32).to_le_bytes())?;
        w.write_all(&(c.channels as u16).to_le_bytes())?;
        let mut flags = 0u8;
        match &c.labels {
            Some(Labels::Cloud(_)) => flags |= FLAG_CLOUD_LABEL,
            Some(Labels::Points(_)) => flags |= FLAG_POINT_LABELS,
            None => {}
        }
        if c.mask.is_some() {
            flags |= FLAG_MASK;
        }
        if c.category.is_some() {
            flags |= FLAG_CATEGORY;
        }
        w.write_all(&[flags])?;
        for p in &c.positions {
            for v in p {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        for v in &c.features {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        match &c.labels {
            Some(Labels::Cloud(l)) => w.write_all(&(*l as u16).to_le_bytes())?,
            Some(Labels::Points(ls)) => {
                for l in ls {
                    w.write_all(&(*l as u16).to_le_bytes())?;
                }
            }
            None => {}
        }
        if let Some(m) = &c.mask {
            w.write_all(&m.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
        }
        if let Some(cat) = c.category {
            w.write_all(&(cat as u16).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Bytes<R> {
    r: R,
}

impl<R: Read> Bytes<R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::UnexpectedEnd("dataset"),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f64> {
        let v = f32::from_le_bytes(self.take()?) as f64;
        if !v.is_finite() {
            return Err(Error::Format("non-finite value".into()));
        }
        Ok(v)
    }
}

pub fn read_bin<R: Read>(r: R) -> Result<Vec<PointCloud>> {
    let mut b = Bytes { r };
    if &b.take::<4>()? != DATASET_MAGIC {
        return Err(Error::Format("not a DVPC dataset".into()));
    }
    let version = b.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = b.u32()? as usize;
    let mut clouds = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = b.u32()? as usize;
        let ch = b.u16()? as usize;
        let flags = b.take::<1>()?[0];
        let positions = (0..n).map(|_| Ok([b.f32()?, b.f32()?, b.f32()?])).collect::<Result<Vec<Point>>>()?;
        let features = (0..n * ch).map(|_| b.f32()).collect::<Result<Vec<_>>>()?;
        let mut cloud = PointCloud::new(positions, features, ch)?;
        if flags & FLAG_CLOUD_LABEL != 0 {
            cloud.labels = Some(Labels::Cloud(b.u16()? as usize));
        } else if flags & FLAG_POINT_LABELS != 0 {
            cloud.labels = Some(Labels::Points((0..n).map(|_| b.u16().map(usize::from)).collect::<Result<_>>()?));
        }
        if flags & FLAG_MASK != 0 {
            cloud.mask = Some((0..n).map(|_| b.take::<1>().map(|v| v[0] != 0)).collect::<Result<_>>()?);
        }
        if flags & FLAG_CATEGORY != 0 {
            cloud.category = Some(b.u16()? as usize);
        }
        clouds.push(cloud);
    }
    Ok(clouds)
}

pub fn save_bin(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_bin(std::io::BufWriter::new(fs::File::create(path)?), &dataset.clouds)
}

pub fn load_bin(path: impl AsRef<Path>) -> Result<Vec<PointCloud>> {
    read_bin(BufReader::new(fs::File::open(path)?))
}

/// Pads by uniform random duplication or subsamples without replacement
/// to exactly `target` points.
pub fn resample(cloud: &PointCloud, target: usize, seed: u64) -> Result<PointCloud> {
    resample_with(cloud, target, &mut rng::stream(seed, Stream::Resample, &[]))
}

pub fn resample_with(cloud: &PointCloud, target: usize, rng: &mut Rng) -> Result<PointCloud> {
    let n = cloud.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if n == target {
        return Ok(cloud.clone());
    }
    let idx: Vec<usize> = if n < target {
        (0..n).chain((0..target - n).map(|_| rng.random_range(0..n))).collect()
    } else {
        let mut v = index::sample(rng, n, target).into_vec();
        v.sort_unstable();
        v
    };
    Ok(cloud.gather(&idx))
}

/// Cuts a scene into `tile × tile` columns on the xy-plane. Each tile holds
/// its core points (mask `true`, half-open intervals) plus the points in a
/// surrounding band of width `offset` (mask `false`). Tiles without core
/// points are dropped.
pub fn tile_scene(scene: &PointCloud, tile: f64, offset: f64) -> Result<Vec<PointCloud>> {
    if scene.is_empty() {
        return Err(Error::EmptyInput);
    }
    if tile.is_nan() || tile <= 0.0 || offset < 0.0 {
        return Err(Error::InvalidArgument(format!("tile {tile}, offset {offset}")));
    }
    let min = [0, 1].map(|a| scene.positions.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min));
    let cell = |p: &Point| [0, 1].map(|a| ((p[a] - min[a]) / tile).floor() as i64);
    let cells: Vec<[i64; 2]> = scene.positions.iter().map(cell).collect();
    let mut keys: Vec<[i64; 2]> = cells.clone();
    keys.sort_unstable();
    keys.dedup();
    let mut tiles = Vec::with_capacity(keys.len());
    for key in keys {
        let lo = [0, 1].map(|a| min[a] + key[a] as f64 * tile - offset);
        let hi = [0, 1].map(|a| min[a] + (key[a] + 1) as f64 * tile + offset);
        let mut idx = Vec::new();
        let mut mask = Vec::new();
        for (i, p) in scene.positions.iter().enumerate() {
            let core = cells[i] == key;
            if core || (p[0] >= lo[0] && p[0] < hi[0] && p[1] >= lo[1] && p[1] < hi[1]) {
                idx.push(i);
                mask.push(core && scene.is_valid(i));
            }
        }
        let mut t = scene.gather(&idx);
        t.mask = Some(mask);
        tiles.push(t);
    }
    Ok(tiles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Spheres, cubes and planes with per-cloud labels.
    Shapes3,
    /// A plane with a vertical pole; per-point part labels.
    Twopart,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes3" => Ok(SynthKind::Shapes3),
            "twopart" => Ok(SynthKind::Twopart),
            _ => Err(Error::InvalidArgument(format!("unknown synthetic kind {s}"))),
        }
    }
}

fn unit_sphere_point(rng: &mut Rng) -> Point {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Surface sample with unit normal; noise is applied along the normal.
fn shape_sample(class: usize, rng: &mut Rng) -> (Point, Point) {
    match class {
        0 => {
            let n = unit_sphere_point(rng);
            (n, n)
        }
        1 => {
            let face = rng.random_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p: Point = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            p[axis] = sign;
            let mut n = [0.0; 3];
            n[axis] = sign;
            (p, n)
        }
        _ => ([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0], [0.0, 0.0, 1.0]),
    }
}

/// Plane `[-1,1]² × {0}` (part 0) with a vertical pole of radius 0.1 and
/// height 1.2 at a random spot (part 1).
fn twopart_cloud(points: usize, noise: Normal<f64>, rng: &mut Rng) -> (Vec<Point>, Vec<f64>, Vec<usize>) {
    let base = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    let n_pole = points * 2 / 5;
    let mut pos = Vec::with_capacity(points);
    let mut nrm = Vec::with_capacity(points * 3);
    let mut lab = Vec::with_capacity(points);
    for i in 0..points {
        let (p, n, l) = if i < n_pole {
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let h: f64 = rng.random_range(0.05..1.2);
            let n = [t.cos(), t.sin(), 0.0];
            ([base[0] + 0.1 * n[0], base[1] + 0.1 * n[1], h], n, 1)
        } else {
            ([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0], [0.0, 0.0, 1.0], 0)
        };
        let e = noise.sample(rng);
        pos.push(std::array::from_fn(|a| p[a] + e * n[a]));
        nrm.extend_from_slice(&n);
        lab.push(l);
    }
    (pos, nrm, lab)
}

/// Deterministic synthetic dataset with analytic normals as the three
/// feature channels. Classes are assigned round-robin.
pub fn synth(kind: SynthKind, n_clouds: usize, points: usize, noise: f64, seed: u64, split: Split) -> Result<Dataset> {
    if points == 0 {
        return Err(Error::InvalidArgument("points per cloud must be positive".into()));
    }
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let split_tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut clouds = Vec::with_capacity(n_clouds);
    for i in 0..n_clouds {
        let mut rng = rng::stream(seed, Stream::Synth, &[split_tag, i as u64]);
        let cloud = match kind {
            SynthKind::Shapes3 => {
                let class = i % 3;
                let mut pos = Vec::with_capacity(points);
                let mut nrm = Vec::with_capacity(points * 3);
                for _ in 0..points {
                    let (p, n) = shape_sample(class, &mut rng);
                    let e = normal.sample(&mut rng);
                    pos.push(std::array::from_fn(|a| p[a] + e * n[a]));
                    nrm.extend_from_slice(&n);
                }
                PointCloud::new(pos, nrm, 3)?.with_labels(Labels::Cloud(class))?
            }
            SynthKind::Twopart => {
                let (pos, nrm, lab) = twopart_cloud(points, normal, &mut rng);
                let mut c = PointCloud::new(pos, nrm, 3)?.with_labels(Labels::Points(lab))?;
                c.category = Some(0);
                c
            }
        };
        clouds.push(cloud);
    }
    let meta = match kind {
        SynthKind::Shapes3 => DatasetMeta {
            task: Task::Classify,
            num_classes: 3,
            class_names: vec!["sphere".into(), "cube".into(), "plane".into()],
            part_groups: Vec::new(),
        },
        SynthKind::Twopart => DatasetMeta {
            task: Task::Segment,
            num_classes: 2,
            class_names: vec!["plane".into(), "pole".into()],
            part_groups: vec![vec![0, 1]],
        },
    };
    Ok(Dataset { clouds, meta, split })
}

/// Shuffled order of `n` items for one epoch.
pub fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Shuffle, &[epoch as u64]));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = Rng::seed_from_u64(seed);
        let pos = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..4.0))).collect();
        let feat = (0..n).map(|i| i as f64).collect();
        PointCloud::new(pos, feat, 1).unwrap()
    }

    #[test]
    fn xyz_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyz");
        fs::write(&p, "# cols: xyz normals label\n0 0 0 0 0 1 2\n1 0 0 0 0 1 2\n0 1 0.5 1 0 0 0\n").unwrap();
        let c = load_xyz(&p, 1.0).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.channels, 3);
        assert_eq!(c.labels, Some(Labels::Points(vec![2, 2, 0])));
    }

    #[test]
    fn xyz_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyz");
        fs::write(&p, "# cols: xyz label\n0 0 0 1\n0 0 0\n").unwrap();
        match load_xyz(&p, 1.0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "# cols: xyz\n0 0 nan\n").unwrap();
        assert!(matches!(load_xyz(&p, 1.0), Err(Error::Parse { line: 2, .. })));
        fs::write(&p, "0 0 0\n").unwrap();
        assert!(matches!(load_xyz(&p, 1.0), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn xyz_rgb_is_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyz");
        fs::write(&p, "# cols: xyz rgb\n0 0 0 255 0 51\n").unwrap();
        let c = load_xyz(&p, 1.0 / 255.0).unwrap();
        assert_eq!(c.features, vec![1.0, 0.0, 0.2]);
    }

    #[test]
    fn xyz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyz");
        let mut c = random_cloud(20, 1);
        c.labels = Some(Labels::Points((0..20).map(|i| i % 3).collect()));
        write_xyz(&c, &p).unwrap();
        assert_eq!(load_xyz(&p, 1.0).unwrap(), c);
    }

    #[test]
    fn bin_empty_and_truncated() {
        let mut buf = Vec::new();
        write_bin(&mut buf, &[]).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 4);
        assert!(read_bin(&buf[..]).unwrap().is_empty());

        let ds = synth(SynthKind::Twopart, 2, 16, 0.01, 0, Split::Train).unwrap();
        let mut buf = Vec::new();
        write_bin(&mut buf, &ds.clouds).unwrap();
        let err = read_bin(&buf[..buf.len() - 3]).unwrap_err();
        assert_eq!(err.to_string(), "unexpected end of dataset");
    }

    #[test]
    fn bin_round_trip_is_byte_exact() {
        let mut ds = synth(SynthKind::Twopart, 3, 32, 0.01, 4, Split::Train).unwrap();
        ds.clouds[1].mask = Some((0..32).map(|i| i % 2 == 0).collect());
        let mut buf = Vec::new();
        write_bin(&mut buf, &ds.clouds).unwrap();
        let back = read_bin(&buf[..]).unwrap();
        let mut buf2 = Vec::new();
        write_bin(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(back[1].mask, ds.clouds[1].mask);
        assert_eq!(back[2].labels, ds.clouds[2].labels);
    }

    #[test]
    fn resample_sizes() {
        let c = random_cloud(100, 2);
        assert_eq!(resample(&c, 100, 0).unwrap(), c);
        let padded = resample(&c, 256, 0).unwrap();
        assert_eq!(padded.len(), 256);
        assert_eq!(padded, resample(&c, 256, 0).unwrap());
        let big = random_cloud(400, 3);
        let sub = resample(&big, 128, 1).unwrap();
        assert_eq!(sub.len(), 128);
        for p in &sub.positions {
            assert!(big.positions.contains(p));
        }
    }

    #[test]
    fn small_scene_is_one_tile() {
        let mut c = random_cloud(50, 4);
        c.positions.iter_mut().for_each(|p| {
            p[0] *= 0.2;
            p[1] *= 0.2
        });
        let tiles = tile_scene(&c, 1.5, 0.2).unwrap();
        assert_eq!(tiles.len(), 1);
        assert!(tiles[0].mask.as_ref().unwrap().iter().all(|&m| m));
    }

    #[test]
    fn border_point_is_core_once() {
        let c = PointCloud::from_positions(vec![[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [3.0, 0.1, 0.0]]);
        let tiles = tile_scene(&c, 1.5, 0.2).unwrap();
        let cores: usize = tiles
            .iter()
            .map(|t| t.positions.iter().zip(t.mask.as_ref().unwrap()).filter(|(p, &m)| m && p[0] == 1.5).count())
            .sum();
        assert_eq!(cores, 1);
    }

    #[test]
    fn synth_basics() {
        assert!(synth(SynthKind::Shapes3, 0, 10, 0.01, 0, Split::Train).unwrap().is_empty());
        let ds = synth(SynthKind::Shapes3, 30, 64, 0.02, 1, Split::Train).unwrap();
        let mut counts = [0; 3];
        for c in &ds.clouds {
            if let Some(Labels::Cloud(l)) = c.labels {
                counts[l] += 1;
            }
        }
        assert_eq!(counts, [10, 10, 10]);
        assert_eq!(ds, synth(SynthKind::Shapes3, 30, 64, 0.02, 1, Split::Train).unwrap());
        assert_ne!(ds.clouds[0], synth(SynthKind::Shapes3, 30, 64, 0.02, 1, Split::Test).unwrap().clouds[0]);
    }

    #[test]
    fn sphere_points_hug_the_unit_radius() {
        let noise = 0.02;
        let ds = synth(SynthKind::Shapes3, 3, 4000, noise, 7, Split::Train).unwrap();
        let sphere = &ds.clouds[0];
        let dev: Vec<f64> = sphere.positions.iter().map(|p| ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs()).collect();
        let within = dev.iter().filter(|&&d| d <= 3.0 * noise).count() as f64 / dev.len() as f64;
        assert!(within >= 0.99, "{within}");
        // E|N(0, σ)| = σ·sqrt(2/π)
        let mean = dev.iter().sum::<f64>() / dev.len() as f64;
        assert!((mean / (noise * (2.0 / std::f64::consts::PI).sqrt()) - 1.0).abs() < 0.1);
    }
}
