//! Network configuration and assembly.
//!
//! A network is an ordered list of DV-Conv layers followed by a perceptron
//! head. Encoder layers subsample the current point set by FPS; decoder
//! layers re-voxelize the current (coarse) points at their encoder
//! partner's input coordinates and concatenate the partner's input
//! features, restoring that layer's resolution.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::geom::{Labels, Point, PointCloud};
use crate::groups::{Group, GroupKind, LayerKind};
use crate::nn::{glorot_uniform, read_checkpoint, write_checkpoint, Gradients, GroupConv, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, Stream};
use crate::voxelizer::{voxelize_at_positions, voxelize_layer, KernelOptions, LayerOptions, Points, Pooling, RadiusRule, Sampling};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OrientationPool {
    /// Keep all `n` orientation copies side by side (equivariant).
    #[default]
    Concat,
    /// Channel-wise max over orientations (invariant).
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// k-NN neighborhoods with a self-adaptive radius.
    #[default]
    Knn,
    /// Per-layer constant radius (`fixed_radius` on every layer).
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RadiusFrom {
    #[default]
    Selected,
    AllNeighbors,
}

fn default_d() -> usize {
    1
}
fn default_s() -> usize {
    3
}
fn default_cap() -> usize {
    5
}
fn default_dropout() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub role: Role,
    /// Sampling centroids (encoder only; clamped to the input point count).
    #[serde(default)]
    pub n_centroids: usize,
    pub k: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_s")]
    pub s: usize,
    /// Base output channels `C_out` (the layer emits `C_out × n`).
    pub channels: usize,
    /// Encoder layer index this decoder mirrors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<usize>,
    /// Kernel half-side in fixed-radius sampling mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelConfig {
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default)]
    pub sampling: SamplingMode,
    #[serde(default)]
    pub radius_from: RadiusFrom,
    #[serde(default)]
    pub relative_offsets: bool,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        VoxelConfig {
            pooling: Pooling::Max,
            cap: default_cap(),
            sampling: SamplingMode::Knn,
            radius_from: RadiusFrom::Selected,
            relative_offsets: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub task: Task,
    pub group: GroupKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Hidden perceptron widths; the class layer is appended.
    pub head: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub orientation_pool: OrientationPool,
    /// Rectifier after every DV-Conv layer.
    #[serde(default = "default_true")]
    pub conv_relu: bool,
    #[serde(default)]
    pub voxel: VoxelConfig,
    /// Use fixed FPS start and strided dilation even while training.
    #[serde(default)]
    pub deterministic_sampling: bool,
    /// Translate each input cloud to zero mean before the forward pass.
    #[serde(default = "default_true")]
    pub center: bool,
}

impl NetworkConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: NetworkConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// One of the shipped presets by name (`cls_p4`, `cls_p4m`, `seg_p4`, `seg_p4m`).
    pub fn preset(name: &str) -> Result<Self> {
        let s = match name {
            "cls_p4" => include_str!("../presets/cls_p4.json"),
            "cls_p4m" => include_str!("../presets/cls_p4m.json"),
            "seg_p4" => include_str!("../presets/seg_p4.json"),
            "seg_p4m" => include_str!("../presets/seg_p4m.json"),
            _ => return Err(Error::Config(format!("unknown preset {name}"))),
        };
        Self::from_json(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.layers.is_empty() {
            return bad("at least one DV-Conv layer is required".into());
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("in_channels and num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.voxel.cap == 0 {
            return bad("cap must be positive".into());
        }
        if self.voxel.relative_offsets && self.group != GroupKind::Trivial {
            return bad("relative_offsets is only supported with the trivial group".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.s % 2 == 0 {
                return bad(format!("layer {i}: S must be odd"));
            }
            if l.k == 0 || l.d == 0 || l.channels == 0 {
                return bad(format!("layer {i}: k, d and channels must be positive"));
            }
            if self.voxel.sampling == SamplingMode::Fixed && !l.fixed_radius.is_some_and(|r| r > 0.0) {
                return bad(format!("layer {i}: fixed sampling needs a positive fixed_radius"));
            }
            match l.role {
                Role::Encoder => {
                    if l.n_centroids == 0 {
                        return bad(format!("layer {i}: encoder needs n_centroids"));
                    }
                    if l.partner.is_some() {
                        return bad(format!("layer {i}: encoders take no partner"));
                    }
                }
                Role::Decoder => match l.partner {
                    Some(p) if p < i && self.layers[p].role == Role::Encoder => {}
                    _ => return bad(format!("layer {i}: decoder without an earlier encoder partner")),
                },
            }
        }
        match self.task {
            Task::Classify => {
                if self.layers.iter().any(|l| l.role == Role::Decoder) {
                    return bad("classification networks have no decoder layers".into());
                }
            }
            Task::Segment => {
                let last = self.layers.last().expect("non-empty");
                if last.role != Role::Decoder || last.partner != Some(0) {
                    return bad("segmentation must end in a decoder paired with layer 0".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    spec: LayerSpec,
    conv: GroupConv,
    weight: ParamId,
    bias: ParamId,
    opts: LayerOptions,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    weight: ParamId,
    bias: ParamId,
    inputs: usize,
    outputs: usize,
}

/// How a forward pass treats randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// No dropout, FPS from index 0, strided dilation.
    Eval,
    /// Dropout on; FPS start and dilation drawn from `seed` unless the
    /// config asks for deterministic sampling.
    Train { seed: u64 },
}

/// Per-layer bookkeeping from one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    /// Output point count of every DV-Conv layer.
    pub points: Vec<usize>,
    /// Mean kernel half-side of every DV-Conv layer.
    pub mean_radius: Vec<f64>,
}

pub struct Forward<'a> {
    pub tape: Tape<'a>,
    pub input: Var,
    pub logits: Var,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub params: usize,
    pub conv_params: usize,
    pub head_params: usize,
    /// Two times the multiply-adds of conv and perceptron layers.
    pub flops: u64,
    pub forward_time: Duration,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub group: Group,
    pub params: ParamStore,
    layers: Vec<ConvLayer>,
    head: Vec<DenseLayer>,
}

impl Network {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let group = Group::enumerate(config.group);
        let n = group.order();
        let mut params = ParamStore::default();
        let mut rng = rng::stream(seed, Stream::Init, &[]);
        let mut layers = Vec::with_capacity(config.layers.len());
        // (base channels, orientations) entering each layer
        let mut inputs: Vec<(usize, usize)> = Vec::with_capacity(config.layers.len());
        let (mut cur_c, mut cur_n) = (config.in_channels, 1usize);
        for (i, spec) in config.layers.iter().enumerate() {
            inputs.push((cur_c, cur_n));
            let kind = if cur_n == 1 { LayerKind::Lifting } else { LayerKind::Group };
            let extra = if config.voxel.relative_offsets { 3 } else { 0 };
            let conv = GroupConv::new(&group, spec.s, cur_c + extra, kind, spec.channels)?;
            let w = glorot_uniform(conv.weight_len(), conv.rows(), spec.channels, &mut rng);
            let weight = params.add(format!("conv{i}.weight"), vec![conv.rows(), spec.channels], w);
            let bias = params.add(format!("conv{i}.bias"), vec![spec.channels], vec![0.0; spec.channels]);
            let radius = match (config.voxel.sampling, config.voxel.radius_from) {
                (SamplingMode::Fixed, _) => RadiusRule::Fixed(spec.fixed_radius.expect("validated")),
                (SamplingMode::Knn, RadiusFrom::Selected) => RadiusRule::Selected,
                (SamplingMode::Knn, RadiusFrom::AllNeighbors) => RadiusRule::AllNeighbors,
            };
            let opts = LayerOptions {
                k: spec.k,
                d: spec.d,
                radius,
                kernel: KernelOptions {
                    s: spec.s,
                    pooling: config.voxel.pooling,
                    cap: config.voxel.cap,
                    relative_offsets: config.voxel.relative_offsets,
                },
            };
            layers.push(ConvLayer { spec: spec.clone(), conv, weight, bias, opts });
            cur_c = spec.channels;
            cur_n = n;
            if let (Role::Decoder, Some(p)) = (spec.role, spec.partner) {
                cur_c += inputs[p].0;
            }
        }
        let mut width = match config.orientation_pool {
            OrientationPool::Concat => cur_c * cur_n,
            OrientationPool::Max => cur_c,
        };
        let mut head = Vec::new();
        let widths: Vec<usize> = config.head.iter().copied().chain(std::iter::once(config.num_classes)).collect();
        for (j, &out) in widths.iter().enumerate() {
            let w = glorot_uniform(width * out, width, out, &mut rng);
            let weight = params.add(format!("head{j}.weight"), vec![width, out], w);
            let bias = params.add(format!("head{j}.bias"), vec![out], vec![0.0; out]);
            head.push(DenseLayer { weight, bias, inputs: width, outputs: out });
            width = out;
        }
        Ok(Network { config: config.clone(), group, params, layers, head })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn prepare(&self, cloud: &PointCloud) -> Result<PointCloud> {
        if cloud.is_empty() {
            return Err(Error::EmptyInput);
        }
        if cloud.channels != self.config.in_channels {
            return Err(Error::Shape(format!(
                "cloud has {} channels, network expects {}",
                cloud.channels, self.config.in_channels
            )));
        }
        let mut c = cloud.clone();
        if self.config.center {
            c.center();
        }
        Ok(c)
    }

    /// Runs the network and records the tape. Logits are `1 × classes` for
    /// classification and `points × classes` for segmentation.
    pub fn forward(&self, cloud: &PointCloud, mode: RunMode) -> Result<Forward<'_>> {
        let cloud = self.prepare(cloud)?;
        let n = self.group.order();
        let mut tape = Tape::new(&self.params);
        let input = tape.input(Tensor::matrix(cloud.len(), cloud.channels, cloud.features.clone())?);
        let (training, seed) = match mode {
            RunMode::Eval => (false, 0),
            RunMode::Train { seed } => (true, seed),
        };
        let sampling_for = |i: usize| {
            if !training || self.config.deterministic_sampling {
                Sampling::Deterministic
            } else {
                Sampling::Random { seed: rng::derive(seed, Stream::Fps, &[i as u64]) }
            }
        };

        let mut pos: Vec<Point> = cloud.positions.clone();
        let mut feat = input;
        let mut cur_n = 1usize;
        let mut enc_inputs: Vec<Option<(Vec<Point>, Var, usize)>> = vec![None; self.layers.len()];
        let mut trace = Trace::default();
        for (i, layer) in self.layers.iter().enumerate() {
            let fv = tape.value(feat);
            let points = Points::new(&pos, &fv.data, fv.cols())?;
            let (batch, skip) = match layer.spec.role {
                Role::Encoder => {
                    enc_inputs[i] = Some((pos.clone(), feat, cur_n));
                    let m = layer.spec.n_centroids.min(pos.len());
                    (voxelize_layer(points, m, &layer.opts, sampling_for(i))?, None)
                }
                Role::Decoder => {
                    let p = layer.spec.partner.expect("validated");
                    let (ppos, pfeat, pn) = enc_inputs[p].clone().ok_or(Error::MissingContext("decoder partner"))?;
                    (voxelize_at_positions(points, &ppos, &layer.opts, sampling_for(i))?, Some((pfeat, pn)))
                }
            };
            let new_pos = batch.centroids();
            trace.points.push(new_pos.len());
            trace.mean_radius.push(batch.kernels.iter().map(|k| k.radius).sum::<f64>() / batch.len() as f64);
            let grids = tape.voxelize(feat, batch)?;
            let mut y = tape.conv(grids, &layer.conv, layer.weight, layer.bias)?;
            if self.config.conv_relu {
                y = tape.relu(y);
            }
            if let Some((pfeat, pn)) = skip {
                let s = tape.broadcast(pfeat, n / pn)?;
                y = tape.concat(y, s)?;
            }
            pos = new_pos;
            feat = y;
            cur_n = n;
        }

        let mut x = match self.config.task {
            Task::Classify => tape.max_rows(feat)?,
            Task::Segment => feat,
        };
        if self.config.orientation_pool == OrientationPool::Max {
            x = tape.orient_max(x, cur_n)?;
        }
        let mut drop_rng = rng::stream(seed, Stream::Dropout, &[]);
        for (j, d) in self.head.iter().enumerate() {
            x = tape.linear(x, d.weight, d.bias)?;
            if j + 1 < self.head.len() {
                x = tape.relu(x);
                x = tape.dropout(x, self.config.dropout, training, &mut drop_rng)?;
            }
        }
        Ok(Forward { tape, input, logits: x, trace })
    }

    /// Labels and loss mask the loss should see for `cloud`.
    pub fn targets(&self, cloud: &PointCloud) -> Result<(Vec<usize>, Vec<bool>)> {
        match (self.config.task, &cloud.labels) {
            (Task::Classify, Some(Labels::Cloud(c))) => Ok((vec![*c], vec![true])),
            (Task::Segment, Some(Labels::Points(l))) => {
                let mask = cloud.mask.clone().unwrap_or_else(|| vec![true; l.len()]);
                Ok((l.clone(), mask))
            }
            _ => Err(Error::InvalidArgument("cloud labels do not match the network task".into())),
        }
    }

    /// Forward, masked cross-entropy and backward for one cloud.
    pub fn loss_and_grad(&self, cloud: &PointCloud, mode: RunMode) -> Result<(f64, Gradients, Vec<f64>)> {
        let (labels, mask) = self.targets(cloud)?;
        let mut f = self.forward(cloud, mode)?;
        let logits = f.tape.value(f.logits).data.clone();
        let loss = f.tape.cross_entropy(f.logits, &labels, &mask)?;
        let value = f.tape.value(loss).data[0];
        let grads = f.tape.backward(loss)?;
        Ok((value, grads, logits))
    }

    pub fn logits(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let f = self.forward(cloud, RunMode::Eval)?;
        Ok(f.tape.value(f.logits).data.clone())
    }

    /// Parameter/FLOP accounting for one forward pass over a cloud of
    /// `sample.len()` points, plus the measured forward time.
    pub fn count_stats(&self, sample: &PointCloud) -> Result<Stats> {
        let start = Instant::now();
        let f = self.forward(sample, RunMode::Eval)?;
        let forward_time = start.elapsed();
        let n = self.group.order() as u64;
        let mut flops = 0u64;
        for (layer, &pts) in self.layers.iter().zip(&f.trace.points) {
            flops += 2 * pts as u64 * layer.conv.rows() as u64 * layer.spec.channels as u64 * n;
        }
        let rows = match self.config.task {
            Task::Classify => 1,
            Task::Segment => sample.len() as u64,
        };
        for d in &self.head {
            flops += 2 * rows * d.inputs as u64 * d.outputs as u64;
        }
        let conv_params: usize = self
            .layers
            .iter()
            .map(|l| self.params.get(l.weight).len() + self.params.get(l.bias).len())
            .sum();
        let params = self.params.scalar_count();
        Ok(Stats { params, conv_params, head_params: params - conv_params, flops, forward_time })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(f, &serde_json::to_string(&self.config)?, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Network> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (manifest, tensors) = read_checkpoint(f)?;
        let config = NetworkConfig::from_json(&manifest)?;
        let mut net = Network::build(&config, 0)?;
        if tensors.len() != net.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, network has {}",
                tensors.len(),
                net.params.len()
            )));
        }
        for (p, t) in net.params.params.iter_mut().zip(tensors) {
            if p.name != t.name || p.shape != t.shape {
                return Err(Error::Format(format!("tensor {} {:?} does not match {} {:?}", t.name, t.shape, p.name, p.shape)));
            }
            p.value = t.values;
        }
        Ok(net)
    }
}
