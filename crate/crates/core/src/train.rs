//! Optimization loop, evaluation metrics and experiment orchestration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_order, Dataset};
use crate::geom::{anisotropic_scale, PointCloud};
use crate::model::{Network, RunMode, Task};
use crate::nn::ParamStore;
use crate::rng::{self, Stream};
use crate::{Error, Result};

pub const BASE_LR: f64 = 0.001;
pub const LR_DECAY: f64 = 0.8;
pub const LR_PERIOD: usize = 10;

/// Step schedule: `0.001 · 0.8^floor(epoch / 10)`.
pub fn lr_at(epoch: usize) -> f64 {
    BASE_LR * LR_DECAY.powi((epoch / LR_PERIOD) as i32)
}

/// Adam moments plus hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr: BASE_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam update; `weight_decay · param` is added to the gradient before
/// the moment updates.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.params.iter_mut().enumerate() {
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        if g.len() != p.value.len() {
            return Err(Error::Shape(format!("gradient for {} has {} entries, expected {}", p.name, g.len(), p.value.len())));
        }
        for j in 0..g.len() {
            let gj = g[j] + state.weight_decay * p.value[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            p.value[j] -= state.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Random anisotropic scaling in `[scale_low, scale_high]` per axis.
    pub augment: bool,
    pub scale_low: f64,
    pub scale_high: f64,
    pub weight_decay: f64,
    /// Stop once test OA has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 60,
            batch_size: 16,
            augment: true,
            scale_low: 0.95,
            scale_high: 1.05,
            weight_decay: 1e-5,
            patience: None,
        }
    }
}

/// Sums per-cloud gradients in batch order.
fn accumulate(into: &mut [Vec<f64>], g: &[Vec<f64>], scale: f64) {
    for (a, b) in into.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += scale * y;
        }
    }
}

/// Shuffled mini-batch pass; gradients of a batch are computed per cloud in
/// parallel and averaged in batch order. Returns the mean cloud loss.
pub fn train_epoch(
    net: &mut Network,
    state: &mut OptimState,
    data: &Dataset,
    opts: &TrainOptions,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if opts.batch_size > data.len() {
        log::warn!("batch size {} exceeds dataset size {}; using one batch", opts.batch_size, data.len());
    }
    state.lr = lr_at(epoch);
    let order = shuffled_order(data.len(), seed, epoch);
    let mut total = 0.0;
    for batch in order.chunks(opts.batch_size) {
        let net_ref: &Network = net;
        let results = batch
            .par_iter()
            .map(|&idx| {
                let path = [epoch as u64, idx as u64];
                let cloud = &data.clouds[idx];
                let aug;
                let cloud = if opts.augment {
                    let mut r = rng::stream(seed, Stream::Augment, &path);
                    aug = anisotropic_scale(cloud, opts.scale_low, opts.scale_high, &mut r)?;
                    &aug
                } else {
                    cloud
                };
                let mode = RunMode::Train { seed: rng::derive(seed, Stream::Dropout, &path) };
                net_ref.loss_and_grad(cloud, mode).map(|(l, g, _)| (l, g.params))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = net.params.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        for (loss, g) in &results {
            total += loss;
            accumulate(&mut grads, g, scale);
        }
        adam_step(&mut net.params, &grads, state)?;
    }
    Ok(total / data.len() as f64)
}

/// Confusion matrix plus derived scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub classes: usize,
    /// Row = ground truth, column = prediction.
    pub confusion: Vec<u64>,
    /// Mean cross-entropy per evaluated cloud.
    pub loss: f64,
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    pub parts: Option<PartMetrics>,
}

/// Shape-level part IoU summaries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PartMetrics {
    /// Mean over all shapes of the per-shape part IoU.
    pub instance_miou: f64,
    /// Mean over categories of the category's mean shape IoU.
    pub mpiou: f64,
    pub category_iou: Vec<Option<f64>>,
}

impl Metrics {
    pub fn from_confusion(classes: usize, confusion: Vec<u64>) -> Metrics {
        let at = |r: usize, c: usize| confusion[r * classes + c];
        let total: u64 = confusion.iter().sum();
        let trace: u64 = (0..classes).map(|c| at(c, c)).sum();
        let mut accs = Vec::new();
        let mut class_iou = Vec::with_capacity(classes);
        for c in 0..classes {
            let gt: u64 = (0..classes).map(|p| at(c, p)).sum();
            let pred: u64 = (0..classes).map(|g| at(g, c)).sum();
            let tp = at(c, c);
            if gt > 0 {
                accs.push(tp as f64 / gt as f64);
            }
            let union = gt + pred - tp;
            class_iou.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let ious: Vec<f64> = class_iou.iter().flatten().copied().collect();
        Metrics {
            classes,
            oa: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            macc: mean(&accs),
            miou: mean(&ious),
            class_iou,
            confusion,
            loss: 0.0,
            parts: None,
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().sum()
    }
}

/// Part IoU of one shape over `parts`; parts absent from both prediction and
/// ground truth are left out. `None` when every part is absent.
pub fn shape_part_iou(pred: &[usize], truth: &[usize], mask: &[bool], parts: &[usize]) -> Option<f64> {
    let mut ious = Vec::new();
    for &p in parts {
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..truth.len() {
            if !mask[i] {
                continue;
            }
            let (a, b) = (pred[i] == p, truth[i] == p);
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

fn argmax(row: &[f64], allowed: Option<&[usize]>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    let mut consider = |c: usize| {
        if row[c] > best.0 {
            best = (row[c], c);
        }
    };
    match allowed {
        Some(a) => a.iter().copied().for_each(&mut consider),
        None => (0..row.len()).for_each(consider),
    }
    best.1
}

struct CloudEval {
    loss: f64,
    truth: Vec<usize>,
    pred: Vec<usize>,
    mask: Vec<bool>,
    category: Option<usize>,
}

fn eval_cloud(net: &Network, data: &Dataset, cloud: &PointCloud) -> Result<CloudEval> {
    let (truth, mask) = net.targets(cloud)?;
    let mut f = net.forward(cloud, RunMode::Eval)?;
    let logits = f.tape.value(f.logits).data.clone();
    let loss_var = f.tape.cross_entropy(f.logits, &truth, &mask)?;
    let loss = f.tape.value(loss_var).data[0];
    let classes = net.num_classes();
    let allowed = match (net.config.task, cloud.category) {
        (Task::Segment, Some(c)) => data.meta.part_groups.get(c).map(|g| g.as_slice()),
        _ => None,
    };
    let pred = logits.chunks(classes).map(|r| argmax(r, allowed)).collect();
    Ok(CloudEval { loss, truth, pred, mask, category: cloud.category })
}

/// Deterministic evaluation over every unmasked cloud or point. Clouds are
/// processed in parallel and folded in dataset order.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let classes = net.num_classes();
    let evals = data.clouds.par_iter().map(|c| eval_cloud(net, data, c)).collect::<Result<Vec<_>>>()?;
    let mut confusion = vec![0u64; classes * classes];
    let mut loss = 0.0;
    for e in &evals {
        loss += e.loss;
        for i in 0..e.truth.len() {
            if e.mask[i] {
                confusion[e.truth[i] * classes + e.pred[i]] += 1;
            }
        }
    }
    let mut m = Metrics::from_confusion(classes, confusion);
    m.loss = loss / evals.len() as f64;
    if net.config.task == Task::Segment {
        m.parts = Some(part_metrics(&evals, data, classes));
    }
    Ok(m)
}

fn part_metrics(evals: &[CloudEval], data: &Dataset, classes: usize) -> PartMetrics {
    let all: Vec<usize> = (0..classes).collect();
    let n_cat = data.meta.part_groups.len().max(1);
    let mut per_cat: Vec<Vec<f64>> = vec![Vec::new(); n_cat];
    let mut shapes = Vec::new();
    for e in evals {
        let cat = e.category.unwrap_or(0).min(n_cat - 1);
        let parts = data.meta.part_groups.get(cat).map(|g| g.as_slice()).unwrap_or(&all);
        if let Some(iou) = shape_part_iou(&e.pred, &e.truth, &e.mask, parts) {
            per_cat[cat].push(iou);
            shapes.push(iou);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let category_iou: Vec<Option<f64>> = per_cat.iter().map(|v| (!v.is_empty()).then(|| mean(v))).collect();
    let cats: Vec<f64> = category_iou.iter().flatten().copied().collect();
    PartMetrics {
        instance_miou: if shapes.is_empty() { 0.0 } else { mean(&shapes) },
        mpiou: if cats.is_empty() { 0.0 } else { mean(&cats) },
        category_iou,
    }
}

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train: Metrics,
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// `epoch,split,loss,oa,macc,miou`, one row per evaluation.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,oa,macc,miou\n");
        for r in &self.epochs {
            let mut row = |split: &str, m: &Metrics| {
                let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6},{:.6}", r.epoch, split, m.loss, m.oa, m.macc, m.miou);
            };
            row("train", &r.train);
            if let Some(t) = &r.test {
                row("test", t);
            }
        }
        s
    }

    /// Accuracy-versus-epoch curve.
    pub fn accuracy_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_oa,test_oa\n");
        for r in &self.epochs {
            let test = r.test.as_ref().map(|t| format!("{:.6}", t.oa)).unwrap_or_default();
            let _ = writeln!(s, "{},{:.6},{:.6},{}", r.epoch, r.train_loss, r.train.oa, test);
        }
        s
    }
}

/// Where [`fit`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        OutputPaths { dir: dir.into() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn accuracy(&self) -> PathBuf {
        self.dir.join("epoch_accuracy.csv")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.dvck")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.dvck")
    }
}

fn write_outputs(out: &OutputPaths, history: &History) -> Result<()> {
    std::fs::write(out.metrics(), history.metrics_csv())?;
    std::fs::write(out.accuracy(), history.accuracy_csv())?;
    Ok(())
}

/// Trains for `opts.epochs`, evaluating both splits after every epoch. With
/// `out`, CSVs are rewritten each epoch and `last`/`best` checkpoints kept.
pub fn fit(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &TrainOptions,
    seed: u64,
    out: Option<&OutputPaths>,
) -> Result<History> {
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir)?;
    }
    let mut state = OptimState::new(&net.params, opts.weight_decay);
    let mut history = History::default();
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..opts.epochs {
        let train_loss = train_epoch(net, &mut state, train, opts, seed, epoch)?;
        let train_m = evaluate(net, train)?;
        let test_m = test.map(|t| evaluate(net, t)).transpose()?;
        let score = test_m.as_ref().unwrap_or(&train_m).oa;
        log::info!("epoch {epoch}: loss {train_loss:.4} train oa {:.4} score {score:.4}", train_m.oa);
        history.epochs.push(EpochRecord { epoch, train_loss, train: train_m, test: test_m });
        let improved = score > best;
        if improved {
            best = score;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(o) = out {
            write_outputs(o, &history)?;
            net.save(o.last())?;
            if improved {
                net.save(o.best())?;
            }
        }
        if opts.patience.is_some_and(|p| since_best >= p) {
            log::info!("stopping early after epoch {epoch}");
            break;
        }
    }
    Ok(history)
}

/// Formats a metrics table for terminal output.
pub fn metrics_table(m: &Metrics) -> String {
    let mut s = format!("{:<8}{:>10}\n", "metric", "value");
    let _ = writeln!(s, "{:<8}{:>10.4}", "loss", m.loss);
    let _ = writeln!(s, "{:<8}{:>10.4}", "OA", m.oa);
    let _ = writeln!(s, "{:<8}{:>10.4}", "mAcc", m.macc);
    let _ = writeln!(s, "{:<8}{:>10.4}", "mIoU", m.miou);
    if let Some(p) = &m.parts {
        let _ = writeln!(s, "{:<8}{:>10.4}", "pIoU", p.instance_miou);
        let _ = writeln!(s, "{:<8}{:>10.4}", "mpIoU", p.mpiou);
    }
    s
}

pub fn write_report(path: impl AsRef<Path>, m: &Metrics) -> Result<()> {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "loss,{:.6}\noa,{:.6}\nmacc,{:.6}\nmiou,{:.6}", m.loss, m.oa, m.macc, m.miou);
    if let Some(p) = &m.parts {
        let _ = writeln!(s, "piou,{:.6}\nmpiou,{:.6}", p.instance_miou, p.mpiou);
    }
    for (c, iou) in m.class_iou.iter().enumerate() {
        let _ = writeln!(s, "iou_{c},{}", iou.map(|v| format!("{v:.6}")).unwrap_or_default());
    }
    std::fs::write(path, s)?;
    Ok(())
}
