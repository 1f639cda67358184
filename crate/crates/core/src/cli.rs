//! The `dvconv` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::data::{synth, Dataset, Split, SynthKind};
use crate::geom::PointCloud;
use crate::model::{Network, NetworkConfig, RadiusFrom};
use crate::train::{evaluate, fit, metrics_table, write_report, OutputPaths, TrainOptions};
use crate::voxelizer::{voxelize_layer, KernelOptions, LayerOptions, Pooling, RadiusRule, Sampling};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dvconv", version, about = "Dynamic-voxelization group convolutions on point clouds")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write checkpoints plus metrics CSVs.
    Train(TrainArgs),
    /// Evaluate a checkpoint deterministically.
    Eval(EvalArgs),
    /// Dump a per-kernel radius/occupancy report for one layer.
    Inspect(InspectArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Print parameter and FLOP counts for a config.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Config JSON path or preset name.
    #[arg(long)]
    config: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Disable random anisotropic scaling.
    #[arg(long)]
    no_augment: bool,
    /// Stop after this many epochs without test-OA improvement.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Also write the metrics as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Layer description JSON (path or inline).
    #[arg(long)]
    layer: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    /// Only the first `n` clouds.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Training clouds.
    #[arg(long)]
    n: usize,
    /// Test clouds (default n/4).
    #[arg(long)]
    test_n: Option<usize>,
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Config JSON path or preset name.
    #[arg(long)]
    config: String,
    #[arg(long, default_value_t = 1024)]
    points: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Shapes3,
    Twopart,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> SynthKind {
        match k {
            KindArg::Shapes3 => SynthKind::Shapes3,
            KindArg::Twopart => SynthKind::Twopart,
        }
    }
}

/// Layer description accepted by `inspect`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct InspectLayer {
    n_centroids: usize,
    k: usize,
    #[serde(default = "one")]
    d: usize,
    #[serde(default = "three")]
    s: usize,
    #[serde(default)]
    pooling: Pooling,
    #[serde(default = "five")]
    cap: usize,
    #[serde(default)]
    radius_from: RadiusFrom,
    #[serde(default)]
    fixed_radius: Option<f64>,
}

fn one() -> usize {
    1
}
fn three() -> usize {
    3
}
fn five() -> usize {
    5
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(cli.command)),
            Err(e) => Err(Error::InvalidArgument(e.to_string())),
        },
        None => execute(cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Stats(a) => stats_cmd(a),
    }
}

/// A path to a JSON file, or else a preset name.
fn load_config(arg: &str) -> Result<NetworkConfig> {
    if Path::new(arg).is_file() {
        NetworkConfig::load(arg)
    } else {
        NetworkConfig::preset(arg)
    }
}

fn check_compatible(config: &NetworkConfig, data: &Dataset) -> Result<()> {
    if data.meta.task != config.task {
        return Err(Error::Config(format!("dataset task {:?} but config task {:?}", data.meta.task, config.task)));
    }
    if data.meta.num_classes != config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, config expects {}",
            data.meta.num_classes, config.num_classes
        )));
    }
    if let Some(c) = data.channels() {
        if c != config.in_channels {
            return Err(Error::Config(format!("dataset has {c} channels, config expects {}", config.in_channels)));
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let train = Dataset::load_dir(&a.data, Split::Train)?;
    check_compatible(&config, &train)?;
    let test = if a.data.join(Split::Test.as_str()).is_dir() {
        Some(Dataset::load_dir(&a.data, Split::Test)?)
    } else {
        None
    };
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        augment: !a.no_augment,
        patience: a.patience,
        ..Default::default()
    };
    let mut net = Network::build(&config, a.seed)?;
    let out = OutputPaths::new(&a.out);
    let history = fit(&mut net, &train, test.as_ref(), &opts, a.seed, Some(&out))?;
    if let Some(last) = history.last() {
        let m = last.test.as_ref().unwrap_or(&last.train);
        print!("{}", metrics_table(m));
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let net = Network::load(&a.checkpoint)?;
    let data = Dataset::load_dir(&a.data, a.split.into())?;
    check_compatible(&net.config, &data)?;
    let m = evaluate(&net, &data)?;
    print!("{}", metrics_table(&m));
    if let Some(r) = a.report {
        write_report(r, &m)?;
    }
    Ok(())
}

fn inspect_report(clouds: &[PointCloud], layer: &InspectLayer) -> Result<String> {
    let radius = match (layer.fixed_radius, layer.radius_from) {
        (Some(r), _) => RadiusRule::Fixed(r),
        (None, RadiusFrom::Selected) => RadiusRule::Selected,
        (None, RadiusFrom::AllNeighbors) => RadiusRule::AllNeighbors,
    };
    let opts = LayerOptions {
        k: layer.k,
        d: layer.d,
        radius,
        kernel: KernelOptions { s: layer.s, pooling: layer.pooling, cap: layer.cap, relative_offsets: false },
    };
    let mut s = String::from("cloud,kernel,cx,cy,cz,radius,nonzero_cells");
    for o in 0..=layer.cap {
        let _ = write!(s, ",occ{o}");
    }
    s.push('\n');
    for (ci, cloud) in clouds.iter().enumerate() {
        let m = layer.n_centroids.min(cloud.len());
        let batch = voxelize_layer(cloud.into(), m, &opts, Sampling::Deterministic)?;
        for (ki, k) in batch.kernels.iter().enumerate() {
            let mut hist = vec![0usize; layer.cap + 1];
            for cell in 0..batch.cells() {
                hist[k.occupancy(cell).min(layer.cap)] += 1;
            }
            let c = k.centroid;
            let _ = write!(s, "{ci},{ki},{:.6},{:.6},{:.6},{:.6},{}", c[0], c[1], c[2], k.radius, k.nonzero_cells());
            for h in hist {
                let _ = write!(s, ",{h}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

fn inspect_cmd(a: InspectArgs) -> Result<()> {
    let text = if Path::new(&a.layer).is_file() { std::fs::read_to_string(&a.layer)? } else { a.layer.clone() };
    let layer: InspectLayer = serde_json::from_str(&text)?;
    let data = Dataset::load_dir(&a.data, a.split.into())?;
    let n = a.limit.unwrap_or(data.len()).min(data.len());
    std::fs::write(&a.out, inspect_report(&data.clouds[..n], &layer)?)?;
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let kind: SynthKind = a.kind.into();
    let test_n = a.test_n.unwrap_or(a.n / 4);
    for (split, n) in [(Split::Train, a.n), (Split::Test, test_n)] {
        let ds = synth(kind, n, a.points, a.noise, a.seed, split)?;
        let path = ds.save_dir(&a.out, "synth")?;
        println!("{} clouds -> {}", ds.len(), path.display());
    }
    Ok(())
}

fn stats_cmd(a: StatsArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let net = Network::build(&config, 0)?;
    let sample = stats_sample(a.points, config.in_channels)?;
    let st = net.count_stats(&sample)?;
    println!("{:<10}{:>14}{:>14}{:>14}{:>16}{:>12}", "group", "params", "conv", "head", "flops", "fwd_ms");
    println!(
        "{:<10}{:>14}{:>14}{:>14}{:>16}{:>12.1}",
        format!("{:?}", config.group).to_lowercase(),
        st.params,
        st.conv_params,
        st.head_params,
        st.flops,
        st.forward_time.as_secs_f64() * 1e3
    );
    Ok(())
}

/// Deterministic unit-sphere sample used for FLOP counting.
fn stats_sample(points: usize, channels: usize) -> Result<PointCloud> {
    if points == 0 {
        return Err(Error::InvalidArgument("--points must be positive".into()));
    }
    // Fibonacci sphere
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let pos: Vec<[f64; 3]> = (0..points)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / points as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), r * t.sin(), z]
        })
        .collect();
    let feat = pos.iter().flat_map(|p| (0..channels).map(move |c| p[c % 3])).collect();
    PointCloud::new(pos, feat, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_subcommand_is_usage_error() {
        assert_eq!(run(["dvconv"]), 2);
        assert_eq!(run(["dvconv", "train", "--bogus"]), 2);
        assert_eq!(run(["dvconv", "--help"]), 0);
    }

    #[test]
    fn runtime_failure_exits_one() {
        assert_eq!(run(["dvconv", "stats", "--config", "no_such_preset"]), 1);
    }

    #[test]
    fn inspect_layer_defaults() {
        let l: InspectLayer = serde_json::from_str(r#"{"n_centroids": 4, "k": 8}"#).unwrap();
        assert_eq!((l.d, l.s, l.cap), (1, 3, 5));
        let c = stats_sample(64, 3).unwrap();
        let csv = inspect_report(&[c], &l).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "cloud,kernel,cx,cy,cz,radius,nonzero_cells,occ0,occ1,occ2,occ3,occ4,occ5");
        assert_eq!(lines.len(), 5);
        for l in &lines[1..] {
            let cols: Vec<usize> = l.split(',').skip(7).map(|v| v.parse().unwrap()).collect();
            assert_eq!(cols.iter().sum::<usize>(), 27);
        }
    }
}
