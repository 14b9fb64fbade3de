use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use splinenet::checkpoint::Checkpoint;
use splinenet::config::{ModelChoice, TrainConfig};
use splinenet::cost::{count_flops, CostMode};
use splinenet::data::{load_mnist, mnist_dir, Dataset, Split};
use splinenet::decisions::{DecisionKind, DiffusionSchedule};
use splinenet::layers::{ExecPath, KnotRank};
use splinenet::models::Network;
use splinenet::regularizer::Quantizer;
use splinenet::train::{evaluate, gradcheck_model, train, TrainOptions};
use splinenet::Error;

#[derive(Parser)]
#[command(name = "splinenet", version, about = "Train and inspect SplineNets on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing metrics, a run manifest and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        #[arg(long, value_parser = enum_arg::<ExecPath>, default_value = "batched")]
        exec_path: ExecPath,
        /// Train in 64-bit floats.
        #[arg(long)]
        f64: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long, value_parser = enum_arg::<ExecPath>, default_value = "batched")]
        exec_path: ExecPath,
        /// Evaluate the first N samples only.
        #[arg(long)]
        limit: Option<usize>,
        /// Print the full report, histograms included, as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of the training loss on a small model built
    /// with the given spline settings.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Parameter and FLOP counts of the configured model.
    Flops {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = enum_arg::<CostModeArg>, default_value = "single-sample")]
        mode: CostModeArg,
    },
    /// Position histograms and entropies of a checkpoint, per layer.
    InspectPositions {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long, default_value_t = 1000)]
        limit: usize,
        /// Also write every position to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
enum CostModeArg {
    SingleSample,
    BatchAmortized,
}

/// Training configuration flags; each overrides the same key of `--config`.
#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct ConfigArgs {
    /// JSON file with TrainConfig keys.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// lenet, dynamic or hierarchical.
    #[arg(long, value_parser = enum_arg::<ModelChoice>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelChoice>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    knots: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    degree: Option<usize>,
    /// 3 or 4.
    #[arg(long, value_parser = enum_arg::<KnotRank>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<KnotRank>,
    /// dot or conv.
    #[arg(long, value_parser = enum_arg::<DecisionKind>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    decision: Option<DecisionKind>,
    /// constant:<alpha> or tree:<b>.
    #[arg(long, value_parser = |s: &str| s.parse::<DiffusionSchedule>().map_err(|e| e.to_string()))]
    #[serde(skip_serializing_if = "Option::is_none")]
    diffusion: Option<DiffusionSchedule>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    slope: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dropout: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr_decay_at: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    w_u: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    w_s: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bins: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    upsilon: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    init_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_subset: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory with the four MNIST IDX files [default: $SPLINENET_MNIST_DIR or data/mnist].
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct QuantArgs {
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long, default_value_t = 100.0)]
    upsilon: f64,
}

/// Parses a kebab-case enum value through its serde representation.
fn enum_arg<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut merged = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(Failure::Usage(format!("{}: expected a JSON object", path.display()))),
                    Err(e) => return Err(Failure::Usage(format!("{}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        if let Value::Object(flags) = serde_json::to_value(self)? {
            merged.extend(flags);
        }
        let cfg: TrainConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl DataArgs {
    fn load(&self, split: Split) -> Result<Dataset, Error> {
        load_mnist(&self.data_dir.clone().unwrap_or_else(mnist_dir), split)
    }
}

impl QuantArgs {
    fn quantizer(&self) -> Result<Quantizer, Error> {
        Quantizer::new(self.bins, self.upsilon)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, data, out, exec_path, f64, quiet } => {
            let cfg = config.resolve()?;
            let train_set = data.load(Split::Train)?;
            let test_set = data.load(Split::Test)?;
            let opts = TrainOptions { out_dir: Some(out.clone()), test: Some(&test_set), path: exec_path, verbose: !quiet };
            let acc = if f64 {
                train::<f64>(&cfg, &train_set, &opts)?.test.map(|r| r.accuracy)
            } else {
                train::<f32>(&cfg, &train_set, &opts)?.test.map(|r| r.accuracy)
            };
            if let Some(acc) = acc {
                println!("test accuracy {acc:.4}");
            }
            println!("run written to {}", out.display());
        }
        Command::Eval { checkpoint, data, quant, exec_path, limit, json } => {
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let net = ckpt.network()?;
            let mut test = data.load(Split::Test)?;
            if let Some(n) = limit {
                test = test.take(n);
            }
            let report = evaluate(&net, &ckpt.params, &test, &quant.quantizer()?, exec_path)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("model     {}", net.spec.name);
                println!("samples   {}", test.len());
                println!("accuracy  {:.4}", report.accuracy);
                println!("xent      {:.4}", report.xent);
                for (i, (h, hc)) in report.entropies.iter().zip(&report.cond_entropies).enumerate() {
                    println!("layer {}   H {h:.4}  H|Y {hc:.4}", i + 1);
                }
            }
        }
        Command::Gradcheck { config, eps, tol } => {
            let cfg = config.resolve()?;
            let r = gradcheck_model(&cfg, eps)?;
            println!("checked {} partials, max rel err {:.3e}, max abs err {:.3e}", r.checked, r.max_rel_err, r.max_abs_err);
            if !r.passes(tol) {
                return Err(
                    Error::Numeric(format!("relative error {:.3e} above {tol:.1e} at {:?}", r.max_rel_err, r.worst)).into()
                );
            }
        }
        Command::Flops { config, mode } => {
            let cfg = config.resolve()?;
            let net = Network::build(&cfg.model_spec()?)?;
            let mode = match mode {
                CostModeArg::SingleSample => CostMode::SingleSample,
                CostModeArg::BatchAmortized => CostMode::BatchAmortized,
            };
            let report = count_flops(&net, mode);
            println!("{}", report.to_json());
            println!();
            println!("{report}");
        }
        Command::InspectPositions { checkpoint, data, quant, limit, csv } => {
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let net = ckpt.network()?;
            let q = quant.quantizer()?;
            let test = data.load(Split::Test)?.take(limit);
            let report = evaluate(&net, &ckpt.params, &test, &q, ExecPath::Batched)?;
            println!("{} on {} test samples, {} bins", net.spec.name, test.len(), q.bins);
            for (i, h) in report.histograms.iter().enumerate() {
                println!(
                    "layer {}  H {:.3} (max {:.3})  H|Y {:.3}",
                    i + 1,
                    report.entropies[i],
                    (q.bins as f64).ln(),
                    report.cond_entropies[i]
                );
                println!("  |{}|", sparkline(h));
            }
            if let Some(path) = csv {
                write_positions(&net, &ckpt.params, &test, &path)?;
                println!("positions written to {}", path.display());
            }
        }
    }
    Ok(())
}

/// One character per bin, height relative to the fullest bin.
fn sparkline(h: &[f64]) -> String {
    const LEVELS: [char; 9] = [' ', '▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];
    let max = h.iter().copied().fold(0.0, f64::max);
    h.iter().map(|&v| if max > 0.0 { LEVELS[((v / max) * 8.0).round() as usize] } else { ' ' }).collect()
}

fn write_positions(
    net: &Network,
    params: &[splinenet::autodiff::Tensor<f32>],
    data: &Dataset,
    path: &PathBuf,
) -> Result<(), Failure> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "sample,label,layer,feature,phi")?;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(500) {
        let (x, y) = data.batch::<f32>(chunk);
        let (_, positions) = net.predict(params, &x, ExecPath::Batched)?;
        for (layer, phi) in positions.iter().enumerate() {
            let f = phi.shape()[1];
            for (row, (&i, &label)) in phi.data().chunks_exact(f).zip(chunk.iter().zip(&y)) {
                for (j, v) in row.iter().enumerate() {
                    writeln!(out, "{i},{label},{},{j},{v}", layer + 1)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Ingest { .. } => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
