//! Training loop, evaluation and metrics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use autodiff::{Float, SgdMomentum, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::ExecPath;
use crate::models::Network;
use crate::regularizer::{reg_loss, Quantizer, RegConfig};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub xent: f64,
    /// `-w_u * sum_i H(L_i)`.
    pub reg_u: f64,
    /// `w_s * sum_i H(L_i | Y)`.
    pub reg_s: f64,
    pub acc: f64,
    /// `H(L_i)` per spline layer.
    pub entropies: Vec<f64>,
}

/// Header of the metrics CSV for a network with `layers` spline layers.
pub fn metrics_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "split", "loss", "xent", "reg_u", "reg_s", "acc"].map(String::from).to_vec();
    h.extend((1..=layers).map(|i| format!("H_layer_{i}")));
    h
}

impl MetricRow {
    fn record(&self) -> Vec<String> {
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let mut r = vec![self.step.to_string(), split.to_string()];
        r.extend([self.loss, self.xent, self.reg_u, self.reg_s, self.acc].map(|v| v.to_string()));
        r.extend(self.entropies.iter().map(|v| v.to_string()));
        r
    }
}

/// Where and how a run reports.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Directory for metrics, manifest and checkpoints; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
    /// Evaluated after every epoch.
    pub test: Option<&'a Dataset>,
    pub path: ExecPath,
    /// Progress lines on stderr.
    pub verbose: bool,
}

pub struct TrainOutcome<T> {
    pub net: Network,
    pub params: Vec<Tensor<T>>,
    pub metrics: Vec<MetricRow>,
    /// Evaluation after the last epoch.
    pub test: Option<EvalReport>,
    pub epoch_seconds: Vec<f64>,
}

/// Builds the configured network, initializes it from `cfg.seed` and trains.
pub fn train<T: Float>(cfg: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let net = Network::build(&cfg.model_spec()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = net.init_params(cfg.init_scale, &mut rng)?;
    train_from(net, params, cfg, data, opts)
}

/// Trains `params` in place of a fresh initialization.
pub fn train_from<T: Float>(
    net: Network,
    mut params: Vec<Tensor<T>>,
    cfg: &TrainConfig,
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    net.check_params(&params)?;
    if data.sample_shape() != net.spec.input.as_slice() {
        return Err(Error::Contract(format!("samples {:?} for a model taking {:?}", data.sample_shape(), net.spec.input)));
    }
    let data = match cfg.train_subset {
        Some(n) => data.take(n),
        None => data.clone(),
    };
    let q = cfg.quantizer()?;
    let reg = cfg.reg();
    let layers = net.spline_layers().count();

    let mut writer = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let manifest = json!({
                "config": cfg,
                "seed": cfg.seed,
                "model": net.spec,
                "params": net.param_count(),
                "train_samples": data.len(),
                "test_samples": opts.test.map(Dataset::len),
                "exec_path": opts.path,
                "dtype": T::DTYPE,
            });
            std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
            let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
            w.write_record(metrics_header(layers))?;
            Some(w)
        }
        None => None,
    };

    // Initialization consumed the seed's main stream; shuffling and dropout
    // draw from a separate one.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = SgdMomentum::new(&params, T::cst(cfg.momentum));
    let mut metrics = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut test_report = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = T::cst(cfg.lr_at(epoch));
        order.shuffle(&mut rng);
        let (mut seen, mut correct, mut loss_sum) = (0usize, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let (x, y) = data.batch::<T>(chunk);
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
            let xv = tape.constant(x);
            let fwd = match net.forward(&mut tape, &vars, xv, Some(&mut rng), opts.path) {
                Err(Error::Domain(v)) if !v.is_finite() => {
                    let reason = format!("position {v} in the forward pass");
                    return Err(nan_abort::<T>(opts.out_dir.as_deref(), &reason, step, epoch, f64::NAN, &[], &q));
                }
                r => r?,
            };
            let xent = tape.softmax_cross_entropy(fwd.logits, &y)?;
            let (loss, row) = if fwd.positions.is_empty() {
                let v = tape.value(xent).item().as_f64();
                (
                    xent,
                    MetricRow {
                        step,
                        split: Split::Train,
                        loss: v,
                        xent: v,
                        reg_u: 0.0,
                        reg_s: 0.0,
                        acc: 0.0,
                        entropies: vec![],
                    },
                )
            } else {
                let terms = reg_loss(&mut tape, &fwd.positions, &y, &q, &reg)?;
                let loss = tape.add(xent, terms.loss)?;
                let row = MetricRow {
                    step,
                    split: Split::Train,
                    loss: tape.value(loss).item().as_f64(),
                    xent: tape.value(xent).item().as_f64(),
                    reg_u: -reg.w_u * terms.reg_u(),
                    reg_s: reg.w_s * terms.reg_s(),
                    acc: 0.0,
                    entropies: terms.utilization,
                };
                (loss, row)
            };
            if !row.loss.is_finite() {
                let phis: Vec<Tensor<T>> = fwd.positions.iter().map(|p| tape.value(p.phi).clone()).collect();
                return Err(nan_abort(opts.out_dir.as_deref(), &format!("loss {}", row.loss), step, epoch, row.loss, &phis, &q));
            }
            let hits = count_correct(tape.value(fwd.logits), &y);
            let row = MetricRow { acc: hits as f64 / y.len() as f64, ..row };
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<T>>> = vars.iter().map(|&v| tape.grad(v).map(<[T]>::to_vec)).collect();
            opt.step(&mut params, &grads, lr)?;
            // A finite loss can still overflow the update; the next forward
            // pass would then fail on a NaN position instead of here.
            if params.iter().any(|p| p.data().iter().any(|v| !v.as_f64().is_finite())) {
                let phis: Vec<Tensor<T>> = fwd.positions.iter().map(|p| tape.value(p.phi).clone()).collect();
                return Err(nan_abort(
                    opts.out_dir.as_deref(),
                    "non-finite parameters after the update",
                    step,
                    epoch,
                    row.loss,
                    &phis,
                    &q,
                ));
            }
            drop(tape);

            seen += y.len();
            correct += hits;
            loss_sum += row.loss * y.len() as f64;
            if let Some(w) = writer.as_mut() {
                w.write_record(row.record())?;
            }
            metrics.push(row);
            step += 1;
        }

        let mut line = format!(
            "epoch {}/{} lr {} train loss {:.4} acc {:.4}",
            epoch + 1,
            cfg.epochs,
            cfg.lr_at(epoch),
            loss_sum / seen.max(1) as f64,
            correct as f64 / seen.max(1) as f64
        );
        if let Some(test) = opts.test {
            let r = evaluate(&net, &params, test, &q, opts.path)?;
            let row = r.metric_row(step, &reg);
            if let Some(w) = writer.as_mut() {
                w.write_record(row.record())?;
            }
            metrics.push(row);
            line.push_str(&format!(" test acc {:.4}", r.accuracy));
            test_report = Some(r);
        }
        let secs = started.elapsed().as_secs_f64();
        epoch_seconds.push(secs);
        if let Some(dir) = &opts.out_dir {
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            let meta = json!({ "epoch": epoch + 1, "step": step, "config": cfg });
            let ckpt = Checkpoint::new(&net, params.clone(), meta)?;
            ckpt.save(&dir.join(format!("epoch-{}.spln", epoch + 1)))?;
        }
        if opts.verbose {
            eprintln!("{line} ({secs:.1} s)");
        }
    }

    if let Some(dir) = &opts.out_dir {
        let meta = json!({ "epoch": cfg.epochs, "step": step, "config": cfg });
        Checkpoint::new(&net, params.clone(), meta)?.save(&dir.join("final.spln"))?;
        let summary = json!({
            "steps": step,
            "epoch_seconds": epoch_seconds,
            "test_accuracy": test_report.as_ref().map(|r| r.accuracy),
            "test_entropies": test_report.as_ref().map(|r| &r.entropies),
        });
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(TrainOutcome { net, params, metrics, test: test_report, epoch_seconds })
}

fn count_correct<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Row-wise argmax of `[N, C]` logits; the first maximum wins ties.
pub fn argmax_rows<T: Float>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-layer soft bin masses, split by position component and class.
struct BinMass {
    /// `[layer][component][class][bin]`; components appear on the first add.
    mass: Vec<Vec<Vec<Vec<f64>>>>,
    classes: usize,
    bins: usize,
    non_finite: Vec<usize>,
}

impl BinMass {
    fn new(layers: usize, classes: usize, bins: usize) -> Self {
        Self { mass: vec![Vec::new(); layers], classes, bins, non_finite: vec![0; layers] }
    }

    /// Adds positions `[N, F]` of one layer; each sample carries its label.
    fn add<T: Float>(&mut self, layer: usize, phi: &Tensor<T>, labels: &[usize], q: &Quantizer) {
        let f = phi.shape()[1];
        if self.mass[layer].is_empty() {
            self.mass[layer] = vec![vec![vec![0.0; self.bins]; self.classes]; f];
        }
        for (row, &label) in phi.data().chunks_exact(f).zip(labels) {
            for (j, &p) in row.iter().enumerate() {
                let p = p.as_f64();
                if !p.is_finite() {
                    self.non_finite[layer] += 1;
                    continue;
                }
                for (b, m) in self.mass[layer][j][label].iter_mut().enumerate() {
                    *m += q.soft_bin(p, b);
                }
            }
        }
    }

    /// Pooled histogram of a layer over all components and classes.
    fn histogram(&self, layer: usize) -> Vec<f64> {
        let mut h = vec![0.0; self.bins];
        for class in self.mass[layer].iter().flatten() {
            for (a, v) in h.iter_mut().zip(class) {
                *a += v;
            }
        }
        normalize(&mut h);
        h
    }

    /// `(H(L), H(L | Y))` of one layer, averaged over position components.
    fn entropies(&self, layer: usize) -> (f64, f64) {
        let comps = &self.mass[layer];
        if comps.is_empty() {
            return (0.0, 0.0);
        }
        let (mut h, mut hc) = (0.0, 0.0);
        for comp in comps {
            let per_class: Vec<f64> = comp.iter().map(|c| c.iter().sum()).collect();
            let total: f64 = per_class.iter().sum();
            let mut marginal = vec![0.0; self.bins];
            for (c, &m) in comp.iter().zip(&per_class) {
                if m > 0.0 {
                    let mut p = c.clone();
                    normalize(&mut p);
                    hc += m / total * entropy(&p);
                }
                for (a, v) in marginal.iter_mut().zip(c) {
                    *a += v;
                }
            }
            normalize(&mut marginal);
            h += entropy(&marginal);
        }
        (h / comps.len() as f64, hc / comps.len() as f64)
    }
}

fn normalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        p.iter_mut().for_each(|v| *v /= s);
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn nan_abort<T: Float>(
    out_dir: Option<&Path>,
    reason: &str,
    step: usize,
    epoch: usize,
    loss: f64,
    phis: &[Tensor<T>],
    q: &Quantizer,
) -> Error {
    let mut mass = BinMass::new(phis.len(), 1, q.bins);
    let mut layers = Vec::new();
    for (i, phi) in phis.iter().enumerate() {
        let labels = vec![0; phi.shape()[0]];
        mass.add(i, phi, &labels, q);
        let finite: Vec<f64> = phi.data().iter().map(|v| v.as_f64()).filter(|v| v.is_finite()).collect();
        layers.push(json!({
            "layer": i + 1,
            "non_finite": mass.non_finite[i],
            "min": finite.iter().copied().fold(f64::INFINITY, f64::min),
            "max": finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            "histogram": mass.histogram(i),
        }));
    }
    let dump = json!({ "step": step, "epoch": epoch + 1, "loss": loss, "layers": layers });
    let mut detail = format!("{reason} at step {step} (epoch {})", epoch + 1);
    if let Some(dir) = out_dir {
        let path = dir.join("nan-dump.json");
        if std::fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default()).is_ok() {
            detail.push_str(&format!("; position histograms in {}", path.display()));
        }
    } else {
        detail.push_str(&format!("; positions: {dump}"));
    }
    Error::Numeric(detail)
}

/// Outcome of an evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub xent: f64,
    /// `H(L_i)` over the whole dataset.
    pub entropies: Vec<f64>,
    /// `H(L_i | Y)` over the whole dataset.
    pub cond_entropies: Vec<f64>,
    /// Position histogram per layer, each summing to one.
    pub histograms: Vec<Vec<f64>>,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn metric_row(&self, step: usize, reg: &RegConfig) -> MetricRow {
        let reg_u = -reg.w_u * self.entropies.iter().sum::<f64>();
        let reg_s = reg.w_s * self.cond_entropies.iter().sum::<f64>();
        MetricRow {
            step,
            split: Split::Test,
            loss: self.xent + reg_u + reg_s,
            xent: self.xent,
            reg_u,
            reg_s,
            acc: self.accuracy,
            entropies: self.entropies.clone(),
        }
    }
}

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 500;

/// Eval-mode pass (no dropout) over `data`.
pub fn evaluate<T: Float>(
    net: &Network,
    params: &[Tensor<T>],
    data: &Dataset,
    q: &Quantizer,
    path: ExecPath,
) -> Result<EvalReport> {
    net.check_params(params)?;
    if data.sample_shape() != net.spec.input.as_slice() {
        return Err(Error::Contract(format!("samples {:?} for a model taking {:?}", data.sample_shape(), net.spec.input)));
    }
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let layers = net.spline_layers().count();
    let mut mass = BinMass::new(layers, data.classes, q.bins);
    let mut predictions = Vec::with_capacity(data.len());
    let mut xent = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch::<T>(chunk);
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let xv = tape.constant(x);
        let fwd = net.forward(&mut tape, &vars, xv, None, path)?;
        let l = tape.softmax_cross_entropy(fwd.logits, &y)?;
        xent += tape.value(l).item().as_f64() * y.len() as f64;
        predictions.extend(argmax_rows(tape.value(fwd.logits)));
        for (i, p) in fwd.positions.iter().enumerate() {
            mass.add(i, tape.value(p.phi), &y, q);
        }
    }
    let correct = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    let (entropies, cond_entropies) = (0..layers).map(|i| mass.entropies(i)).unzip();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        xent: xent / data.len() as f64,
        entropies,
        cond_entropies,
        histograms: (0..layers).map(|i| mass.histogram(i)).collect(),
        predictions,
    })
}

/// Finite-difference check of the full training loss (cross entropy plus
/// regularizer) on a small network with the spline settings of `cfg`,
/// in 64-bit, over every parameter.
pub fn gradcheck_model(cfg: &TrainConfig, eps: f64) -> Result<autodiff::gradcheck::GradCheckReport> {
    use crate::models::{LayerSpec, ModelSpec};
    use rand::Rng;

    cfg.validate()?;
    let spline = cfg.spline_config();
    let dense = spline.clone().map(|c| crate::layers::SplineLayerConfig { rank: crate::layers::KnotRank::R4, ..c });
    let spec = ModelSpec {
        name: "gradcheck".into(),
        input: vec![4, 4, 2],
        layers: vec![
            LayerSpec::Conv { filters: 2, kernel: 3, spline },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 3, spline: dense },
            LayerSpec::Dense { units: 3, spline: None },
        ],
    };
    let net = Network::build(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // A larger scale than training uses spreads the positions over the unit
    // interval, so many knot spans are exercised.
    let mut inputs: Vec<Tensor<f64>> = net.init_params(1.0, &mut rng)?;
    let np = inputs.len();
    inputs.push(Tensor::from_fn([3, 4, 4, 2], |_| rng.random_range(-1.0..1.0)));
    let labels = [0, 2, 1];
    let q = cfg.quantizer()?;
    let reg = cfg.reg();
    autodiff::gradcheck::check_gradients(&inputs, eps, |t, v: &[Var]| {
        let fwd = net.forward(t, &v[..np], v[np], None, ExecPath::Batched)?;
        let xent = t.softmax_cross_entropy(fwd.logits, &labels)?;
        if fwd.positions.is_empty() {
            return Ok(xent);
        }
        let terms = reg_loss(t, &fwd.positions, &labels, &q, &reg)?;
        Ok::<_, Error>(t.add(xent, terms.loss)?)
    })
}
