//! Command-line front end: dataset generation, training, evaluation, sweeps
//! and diagnostics.
//!
//! Every experiment command takes `--config FILE`, `--seed N` and any number
//! of `--set section.key=value` overrides. Progress goes to stderr; results go
//! to the files named on the command line.

pub mod config;
pub mod methods;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::baselines::{brute_force_association, AoConfig, BaselineError};
use crate::channel::{read_dataset, write_dataset, ChannelError, Dataset, ScenarioConfig};
use crate::hgnn::gradcheck::TOLERANCE;
use crate::hgnn::{
    calibration_pair, compute_eta, grad_check, label_set, pretrain, read_checkpoint, resume_pretrain, train, warm_start,
    write_checkpoint, EpochMetrics, HgnnError, LabelSet, ModelKind, Network, TrainConfig,
};
use crate::sysmodel::{case_association, CaseMode, ProblemInstance, SysError};

pub use config::{Method, RunConfig, SweepAxis, SweepConfig};
pub use methods::{evaluate_methods, mean_std, EvalContext, ResultRow};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Hgnn(#[from] HgnnError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Sys(#[from] SysError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "rislab", version, about = "Multi-RIS downlink design: classical solvers and a heterogeneous GNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config entry, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.sets, self.seed)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a channel dataset and write it in the binary dataset format.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
    },
    /// Rate-only pre-training under the label association.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written at the end (and periodically).
        #[arg(long)]
        out: PathBuf,
        /// Metrics as JSON lines.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue pre-training from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pre-training, penalty calibration and joint training.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue joint training from this checkpoint.
        #[arg(long, conflicts_with = "pretrained")]
        resume: Option<PathBuf>,
        /// Skip pre-training and start from this checkpoint.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate methods on the validation split and write a results table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// GNN checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fully connected benchmark checkpoint.
        #[arg(long)]
        dnn: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated list; defaults to the config's methods.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
    },
    /// Regenerate, retrain and evaluate at every value of the sweep axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Exhaustive association search on validation samples.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the training gradients on a tiny scenario.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// Penalty weight used in the checked loss.
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
    },
}

impl Cli {
    pub fn execute(self) -> Result<(), CliError> {
        match self.command {
            Command::GenData {
                common,
                out,
                n_train,
                n_val,
            } => gen_data(&common, &out, n_train, n_val),
            Command::Pretrain {
                common,
                data,
                out,
                metrics,
                resume,
            } => pretrain_cmd(&common, &data, &out, metrics.as_deref(), resume.as_deref()),
            Command::Train {
                common,
                data,
                out,
                metrics,
                resume,
                pretrained,
            } => train_cmd(&common, &data, &out, metrics.as_deref(), resume.as_deref(), pretrained.as_deref()),
            Command::Eval {
                common,
                data,
                checkpoint,
                dnn,
                out,
                methods,
            } => eval_cmd(&common, &data, checkpoint.as_deref(), dnn.as_deref(), &out, methods),
            Command::Sweep { common, out_dir } => sweep_cmd(&common, out_dir),
            Command::Oracle { common, data, out } => oracle_cmd(&common, &data, &out),
            Command::GradCheck { seeds, start, eta } => grad_check_cmd(start, seeds, eta),
        }
    }
}

fn gen_data(common: &Common, out: &Path, n_train: Option<usize>, n_val: Option<usize>) -> Result<(), CliError> {
    let cfg = common.load()?;
    let seed = cfg.require_seed()?;
    let (n_train, n_val) = (n_train.unwrap_or(cfg.n_train), n_val.unwrap_or(cfg.n_val));
    let data = Dataset::generate(&cfg.scenario, seed, n_train, n_val)?;
    write_dataset(&data, out)?;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for s in &data.samples {
        for c in &s.cascaded {
            for z in c.data() {
                lo = lo.min(z.norm());
                hi = hi.max(z.norm());
            }
        }
    }
    println!(
        "wrote {}: {} train + {} validation samples, cascaded |H| rms {:.3e}, range [{:.3e}, {:.3e}]",
        out.display(),
        n_train,
        n_val,
        Dataset::cascaded_rms(&data.samples),
        lo,
        hi
    );
    Ok(())
}

/// JSON-lines metrics file plus periodic checkpoints.
struct Progress {
    metrics: Option<BufWriter<File>>,
    checkpoint: Option<(PathBuf, usize)>,
    tag: &'static str,
}

impl Progress {
    fn new(metrics: Option<&Path>, append: bool, checkpoint: Option<(&Path, usize)>, tag: &'static str) -> Result<Self, CliError> {
        let metrics = match metrics {
            Some(p) => {
                let f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(p)
                    .map_err(io_err(p))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        Ok(Self {
            metrics,
            checkpoint: checkpoint.filter(|c| c.1 > 0).map(|(p, n)| (p.to_path_buf(), n)),
            tag,
        })
    }

    fn record(&mut self, m: &EpochMetrics, net: &Network) -> Result<(), HgnnError> {
        eprintln!(
            "{} epoch {:>3}: loss {:.6e}  val wsr {:.6e}  assoc match {:.3}",
            self.tag, m.epoch, m.train_loss, m.val_wsr, m.assoc_match_rate
        );
        if let Some(w) = &mut self.metrics {
            let line = serde_json::to_string(m).map_err(|e| HgnnError::Config(e.to_string()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|source| HgnnError::Io {
                path: "metrics".into(),
                source,
            })?;
        }
        if let Some((path, every)) = &self.checkpoint {
            if m.epoch % every == 0 {
                write_checkpoint(net, path)?;
            }
        }
        Ok(())
    }
}

/// Pre-trains a fresh network and returns it with its calibrated penalty.
pub fn pretrain_and_calibrate(
    data: &Dataset,
    labels: &LabelSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &Network) -> Result<(), HgnnError>,
) -> Result<Network, CliError> {
    let out = pretrain(data, labels, cfg, on_epoch)?;
    let mut net = out.network;
    net.eta = match cfg.eta {
        Some(e) => e,
        None => compute_eta(out.wsr_p, out.wsr_p0)?,
    };
    eprintln!(
        "calibration: network {:.6e}, reference {:.6e}, eta {:.6}",
        out.wsr_p, out.wsr_p0, net.eta
    );
    Ok(net)
}

/// The full pipeline: pre-training, calibration and joint training.
pub fn fit(
    data: &Dataset,
    labels: &LabelSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &Network) -> Result<(), HgnnError>,
) -> Result<Network, CliError> {
    let pre = pretrain_and_calibrate(data, labels, cfg, &mut |m, _| {
        eprintln!("pretrain epoch {:>3}: val wsr {:.6e}", m.epoch, m.val_wsr);
        Ok(())
    })?;
    let eta = pre.eta;
    let mut net = warm_start(pre);
    train(&mut net, data, labels, eta, cfg, on_epoch)?;
    Ok(net)
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<(Dataset, LabelSet), CliError> {
    let data = read_dataset(path)?;
    let labels = label_set(&data, cfg.case)?;
    Ok((data, labels))
}

fn pretrain_cmd(common: &Common, data: &Path, out: &Path, metrics: Option<&Path>, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = common.load()?;
    cfg.require_seed()?;
    let (data, labels) = load_data(data, &cfg)?;
    let mut progress = Progress::new(metrics, resume.is_some(), Some((out, cfg.train.checkpoint_every)), "pretrain")?;
    let mut cb = |m: &EpochMetrics, n: &Network| progress.record(m, n);
    let outcome = match resume {
        Some(p) => {
            let mut net = read_checkpoint(p)?;
            resume_pretrain(&mut net, &data, &labels, &cfg.train, &mut cb)?
        }
        None => pretrain(&data, &labels, &cfg.train, &mut cb)?,
    };
    let mut net = outcome.network;
    net.eta = match cfg.train.eta {
        Some(e) => e,
        None => compute_eta(outcome.wsr_p, outcome.wsr_p0)?,
    };
    write_checkpoint(&net, out)?;
    println!(
        "pretrained {} epochs: network wsr {:.6e}, reference wsr {:.6e}, eta {:.6}",
        net.epochs_done, outcome.wsr_p, outcome.wsr_p0, net.eta
    );
    Ok(())
}

fn train_cmd(
    common: &Common,
    data: &Path,
    out: &Path,
    metrics: Option<&Path>,
    resume: Option<&Path>,
    pretrained: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = common.load()?;
    cfg.require_seed()?;
    let (data, labels) = load_data(data, &cfg)?;
    let mut progress = Progress::new(metrics, resume.is_some(), Some((out, cfg.train.checkpoint_every)), "train")?;
    let mut cb = |m: &EpochMetrics, n: &Network| progress.record(m, n);
    let net = match (resume, pretrained) {
        (Some(p), _) => {
            let mut net = read_checkpoint(p)?;
            let eta = net.eta;
            train(&mut net, &data, &labels, eta, &cfg.train, &mut cb)?;
            net
        }
        (None, Some(p)) => {
            let pre = read_checkpoint(p)?;
            let eta = match cfg.train.eta {
                Some(e) => e,
                None if pre.eta > 0.0 => pre.eta,
                None => {
                    let (wp, wp0) = calibration_pair(&pre, &data, &labels, cfg.train.pretrain_p_max_dbm)?;
                    compute_eta(wp, wp0)?
                }
            };
            let mut net = warm_start(pre);
            train(&mut net, &data, &labels, eta, &cfg.train, &mut cb)?;
            net
        }
        (None, None) => fit(&data, &labels, &cfg.train, &mut cb)?,
    };
    write_checkpoint(&net, out)?;
    println!("trained {} epochs with eta {:.6}; checkpoint {}", net.epochs_done, net.eta, out.display());
    Ok(())
}

fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn print_rows(rows: &[ResultRow]) {
    for r in rows {
        let assoc = r.assoc_match.map_or_else(|| "-".to_string(), |a| format!("{a:.3}"));
        println!(
            "{:>8} {:<13} mean {:.6e}  std {:.3e}  n {:>5}  assoc {:>5}  {:.1}s",
            r.sweep_value, r.method, r.mean_wsr, r.std_wsr, r.n, assoc, r.seconds
        );
    }
}

fn eval_cmd(
    common: &Common,
    data: &Path,
    gnn: Option<&Path>,
    dnn: Option<&Path>,
    out: &Path,
    methods: Vec<Method>,
) -> Result<(), CliError> {
    let cfg = common.load()?;
    let seed = cfg.require_seed()?;
    let data = read_dataset(data)?;
    let gnn = gnn.map(read_checkpoint).transpose()?;
    let dnn = dnn.map(read_checkpoint).transpose()?;
    let methods = if methods.is_empty() { cfg.methods.clone() } else { methods };
    let val = data.validation();
    let samples = &val[..val.len().min(cfg.eval_samples)];
    let ctx = EvalContext {
        scenario: &data.scenario,
        samples,
        p_max_dbm: cfg.train.p_max_dbm,
        seed,
        sweep_value: cfg.train.p_max_dbm,
        gnn: gnn.as_ref(),
        dnn: dnn.as_ref(),
    };
    let rows = evaluate_methods(&ctx, &methods)?;
    write_rows(out, &rows)?;
    print_rows(&rows);
    Ok(())
}

/// Scenario and training settings at one point of a sweep.
pub fn sweep_point(cfg: &RunConfig, axis: SweepAxis, value: f64) -> Result<(ScenarioConfig, TrainConfig), CliError> {
    let mut scenario = cfg.scenario.clone();
    let mut train = cfg.train.clone();
    let count = || -> Result<usize, CliError> {
        if value >= 1.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(CliError::Config(format!("{} must be a positive integer, got {value}", axis.name())))
        }
    };
    match axis {
        SweepAxis::PMaxDbm => train.p_max_dbm = value,
        SweepAxis::M => scenario = scenario.with_square_ris(count()?)?,
        SweepAxis::NT => scenario.n_t = count()?,
    }
    scenario.validate()?;
    train.validate()?;
    Ok((scenario, train))
}

#[derive(Debug, Serialize)]
struct Series {
    mean: Vec<Option<f64>>,
    std: Vec<Option<f64>>,
}

#[derive(Debug, Serialize)]
struct Failure {
    value: f64,
    error: String,
}

#[derive(Debug, Serialize)]
struct SweepPlot {
    axis: &'static str,
    values: Vec<f64>,
    series: std::collections::BTreeMap<String, Series>,
    failures: Vec<Failure>,
}

fn run_sweep_point(cfg: &RunConfig, seed: u64, axis: SweepAxis, value: f64, dir: &Path) -> Result<Vec<ResultRow>, CliError> {
    let (scenario, train_cfg) = sweep_point(cfg, axis, value)?;
    let learned = cfg.methods.iter().any(|m| m.is_learned());
    let n_train = if learned { cfg.n_train } else { 0 };
    let data = Dataset::generate(&scenario, seed, n_train, cfg.n_val)?;
    let mut nets = Vec::new();
    for (method, kind) in [(Method::Gnn, ModelKind::Gnn), (Method::Dnn, ModelKind::Dnn)] {
        if !cfg.methods.contains(&method) {
            nets.push(None);
            continue;
        }
        let labels = label_set(&data, cfg.case)?;
        let tc = TrainConfig { kind, ..train_cfg.clone() };
        let tag = method.name();
        let net = fit(&data, &labels, &tc, &mut |m, _| {
            eprintln!("{} {tag} epoch {:>3}: val wsr {:.6e}", value, m.epoch, m.val_wsr);
            Ok(())
        })?;
        write_checkpoint(&net, dir.join(format!("{tag}_{value}.ckpt")))?;
        nets.push(Some(net));
    }
    let val = data.validation();
    let ctx = EvalContext {
        scenario: &scenario,
        samples: &val[..val.len().min(cfg.eval_samples)],
        p_max_dbm: train_cfg.p_max_dbm,
        seed,
        sweep_value: value,
        gnn: nets[0].as_ref(),
        dnn: nets[1].as_ref(),
    };
    evaluate_methods(&ctx, &cfg.methods)
}

fn sweep_cmd(common: &Common, out_dir: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = common.load()?;
    let seed = cfg.require_seed()?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("the config has no [sweep] section".into()))?;
    let dir = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut rows: Vec<ResultRow> = Vec::new();
    let mut failures = Vec::new();
    for &v in &sweep.values {
        eprintln!("sweep {} = {v}", sweep.axis.name());
        match run_sweep_point(&cfg, seed, sweep.axis, v, &dir) {
            Ok(r) => {
                print_rows(&r);
                rows.extend(r);
            }
            Err(e) => {
                eprintln!("sweep point {v} failed: {e}");
                failures.push(Failure { value: v, error: e.to_string() });
            }
        }
        write_rows(&dir.join("results.csv"), &rows)?;
    }
    let mut series = std::collections::BTreeMap::new();
    for m in &cfg.methods {
        let pick = |v: f64| rows.iter().find(|r| r.method == m.name() && r.sweep_value == v);
        series.insert(
            m.name().to_string(),
            Series {
                mean: sweep.values.iter().map(|&v| pick(v).map(|r| r.mean_wsr)).collect(),
                std: sweep.values.iter().map(|&v| pick(v).map(|r| r.std_wsr)).collect(),
            },
        );
    }
    let plot = SweepPlot {
        axis: sweep.axis.name(),
        values: sweep.values.clone(),
        series,
        failures,
    };
    let path = dir.join("plot.json");
    let f = File::create(&path).map_err(io_err(&path))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &plot)?;
    if !plot.failures.is_empty() {
        eprintln!("{} of {} sweep points failed", plot.failures.len(), sweep.values.len());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct OracleRow {
    sample: usize,
    /// Serving RIS of each user, joined by `-`.
    association: String,
    wsr: f64,
    best: bool,
    nearest: bool,
}

fn oracle_cmd(common: &Common, data: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = common.load()?;
    cfg.require_seed()?;
    let data = read_dataset(data)?;
    let val = data.validation();
    let samples = &val[..val.len().min(cfg.eval_samples)];
    let ao = AoConfig::standard();
    let p = cfg.train.p_max_dbm;
    let tables = crate::par::try_map_range(samples.len(), |j| -> Result<_, CliError> {
        let inst = ProblemInstance::equal_weights(&samples[j], &data.scenario, p)?;
        let bf = brute_force_association(&inst, &ao)?;
        Ok((bf, case_association(&samples[j], CaseMode::Nearest)?))
    })?;
    let mut w = csv::Writer::from_path(out)?;
    let mut hits = 0;
    for (j, (bf, near)) in tables.iter().enumerate() {
        hits += (bf.best.association == *near) as usize;
        for (u, wsr) in &bf.table {
            let association = u.serving().iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-");
            w.serialize(OracleRow {
                sample: j,
                association,
                wsr: *wsr,
                best: *u == bf.best.association,
                nearest: u == near,
            })?;
        }
    }
    w.flush().map_err(io_err(out))?;
    println!(
        "{} samples: the exhaustive optimum is the nearest-RIS association in {} ({:.1}%)",
        samples.len(),
        hits,
        100.0 * hits as f64 / samples.len().max(1) as f64
    );
    Ok(())
}

fn grad_check_cmd(start: u64, seeds: u64, eta: f64) -> Result<(), CliError> {
    let mut worst = 0.0f64;
    for kind in [ModelKind::Gnn, ModelKind::Dnn] {
        for seed in start..start + seeds {
            let r = grad_check(seed, kind, eta)?;
            let verdict = if r.max_rel_err <= TOLERANCE { "ok" } else { "FAIL" };
            println!(
                "{kind:?} seed {seed:>3}: {} entries, max rel err {:.3e} in {} {verdict}",
                r.entries, r.max_rel_err, r.worst
            );
            worst = worst.max(r.max_rel_err);
        }
    }
    if worst > TOLERANCE {
        return Err(CliError::Check(format!("max relative error {worst:.3e} exceeds {TOLERANCE:e}")));
    }
    println!("max relative error {worst:.3e}");
    Ok(())
}
