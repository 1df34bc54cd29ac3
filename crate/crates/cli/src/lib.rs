//! Subcommands of the `cnmm` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cnmm::checkpoint;
use cnmm::config::RunConfig;
use cnmm::data::Dataset;
use cnmm::model::{evaluate, Trainer};
use cnmm::oracle::{run_oracle_checks, OracleOptions};
use cnmm::prune::{count_flops, exit_accuracy, sig9, sweep_csv, tradeoff_sweep};
use cnmm::rng::{stream, Stream};
use cnmm::{Cnmm, Error};

#[derive(Debug, Parser)]
#[command(
    name = "cnmm",
    version,
    about = "Train, evaluate and prune convolutional neural mixture models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic dataset to `<out>/{train,test}.cnmd`.
    GenData(Common),
    /// Train a model; writes model.ckpt, metrics.csv and config.txt.
    Train(Common),
    /// Accuracy of a checkpoint at one classifier, optionally with Monte Carlo sampling.
    Eval(Common),
    /// Accuracy against FLOPs for progressively pruned copies of a checkpoint.
    PruneSweep(Common),
    /// Check the fast mixture arithmetic against explicit enumeration.
    OracleCheck(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// File of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a setting; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Failure of a command, mapped to the process exit status.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and failed (status 1).
    Validation(String),
    /// Bad configuration, unreadable input or unwritable output (status 2).
    Setup(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Setup(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Setup(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Config(_) | Error::Format(_) | Error::Topology(_) => {
                Failure::Setup(e.to_string())
            }
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Setup(format!("{}: {e}", path.display()))
}

impl Common {
    /// Defaults, then the config file, then `--seed`, then every `--set`.
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            cfg.apply_text(&text)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for pair in &self.overrides {
            cfg.set_pair(pair)?;
        }
        Ok(cfg)
    }

    fn prepare(&self) -> Result<RunConfig, Failure> {
        let cfg = self.resolve()?;
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        write(&self.out.join("config.txt"), &cfg.render())?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Runs one command, returning the text it reports on stdout.
pub fn run(cli: &Cli) -> Result<String, Failure> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::PruneSweep(c) => prune_sweep(c),
        Command::OracleCheck(c) => oracle_check(c),
    }
}

fn gen_data(c: &Common) -> Result<String, Failure> {
    let cfg = c.prepare()?;
    let (train, test) = cfg.load_data()?;
    train.save(&c.out.join("train.cnmd"))?;
    test.save(&c.out.join("test.cnmd"))?;
    Ok(format!(
        "wrote {} training and {} test images to {}\n",
        train.len(),
        test.len(),
        c.out.display()
    ))
}

/// Header of the per-epoch metrics file for the given classifier steps.
pub fn metrics_header(exits: &[usize]) -> String {
    let mut h = String::from("epoch,lr,train_loss");
    for e in exits {
        let _ = write!(h, ",train_loss_exit{e}");
    }
    for e in exits {
        let _ = write!(h, ",test_acc_exit{e}");
    }
    h
}

fn train(c: &Common) -> Result<String, Failure> {
    let cfg = c.prepare()?;
    let (train, test) = cfg.load_data()?;
    let (_, h, w) = train.image_shape();
    let topo = cfg.topology((h, w), train.num_classes)?;
    let exits = topo.exits.clone();
    let mut model = Cnmm::new(topo, cfg.seed)?;
    let mut trainer = Trainer::new(cfg.train_config(), &mut model, train.len())?;
    let mut csv = metrics_header(&exits);
    csv.push('\n');
    let mut report = String::new();
    let start = Instant::now();
    for _ in 0..cfg.train.epochs {
        let stats = trainer.train_epoch(&mut model, &train)?;
        let metrics = evaluate(&model, &test, cfg.eval_batch)?;
        let _ = write!(
            csv,
            "{},{},{}",
            stats.epoch,
            sig9(stats.learning_rate),
            sig9(stats.loss)
        );
        for l in &stats.exit_losses {
            let _ = write!(csv, ",{}", sig9(*l));
        }
        for m in &metrics {
            let _ = write!(csv, ",{}", sig9(m.accuracy));
        }
        csv.push('\n');
        let last = metrics.last().map(|m| m.accuracy).unwrap_or(0.0);
        let _ = writeln!(
            report,
            "epoch {:>3}  loss {:.4}  final-exit accuracy {:.4}  ({:.0}s)",
            stats.epoch,
            stats.loss,
            last,
            start.elapsed().as_secs_f64()
        );
    }
    write(&c.out.join("metrics.csv"), &csv)?;
    checkpoint::save(&model, &c.out.join("model.ckpt"))?;
    let _ = writeln!(report, "wrote {}", c.out.join("model.ckpt").display());
    Ok(report)
}

fn load_model(cfg: &RunConfig) -> Result<Cnmm, Failure> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::Setup("no checkpoint given (--set checkpoint=<path>)".into()))?;
    checkpoint::load(path).map_err(|e| Failure::Setup(format!("{}: {e}", path.display())))
}

fn test_split(cfg: &RunConfig, model: &Cnmm) -> Result<Dataset, Failure> {
    let (_, test) = cfg.load_data()?;
    let (c, h, w) = test.image_shape();
    let topo = &model.topology;
    if (c, (h, w)) != (topo.input_channels, topo.input_extent())
        || test.num_classes != topo.num_classes
    {
        return Err(Failure::Setup(format!(
            "dataset of {c}x{h}x{w} images over {} classes does not fit the checkpoint",
            test.num_classes
        )));
    }
    Ok(test)
}

fn eval(c: &Common) -> Result<String, Failure> {
    let cfg = c.prepare()?;
    let model = load_model(&cfg)?;
    let exit = if cfg.exit == 0 {
        model.steps()
    } else {
        cfg.exit
    };
    model
        .topology
        .exit_index(exit)
        .map_err(|e| Failure::Setup(e.to_string()))?;
    let test = test_split(&cfg, &model)?;
    let mode = model.inference_mode();
    let flops = count_flops(&model.topology, &model.table, exit, mode).flops;
    let (accuracy, loss) = exit_accuracy(&model, &test, exit, cfg.eval_batch)?;
    let mut csv = String::from("mode,exit_step,samples,flops,accuracy,loss\n");
    let _ = writeln!(
        csv,
        "expectation,{exit},1,{flops},{},{}",
        sig9(accuracy),
        sig9(loss)
    );
    let mut report = format!(
        "exit {exit}: expectation accuracy {accuracy:.4}, loss {loss:.4}, {flops} FLOPs per image\n"
    );
    if cfg.n_mc > 0 {
        let (mc_acc, mc_loss) =
            monte_carlo_accuracy(&model, &test, exit, cfg.n_mc, cfg.seed, cfg.eval_batch)?;
        let mc_flops = flops * cfg.n_mc as u64;
        let _ = writeln!(
            csv,
            "monte-carlo,{exit},{},{mc_flops},{},{}",
            cfg.n_mc,
            sig9(mc_acc),
            sig9(mc_loss)
        );
        let _ = writeln!(
            report,
            "exit {exit}: Monte Carlo accuracy {mc_acc:.4} with N = {}, {mc_flops} FLOPs per image",
            cfg.n_mc
        );
    }
    write(&c.out.join("eval.csv"), &csv)?;
    Ok(report)
}

/// Accuracy and mean cross-entropy of the `n`-sample Monte Carlo prediction.
pub fn monte_carlo_accuracy(
    model: &Cnmm,
    data: &Dataset,
    exit: usize,
    n: usize,
    seed: u64,
    batch_size: usize,
) -> Result<(f64, f64), Error> {
    let mut rng = stream(seed, Stream::Gates);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut correct, mut loss) = (0usize, 0.0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk)?;
        let p = model.predict_monte_carlo(&images, exit, n, &mut rng)?.mean;
        let k = p.shape()[1];
        for (row, &y) in p.data().chunks(k).zip(&labels) {
            let best = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            correct += usize::from(best == y);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
    }
    let total = data.len() as f64;
    Ok((correct as f64 / total, loss / total))
}

fn prune_sweep(c: &Common) -> Result<String, Failure> {
    let cfg = c.prepare()?;
    let model = load_model(&cfg)?;
    let test = test_split(&cfg, &model)?;
    let levels = if cfg.levels.is_empty() {
        (0..=model.table.num_free()).collect()
    } else {
        cfg.levels.clone()
    };
    let exits = model.topology.exits.clone();
    let rows = tradeoff_sweep(&model, &test, &levels, &exits, cfg.eval_batch)?;
    write(&c.out.join("sweep.csv"), &sweep_csv(&rows))?;
    Ok(format!(
        "wrote {} operating points to {}\n",
        rows.len(),
        c.out.join("sweep.csv").display()
    ))
}

fn oracle_check(c: &Common) -> Result<String, Failure> {
    let cfg = c.prepare()?;
    let opts = OracleOptions {
        steps: cfg.oracle_steps,
        trials: cfg.trials,
        seed: cfg.seed,
        fault: (cfg.inject_fault != 0.0).then_some(cfg.inject_fault),
    };
    let report = run_oracle_checks(&opts).map_err(|e| Failure::Setup(e.to_string()))?;
    let mut text = String::new();
    for check in &report.checks {
        let _ = writeln!(
            text,
            "{}  {}  (max error {:.3e}, tolerance {:.0e})",
            if check.passed() { "PASS" } else { "FAIL" },
            check.name,
            check.max_error,
            check.tolerance
        );
    }
    write(&c.out.join("oracle.txt"), &text)?;
    if report.passed() {
        Ok(text)
    } else {
        Err(Failure::Validation(text))
    }
}
