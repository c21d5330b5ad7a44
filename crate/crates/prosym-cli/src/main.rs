//! Experiment driver. Runs one task per invocation and appends one JSONL
//! metrics record per line to `--out` (stdout when omitted).
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical divergence.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use prosym::distribution::DistributionMode;
use prosym::error::Error;
use prosym::train::{
    self, ExperimentRecord, RunConfig, TaskName,
};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    /// Count unseparated graph pairs at random initialization.
    Separate,
    /// Train on the circulant skip-link classification task.
    ClassifyCsl,
    /// Train the product-group transformer on particle dynamics.
    Nbody,
    /// Classification plus entropy/variance diagnostics.
    Diagnose,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    /// Learned input-conditional distribution.
    Ps,
    /// Uniform group averaging.
    Ga,
    /// Deterministic canonicalization (zero noise).
    Canon,
}

#[derive(Parser, Debug)]
#[command(
    name = "prosym",
    about = "Probabilistic symmetrization experiments",
    version
)]
struct Cli {
    #[arg(long, value_enum)]
    task: TaskArg,

    /// Sampling mode of the symmetrization distribution.
    #[arg(long, value_enum, default_value = "ps")]
    mode: ModeArg,

    #[arg(long)]
    seed: u64,

    /// Monte-Carlo samples per training step.
    #[arg(long)]
    train_samples: Option<usize>,

    /// Monte-Carlo samples at evaluation time.
    #[arg(long)]
    eval_samples: Option<usize>,

    /// Sinkhorn temperature.
    #[arg(long)]
    tau: Option<f64>,

    /// Noise scale.
    #[arg(long)]
    eta: Option<f64>,

    #[arg(long)]
    epochs: Option<usize>,

    /// Optimization steps (n-body task).
    #[arg(long)]
    steps: Option<usize>,

    #[arg(long)]
    batch_size: Option<usize>,

    #[arg(long)]
    lr: Option<f64>,

    /// Metrics output path (JSONL, appended). Stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Dataset cache base path (".bin"/".json" are appended).
    #[arg(long)]
    cache: Option<PathBuf>,

    /// graph6 corpus for the separation task (one graph per line).
    #[arg(long)]
    graphs_file: Option<PathBuf>,

    /// Log/evaluate every this many epochs or steps.
    #[arg(long)]
    eval_every: Option<usize>,

    /// Nodes for the circulant classification task.
    #[arg(long)]
    csl_nodes: Option<usize>,

    /// Relabeled copies per class.
    #[arg(long)]
    csl_per_class: Option<usize>,

    /// Restore full-width base model sizes.
    #[arg(long, default_value_t = false)]
    paper_scale: bool,

    /// Skip the plain-GIN control during classification.
    #[arg(long, default_value_t = false)]
    no_gin_baseline: bool,
}

fn build_config(cli: &Cli) -> RunConfig {
    let task = match cli.task {
        TaskArg::Separate => TaskName::Separate,
        TaskArg::ClassifyCsl => TaskName::ClassifyCsl,
        TaskArg::Nbody => TaskName::Nbody,
        TaskArg::Diagnose => TaskName::Diagnose,
    };
    let mut cfg = RunConfig::for_task(task, cli.seed);
    cfg.mode = match cli.mode {
        ModeArg::Ps => DistributionMode::LearnedPs,
        ModeArg::Ga => DistributionMode::UniformGa,
        ModeArg::Canon => DistributionMode::Canonical,
    };
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = cli.$field.clone() {
                cfg.$field = v.into();
            }
        };
    }
    set!(train_samples);
    set!(eval_samples);
    set!(tau);
    set!(eta);
    set!(epochs);
    set!(steps);
    set!(batch_size);
    set!(lr);
    set!(eval_every);
    set!(csl_nodes);
    set!(csl_per_class);
    cfg.out = cli.out.clone();
    cfg.cache = cli.cache.clone();
    cfg.graphs_file = cli.graphs_file.clone();
    cfg.paper_scale = cli.paper_scale;
    cfg.with_gin_baseline = !cli.no_gin_baseline;
    cfg
}

enum SinkTarget {
    Stdout,
    File(std::io::BufWriter<std::fs::File>),
}

impl SinkTarget {
    fn open(path: &Option<PathBuf>) -> Result<Self, Error> {
        match path {
            None => Ok(SinkTarget::Stdout),
            Some(p) => {
                if let Some(parent) = p.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent)?;
                    }
                }
                let file = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
                Ok(SinkTarget::File(std::io::BufWriter::new(file)))
            }
        }
    }

    fn write(&mut self, record: &ExperimentRecord) -> Result<(), Error> {
        let line = serde_json::to_string(record)?;
        match self {
            SinkTarget::Stdout => {
                println!("{line}");
                Ok(())
            }
            SinkTarget::File(f) => {
                writeln!(f, "{line}")?;
                Ok(())
            }
        }
    }

    fn flush(&mut self) -> Result<(), Error> {
        if let SinkTarget::File(f) = self {
            f.flush()?;
        }
        Ok(())
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = build_config(cli);
    cfg.validate()?;
    let mut target = SinkTarget::open(&cfg.out)?;
    let mut sink = |r: &ExperimentRecord| target.write(r);
    match cfg.task {
        TaskName::Separate => {
            let outcome = train::run_separation(&cfg, &mut sink)?;
            drop(sink);
            target.flush()?;
            eprintln!(
                "separation over {} graphs: unseparated pairs {:?}",
                outcome.n_graphs, outcome.unseparated
            );
        }
        TaskName::ClassifyCsl => {
            let outcome = train::run_classification(&cfg, &mut sink)?;
            drop(sink);
            target.flush()?;
            eprintln!(
                "classification done: test accuracy {:.3}, val {:.3} -> {:.3}, entropy {:.3} -> {:.3}",
                outcome.final_test_accuracy,
                outcome.epoch0_val_accuracy,
                outcome.final_val_accuracy,
                outcome.initial_entropy,
                outcome.final_entropy,
            );
        }
        TaskName::Nbody => {
            let outcome = train::run_nbody(&cfg, &mut sink)?;
            drop(sink);
            target.flush()?;
            eprintln!(
                "nbody done: train MSE {:.5} -> {:.5}, val MSE {:.5}",
                outcome.initial_train_mse, outcome.final_train_mse, outcome.final_val_mse
            );
        }
        TaskName::Diagnose => {
            let outcome = train::run_diagnose(&cfg, &mut sink)?;
            drop(sink);
            target.flush()?;
            eprintln!(
                "diagnose done: test accuracy {:.3}, variance by budget {:?}",
                outcome.classification.final_test_accuracy, outcome.variance_by_budget
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Divergence(msg)) => {
            eprintln!("numerical divergence: {msg}");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
