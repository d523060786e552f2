use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use maelre::attention::FeatureMap;
use maelre::checks::{gradcheck_suite, oracle_suite, Check, Module};
use maelre::cost::{compare_schedules, emit_table, model_cost, CountingConvention, TableFormat};
use maelre::encoder::{checkpoint, AttentionPolicy, EncoderConfig, Model};
use maelre::experiment::Experiment;
use maelre::manifest::Manifest;
use maelre::par::Execution;
use maelre::reduction::MergeKind;
use maelre::train::{self, EpochRecord, Metrics, TaskKind};
use maelre::{Error, Result};

#[derive(Parser)]
#[command(name = "maelre", version, about = "Long-range encoder: training, evaluation, cost model and self-checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic task and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        policy: Option<AttentionPolicy>,
        #[arg(long)]
        merge: Option<MergeKind>,
        #[arg(long)]
        psi: Option<FeatureMap>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run per-sample work on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Evaluate a checkpoint on the held-out split of a task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskKind,
        /// Seed of the data split; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analytic FLOP and memory accounting at a given stem token count.
    Cost {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokens: usize,
        /// One row each for mixed, alldot, allapprox and noreduction.
        #[arg(long)]
        compare: bool,
        /// csv or markdown.
        #[arg(long, default_value = "csv")]
        format: TableFormat,
    },
    /// Central-difference gradient checks; exits nonzero above tolerance.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: Module,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Randomized attention and convolution oracle equivalence suites.
    Oracle {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn metrics_line(m: &Metrics) -> String {
    format!("top1={:.4} ebf={:.4} mif={:.4}", m.top1, m.ebf, m.mif)
}

fn run_train(
    config: &Path,
    task: TaskKind,
    out: &Path,
    overrides: (Option<AttentionPolicy>, Option<MergeKind>, Option<FeatureMap>, Option<u64>),
    sequential: bool,
) -> Result<()> {
    let mut m = Manifest::load(config)?;
    let (policy, merge, psi, seed) = overrides;
    if let Some(p) = policy {
        m.set("policy", p);
    }
    if let Some(k) = merge {
        m.set("merge", k);
    }
    if let Some(f) = psi {
        m.set("psi", f);
    }
    let mut exp = Experiment::from_manifest(&m, task)?;
    if let Some(s) = seed {
        exp = exp.with_seed(s);
    }
    if sequential {
        exp.train.exec = Execution::Sequential;
    }
    let (train_set, test_set) = train::split(&exp.task, exp.data_seed(), exp.train.n_train, exp.train.n_test, exp.train.exec)?;
    let mut model = Model::<f32>::build(&exp.encoder, exp.model_seed())?;
    eprintln!(
        "training {} params on {} ({} train / {} test), policy {}, merge {}, psi {}",
        model.param_count(),
        task,
        train_set.len(),
        test_set.len(),
        exp.encoder.policy,
        exp.encoder.merge,
        exp.encoder.psi,
    );
    let test = (!test_set.is_empty()).then_some(&test_set);
    let report = |e: &EpochRecord| {
        let m = e.test.map_or(String::new(), |m| metrics_line(&m));
        println!("epoch={} loss={:.6} lr={:.3e} {m} seconds={:.1}", e.epoch, e.loss, e.lr, e.seconds);
    };
    let history = train::train_with(&mut model, &train_set, test, &exp.train, Some(out), report)?;
    eprintln!("wrote {} after {} epochs ({} steps)", out.display(), history.epochs.len(), history.steps);
    Ok(())
}

fn run_eval(dir: &Path, task: TaskKind, seed: Option<u64>) -> Result<()> {
    let (model, m) = checkpoint::load::<f32>(dir)?;
    let mut exp = Experiment::from_checkpoint(&m, task)?;
    if let Some(s) = seed {
        exp = exp.with_seed(s);
    }
    let test = train::generate(&exp.task, exp.data_seed(), exp.train.n_train, exp.train.n_test, Execution::default())?;
    let metrics = train::evaluate(&model, &test, Execution::default())?;
    println!("{} samples={}", metrics_line(&metrics), test.len());
    Ok(())
}

fn run_cost(config: &Path, tokens: usize, compare: bool, format: TableFormat) -> Result<()> {
    let mut m = Manifest::load(config)?;
    if !m.contains("num_classes") {
        m.set("num_classes", 2);
    }
    let mut cfg = EncoderConfig::from_manifest(&m)?;
    cfg.stem = cfg.stem.with_tokens(tokens)?;
    let conv = CountingConvention::default();
    let reports = if compare {
        compare_schedules(&cfg, conv)?
    } else {
        vec![model_cost(&cfg, conv)?]
    };
    print!("{}", emit_table(&reports, format)?);
    Ok(())
}

fn report_checks(checks: &[Check]) -> ExitCode {
    for c in checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    println!("{} checks, {failed} failed, max error {worst:.3e}", checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, task, out, policy, merge, psi, seed, sequential } => {
            run_train(&config, task, &out, (policy, merge, psi, seed), sequential)?
        }
        Command::Eval { checkpoint, task, seed } => run_eval(&checkpoint, task, seed)?,
        Command::Cost { config, tokens, compare, format } => run_cost(&config, tokens, compare, format)?,
        Command::Gradcheck { module, seed } => return gradcheck_suite(module, seed).map(|c| report_checks(&c)),
        Command::Oracle { trials, seed } => {
            if trials == 0 {
                return Err(Error::Config("--trials must be positive".into()));
            }
            return oracle_suite(trials, seed).map(|c| report_checks(&c));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
