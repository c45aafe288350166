//! `dpdyn` command-line tool: train with a privacy preset, attack a gradient
//! dump, tabulate privacy accountants, or run a full experiment config.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 malformed
//! input data, 4 file-system errors, 5 runtime failures such as divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpdyn::accountants::BudgetLedger;
use dpdyn::attack::{evaluate_resilience, AttackConfig};
use dpdyn::harness::{
    compare_accountants, run_experiment_in, to_rounded_json, ExperimentConfig, Protocol,
};
use dpdyn::policies::DecaySchedule;
use dpdyn::trainer::{train, GradientDump, Method};
use dpdyn::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dpdyn", version, about = "Differentially private SGD with dynamic privacy parameters")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the seed in the config.
    #[arg(long, global = true, env = "DPDYN_SEED")]
    seed: Option<u64>,
    /// Output directory [default: the config's `output`, else `out`].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its logs, checkpoint and optional gradient dump.
    Train(TrainArgs),
    /// Reconstruct inputs from a gradient dump.
    Attack(AttackArgs),
    /// Total ε under every accountant for a noise schedule.
    Account(AccountArgs),
    /// Run every job described by the config.
    Experiment,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Method preset to train with, e.g. `baseline` or `dyn_s_sigma`.
    /// Defaults to the first method in the config, then its custom privacy spec.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Gradient dump written by `train`.
    #[arg(long)]
    dump: PathBuf,
    /// Comma-separated dataset indices to attack; all dumped targets by default.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<usize>,
    /// Input shape such as `28,28`; defaults to a flat vector.
    #[arg(long, value_delimiter = ',')]
    shape: Vec<usize>,
    /// Iteration cap.
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct AccountArgs {
    /// Sampling rate.
    #[arg(long)]
    q: Option<f64>,
    /// Constant noise scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Number of iterations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, default_value_t = dpdyn::accountants::DEFAULT_DELTA)]
    delta: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(cli, args),
        Command::Attack(args) => cmd_attack(cli, args),
        Command::Account(args) => cmd_account(cli, args),
        Command::Experiment => cmd_experiment(cli),
    }
}

fn usage(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: msg.into(),
    }
}

/// Loads the config and applies the seed override.
fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| usage("--config", "this command needs a config file"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let (Some(seed), Some(train)) = (cli.seed, cfg.train.as_mut()) {
        train.seed = seed;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn parse_method(name: &str) -> Result<Method> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| usage("--method", format!("unknown method `{name}`")))
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let tc = cfg.train.clone().ok_or_else(|| usage("train", "missing training section"))?;
    let dataset = cfg.dataset.as_ref().ok_or_else(|| usage("dataset", "missing dataset"))?;
    let (label, spec) = match (&args.method, cfg.methods.first(), &cfg.privacy) {
        (Some(name), _, _) => {
            let m = parse_method(name)?;
            (m.label().to_string(), m.spec(&cfg.preset)?)
        }
        (None, Some(m), _) => (m.label().to_string(), m.spec(&cfg.preset)?),
        (None, None, Some(p)) => ("custom".to_string(), Some(p.clone())),
        (None, None, None) => return Err(usage("methods", "no method to train")),
    };
    let ds = dataset.load(Some(&base))?;
    let (train_ds, eval_ds) = ds.split(cfg.split)?;
    let out = train(&train_ds, &eval_ds, &tc, spec.as_ref())?;
    let dir = out_dir(cli)?;

    std::fs::write(dir.join("report.json"), to_rounded_json(&out.report)?)?;
    out.report.write_csv(std::fs::File::create(dir.join("iterations.csv"))?)?;
    if let Some(ledger) = &out.ledger {
        ledger.write_csv(std::fs::File::create(dir.join("ledger.csv"))?)?;
    }
    out.model.save_checkpoint(dir.join("model.json"))?;
    if let Some(dump) = &out.dump {
        dump.save(dir.join("dump.json"))?;
    }
    let e = out.report.epsilon;
    println!(
        "{label}: {} iterations, accuracy {:.4}, epsilon zcdp {:.4} ma {:.4}",
        out.report.iterations, out.report.final_accuracy, e.zcdp, e.ma
    );
    Ok(())
}

fn cmd_attack(cli: &Cli, args: &AttackArgs) -> Result<()> {
    let dump = GradientDump::load(&args.dump)?;
    let mut cfg = match &cli.config {
        Some(_) => match load_config(cli)?.0.protocol {
            Protocol::Resilience { attack, .. } => attack,
            _ => AttackConfig::default(),
        },
        None => AttackConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(m) = args.max_iters {
        cfg.max_iters = m;
    }
    let targets: Vec<usize> = if args.targets.is_empty() {
        dump.targets.iter().map(|t| t.index).collect()
    } else {
        args.targets.clone()
    };
    let shape = if args.shape.is_empty() {
        vec![dump.model.input_dim()]
    } else {
        args.shape.clone()
    };
    let (report, inputs) = evaluate_resilience(&dump, &targets, &shape, &cfg)?;
    let dir = out_dir(cli)?;
    let body = serde_json::json!({ "report": report, "reconstructions": inputs });
    std::fs::write(dir.join("attack.json"), serde_json::to_string(&body)?)?;
    std::fs::write(dir.join("report.json"), to_rounded_json(&report)?)?;
    println!(
        "ASR {} over {} targets, mean iterations {}",
        report.asr.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
        report.rows.len(),
        report.mean_iterations.map(|v| format!("{v:.1}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn cmd_account(cli: &Cli, args: &AccountArgs) -> Result<()> {
    let (q, schedule, iterations, delta) = match (&cli.config, args.q, args.sigma, args.iterations) {
        (_, Some(q), Some(sigma), Some(t)) => (q, DecaySchedule::constant(sigma)?, t, args.delta),
        (Some(_), _, _, _) => match load_config(cli)?.0.protocol {
            Protocol::AccountantTable {
                q,
                sigma,
                iterations,
                delta,
            } => (q, sigma, iterations, delta),
            _ => return Err(usage("protocol", "account needs an accountant_table protocol")),
        },
        _ => return Err(usage("--q", "give --q, --sigma and --iterations, or a config")),
    };
    let rows = compare_accountants(q, &schedule, delta, iterations)?;
    let dir = out_dir(cli)?;
    std::fs::write(dir.join("report.json"), to_rounded_json(&rows)?)?;
    if iterations > 0 {
        let sigmas: Vec<f64> = (0..iterations).map(|t| schedule.value(t)).collect();
        BudgetLedger::from_sigmas(q, delta, &sigmas)?
            .write_csv(std::fs::File::create(dir.join("ledger.csv"))?)?;
    }
    for r in &rows {
        println!("{:<6} {:.6}", r.accountant.name(), r.epsilon);
    }
    Ok(())
}

fn cmd_experiment(cli: &Cli) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let report = run_experiment_in(&cfg, Some(&base))?;
    let dir = match (&cli.out, &cfg.output) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => PathBuf::from("out"),
    };
    for path in report.write_outputs(&dir)? {
        println!("wrote {}", path.display());
    }
    for row in &report.table {
        let acc = row.accountant.map(|a| a.name()).unwrap_or("");
        println!("{:<20} {:<6} {:<18} {:.6} ± {:.6} (n={})", row.arm, acc, row.metric, row.mean, row.std, row.n);
    }
    Ok(())
}
