//! Experiment orchestration: JSON configs, the four evaluation protocols plus
//! a pure accounting table, and report emission.
//!
//! A config names a dataset, a training setup, the methods to compare and a
//! protocol. [`run_experiment`] expands it into one job per
//! (method, accountant, seed), runs the jobs, and aggregates the per-seed
//! records into table rows that can always be recomputed from those records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountants::{Accountant, BudgetLedger, Totals, DEFAULT_DELTA};
use crate::attack::{evaluate_resilience, AttackConfig, AttackReport};
use crate::datasets::{load_csv, load_idx, synth_attributes, Dataset};
use crate::error::{Error, Result};
use crate::ndcore::par_map;
use crate::policies::DecaySchedule;
use crate::trainer::{
    train, DumpSpec, Method, PresetParams, PrivacySpec, Termination, TerminationReason,
    TrainConfig, TrainReport,
};

/// Where the examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        num_features: usize,
        num_classes: usize,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` examples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
    Csv { path: PathBuf },
}

impl DatasetSpec {
    /// Loads the data, resolving relative paths against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<Dataset> {
        let resolve = |p: &Path| match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        };
        match self {
            DatasetSpec::Synthetic {
                n,
                num_features,
                num_classes,
                seed,
            } => synth_attributes(*n, *num_features, *num_classes, *seed),
            DatasetSpec::Idx {
                images,
                labels,
                limit,
            } => {
                let ds = load_idx(resolve(images), resolve(labels))?;
                match limit {
                    Some(l) if *l < ds.len() => ds.subset(&(0..*l).collect::<Vec<_>>()),
                    _ => Ok(ds),
                }
            }
            DatasetSpec::Csv { path } => load_csv(resolve(path)),
        }
    }
}

fn all_accountants() -> Vec<Accountant> {
    Accountant::ALL.to_vec()
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

/// The evaluation protocol and the fields it requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    /// Train until the next step would exceed `epsilon` under each accountant.
    AccAtBudget {
        epsilon: f64,
        #[serde(default = "all_accountants")]
        accountants: Vec<Accountant>,
    },
    /// Train with the configured σ schedule until `target_accuracy`.
    PrivacyAtAccFixedSigma { target_accuracy: f64 },
    /// Train with per-layer noise of standard deviation `noise_stddev`
    /// (σ derived per step) until `target_accuracy`.
    PrivacyAtAccFixedVariance {
        target_accuracy: f64,
        noise_stddev: f64,
    },
    /// Leak sanitised single-example gradients at `dump_iteration` and
    /// attack them.
    Resilience {
        dump_iteration: usize,
        targets: Vec<usize>,
        #[serde(default)]
        attack: AttackConfig,
    },
    /// Pure accounting over a σ schedule; no data or training.
    AccountantTable {
        q: f64,
        sigma: DecaySchedule,
        iterations: usize,
        #[serde(default = "default_delta")]
        delta: f64,
    },
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::AccAtBudget { .. } => "acc_at_budget",
            Protocol::PrivacyAtAccFixedSigma { .. } => "privacy_at_acc_fixed_sigma",
            Protocol::PrivacyAtAccFixedVariance { .. } => "privacy_at_acc_fixed_variance",
            Protocol::Resilience { .. } => "resilience",
            Protocol::AccountantTable { .. } => "accountant_table",
        }
    }

    fn trains(&self) -> bool {
        !matches!(self, Protocol::AccountantTable { .. })
    }
}

fn default_split() -> f64 {
    0.8
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    /// Fraction of the data used for training; the rest is the evaluation set.
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Method presets to compare.
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub preset: PresetParams,
    /// An extra, fully custom privacy setup run under the label `custom`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacySpec>,
    pub protocol: Protocol,
    /// Number of seeds; defaults to 3 for training protocols and 1 for the
    /// accountant table. Seed `r` is `train.seed + r`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    /// Directory for report files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses JSON, reporting the failing field path on error.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn repeats(&self) -> usize {
        self.repeats
            .unwrap_or(if self.protocol.trains() { 3 } else { 1 })
    }

    /// Checks protocol-required fields and value ranges.
    pub fn validate(&self) -> Result<()> {
        if self.repeats == Some(0) {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        if let Protocol::AccountantTable {
            q,
            sigma,
            delta,
            ..
        } = &self.protocol
        {
            if !(*q > 0.0 && *q <= 1.0) {
                return Err(Error::config("protocol.accountant_table.q", format!("must lie in (0, 1], got {q}")));
            }
            if !(*delta > 0.0 && *delta < 1.0) {
                return Err(Error::config("protocol.accountant_table.delta", format!("must lie in (0, 1), got {delta}")));
            }
            sigma
                .validate()
                .map_err(|e| Error::config("protocol.accountant_table.sigma", e.to_string()))?;
            return Ok(());
        }

        if self.dataset.is_none() {
            return Err(Error::config("dataset", format!("required by protocol {}", self.protocol.name())));
        }
        let train = self
            .train
            .as_ref()
            .ok_or_else(|| Error::config("train", format!("required by protocol {}", self.protocol.name())))?;
        train.validate().map_err(|e| Error::config("train", e.to_string()))?;
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::config("split", format!("must lie in (0, 1), got {}", self.split)));
        }
        if self.methods.is_empty() && self.privacy.is_none() {
            return Err(Error::config("methods", "name at least one method or give a custom privacy spec"));
        }
        self.preset_specs()?;
        if let Some(p) = &self.privacy {
            p.validate().map_err(|e| Error::config("privacy", e.to_string()))?;
        }

        let needs_noise = !matches!(self.protocol, Protocol::PrivacyAtAccFixedSigma { .. } | Protocol::Resilience { .. });
        if needs_noise {
            if let Some(i) = self.methods.iter().position(|m| *m == Method::NonPrivate) {
                return Err(Error::config(
                    format!("methods[{i}]"),
                    format!("non_private has no privacy cost to use in protocol {}", self.protocol.name()),
                ));
            }
        }
        match &self.protocol {
            Protocol::AccAtBudget { epsilon, accountants } => {
                if !(*epsilon > 0.0) {
                    return Err(Error::config("protocol.acc_at_budget.epsilon", format!("must be positive, got {epsilon}")));
                }
                if accountants.is_empty() {
                    return Err(Error::config("protocol.acc_at_budget.accountants", "must not be empty"));
                }
            }
            Protocol::PrivacyAtAccFixedSigma { target_accuracy } => {
                check_target(self.protocol.name(), *target_accuracy)?
            }
            Protocol::PrivacyAtAccFixedVariance {
                target_accuracy,
                noise_stddev,
            } => {
                check_target(self.protocol.name(), *target_accuracy)?;
                if !(*noise_stddev > 0.0) || !noise_stddev.is_finite() {
                    return Err(Error::config(
                        "protocol.privacy_at_acc_fixed_variance.noise_stddev",
                        format!("must be positive, got {noise_stddev}"),
                    ));
                }
            }
            Protocol::Resilience { targets, attack, .. } => {
                if targets.is_empty() {
                    return Err(Error::config("protocol.resilience.targets", "must not be empty"));
                }
                attack
                    .validate()
                    .map_err(|e| Error::config("protocol.resilience.attack", e.to_string()))?;
            }
            Protocol::AccountantTable { .. } => unreachable!("handled above"),
        }
        Ok(())
    }

    fn preset_specs(&self) -> Result<Vec<Option<PrivacySpec>>> {
        self.methods
            .iter()
            .enumerate()
            .map(|(i, m)| {
                m.spec(&self.preset)
                    .map_err(|e| Error::config(format!("methods[{i}]"), e.to_string()))
            })
            .collect()
    }

    /// The compared configurations: one per method preset, plus `custom`.
    fn arms(&self) -> Result<Vec<(String, Option<PrivacySpec>)>> {
        let mut arms: Vec<(String, Option<PrivacySpec>)> = self
            .methods
            .iter()
            .zip(self.preset_specs()?)
            .map(|(m, spec)| (m.label().to_string(), spec))
            .collect();
        if let Some(p) = &self.privacy {
            arms.push(("custom".into(), Some(p.clone())));
        }
        if let Protocol::PrivacyAtAccFixedVariance { noise_stddev, .. } = self.protocol {
            for (_, spec) in &mut arms {
                if let Some(s) = spec {
                    s.fixed_variance = Some(noise_stddev);
                }
            }
        }
        Ok(arms)
    }
}

fn check_target(protocol: &str, target: f64) -> Result<()> {
    if (0.0..=1.0).contains(&target) {
        Ok(())
    } else {
        Err(Error::config(
            format!("protocol.{protocol}.target_accuracy"),
            format!("must lie in [0, 1], got {target}"),
        ))
    }
}

/// Total ε under one accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountantRow {
    pub accountant: Accountant,
    pub epsilon: f64,
}

/// Totals after `iterations` steps at sampling rate `q` with noise scale
/// `sigma.value(t)` at step `t`. Zero steps cost nothing.
pub fn compare_accountants(
    q: f64,
    sigma: &DecaySchedule,
    delta: f64,
    iterations: usize,
) -> Result<Vec<AccountantRow>> {
    let totals = if iterations == 0 {
        Totals::default()
    } else {
        let sigmas: Vec<f64> = (0..iterations).map(|t| sigma.value(t)).collect();
        BudgetLedger::from_sigmas(q, delta, &sigmas)?.totals()
    };
    Ok(Accountant::ALL
        .iter()
        .map(|&a| AccountantRow {
            accountant: a,
            epsilon: totals.get(a),
        })
        .collect())
}

/// Outcome of one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accountant: Option<Accountant>,
    pub seed: u64,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<TerminationReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_iteration: Option<usize>,
    pub epsilon: Totals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackReport>,
}

/// Full-precision logs behind a [`RunRecord`].
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub train: Option<TrainReport>,
    pub ledger: Option<BudgetLedger>,
    pub reconstructions: Vec<Vec<f64>>,
}

/// One aggregate cell: `metric` for an arm (and accountant) over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accountant: Option<Accountant>,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub table: Vec<TableRow>,
    #[serde(skip)]
    pub logs: Vec<RunLog>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Metric values a record contributes to the table.
fn record_metrics(r: &RunRecord, protocol: &Protocol) -> Vec<(String, Option<Accountant>, f64)> {
    let mut out = Vec::new();
    match protocol {
        Protocol::AccAtBudget { .. } => {
            if let Some(acc) = r.final_accuracy {
                out.push(("accuracy".into(), r.accountant, acc));
            }
            out.push(("iterations".into(), r.accountant, r.iterations as f64));
        }
        Protocol::PrivacyAtAccFixedSigma { .. } | Protocol::PrivacyAtAccFixedVariance { .. } => {
            out.push(("iterations".into(), None, r.iterations as f64));
            let reached = matches!(r.termination, Some(TerminationReason::TargetReached));
            out.push(("reached".into(), None, if reached { 1.0 } else { 0.0 }));
            for a in Accountant::ALL {
                out.push(("epsilon".into(), Some(a), r.epsilon.get(a)));
            }
        }
        Protocol::Resilience { .. } => {
            if let Some(acc) = r.final_accuracy {
                out.push(("accuracy".into(), None, acc));
            }
            if let Some(a) = &r.attack {
                if let Some(v) = a.asr {
                    out.push(("asr".into(), None, v));
                }
                if let Some(v) = a.mean_iterations {
                    out.push(("attack_iterations".into(), None, v));
                }
                if let Some(v) = a.mean_mse {
                    out.push(("attack_mse".into(), None, v));
                }
            }
        }
        Protocol::AccountantTable { .. } => {
            for a in Accountant::ALL {
                out.push(("epsilon".into(), Some(a), r.epsilon.get(a)));
            }
        }
    }
    out
}

/// Aggregates per-seed records into table rows, in first-seen order.
pub fn aggregate(runs: &[RunRecord], protocol: &Protocol) -> Vec<TableRow> {
    let mut keys: Vec<(String, Option<Accountant>, String)> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in runs {
        for (metric, accountant, v) in record_metrics(r, protocol) {
            let key = (r.arm.clone(), accountant, metric);
            match keys.iter().position(|k| *k == key) {
                Some(i) => values[i].push(v),
                None => {
                    keys.push(key);
                    values.push(vec![v]);
                }
            }
        }
    }
    keys.into_iter()
        .zip(values)
        .map(|((arm, accountant, metric), vals)| {
            let (mean, std) = mean_std(&vals);
            TableRow {
                arm,
                accountant,
                metric,
                n: vals.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Rounds to six significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_value(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_sig6(x)) {
                    *n = r;
                }
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_value),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

fn write_prefixed_csv(
    path: &Path,
    header: Vec<String>,
    blocks: impl Iterator<Item = (Vec<String>, Vec<Vec<String>>)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut full = vec!["run".to_string(), "arm".into(), "accountant".into(), "seed".into()];
    full.extend(header);
    w.write_record(&full).map_err(csv_err)?;
    for (prefix, rows) in blocks {
        for row in rows {
            w.write_record(prefix.iter().chain(&row)).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Serialize)]
struct AttackEntry<'a> {
    run: usize,
    arm: &'a str,
    seed: u64,
    report: &'a AttackReport,
    reconstructions: &'a [Vec<f64>],
}

/// Pretty JSON with every floating-point number rounded to six significant digits.
pub fn to_rounded_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    Ok(serde_json::to_string_pretty(&v)?)
}

impl ExperimentReport {
    /// Report JSON with every number rounded to six significant digits.
    pub fn to_report_json(&self) -> Result<String> {
        to_rounded_json(self)
    }

    fn prefix(&self, i: usize) -> Vec<String> {
        let r = &self.runs[i];
        vec![
            i.to_string(),
            r.arm.clone(),
            r.accountant.map(|a| a.name().to_string()).unwrap_or_default(),
            r.seed.to_string(),
        ]
    }

    /// Writes `report.json`, `iterations.csv`, `ledger.csv` and, for
    /// resilience runs, `attack.json` into `dir`. Returns the written paths.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();

        let report = dir.join("report.json");
        std::fs::write(&report, self.to_report_json()?)?;
        written.push(report);

        let header = self
            .logs
            .iter()
            .find_map(|l| l.train.as_ref().map(TrainReport::csv_header));
        if let Some(header) = header {
            let path = dir.join("iterations.csv");
            let blocks = self.logs.iter().enumerate().filter_map(|(i, l)| {
                l.train.as_ref().map(|t| (self.prefix(i), t.csv_records()))
            });
            write_prefixed_csv(&path, header, blocks)?;
            written.push(path);
        }

        if self.logs.iter().any(|l| l.ledger.is_some()) {
            let path = dir.join("ledger.csv");
            let blocks = self.logs.iter().enumerate().filter_map(|(i, l)| {
                l.ledger.as_ref().map(|g| (self.prefix(i), g.csv_records()))
            });
            write_prefixed_csv(&path, BudgetLedger::csv_header(), blocks)?;
            written.push(path);
        }

        let attacks: Vec<AttackEntry> = self
            .runs
            .iter()
            .zip(&self.logs)
            .enumerate()
            .filter_map(|(i, (r, l))| {
                r.attack.as_ref().map(|report| AttackEntry {
                    run: i,
                    arm: &r.arm,
                    seed: r.seed,
                    report,
                    reconstructions: &l.reconstructions,
                })
            })
            .collect();
        if !attacks.is_empty() {
            let path = dir.join("attack.json");
            let mut f = BufWriter::new(File::create(&path)?);
            serde_json::to_writer(&mut f, &attacks)?;
            f.flush()?;
            written.push(path);
        }
        Ok(written)
    }
}

struct Job {
    arm: usize,
    accountant: Option<Accountant>,
    seed: u64,
}

/// Runs the experiment with data loaded from `cfg.dataset` (relative paths
/// resolved against the working directory).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_in(cfg, None)
}

/// Like [`run_experiment`], resolving relative data paths against `base`.
pub fn run_experiment_in(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    if let Protocol::AccountantTable {
        q,
        sigma,
        iterations,
        delta,
    } = &cfg.protocol
    {
        let rows = compare_accountants(*q, sigma, *delta, *iterations)?;
        let mut totals = Totals::default();
        for r in &rows {
            match r.accountant {
                Accountant::BaseC => totals.basec = r.epsilon,
                Accountant::AdvC => totals.advc = r.epsilon,
                Accountant::OptC => totals.optc = r.epsilon,
                Accountant::Zcdp => totals.zcdp = r.epsilon,
                Accountant::Ma => totals.ma = r.epsilon,
            }
        }
        let ledger = if *iterations > 0 {
            let sigmas: Vec<f64> = (0..*iterations).map(|t| sigma.value(t)).collect();
            Some(BudgetLedger::from_sigmas(*q, *delta, &sigmas)?)
        } else {
            None
        };
        let runs = vec![RunRecord {
            arm: "schedule".into(),
            accountant: None,
            seed: 0,
            iterations: *iterations,
            termination: None,
            final_accuracy: None,
            target_iteration: None,
            epsilon: totals,
            attack: None,
        }];
        let table = aggregate(&runs, &cfg.protocol);
        return Ok(ExperimentReport {
            config: cfg.clone(),
            runs,
            table,
            logs: vec![RunLog {
                train: None,
                ledger,
                reconstructions: Vec::new(),
            }],
        });
    }

    let ds = cfg
        .dataset
        .as_ref()
        .expect("validated")
        .load(base)?;
    let (train_ds, eval_ds) = ds.split(cfg.split)?;
    let base_train = cfg.train.as_ref().expect("validated");
    let arms = cfg.arms()?;

    let mut jobs = Vec::new();
    for arm in 0..arms.len() {
        let accountants: Vec<Option<Accountant>> = match &cfg.protocol {
            Protocol::AccAtBudget { accountants, .. } => accountants.iter().copied().map(Some).collect(),
            _ => vec![None],
        };
        for accountant in accountants {
            for r in 0..cfg.repeats() {
                jobs.push(Job {
                    arm,
                    accountant,
                    seed: base_train.seed.wrapping_add(r as u64),
                });
            }
        }
    }

    let results = par_map(jobs.len(), |i| {
        let job = &jobs[i];
        let (label, spec) = &arms[job.arm];
        run_job(cfg, base_train, &train_ds, &eval_ds, label, spec.as_ref(), job)
    });
    let mut runs = Vec::with_capacity(results.len());
    let mut logs = Vec::with_capacity(results.len());
    for res in results {
        let (record, log) = res?;
        runs.push(record);
        logs.push(log);
    }
    let table = aggregate(&runs, &cfg.protocol);
    Ok(ExperimentReport {
        config: cfg.clone(),
        runs,
        table,
        logs,
    })
}

fn run_job(
    cfg: &ExperimentConfig,
    base_train: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    label: &str,
    spec: Option<&PrivacySpec>,
    job: &Job,
) -> Result<(RunRecord, RunLog)> {
    let mut tc = base_train.clone();
    tc.seed = job.seed;
    match &cfg.protocol {
        Protocol::AccAtBudget { epsilon, .. } => {
            let method = job.accountant.expect("budget jobs name an accountant");
            tc.termination = Termination::Budget {
                method,
                epsilon: *epsilon,
            };
        }
        Protocol::PrivacyAtAccFixedSigma { target_accuracy }
        | Protocol::PrivacyAtAccFixedVariance {
            target_accuracy, ..
        } => {
            tc.termination = Termination::TargetAccuracy {
                target: *target_accuracy,
            };
        }
        Protocol::Resilience {
            dump_iteration,
            targets,
            ..
        } => {
            tc.termination = Termination::MaxIters;
            tc.max_iters = dump_iteration + 1;
            tc.dump = Some(DumpSpec {
                iteration: *dump_iteration,
                targets: targets.clone(),
            });
        }
        Protocol::AccountantTable { .. } => unreachable!("no training jobs"),
    }
    let out = train(train_ds, eval_ds, &tc, spec)?;

    let (attack, reconstructions) = match &cfg.protocol {
        Protocol::Resilience { targets, attack, .. } => {
            let dump = out
                .dump
                .as_ref()
                .ok_or_else(|| Error::MissingDump(format!("no dump recorded for {label}")))?;
            let mut acfg = attack.clone();
            acfg.seed = job.seed;
            let (report, inputs) = evaluate_resilience(dump, targets, train_ds.feature_shape(), &acfg)?;
            (Some(report), inputs)
        }
        _ => (None, Vec::new()),
    };
    let record = RunRecord {
        arm: label.to_string(),
        accountant: job.accountant,
        seed: job.seed,
        iterations: out.report.iterations,
        termination: Some(out.report.termination.clone()),
        final_accuracy: Some(out.report.final_accuracy),
        target_iteration: out.report.target_iteration,
        epsilon: out.report.epsilon,
        attack,
    };
    let log = RunLog {
        train: Some(out.report),
        ledger: out.ledger,
        reconstructions,
    };
    Ok((record, log))
}
