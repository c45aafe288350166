//! The DP-SGD training loop with dynamic clipping, sensitivity and noise
//! scale.
//!
//! One iteration at step `t`:
//!
//! 1. sample `B` indices with replacement (`q = B/N`);
//! 2. compute per-example gradients `∇L_i` and clip each layer at `C_t`;
//! 3. compute the sensitivity `S_t` of the clipped batch;
//! 4. sanitise: `∇̃ = (1/B)(Σ_i clip(∇L_i) + N(0, σ_t² S_t²))`, with the noise
//!    for layer `m` drawn from the stream keyed by `(seed, noise, t, m)`;
//! 5. `W ← W − η ∇̃` and record `σ_t` in the privacy ledger.
//!
//! Noise is added to the clipped sum, so the perturbation of the averaged
//! gradient has standard deviation `σ_t S_t / B`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::accountants::{Accountant, BudgetLedger, Totals, DEFAULT_DELTA};
use crate::datasets::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, init_mlp_with, Activation, GradientSet, MlpModel};
use crate::ndcore::{fill_gaussian, par_map, par_try_for_each_mut, Purpose, RngStream};
use crate::policies::{
    clip_in_place, sensitivity, DecaySchedule, Sensitivity, SensitivityKind, SensitivityScope,
    SensitivityStrategy,
};

/// Upper limit on the noise scale derived in fixed-variance mode.
const MAX_DERIVED_SIGMA: f64 = 1e6;

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySpec {
    pub clip: DecaySchedule,
    pub sigma: DecaySchedule,
    pub sensitivity: SensitivityStrategy,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// When set, every layer receives noise of exactly this standard
    /// deviation and `σ_t := ς / S_t`, overriding the σ schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_variance: Option<f64>,
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        self.sigma.validate()?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if let Some(v) = self.fixed_variance {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("fixed noise variance must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Noise scale for step `t` given the step's sensitivity.
    pub fn sigma_at(&self, t: usize, s: &Sensitivity) -> f64 {
        match self.fixed_variance {
            Some(v) => {
                let s_max = s.max();
                if s_max > 0.0 {
                    (v / s_max).min(MAX_DERIVED_SIGMA)
                } else {
                    MAX_DERIVED_SIGMA
                }
            }
            None => self.sigma.value(t),
        }
    }

    /// Per-layer noise standard deviations for step `t`.
    pub fn noise_stddevs(&self, sigma_t: f64, s: &Sensitivity) -> Vec<f64> {
        match self.fixed_variance {
            Some(v) => vec![v; s.per_layer.len()],
            None => s.per_layer.iter().map(|&sm| sigma_t * sm).collect(),
        }
    }
}

/// The training variants compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NonPrivate,
    /// Constant `C` and `σ`, sensitivity `C`.
    Baseline,
    /// Clipping bound decays linearly to `C₀/2`; sensitivity `C_t`.
    DynSDecay,
    /// Constant `C`, sensitivity = largest clipped norm in the batch.
    DynSL2Max,
    /// l2-max sensitivity under the decaying clipping bound.
    DynS,
    /// Constant `C`, exponentially decaying `σ`.
    DynSigma,
    /// l2-max sensitivity, decaying clipping bound and decaying `σ`.
    DynSSigma,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::NonPrivate,
        Method::Baseline,
        Method::DynSDecay,
        Method::DynSL2Max,
        Method::DynS,
        Method::DynSigma,
        Method::DynSSigma,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::NonPrivate => "non-private",
            Method::Baseline => "DP-baseline",
            Method::DynSDecay => "DP-dynS[C_decay]",
            Method::DynSL2Max => "DP-dynS[l2-max]",
            Method::DynS => "DP-dynS",
            Method::DynSigma => "DP-dynSigma",
            Method::DynSSigma => "DP-dyn[S,sigma]",
        }
    }

    /// Privacy settings for this variant, or `None` for non-private training.
    pub fn spec(self, p: &PresetParams) -> Result<Option<PrivacySpec>> {
        let const_clip = DecaySchedule::constant(p.c0)?;
        let decay_clip = DecaySchedule::linear_to(p.c0, p.c0 / 2.0, p.horizon)?;
        let const_sigma = DecaySchedule::constant(p.sigma0)?;
        let sigma_floor = p.sigma_floor.min(p.sigma0);
        let decay_sigma =
            DecaySchedule::exponential_to(p.sigma0, p.sigma0 * p.sigma_decay_ratio, p.horizon, sigma_floor)?;
        let (clip, sigma, kind) = match self {
            Method::NonPrivate => return Ok(None),
            Method::Baseline => (const_clip, const_sigma, SensitivityKind::FixedC),
            Method::DynSDecay => (decay_clip, const_sigma, SensitivityKind::FixedC),
            Method::DynSL2Max => (const_clip, const_sigma, SensitivityKind::L2Max),
            Method::DynS => (decay_clip, const_sigma, SensitivityKind::Combined),
            Method::DynSigma => (const_clip, decay_sigma, SensitivityKind::FixedC),
            Method::DynSSigma => (decay_clip, decay_sigma, SensitivityKind::Combined),
        };
        let spec = PrivacySpec {
            clip,
            sigma,
            sensitivity: SensitivityStrategy::new(kind, SensitivityScope::PerLayer),
            delta: p.delta,
            fixed_variance: None,
        };
        spec.validate()?;
        Ok(Some(spec))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Shared parameters for [`Method::spec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresetParams {
    pub c0: f64,
    pub sigma0: f64,
    /// Iteration at which decaying schedules reach their target.
    pub horizon: usize,
    /// Decaying σ reaches `sigma0 · sigma_decay_ratio` at the horizon.
    pub sigma_decay_ratio: f64,
    pub sigma_floor: f64,
    pub delta: f64,
}

impl Default for PresetParams {
    fn default() -> Self {
        Self {
            c0: 4.0,
            sigma0: 6.0,
            horizon: 10_000,
            sigma_decay_ratio: 0.5,
            sigma_floor: 1.0,
            delta: DEFAULT_DELTA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Termination {
    #[default]
    MaxIters,
    TargetAccuracy { target: f64 },
    Budget { method: Accountant, epsilon: f64 },
}

/// Which per-example gradients to leak, and at which iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpSpec {
    pub iteration: usize,
    pub targets: Vec<usize>,
}

fn default_lr() -> f64 {
    0.1
}

fn default_eval_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub max_iters: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub termination: Termination,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump: Option<DumpSpec>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        if self.layer_sizes.len() < 3 {
            return Err(Error::invalid("layer_sizes needs at least three entries"));
        }
        match self.termination {
            Termination::TargetAccuracy { target } if !(0.0..=1.0).contains(&target) => {
                Err(Error::invalid(format!("target accuracy must lie in [0, 1], got {target}")))
            }
            Termination::Budget { epsilon, .. } if !(epsilon > 0.0) => {
                Err(Error::invalid(format!("privacy budget must be positive, got {epsilon}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum TerminationReason {
    MaxIters,
    TargetReached,
    TargetNotReached,
    BudgetExhausted,
}

/// One logged training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub t: usize,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub clip: Option<f64>,
    pub sigma: Option<f64>,
    pub sensitivity: Vec<f64>,
    /// Largest per-layer noise standard deviation `ς_t = σ_t S_t`.
    pub noise_stddev: Option<f64>,
    pub epsilon: Option<Totals>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Option<Method>,
    pub iterations: usize,
    pub termination: TerminationReason,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub sampling_rate: f64,
    /// Totals after the last executed step (zero for non-private runs).
    pub epsilon: Totals,
    /// Iteration at which the target accuracy was first met.
    pub target_iteration: Option<usize>,
    pub rows: Vec<IterationRow>,
}

impl TrainReport {
    fn csv_layers(&self) -> usize {
        self.rows.iter().map(|r| r.sensitivity.len()).max().unwrap_or(0)
    }

    /// Column names of the per-iteration CSV.
    pub fn csv_header(&self) -> Vec<String> {
        let mut header: Vec<String> = ["t", "train_loss", "eval_accuracy", "c_t", "sigma_t"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..self.csv_layers()).map(|m| format!("s_{m}")));
        header.extend(
            ["noise_stddev", "basec", "advc", "optc", "zcdp", "ma"]
                .iter()
                .map(|s| s.to_string()),
        );
        header
    }

    /// One record per logged iteration, numbers at full precision.
    pub fn csv_records(&self) -> Vec<Vec<String>> {
        let layers = self.csv_layers();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.rows
            .iter()
            .map(|r| {
                let mut rec = vec![
                    r.t.to_string(),
                    r.train_loss.to_string(),
                    opt(r.eval_accuracy),
                    opt(r.clip),
                    opt(r.sigma),
                ];
                rec.extend((0..layers).map(|m| opt(r.sensitivity.get(m).copied())));
                rec.push(opt(r.noise_stddev));
                for a in Accountant::ALL {
                    rec.push(opt(r.epsilon.map(|e| e.get(a))));
                }
                rec
            })
            .collect()
    }

    /// Per-iteration CSV with full floating-point precision.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header()).map_err(csv_err)?;
        for rec in self.csv_records() {
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// One leaked per-example gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpTarget {
    pub index: usize,
    pub label: usize,
    /// Ground-truth input, kept for scoring reconstructions.
    pub input: Vec<f64>,
    pub gradient: GradientSet,
    pub noise_stddev: Vec<f64>,
}

/// Model snapshot plus sanitised single-example gradients at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientDump {
    pub iteration: usize,
    pub model: MlpModel,
    pub targets: Vec<DumpTarget>,
}

impl GradientDump {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: MlpModel,
    pub ledger: Option<BudgetLedger>,
    pub dump: Option<GradientDump>,
}

/// Gaussian noise for step `t`: layer `m` gets `N(0, stddevs[m]²)` from the
/// stream keyed by `(seed, noise, t, m)`.
pub fn step_noise(seed: u64, t: usize, stddevs: &[f64], like: &GradientSet) -> GradientSet {
    noise_with_key(seed, t as u64, 0, stddevs, like)
}

fn noise_with_key(seed: u64, t: u64, layer_offset: u64, stddevs: &[f64], like: &GradientSet) -> GradientSet {
    let mut out = like.clone();
    for m in 0..out.num_layers() {
        let mut rng = RngStream::new(seed, Purpose::Noise, t, layer_offset + m as u64);
        let layer = out.layer_mut(m);
        fill_gaussian(&mut rng, stddevs[m], layer.weight.as_mut_slice());
        fill_gaussian(&mut rng, stddevs[m], layer.bias.as_mut_slice());
    }
    out
}

/// Layer-key offset used for leaked single-example gradients so that their
/// noise never coincides with the training noise of the same iteration.
fn dump_layer_offset(target_slot: usize) -> u64 {
    (1u64 << 32) + (target_slot as u64) * 1024
}

/// Sum of gradients in ascending order.
fn sum_in_order(grads: &[GradientSet]) -> Result<GradientSet> {
    let mut acc = grads[0].clone();
    for g in &grads[1..] {
        acc.add_assign(g)?;
    }
    Ok(acc)
}

struct Sanitised {
    gradient: GradientSet,
    sensitivity: Sensitivity,
    clip: f64,
    sigma: f64,
    stddevs: Vec<f64>,
}

/// Clip, measure sensitivity, and add noise to the sum of `raw` gradients,
/// returning the sanitised average.
fn sanitise(
    spec: &PrivacySpec,
    t: usize,
    mut clipped: Vec<GradientSet>,
    noise: impl FnOnce(&[f64], &GradientSet) -> GradientSet,
) -> Result<Sanitised> {
    let clip = spec.clip.value(t);
    par_try_for_each_mut(&mut clipped, |g| clip_in_place(g, clip))?;
    let s = sensitivity(&spec.sensitivity, &clipped, clip)?;
    let sigma = spec.sigma_at(t, &s);
    let stddevs = spec.noise_stddevs(sigma, &s);
    let mut gradient = sum_in_order(&clipped)?;
    gradient.add_assign(&noise(&stddevs, &gradient))?;
    gradient.scale_in_place(1.0 / clipped.len() as f64);
    Ok(Sanitised {
        gradient,
        sensitivity: s,
        clip,
        sigma,
        stddevs,
    })
}

fn make_dump(
    model: &MlpModel,
    ds: &Dataset,
    spec: Option<&PrivacySpec>,
    dump: &DumpSpec,
    seed: u64,
) -> Result<GradientDump> {
    let mut targets = Vec::with_capacity(dump.targets.len());
    for (slot, &index) in dump.targets.iter().enumerate() {
        if index >= ds.len() {
            return Err(Error::invalid(format!("dump target {index} out of range")));
        }
        let (x, label) = ds.example(index);
        let raw = model.example_gradient(x, label)?;
        let (gradient, noise_stddev) = match spec {
            None => (raw, vec![0.0; model.num_layers()]),
            Some(spec) => {
                let s = sanitise(spec, dump.iteration, vec![raw], |sd, like| {
                    noise_with_key(seed, dump.iteration as u64, dump_layer_offset(slot), sd, like)
                })?;
                (s.gradient, s.stddevs)
            }
        };
        targets.push(DumpTarget {
            index,
            label,
            input: x.to_vec(),
            gradient,
            noise_stddev,
        });
    }
    Ok(GradientDump {
        iteration: dump.iteration,
        model: model.clone(),
        targets,
    })
}

/// Trains on `train`, evaluating on `eval`. `spec = None` trains without
/// privacy (plain averaged gradients).
pub fn train(
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    spec: Option<&PrivacySpec>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(spec) = spec {
        spec.validate()?;
    }
    if cfg.layer_sizes[0] != train.num_features() {
        return Err(Error::ShapeMismatch {
            expected: vec![train.num_features()],
            actual: vec![cfg.layer_sizes[0]],
        });
    }
    if *cfg.layer_sizes.last().unwrap_or(&0) < train.num_classes() {
        return Err(Error::invalid(format!(
            "output layer has {} units but the data has {} classes",
            cfg.layer_sizes.last().unwrap_or(&0),
            train.num_classes()
        )));
    }
    let b = cfg.batch_size;
    if b == 0 || b > train.len() {
        return Err(Error::invalid(format!("batch size {b} must lie in [1, {}]", train.len())));
    }
    let q = b as f64 / train.len() as f64;
    let mut model = init_mlp_with(&cfg.layer_sizes, cfg.activation, &mut RngStream::new(cfg.seed, Purpose::Init, 0, 0))?;
    let mut ledger = match spec {
        Some(s) => Some(BudgetLedger::new(q, s.delta)?),
        None => None,
    };
    let mut rows = Vec::new();
    let mut dump = None;
    let mut termination = TerminationReason::MaxIters;
    let mut target_iteration = None;
    let mut last_eval = None;

    for t in 0..cfg.max_iters {
        if let Some(d) = &cfg.dump {
            if d.iteration == t {
                dump = Some(make_dump(&model, train, spec, d, cfg.seed)?);
            }
        }
        let batch = sample_batch(train, b, &mut RngStream::new(cfg.seed, Purpose::Sampling, t as u64, 0))?;
        let raw = par_map(b, |i| {
            let (x, y) = train.example(batch.indices[i]);
            model.scaled_gradient(x, y, 1.0)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let train_loss = raw.iter().map(|r| r.1).sum::<f64>() / b as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                message: format!("training loss became {train_loss}"),
            });
        }
        let grads: Vec<GradientSet> = raw.into_iter().map(|r| r.0).collect();

        let (update, mut row) = match spec {
            None => {
                let mut g = sum_in_order(&grads)?;
                g.scale_in_place(1.0 / b as f64);
                let row = IterationRow {
                    t,
                    train_loss,
                    eval_accuracy: None,
                    clip: None,
                    sigma: None,
                    sensitivity: Vec::new(),
                    noise_stddev: None,
                    epsilon: None,
                };
                (g, row)
            }
            Some(spec) => {
                let s = sanitise(spec, t, grads, |sd, like| step_noise(cfg.seed, t, sd, like))?;
                let ledger = ledger.as_mut().expect("private runs keep a ledger");
                if let Termination::Budget { method, epsilon } = cfg.termination {
                    if ledger.total_if_recorded(s.sigma, method)? > epsilon {
                        termination = TerminationReason::BudgetExhausted;
                        break;
                    }
                }
                ledger.record(s.sigma)?;
                let row = IterationRow {
                    t,
                    train_loss,
                    eval_accuracy: None,
                    clip: Some(s.clip),
                    sigma: Some(s.sigma),
                    sensitivity: s.sensitivity.per_layer.clone(),
                    noise_stddev: Some(s.stddevs.iter().copied().fold(0.0, f64::max)),
                    epsilon: Some(ledger.totals()),
                };
                (s.gradient, row)
            }
        };
        model.apply_update(&update, cfg.learning_rate)?;
        if !model.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                message: "model parameters became non-finite".into(),
            });
        }

        let done = t + 1;
        let last = done == cfg.max_iters;
        if done % cfg.eval_every == 0 || last {
            let e = evaluate(&model, eval)?;
            row.eval_accuracy = Some(e.accuracy);
            last_eval = Some((done, e));
            rows.push(row);
            if let Termination::TargetAccuracy { target } = cfg.termination {
                if e.accuracy >= target {
                    termination = TerminationReason::TargetReached;
                    target_iteration = Some(done);
                    break;
                }
                if last {
                    termination = TerminationReason::TargetNotReached;
                }
            }
        } else {
            rows.push(row);
        }
    }

    let iterations = rows.len();
    let final_eval = match last_eval {
        Some((at, e)) if at == iterations => e,
        _ => evaluate(&model, eval)?,
    };
    if let Some(row) = rows.last_mut() {
        row.eval_accuracy.get_or_insert(final_eval.accuracy);
    }
    let epsilon = ledger.as_ref().map(BudgetLedger::totals).unwrap_or_default();
    Ok(TrainOutcome {
        report: TrainReport {
            method: None,
            iterations,
            termination,
            final_accuracy: final_eval.accuracy,
            final_loss: final_eval.mean_loss,
            sampling_rate: q,
            epsilon,
            target_iteration,
            rows,
        },
        model,
        ledger,
        dump,
    })
}

/// DP training evaluated on the training set.
pub fn train_dp(ds: &Dataset, cfg: &TrainConfig, spec: &PrivacySpec) -> Result<TrainOutcome> {
    train(ds, ds, cfg, Some(spec))
}

/// Trains until evaluation accuracy reaches `target` (or `max_iters`).
pub fn run_until_accuracy(
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &TrainConfig,
    spec: &PrivacySpec,
    target: f64,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.termination = Termination::TargetAccuracy { target };
    train(train_ds, eval_ds, &cfg, Some(spec))
}

/// Trains until the next step would push `method`'s total past `epsilon`.
pub fn run_until_budget(
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &TrainConfig,
    spec: &PrivacySpec,
    method: Accountant,
    epsilon: f64,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.termination = Termination::Budget { method, epsilon };
    train(train_ds, eval_ds, &cfg, Some(spec))
}

/// Trains with a method preset; non-private presets skip the privacy machinery.
pub fn train_method(
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &TrainConfig,
    method: Method,
    params: &PresetParams,
) -> Result<TrainOutcome> {
    let spec = method.spec(params)?;
    let mut out = train(train_ds, eval_ds, cfg, spec.as_ref())?;
    out.report.method = Some(method);
    Ok(out)
}
