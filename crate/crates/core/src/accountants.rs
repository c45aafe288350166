//! Privacy accounting for noisy subsampled SGD.
//!
//! Each step with noise scale `σ_t` costs `ε_t = √(2 ln(1.25/δ)) / σ_t` before
//! subsampling and `ln(1 + q(e^{ε_t} − 1))` after it. Totals are accumulated
//! under five rules:
//!
//! | rule  | total                                                             |
//! |-------|-------------------------------------------------------------------|
//! | BaseC | `Σ ε_t`                                                           |
//! | AdvC  | `Σ (e^{ε_t}−1)ε_t/(e^{ε_t}+1) + √(Σ 2ε_t² ln(1/δ))`               |
//! | OptC  | `Σ (e^{ε_t}−1)ε_t/(e^{ε_t}+1) + √(Σ 2ε_t² ln(e + √(Σ ε_t²)/δ))`   |
//! | zCDP  | `Σ q²/σ_t² + 2√(Σ q²/σ_t² · ln(1/δ))`                             |
//! | MA    | Rényi accountant for the subsampled Gaussian, converted at `δ`    |
//!
//! BaseC, AdvC and OptC consume the amplified `ε_t`. All logarithms are natural.
//! Totals are reported at the fixed `δ`; the amplified `qδ` is kept per step
//! but not summed into the headline guarantee.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-5;

/// The five composition rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accountant {
    BaseC,
    AdvC,
    OptC,
    Zcdp,
    Ma,
}

impl Accountant {
    pub const ALL: [Accountant; 5] = [
        Accountant::BaseC,
        Accountant::AdvC,
        Accountant::OptC,
        Accountant::Zcdp,
        Accountant::Ma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Accountant::BaseC => "basec",
            Accountant::AdvC => "advc",
            Accountant::OptC => "optc",
            Accountant::Zcdp => "zcdp",
            Accountant::Ma => "ma",
        }
    }
}

impl fmt::Display for Accountant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Accountant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Accountant::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown accountant `{s}`")))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || sigma.is_nan() {
        return Err(Error::invalid(format!("noise scale must be positive, got {sigma}")));
    }
    Ok(())
}

/// Per-step ε of the Gaussian mechanism with noise scale `sigma`.
pub fn per_step_epsilon(sigma: f64, delta: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_delta(delta)?;
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / sigma)
}

/// Privacy amplification by sampling at rate `q`: returns `(ε', δ')`.
pub fn amplify(eps: f64, delta: f64, q: f64) -> Result<(f64, f64)> {
    check_q(q)?;
    if !(eps >= 0.0) {
        return Err(Error::invalid(format!("epsilon must be non-negative, got {eps}")));
    }
    if q == 1.0 {
        return Ok((eps, delta));
    }
    Ok(((q * eps.exp_m1()).ln_1p(), q * delta))
}

/// `(e^ε − 1)ε / (e^ε + 1)`, the expected-loss term shared by AdvC and OptC.
fn expected_loss_term(eps: f64) -> f64 {
    eps.exp_m1() * eps / (eps.exp() + 1.0)
}

/// True when `q < 1/(16σ)` holds for the smallest σ, the regime in which the
/// MA and zCDP statements are made.
pub fn ma_condition_holds(q: f64, min_sigma: f64) -> bool {
    q < 1.0 / (16.0 * min_sigma)
}

// ---------------------------------------------------------------------------
// Rényi DP of the subsampled Gaussian
// ---------------------------------------------------------------------------

/// Rényi orders used by the MA accountant.
pub fn rdp_orders() -> &'static [f64] {
    use std::sync::OnceLock;
    static ORDERS: OnceLock<Vec<f64>> = OnceLock::new();
    ORDERS.get_or_init(|| {
        let mut orders: Vec<f64> = (0..252).map(|k| 1.25 + 0.25 * k as f64).collect();
        orders.extend((65..=256).map(f64::from));
        orders.extend([320.0, 384.0, 448.0, 512.0, 640.0, 768.0, 896.0, 1024.0]);
        orders.extend([1280.0, 1536.0, 2048.0, 3072.0, 4096.0, 6144.0, 8192.0, 12288.0, 16384.0]);
        orders
    })
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    (a - b).exp_m1().ln() + b
}

/// `ln(erfc(x))`, with an asymptotic expansion once `erfc` would underflow.
fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        return libm::erfc(x).ln();
    }
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
    -x2 - (x * std::f64::consts::PI.sqrt()).ln() + series.ln()
}

fn ln_table() -> &'static [f64] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let max_order = rdp_orders().iter().copied().fold(0.0, f64::max) as usize;
        (0..=max_order + 1).map(|k| (k as f64).ln()).collect()
    })
}

/// `ln A_α` for integer α: `Σ_i C(α,i) q^i (1−q)^{α−i} exp((i²−i)/(2σ²))`.
fn log_a_int(q: f64, sigma: f64, alpha: u64, buf: &mut Vec<f64>) -> f64 {
    let ln = ln_table();
    let ln_odds = q.ln() - (-q).ln_1p();
    let inv_s2 = 1.0 / (sigma * sigma);
    buf.clear();
    // term_0 = α ln(1−q); term_{i+1} = term_i + ln(α−i) − ln(i+1) + ln(q/(1−q)) + i/σ²
    let mut term = alpha as f64 * (-q).ln_1p();
    let mut max = term;
    buf.push(term);
    for i in 0..alpha {
        let k = i as usize;
        term += ln[alpha as usize - k] - ln[k + 1] + ln_odds + i as f64 * inv_s2;
        max = max.max(term);
        buf.push(term);
    }
    let sum: f64 = buf
        .iter()
        .filter(|&&t| t - max > -60.0)
        .map(|t| (t - max).exp())
        .sum();
    max + sum.ln()
}

/// `ln A_α` for fractional α via the two-sided erfc series.
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let sqrt2s = std::f64::consts::SQRT_2 * sigma;
    let mut coef = 1.0_f64;
    let mut i = 0u32;
    loop {
        let fi = f64::from(i);
        let log_coef = coef.abs().ln();
        let j = alpha - fi;
        let log_t0 = log_coef + fi * ln_q + j * ln_1mq;
        let log_t1 = log_coef + j * ln_q + fi * ln_1mq;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / sqrt2s);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / sqrt2s);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        coef *= (alpha - fi) / (fi + 1.0);
        i += 1;
        if log_s0.max(log_s1) < -30.0 || i > 100_000 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// Per-step RDP `ε(α)` of the Gaussian mechanism with noise scale `sigma`
/// subsampled at rate `q`, for every order in [`rdp_orders`].
pub fn subsampled_gaussian_rdp(q: f64, sigma: f64) -> Vec<f64> {
    let orders = rdp_orders();
    let mut buf = Vec::new();
    orders
        .iter()
        .map(|&alpha| {
            if q == 1.0 {
                return alpha / (2.0 * sigma * sigma);
            }
            let log_a = if alpha.fract() == 0.0 {
                log_a_int(q, sigma, alpha as u64, &mut buf)
            } else {
                log_a_frac(q, sigma, alpha)
            };
            log_a / (alpha - 1.0)
        })
        .collect()
}

/// Smallest `ε` over orders for an accumulated RDP curve.
pub fn rdp_to_epsilon(rdp: &[f64], delta: f64) -> f64 {
    let log_inv_delta = (1.0 / delta).ln();
    rdp_orders()
        .iter()
        .zip(rdp)
        .map(|(&alpha, &r)| r + log_inv_delta / (alpha - 1.0))
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

/// Memo of per-step RDP curves keyed by the exact bit pattern of σ.
#[derive(Debug, Clone)]
pub struct RdpCache {
    q: f64,
    curves: HashMap<u64, Arc<Vec<f64>>>,
}

impl RdpCache {
    pub fn new(q: f64) -> Self {
        Self {
            q,
            curves: HashMap::new(),
        }
    }

    pub fn get(&mut self, sigma: f64) -> Arc<Vec<f64>> {
        let q = self.q;
        self.curves
            .entry(sigma.to_bits())
            .or_insert_with(|| Arc::new(subsampled_gaussian_rdp(q, sigma)))
            .clone()
    }

    /// Fills the cache for many σ at once, in parallel when available.
    pub fn prefill(&mut self, sigmas: &[f64]) {
        let mut missing: Vec<f64> = sigmas
            .iter()
            .copied()
            .filter(|s| !self.curves.contains_key(&s.to_bits()))
            .collect();
        missing.sort_by(f64::total_cmp);
        missing.dedup_by(|a, b| a.to_bits() == b.to_bits());
        let q = self.q;
        #[cfg(feature = "parallel")]
        let computed: Vec<(f64, Vec<f64>)> = {
            use rayon::prelude::*;
            missing
                .par_iter()
                .map(|&s| (s, subsampled_gaussian_rdp(q, s)))
                .collect()
        };
        #[cfg(not(feature = "parallel"))]
        let computed: Vec<(f64, Vec<f64>)> = missing
            .iter()
            .map(|&s| (s, subsampled_gaussian_rdp(q, s)))
            .collect();
        for (s, curve) in computed {
            self.curves.insert(s.to_bits(), Arc::new(curve));
        }
    }
}

// ---------------------------------------------------------------------------
// Ledger
// ---------------------------------------------------------------------------

/// One accounted training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub sigma_t: f64,
    pub eps_t: f64,
    pub eps_amp_t: f64,
    pub delta_amp_t: f64,
}

/// Total ε under each rule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub basec: f64,
    pub advc: f64,
    pub optc: f64,
    pub zcdp: f64,
    pub ma: f64,
}

impl Totals {
    pub fn get(&self, method: Accountant) -> f64 {
        match method {
            Accountant::BaseC => self.basec,
            Accountant::AdvC => self.advc,
            Accountant::OptC => self.optc,
            Accountant::Zcdp => self.zcdp,
            Accountant::Ma => self.ma,
        }
    }
}

/// Running sums from which every rule's total is computed in O(#orders).
#[derive(Debug, Clone)]
struct RunningSums {
    steps: usize,
    sum_eps_amp: f64,
    sum_loss_term: f64,
    sum_eps_amp_sq: f64,
    sum_rho: f64,
    rdp: Vec<f64>,
}

impl RunningSums {
    fn new() -> Self {
        Self {
            steps: 0,
            sum_eps_amp: 0.0,
            sum_loss_term: 0.0,
            sum_eps_amp_sq: 0.0,
            sum_rho: 0.0,
            rdp: vec![0.0; rdp_orders().len()],
        }
    }

    fn push(&mut self, q: f64, rec: &StepRecord, rdp_step: &[f64]) {
        self.steps += 1;
        self.sum_eps_amp += rec.eps_amp_t;
        self.sum_loss_term += expected_loss_term(rec.eps_amp_t);
        self.sum_eps_amp_sq += rec.eps_amp_t * rec.eps_amp_t;
        self.sum_rho += q * q / (rec.sigma_t * rec.sigma_t);
        self.rdp.iter_mut().zip(rdp_step).for_each(|(a, b)| *a += b);
    }

    fn epsilon(&self, method: Accountant, delta: f64) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        let log_inv_delta = (1.0 / delta).ln();
        match method {
            Accountant::BaseC => self.sum_eps_amp,
            Accountant::AdvC => {
                self.sum_loss_term + (2.0 * self.sum_eps_amp_sq * log_inv_delta).sqrt()
            }
            Accountant::OptC => {
                let inner = std::f64::consts::E + self.sum_eps_amp_sq.sqrt() / delta;
                self.sum_loss_term + (2.0 * self.sum_eps_amp_sq * inner.ln()).sqrt()
            }
            Accountant::Zcdp => self.sum_rho + 2.0 * (self.sum_rho * log_inv_delta).sqrt(),
            Accountant::Ma => rdp_to_epsilon(&self.rdp, delta),
        }
    }

    fn totals(&self, delta: f64) -> Totals {
        Totals {
            basec: self.epsilon(Accountant::BaseC, delta),
            advc: self.epsilon(Accountant::AdvC, delta),
            optc: self.epsilon(Accountant::OptC, delta),
            zcdp: self.epsilon(Accountant::Zcdp, delta),
            ma: self.epsilon(Accountant::Ma, delta),
        }
    }
}

/// Ordered per-step records plus running totals under all five rules.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    q: f64,
    delta: f64,
    steps: Vec<StepRecord>,
    running: RunningSums,
    history: Vec<Totals>,
    cache: RdpCache,
    min_sigma: f64,
    warned: bool,
}

impl BudgetLedger {
    pub fn new(q: f64, delta: f64) -> Result<Self> {
        check_q(q)?;
        check_delta(delta)?;
        Ok(Self {
            q,
            delta,
            steps: Vec::new(),
            running: RunningSums::new(),
            history: Vec::new(),
            cache: RdpCache::new(q),
            min_sigma: f64::INFINITY,
            warned: false,
        })
    }

    /// Ledger for a whole σ sequence, computing distinct RDP curves up front.
    pub fn from_sigmas(q: f64, delta: f64, sigmas: &[f64]) -> Result<Self> {
        let mut ledger = Self::new(q, delta)?;
        for &s in sigmas {
            check_sigma(s)?;
        }
        ledger.cache.prefill(sigmas);
        for &s in sigmas {
            ledger.record(s)?;
        }
        Ok(ledger)
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn make_record(&self, sigma: f64) -> Result<StepRecord> {
        check_sigma(sigma)?;
        let eps_t = per_step_epsilon(sigma, self.delta)?;
        let (eps_amp_t, delta_amp_t) = amplify(eps_t, self.delta, self.q)?;
        Ok(StepRecord {
            t: self.steps.len(),
            sigma_t: sigma,
            eps_t,
            eps_amp_t,
            delta_amp_t,
        })
    }

    /// Appends one step with noise scale `sigma` and returns its record.
    pub fn record(&mut self, sigma: f64) -> Result<StepRecord> {
        let rec = self.make_record(sigma)?;
        let curve = self.cache.get(sigma);
        self.running.push(self.q, &rec, &curve);
        self.steps.push(rec);
        self.history.push(self.running.totals(self.delta));
        if sigma < self.min_sigma {
            self.min_sigma = sigma;
            if !self.warned && !ma_condition_holds(self.q, sigma) {
                self.warned = true;
                log::warn!(
                    "q = {} is not below 1/(16σ) = {} for σ = {}; MA and zCDP are outside their stated regime",
                    self.q,
                    1.0 / (16.0 * sigma),
                    sigma
                );
            }
        }
        Ok(rec)
    }

    /// Current totals under every rule.
    pub fn totals(&self) -> Totals {
        self.history.last().copied().unwrap_or_default()
    }

    /// Totals after each recorded step (`running_totals()[t]` covers steps `0..=t`).
    pub fn running_totals(&self) -> &[Totals] {
        &self.history
    }

    /// Total under `method` if one more step at `sigma` were recorded.
    pub fn total_if_recorded(&mut self, sigma: f64, method: Accountant) -> Result<f64> {
        let rec = self.make_record(sigma)?;
        let mut sums = self.running.clone();
        let curve = if method == Accountant::Ma {
            self.cache.get(sigma)
        } else {
            Arc::new(vec![0.0; rdp_orders().len()])
        };
        sums.push(self.q, &rec, &curve);
        Ok(sums.epsilon(method, self.delta))
    }

    /// Recomputes totals from the step list alone.
    pub fn recompute_totals(&self) -> Totals {
        let mut cache = RdpCache::new(self.q);
        let mut sums = RunningSums::new();
        for rec in &self.steps {
            let curve = cache.get(rec.sigma_t);
            sums.push(self.q, rec, &curve);
        }
        sums.totals(self.delta)
    }

    /// Column names of the ledger CSV.
    pub fn csv_header() -> Vec<String> {
        ["t", "sigma_t", "eps_t", "eps_amp_t", "basec", "advc", "optc", "zcdp", "ma"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    /// One record per step with running totals, numbers at full precision.
    pub fn csv_records(&self) -> Vec<Vec<String>> {
        self.steps
            .iter()
            .zip(&self.history)
            .map(|(rec, tot)| {
                vec![
                    rec.t.to_string(),
                    rec.sigma_t.to_string(),
                    rec.eps_t.to_string(),
                    rec.eps_amp_t.to_string(),
                    tot.basec.to_string(),
                    tot.advc.to_string(),
                    tot.optc.to_string(),
                    tot.zcdp.to_string(),
                    tot.ma.to_string(),
                ]
            })
            .collect()
    }

    /// Writes `t,sigma_t,eps_t,eps_amp_t,basec,advc,optc,zcdp,ma` with running
    /// totals on every row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::csv_header()).map_err(csv_err)?;
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

fn from_steps(ledger: &BudgetLedger, method: Accountant) -> f64 {
    let mut sums = RunningSums::new();
    let zeros = vec![0.0; rdp_orders().len()];
    for rec in ledger.steps() {
        sums.push(ledger.q, rec, &zeros);
    }
    sums.epsilon(method, ledger.delta)
}

/// Basic composition: `Σ_t ε_t` over amplified per-step losses.
pub fn compose_base(ledger: &BudgetLedger) -> f64 {
    from_steps(ledger, Accountant::BaseC)
}

/// Advanced composition over amplified per-step losses.
pub fn compose_advanced(ledger: &BudgetLedger) -> f64 {
    from_steps(ledger, Accountant::AdvC)
}

/// Optimal composition over amplified per-step losses.
pub fn compose_optimal(ledger: &BudgetLedger) -> f64 {
    from_steps(ledger, Accountant::OptC)
}

fn check_sigma_list(q: f64, sigmas: &[f64], delta: f64) -> Result<()> {
    check_q(q)?;
    check_delta(delta)?;
    if sigmas.is_empty() {
        return Err(Error::invalid("noise scale list is empty"));
    }
    for &s in sigmas {
        check_sigma(s)?;
    }
    let min_sigma = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
    if !ma_condition_holds(q, min_sigma) {
        log::warn!("q = {q} is not below 1/(16σ_min) = {}", 1.0 / (16.0 * min_sigma));
    }
    Ok(())
}

/// zCDP total for a heterogeneous σ sequence.
pub fn compose_zcdp(q: f64, sigmas: &[f64], delta: f64) -> Result<f64> {
    check_sigma_list(q, sigmas, delta)?;
    let rho: f64 = sigmas.iter().fold(0.0, |acc, s| acc + q * q / (s * s));
    Ok(rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt())
}

/// MA total for a heterogeneous σ sequence via the subsampled-Gaussian RDP curve.
pub fn compose_ma(q: f64, sigmas: &[f64], delta: f64) -> Result<f64> {
    check_sigma_list(q, sigmas, delta)?;
    let mut cache = RdpCache::new(q);
    cache.prefill(sigmas);
    let mut acc = vec![0.0; rdp_orders().len()];
    for &s in sigmas {
        let curve = cache.get(s);
        acc.iter_mut().zip(curve.iter()).for_each(|(a, b)| *a += b);
    }
    Ok(rdp_to_epsilon(&acc, delta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_ledger(q: f64, sigma: f64, t: usize) -> BudgetLedger {
        BudgetLedger::from_sigmas(q, DEFAULT_DELTA, &vec![sigma; t]).unwrap()
    }

    #[test]
    fn per_step_epsilon_reference_value() {
        // sqrt(2 ln 125000) / 6, evaluated at 30 digits: 0.80746754376756...
        let e = per_step_epsilon(6.0, 1e-5).unwrap();
        assert!((e - 0.807_467_543_767_56).abs() < 1e-12);
        assert!((per_step_epsilon(3.0, 1e-5).unwrap() - 2.0 * e).abs() < 1e-12);
        assert!(per_step_epsilon(600.0, 1e-5).unwrap() < per_step_epsilon(60.0, 1e-5).unwrap());
    }

    #[test]
    fn per_step_epsilon_rejects_bad_inputs() {
        assert!(per_step_epsilon(0.0, 1e-5).is_err());
        assert!(per_step_epsilon(-1.0, 1e-5).is_err());
        assert!(per_step_epsilon(1.0, 0.0).is_err());
        assert!(per_step_epsilon(1.0, 1.0).is_err());
    }

    #[test]
    fn amplification_values() {
        assert_eq!(amplify(0.7, 1e-5, 1.0).unwrap(), (0.7, 1e-5));
        assert_eq!(amplify(0.0, 1e-5, 0.3).unwrap().0, 0.0);
        let (e, d) = amplify(0.807_467_543_767_56, 1e-5, 0.01).unwrap();
        // ln(1 + 0.01 (e^0.8074675 - 1)) = 0.01234570184...
        assert!((e - 0.012_345_701_841).abs() < 1e-11);
        assert!((d - 1e-7).abs() < 1e-20);
        assert!(amplify(0.5, 1e-5, 0.0).is_err());
        assert!(amplify(0.5, 1e-5, 1.5).is_err());
    }

    #[test]
    fn amplification_never_increases_eps() {
        for &q in &[1e-4, 0.01, 0.2, 0.9, 1.0] {
            for &e in &[1e-3, 0.1, 1.0, 5.0] {
                let (a, _) = amplify(e, 1e-5, q).unwrap();
                assert!(a <= e + 1e-15);
            }
        }
    }

    #[test]
    fn empty_ledger_totals_are_zero() {
        let l = BudgetLedger::new(0.01, 1e-5).unwrap();
        assert_eq!(compose_base(&l), 0.0);
        assert_eq!(compose_advanced(&l), 0.0);
        assert_eq!(l.totals(), Totals::default());
    }

    #[test]
    fn single_step_reductions() {
        let l = constant_ledger(0.01, 6.0, 1);
        let e1 = l.steps()[0].eps_amp_t;
        assert_eq!(compose_base(&l), e1);
        let expected = expected_loss_term(e1) + (2.0 * e1 * e1 * (1e5f64).ln()).sqrt();
        assert!((compose_advanced(&l) - expected).abs() < 1e-15);
    }

    #[test]
    fn ledger_self_consistency() {
        let sigmas: Vec<f64> = (0..300).map(|t| 6.0 - 3.0 * t as f64 / 300.0).collect();
        let l = BudgetLedger::from_sigmas(0.01, 1e-5, &sigmas).unwrap();
        assert_eq!(l.totals(), l.recompute_totals());
        assert_eq!(l.totals().basec, compose_base(&l));
        assert_eq!(l.totals().advc, compose_advanced(&l));
        assert_eq!(l.totals().optc, compose_optimal(&l));
        assert_eq!(l.totals().zcdp, compose_zcdp(0.01, &sigmas, 1e-5).unwrap());
        assert_eq!(l.totals().ma, compose_ma(0.01, &sigmas, 1e-5).unwrap());
    }

    #[test]
    fn total_if_recorded_matches_record() {
        let mut l = constant_ledger(0.02, 4.0, 50);
        for m in Accountant::ALL {
            let predicted = l.clone().total_if_recorded(3.5, m).unwrap();
            let mut after = l.clone();
            after.record(3.5).unwrap();
            assert_eq!(predicted, after.totals().get(m), "{m}");
        }
        l.record(1.0).unwrap();
    }

    #[test]
    fn compose_list_errors() {
        assert!(compose_zcdp(0.01, &[], 1e-5).is_err());
        assert!(compose_ma(0.01, &[], 1e-5).is_err());
        assert!(compose_zcdp(0.01, &[0.0], 1e-5).is_err());
    }

    #[test]
    fn large_sigma_limit() {
        let z = compose_zcdp(0.01, &vec![1e6; 1000], 1e-5).unwrap();
        assert!(z < 1e-3);
        let m = compose_ma(0.01, &vec![1e6; 1000], 1e-5).unwrap();
        assert!(m < 1e-2, "{m}");
    }

    #[test]
    fn unsubsampled_rdp_is_gaussian_rdp() {
        let curve = subsampled_gaussian_rdp(1.0, 2.0);
        for (a, r) in rdp_orders().iter().zip(&curve) {
            assert!((r - a / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_and_fractional_orders_agree_nearby() {
        // the two series are different expansions; neighbouring orders must
        // give nearly the same per-order RDP
        let q = 0.01;
        let sigma = 6.0;
        let curve = subsampled_gaussian_rdp(q, sigma);
        let orders = rdp_orders();
        let at = |a: f64| curve[orders.iter().position(|&o| o == a).unwrap()];
        let (lo, mid, hi) = (at(9.75), at(10.0), at(10.25));
        assert!(lo < mid && mid < hi, "{lo} {mid} {hi}");
        // locally linear in α: the midpoint matches the chord
        assert!(((lo + hi) / 2.0 - mid).abs() / mid < 1e-3, "{lo} {mid} {hi}");
    }

    #[test]
    fn log_erfc_continuity() {
        let below = log_erfc(24.999_999);
        let above = log_erfc(25.0);
        assert!((below - above).abs() < 1e-4, "{below} {above}");
        assert!((log_erfc(0.0) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn parse_accountant_names() {
        assert_eq!("zCDP".parse::<Accountant>().unwrap(), Accountant::Zcdp);
        assert_eq!("MA".parse::<Accountant>().unwrap(), Accountant::Ma);
        assert!("rdp".parse::<Accountant>().is_err());
    }
}
