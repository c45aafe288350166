//! Gradient-leakage reconstruction.
//!
//! Given a frozen model and a leaked gradient, a dummy input `x` is optimised
//! so that its own gradient matches the leaked one under the squared ℓ₂
//! distance
//!
//! ```text
//! D(x) = Σ_l ‖h_{l-1} δ_lᵀ − Ĝ_l‖² + ‖δ_l − ĝ_l‖²
//! ```
//!
//! where `h_{l-1}` is the input to layer `l` and `δ_l` its backpropagated
//! error. `∂D/∂x` is computed exactly by differentiating through the
//! backward pass: the residuals feed adjoints into every `h_{l-1}` and `δ_l`,
//! the `δ` adjoints flow from the first layer to the last along the error
//! recursion, cross the softmax Jacobian at the logits, and then return down
//! the forward pass. The error recursion multiplies by `φ'(z)`, so smooth
//! activations add a `φ''(z)` term to the pre-activation adjoints; for ReLU
//! that term vanishes almost everywhere.
//!
//! The optimiser is L-BFGS (two-loop recursion) with a backtracking Armijo
//! line search. A reconstruction counts as a success when its final
//! per-pixel MSE against the ground truth is below the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, MlpModel};
use crate::ndcore::{dot, par_map, Purpose, RngStream, Tensor};
use crate::trainer::GradientDump;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedKind {
    #[default]
    PatternedRandom,
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub max_iters: usize,
    pub threshold: f64,
    pub seed_kind: SeedKind,
    pub seed: u64,
    pub history: usize,
    pub armijo_c: f64,
    pub max_backtracks: usize,
    /// Stop once `D` falls below this value.
    pub tolerance: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            threshold: 0.70,
            seed_kind: SeedKind::PatternedRandom,
            seed: 0,
            history: 10,
            armijo_c: 1e-4,
            max_backtracks: 40,
            tolerance: 1e-16,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::invalid(format!("attack threshold must be positive, got {}", self.threshold)));
        }
        if self.history == 0 {
            return Err(Error::invalid("L-BFGS history must be at least 1"));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::invalid(format!("Armijo constant must lie in (0, 1), got {}", self.armijo_c)));
        }
        Ok(())
    }
}

/// Side length of the repeating tile used by [`patterned_seed`].
const TILE: usize = 4;

/// Starting point for reconstruction: a `4 × 4` tile of random levels
/// repeated over the image, averaged with per-pixel uniform noise. All values
/// lie in `[0, 1]`.
pub fn patterned_seed(shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    let (rows, cols) = match shape {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        other => return Err(Error::invalid(format!("unsupported seed shape {other:?}"))),
    };
    let tile: Vec<f64> = (0..TILE * TILE).map(|_| rng.next_f64()).collect();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let pattern = tile[(i % TILE) * TILE + j % TILE];
            data.push(0.5 * pattern + 0.5 * rng.next_f64());
        }
    }
    Tensor::new(shape.to_vec(), data)
}

pub fn uniform_seed(shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.next_f64()).collect())
}

/// `Σ` of squared coordinate differences across all layers.
pub fn gradient_distance(g_dummy: &GradientSet, g_leaked: &GradientSet) -> Result<f64> {
    g_dummy.distance_sq(g_leaked)
}

/// Per-pixel mean squared error.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// `D(x)` and `∂D/∂x` for the averaged gradient of a batch of dummies
/// (`xs.len() = B`, each gradient carrying a `1/B` prefactor).
pub fn distance_and_input_grad(
    model: &MlpModel,
    xs: &[Vec<f64>],
    labels: &[usize],
    leaked: &GradientSet,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(Error::invalid("need one label per dummy input"));
    }
    let reference = GradientSet::zeros_like(model);
    if !reference.is_congruent(leaked) {
        return Err(Error::ShapeMismatch {
            expected: model.layer_sizes(),
            actual: leaked.layers().iter().map(|l| l.bias.len()).collect(),
        });
    }
    let scale = 1.0 / xs.len() as f64;
    let layers = model.layers();
    let m = layers.len();

    let act = model.activation();

    // Forward and backward passes for every dummy. `ups[l]` keeps `W_l δ_l`,
    // the quantity the activation derivative multiplies in the error recursion.
    let mut traces = Vec::with_capacity(xs.len());
    let mut deltas: Vec<Vec<Vec<f64>>> = Vec::with_capacity(xs.len());
    let mut ups: Vec<Vec<Vec<f64>>> = Vec::with_capacity(xs.len());
    let mut probs = Vec::with_capacity(xs.len());
    for (x, &y) in xs.iter().zip(labels) {
        if y >= model.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: model.num_classes(),
            });
        }
        let trace = model.trace(x)?;
        let logits = &trace.pre[m - 1];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let mut d = vec![Vec::new(); m];
        let mut u = vec![Vec::new(); m];
        d[m - 1] = p
            .iter()
            .enumerate()
            .map(|(j, &pj)| scale * (pj - if j == y { 1.0 } else { 0.0 }))
            .collect();
        for l in (1..m).rev() {
            u[l] = layers[l].weight.matvec(&d[l])?;
            d[l - 1] = u[l]
                .iter()
                .zip(&trace.pre[l - 1])
                .map(|(&g, &z)| g * act.derivative(z))
                .collect();
        }
        traces.push(trace);
        deltas.push(d);
        ups.push(u);
        probs.push(p);
    }

    // Residuals of the averaged gradient: R_l = Σ_b h_{l-1}^b δ_l^bᵀ − Ĝ_l.
    let mut distance = 0.0;
    let mut h_adj: Vec<Vec<Vec<f64>>> = Vec::with_capacity(xs.len());
    let mut d_adj: Vec<Vec<Vec<f64>>> = Vec::with_capacity(xs.len());
    for _ in 0..xs.len() {
        h_adj.push((0..m).map(|l| vec![0.0; layers[l].fan_in()]).collect());
        d_adj.push((0..m).map(|l| vec![0.0; layers[l].fan_out()]).collect());
    }
    for l in 0..m {
        let (fan_in, fan_out) = (layers[l].fan_in(), layers[l].fan_out());
        let target_w = leaked.layer(l).weight.as_slice();
        let target_b = leaked.layer(l).bias.as_slice();
        let mut residual = target_w.iter().map(|v| -v).collect::<Vec<f64>>();
        for b in 0..xs.len() {
            let h = &traces[b].inputs[l];
            let d = &deltas[b][l];
            for i in 0..fan_in {
                if h[i] != 0.0 {
                    let row = &mut residual[i * fan_out..(i + 1) * fan_out];
                    for (r, &dj) in row.iter_mut().zip(d) {
                        *r += h[i] * dj;
                    }
                }
            }
        }
        distance += residual.iter().map(|r| r * r).sum::<f64>();
        let mut bias_res: Vec<f64> = target_b.iter().map(|v| -v).collect();
        for b in 0..xs.len() {
            for (r, &dj) in bias_res.iter_mut().zip(&deltas[b][l]) {
                *r += dj;
            }
        }
        distance += bias_res.iter().map(|r| r * r).sum::<f64>();
        for b in 0..xs.len() {
            let h = &traces[b].inputs[l];
            let d = &deltas[b][l];
            // ∂D/∂h_{l-1} = 2 R_l δ_l ; ∂D/∂δ_l = 2 (R_lᵀ h_{l-1} + r_l)
            let ha = &mut h_adj[b][l];
            for i in 0..fan_in {
                ha[i] = 2.0 * dot(&residual[i * fan_out..(i + 1) * fan_out], d);
            }
            let da = &mut d_adj[b][l];
            for j in 0..fan_out {
                da[j] = 2.0 * bias_res[j];
            }
            for i in 0..fan_in {
                if h[i] != 0.0 {
                    let row = &residual[i * fan_out..(i + 1) * fan_out];
                    for (a, &r) in da.iter_mut().zip(row) {
                        *a += 2.0 * h[i] * r;
                    }
                }
            }
        }
    }

    let mut grads = Vec::with_capacity(xs.len());
    for b in 0..xs.len() {
        let trace = &traces[b];
        // δ_{l-1} = (W_l δ_l) ⊙ φ'(z_{l-1}): push δ adjoints from layer 0
        // upward, collecting the φ'' contribution to the pre-activations.
        let mut z_extra: Vec<Vec<f64>> = vec![Vec::new(); m];
        for l in 1..m {
            let pre = &trace.pre[l - 1];
            let adj = &d_adj[b][l - 1];
            let through: Vec<f64> = adj.iter().zip(pre).map(|(&a, &z)| a * act.derivative(z)).collect();
            z_extra[l - 1] = adj
                .iter()
                .zip(pre)
                .zip(&ups[b][l])
                .map(|((&a, &z), &u)| a * u * act.second_derivative(z))
                .collect();
            let up = layers[l].weight.tmatvec(&through)?;
            for (a, v) in d_adj[b][l].iter_mut().zip(up) {
                *a += v;
            }
        }
        // δ_M = scale (p − e_y): adjoint through the softmax Jacobian.
        let p = &probs[b];
        let top = &d_adj[b][m - 1];
        let pa = dot(p, top);
        let mut z_adj: Vec<f64> = p.iter().zip(top).map(|(&pj, &aj)| scale * pj * (aj - pa)).collect();
        // Back down the forward pass.
        for l in (0..m).rev() {
            let mut h_bar = layers[l].weight.matvec(&z_adj)?;
            for (hb, &direct) in h_bar.iter_mut().zip(&h_adj[b][l]) {
                *hb += direct;
            }
            if l == 0 {
                grads.push(h_bar);
                break;
            }
            z_adj = h_bar
                .iter()
                .zip(&trace.pre[l - 1])
                .zip(&z_extra[l - 1])
                .map(|((&g, &z), &e)| g * act.derivative(z) + e)
                .collect();
        }
    }
    Ok((distance, grads))
}

/// Outcome of one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub target: usize,
    pub label: usize,
    /// Iterations used; failures report the iteration cap.
    pub iterations: usize,
    pub iterations_run: usize,
    pub final_distance: f64,
    pub mse: Option<f64>,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Result of [`reconstruct`]: the summary row plus the reconstructed input.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub row: AttackRow,
    pub input: Vec<f64>,
}

struct Lbfgs {
    history: usize,
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    rho: Vec<f64>,
}

impl Lbfgs {
    fn new(history: usize) -> Self {
        Self {
            history,
            s: Vec::new(),
            y: Vec::new(),
            rho: Vec::new(),
        }
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt()) {
            return;
        }
        if self.s.len() == self.history {
            self.s.remove(0);
            self.y.remove(0);
            self.rho.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
        self.rho.push(1.0 / sy);
    }

    /// Two-loop recursion: returns `−H g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            axpy(-alpha[i], &self.y[i], &mut q);
        }
        let gamma = match k {
            0 => 1.0 / dot(g, g).sqrt().max(1.0),
            _ => dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            axpy(alpha[i] - beta, &self.s[i], &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

struct Minimised {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
    diagnostic: Option<String>,
}

/// L-BFGS with backtracking Armijo line search on a flattened objective.
fn minimise<F>(f: F, x0: Vec<f64>, cfg: &AttackConfig) -> Minimised
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut fx, mut g) = match f(&x) {
        Ok(v) if v.0.is_finite() => v,
        Ok(v) => {
            return Minimised {
                x,
                value: v.0,
                iterations: 0,
                diagnostic: Some("non-finite distance at the seed".into()),
            }
        }
        Err(e) => {
            return Minimised {
                x,
                value: f64::NAN,
                iterations: 0,
                diagnostic: Some(e.to_string()),
            }
        }
    };
    let mut mem = Lbfgs::new(cfg.history);
    let mut iterations = 0;
    let mut diagnostic = None;
    while iterations < cfg.max_iters && fx > cfg.tolerance {
        let mut dir = mem.direction(&g);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            mem.clear();
            dir = mem.direction(&g);
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + cfg.armijo_c * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((xn, fn_, gn)) => {
                let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                mem.push(s, y);
                x = xn;
                fx = fn_;
                g = gn;
                iterations += 1;
            }
            None if !mem.s.is_empty() => mem.clear(),
            None => {
                diagnostic = Some("line search made no progress".into());
                break;
            }
        }
    }
    Minimised {
        x,
        value: fx,
        iterations,
        diagnostic,
    }
}

fn initial_seed(shape: &[usize], cfg: &AttackConfig, stream: u64) -> Result<Vec<f64>> {
    let mut rng = RngStream::new(cfg.seed, Purpose::Attack, stream, 0);
    Ok(match cfg.seed_kind {
        SeedKind::PatternedRandom => patterned_seed(shape, &mut rng)?,
        SeedKind::UniformRandom => uniform_seed(shape, &mut rng)?,
    }
    .into_vec())
}

fn finish_row(
    target: usize,
    label: usize,
    cfg: &AttackConfig,
    out: &Minimised,
    mse: Option<f64>,
) -> AttackRow {
    // With no optimisation step the seed is all the attacker has, which says
    // nothing about the target, so a zero-iteration run always fails.
    let success = out.iterations > 0 && out.value.is_finite() && mse.is_some_and(|m| m < cfg.threshold);
    AttackRow {
        target,
        label,
        iterations: if success { out.iterations } else { cfg.max_iters },
        iterations_run: out.iterations,
        final_distance: out.value,
        mse,
        success,
        diagnostic: out.diagnostic.clone(),
    }
}

/// Reconstructs one input from its leaked gradient with a known label.
///
/// `shape` is the image shape used to build the seed; `truth`, when given,
/// is used to score the result. Optimisation failures are reported in the
/// row's diagnostic rather than returned as errors.
pub fn reconstruct(
    model: &MlpModel,
    leaked: &GradientSet,
    label: usize,
    shape: &[usize],
    truth: Option<&[f64]>,
    cfg: &AttackConfig,
    stream: u64,
) -> Result<Reconstruction> {
    cfg.validate()?;
    if shape.iter().product::<usize>() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![model.input_dim()],
            actual: shape.to_vec(),
        });
    }
    let x0 = initial_seed(shape, cfg, stream)?;
    let objective = |x: &[f64]| {
        let (d, mut g) = distance_and_input_grad(model, &[x.to_vec()], &[label], leaked)?;
        Ok((d, g.remove(0)))
    };
    // Validate shapes and the label up front so that they surface as errors.
    objective(&x0)?;
    let out = minimise(objective, x0, cfg);
    let mse = truth.map(|t| mse(&out.x, t));
    Ok(Reconstruction {
        row: finish_row(stream as usize, label, cfg, &out, mse),
        input: out.x,
    })
}

/// Largest batch the joint reconstruction supports.
pub const MAX_ATTACK_BATCH: usize = 4;

/// Jointly reconstructs `B ≤ 4` inputs from their averaged gradient. Dummy
/// `i` is scored against ground truth `i mod B`.
pub fn reconstruct_batch(
    model: &MlpModel,
    leaked: &GradientSet,
    labels: &[usize],
    shape: &[usize],
    truths: Option<&[Vec<f64>]>,
    cfg: &AttackConfig,
) -> Result<Vec<Reconstruction>> {
    cfg.validate()?;
    let b = labels.len();
    if b == 0 || b > MAX_ATTACK_BATCH {
        return Err(Error::invalid(format!("batch attack supports 1..={MAX_ATTACK_BATCH} inputs, got {b}")));
    }
    let n = model.input_dim();
    let mut x0 = Vec::with_capacity(b * n);
    for i in 0..b {
        x0.extend(initial_seed(shape, cfg, i as u64)?);
    }
    let objective = |x: &[f64]| {
        let xs: Vec<Vec<f64>> = x.chunks(n).map(<[f64]>::to_vec).collect();
        let (d, g) = distance_and_input_grad(model, &xs, labels, leaked)?;
        Ok((d, g.concat()))
    };
    objective(&x0)?;
    let out = minimise(objective, x0, cfg);
    Ok((0..b)
        .map(|i| {
            let input = out.x[i * n..(i + 1) * n].to_vec();
            let mse = truths.map(|t| mse(&input, &t[i % t.len()]));
            let single = Minimised {
                x: Vec::new(),
                value: out.value,
                iterations: out.iterations,
                diagnostic: out.diagnostic.clone(),
            };
            Reconstruction {
                row: finish_row(i, labels[i], cfg, &single, mse),
                input,
            }
        })
        .collect())
}

/// Closed-form input recovery from a single example's first-layer gradient:
/// `∂L/∂W = x δᵀ` and `∂L/∂b = δ`, so column `k` of the weight gradient divided
/// by `δ_k` is `x`. Uses the bias coordinate of largest magnitude.
pub fn analytic_fc_recover(weight_grad: &Tensor, bias_grad: &Tensor) -> Result<Vec<f64>> {
    let (fan_in, fan_out) = weight_grad.dims2()?;
    if bias_grad.len() != fan_out {
        return Err(Error::ShapeMismatch {
            expected: vec![fan_out],
            actual: bias_grad.shape().to_vec(),
        });
    }
    let b = bias_grad.as_slice();
    let mut k = 0;
    for j in 1..fan_out {
        if b[j].abs() > b[k].abs() {
            k = j;
        }
    }
    if !(b[k].abs() > 1e-9) {
        return Err(Error::NotRecoverable(
            "every first-layer bias gradient is (numerically) zero".into(),
        ));
    }
    let w = weight_grad.as_slice();
    Ok((0..fan_in).map(|i| w[i * fan_out + k] / b[k]).collect())
}

/// Aggregate attack results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
    /// Successes over targets; `None` for an empty target list.
    pub asr: Option<f64>,
    /// Mean iterations over successes.
    pub mean_iterations: Option<f64>,
    /// Mean MSE over successes, or over all targets when none succeeded.
    pub mean_mse: Option<f64>,
}

impl AttackReport {
    pub fn from_rows(rows: Vec<AttackRow>) -> Self {
        if rows.is_empty() {
            return Self {
                rows,
                asr: None,
                mean_iterations: None,
                mean_mse: None,
            };
        }
        let wins: Vec<&AttackRow> = rows.iter().filter(|r| r.success).collect();
        let asr = wins.len() as f64 / rows.len() as f64;
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let mean_iterations = mean(wins.iter().map(|r| r.iterations as f64).collect());
        let pool: Vec<&AttackRow> = if wins.is_empty() { rows.iter().collect() } else { wins };
        let mean_mse = mean(pool.iter().filter_map(|r| r.mse).collect());
        Self {
            rows,
            asr: Some(asr),
            mean_iterations,
            mean_mse,
        }
    }
}

/// Attacks every requested target (dataset indices) of a gradient dump.
/// Returns the report and the reconstructed inputs in target order.
pub fn evaluate_resilience(
    dump: &GradientDump,
    targets: &[usize],
    shape: &[usize],
    cfg: &AttackConfig,
) -> Result<(AttackReport, Vec<Vec<f64>>)> {
    let entries = targets
        .iter()
        .map(|&t| {
            dump.targets
                .iter()
                .find(|d| d.index == t)
                .ok_or_else(|| Error::MissingDump(format!("target {t} at iteration {}", dump.iteration)))
        })
        .collect::<Result<Vec<_>>>()?;
    let results = par_map(entries.len(), |i| {
        let e = entries[i];
        reconstruct(&dump.model, &e.gradient, e.label, shape, Some(&e.input), cfg, e.index as u64)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let inputs = results.iter().map(|r| r.input.clone()).collect();
    Ok((AttackReport::from_rows(results.into_iter().map(|r| r.row).collect()), inputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_mlp;

    fn model(seed: u64, sizes: &[usize]) -> MlpModel {
        init_mlp(sizes, &mut RngStream::new(seed, Purpose::Init, 0, 0)).unwrap()
    }

    #[test]
    fn seed_range_and_determinism() {
        let mut a = RngStream::new(1, Purpose::Attack, 0, 0);
        let mut b = RngStream::new(1, Purpose::Attack, 0, 0);
        let s = patterned_seed(&[28, 28], &mut a).unwrap();
        assert_eq!(s, patterned_seed(&[28, 28], &mut b).unwrap());
        assert!(s.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn distance_definitions() {
        let m = model(0, &[4, 3, 2]);
        let g = m.example_gradient(&[0.1, 0.2, 0.3, 0.4], 1).unwrap();
        assert_eq!(gradient_distance(&g, &g).unwrap(), 0.0);
        let z = GradientSet::zeros_like(&m);
        assert!((gradient_distance(&g, &z).unwrap() - g.sum_sq()).abs() < 1e-15);
        let other = model(0, &[4, 2, 2]);
        assert!(gradient_distance(&g, &GradientSet::zeros_like(&other)).is_err());
    }

    #[test]
    fn distance_matches_gradient_distance() {
        let m = model(3, &[6, 5, 4, 3]);
        let x = vec![0.3, 0.1, 0.9, 0.4, 0.5, 0.2];
        let leaked = m.example_gradient(&[0.7, 0.2, 0.1, 0.0, 0.9, 0.6], 2).unwrap();
        let (d, _) = distance_and_input_grad(&m, &[x.clone()], &[2], &leaked).unwrap();
        let direct = gradient_distance(&m.example_gradient(&x, 2).unwrap(), &leaked).unwrap();
        assert!((d - direct).abs() <= 1e-14 * direct.max(1.0));
    }

    #[test]
    fn analytic_recovery_exact() {
        let m = model(4, &[5, 4, 3]);
        let x = [0.25, 0.5, 0.0, 1.0, 0.75];
        let g = m.example_gradient(&x, 0).unwrap();
        let rec = analytic_fc_recover(&g.layer(0).weight, &g.layer(0).bias).unwrap();
        for (a, b) in rec.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
        let z = GradientSet::zeros_like(&m);
        assert!(matches!(
            analytic_fc_recover(&z.layer(0).weight, &z.layer(0).bias),
            Err(Error::NotRecoverable(_))
        ));
    }

    #[test]
    fn zero_iterations_reports_seed_mse() {
        let m = model(5, &[16, 8, 4]);
        let x: Vec<f64> = (0..16).map(|i| (i % 4) as f64 / 4.0).collect();
        let g = m.example_gradient(&x, 1).unwrap();
        let cfg = AttackConfig {
            max_iters: 0,
            ..AttackConfig::default()
        };
        let r = reconstruct(&m, &g, 1, &[4, 4], Some(&x), &cfg, 0).unwrap();
        let seed = initial_seed(&[4, 4], &cfg, 0).unwrap();
        assert_eq!(r.row.iterations_run, 0);
        assert!(!r.row.success);
        assert_eq!(r.input, seed);
        assert_eq!(r.row.mse, Some(mse(&seed, &x)));
    }

    #[test]
    fn empty_report_has_no_asr() {
        let r = AttackReport::from_rows(Vec::new());
        assert!(r.asr.is_none() && r.mean_mse.is_none());
    }

    #[test]
    fn lbfgs_minimises_a_quadratic() {
        let f = |x: &[f64]| {
            let v = (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2);
            Ok((v, vec![2.0 * (x[0] - 1.0), 20.0 * (x[1] + 2.0)]))
        };
        let out = minimise(f, vec![0.0, 0.0], &AttackConfig::default());
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] + 2.0).abs() < 1e-6);
    }
}
