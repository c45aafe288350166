//! Clipping-bound and noise-scale schedules, per-example clipping, and the
//! sensitivity strategies that turn a clipped batch into the `S` of `N(0, σ²S²)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GradientSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Constant,
    Linear,
    Exponential,
    Cyclic,
}

/// A decaying schedule for `C_t` or `σ_t`, clamped to `[floor, base]`.
///
/// * linear: `base · (1 − γt)`
/// * exponential: `base · e^{−γt}`
/// * cyclic: a triangular wave with half-cycle length `cycle_len`. Even
///   half-cycles descend as `env · (1 − γ r)` and odd ones climb back, where
///   `r` is the offset within the half-cycle. The envelope `env` starts at
///   `base` and shrinks by `1 − 2·envelope_decay·cycle_len` after each full cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySchedule {
    pub kind: DecayKind,
    pub base: f64,
    #[serde(default)]
    pub gamma: f64,
    pub floor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_len: Option<usize>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub envelope_decay: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl DecaySchedule {
    pub fn constant(base: f64) -> Result<Self> {
        Self {
            kind: DecayKind::Constant,
            base,
            gamma: 0.0,
            floor: base,
            cycle_len: None,
            envelope_decay: 0.0,
        }
        .validated()
    }

    pub fn linear(base: f64, gamma: f64, floor: f64) -> Result<Self> {
        Self {
            kind: DecayKind::Linear,
            base,
            gamma,
            floor,
            cycle_len: None,
            envelope_decay: 0.0,
        }
        .validated()
    }

    /// Linear decay that reaches `target` at iteration `horizon`.
    pub fn linear_to(base: f64, target: f64, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("linear decay horizon must be positive"));
        }
        Self::linear(base, (1.0 - target / base) / horizon as f64, target)
    }

    pub fn exponential(base: f64, gamma: f64, floor: f64) -> Result<Self> {
        Self {
            kind: DecayKind::Exponential,
            base,
            gamma,
            floor,
            cycle_len: None,
            envelope_decay: 0.0,
        }
        .validated()
    }

    /// Exponential decay that reaches `target` at iteration `horizon`.
    pub fn exponential_to(base: f64, target: f64, horizon: usize, floor: f64) -> Result<Self> {
        if horizon == 0 || !(target > 0.0) {
            return Err(Error::invalid("exponential decay needs a positive target and horizon"));
        }
        Self::exponential(base, (base / target).ln() / horizon as f64, floor)
    }

    pub fn cyclic(
        base: f64,
        gamma: f64,
        envelope_decay: f64,
        cycle_len: usize,
        floor: f64,
    ) -> Result<Self> {
        Self {
            kind: DecayKind::Cyclic,
            base,
            gamma,
            floor,
            cycle_len: Some(cycle_len),
            envelope_decay,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || !self.base.is_finite() {
            return Err(Error::invalid(format!("schedule base must be positive, got {}", self.base)));
        }
        if !(self.floor > 0.0 && self.floor <= self.base) {
            return Err(Error::invalid(format!(
                "schedule floor must lie in (0, base={}], got {}",
                self.base, self.floor
            )));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("decay rate must be non-negative, got {}", self.gamma)));
        }
        if self.kind == DecayKind::Cyclic {
            let v = match self.cycle_len {
                Some(v) if v > 0 => v,
                _ => return Err(Error::invalid("cyclic schedule needs cycle_len ≥ 1")),
            };
            let shrink = 2.0 * self.envelope_decay * v as f64;
            if !(self.envelope_decay >= 0.0 && shrink < 1.0) {
                return Err(Error::invalid(format!(
                    "cyclic envelope decay must satisfy 0 ≤ 2·γ₄·V < 1, got {shrink}"
                )));
            }
        }
        Ok(())
    }

    /// Schedule value at iteration `t`.
    pub fn value(&self, t: usize) -> f64 {
        let tf = t as f64;
        let raw = match self.kind {
            DecayKind::Constant => self.base,
            DecayKind::Linear => self.base * (1.0 - self.gamma * tf),
            DecayKind::Exponential => self.base * (-self.gamma * tf).exp(),
            DecayKind::Cyclic => {
                let v = self.cycle_len.unwrap_or(1);
                let cycles = t / (2 * v);
                let half = t / v;
                let r = (t % v) as f64;
                let envelope = self.base
                    * (1.0 - 2.0 * self.envelope_decay * v as f64).powi(cycles as i32);
                if half % 2 == 0 {
                    envelope * (1.0 - self.gamma * r)
                } else {
                    envelope * (1.0 - self.gamma * (v as f64 - r))
                }
            }
        };
        raw.clamp(self.floor, self.base)
    }

    pub fn is_constant(&self) -> bool {
        self.kind == DecayKind::Constant || self.base == self.floor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityKind {
    /// `S = C_t`.
    FixedC,
    /// `S` = largest clipped per-example norm in the batch.
    L2Max,
    /// l2-max evaluated under a decaying clipping bound.
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityScope {
    /// One `S_m` per layer; noise for layer `m` uses its own `S_m`.
    #[default]
    PerLayer,
    /// One `S` for all layers: the largest per-layer value.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitivityStrategy {
    pub kind: SensitivityKind,
    #[serde(default)]
    pub scope: SensitivityScope,
}

impl SensitivityStrategy {
    pub fn new(kind: SensitivityKind, scope: SensitivityScope) -> Self {
        Self { kind, scope }
    }

    pub fn fixed_c() -> Self {
        Self::new(SensitivityKind::FixedC, SensitivityScope::PerLayer)
    }

    pub fn l2_max() -> Self {
        Self::new(SensitivityKind::L2Max, SensitivityScope::PerLayer)
    }

    pub fn combined() -> Self {
        Self::new(SensitivityKind::Combined, SensitivityScope::PerLayer)
    }
}

/// Per-layer sensitivities. With global scope every entry holds the same value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub per_layer: Vec<f64>,
    pub scope: SensitivityScope,
}

impl Sensitivity {
    pub fn layer(&self, m: usize) -> f64 {
        self.per_layer[m]
    }

    pub fn max(&self) -> f64 {
        self.per_layer.iter().copied().fold(0.0, f64::max)
    }
}

/// Clips each layer of `g` (weight and bias together) to ℓ₂ norm at most `c`.
/// Layers already within the bound are returned bit-for-bit unchanged.
pub fn clip_per_example(g: &GradientSet, c: f64) -> Result<GradientSet> {
    let mut out = g.clone();
    clip_in_place(&mut out, c)?;
    Ok(out)
}

/// In-place form of [`clip_per_example`].
pub fn clip_in_place(g: &mut GradientSet, c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::invalid(format!("clipping bound must be positive, got {c}")));
    }
    for m in 0..g.num_layers() {
        let layer = g.layer_mut(m);
        let mut norm = layer.norm();
        if norm > c {
            // Rounding in the norm of a large layer can exceed one ulp, so a
            // scaled result still above `c` is corrected by shrink factors
            // that grow geometrically to keep the retry count small.
            let mut shrink = 8.0 * f64::EPSILON;
            layer.scale_in_place(c / norm);
            norm = layer.norm();
            while norm > c {
                layer.scale_in_place(1.0 - shrink);
                norm = layer.norm();
                shrink *= 2.0;
            }
        }
    }
    Ok(())
}

/// Norms within this relative distance below `C_t` count as sitting on the bound.
const ON_BOUND_RTOL: f64 = 1e-12;

/// Sensitivity of the clipped batch under `strategy`. Always `≤ c_t`.
pub fn sensitivity(
    strategy: &SensitivityStrategy,
    clipped: &[GradientSet],
    c_t: f64,
) -> Result<Sensitivity> {
    let first = clipped
        .first()
        .ok_or_else(|| Error::invalid("sensitivity of an empty batch"))?;
    let layers = first.num_layers();
    let per_layer: Vec<f64> = match strategy.kind {
        SensitivityKind::FixedC => vec![c_t; layers],
        SensitivityKind::L2Max | SensitivityKind::Combined => (0..layers)
            .map(|m| {
                let max = clipped.iter().map(|g| g.layer_norm(m)).fold(0.0, f64::max);
                if max >= c_t * (1.0 - ON_BOUND_RTOL) {
                    c_t
                } else {
                    max
                }
            })
            .collect(),
    };
    let per_layer = match strategy.scope {
        SensitivityScope::PerLayer => per_layer,
        SensitivityScope::Global => {
            let s = per_layer.iter().copied().fold(0.0, f64::max);
            vec![s; layers]
        }
    };
    Ok(Sensitivity {
        per_layer,
        scope: strategy.scope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GradientSet, LayerGrad};
    use crate::ndcore::Tensor;

    fn single_layer(weights: Vec<f64>, bias: Vec<f64>) -> GradientSet {
        let n = weights.len();
        GradientSet::from_layers(vec![LayerGrad {
            weight: Tensor::new(vec![n, 1], weights).unwrap(),
            bias: Tensor::from_vec(bias).unwrap(),
        }])
    }

    #[test]
    fn schedule_starts_at_base() {
        let kinds = [
            DecaySchedule::constant(4.0).unwrap(),
            DecaySchedule::linear(4.0, 1e-4, 2.0).unwrap(),
            DecaySchedule::exponential(6.0, 1e-3, 1.0).unwrap(),
            DecaySchedule::cyclic(4.0, 0.01, 0.001, 50, 2.0).unwrap(),
        ];
        for s in kinds {
            assert_eq!(s.value(0), s.base, "{:?}", s.kind);
        }
    }

    #[test]
    fn linear_halving_reaches_half() {
        let t = 10_000;
        let s = DecaySchedule::linear_to(4.0, 2.0, t).unwrap();
        assert!((s.value(t) - 2.0).abs() < 1e-12);
        assert!((s.value(t / 2) - 3.0).abs() < 1e-12);
        assert_eq!(s.value(3 * t), 2.0);
    }

    #[test]
    fn exponential_halving() {
        let t = 10_000;
        let s = DecaySchedule::exponential(6.0, std::f64::consts::LN_2 / t as f64, 1.0).unwrap();
        assert!((s.value(t) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cyclic_triangle_and_envelope() {
        let v = 10;
        let s = DecaySchedule::cyclic(4.0, 0.05, 0.01, v, 1.0).unwrap();
        // first descent: 4 (1 − 0.05 r)
        assert!((s.value(4) - 4.0 * 0.8).abs() < 1e-12);
        // bottom of the first descent and the climb back
        assert!((s.value(10) - 4.0 * 0.5).abs() < 1e-12);
        assert!((s.value(19) - 4.0 * 0.95).abs() < 1e-12);
        // second cycle starts at the shrunken envelope 4 (1 − 2·0.01·10)
        assert!((s.value(20) - 4.0 * 0.8).abs() < 1e-12);
        let cycle_max = |k: usize| (k * 2 * v..(k + 1) * 2 * v).map(|t| s.value(t)).fold(0.0, f64::max);
        for k in 0..20 {
            assert!(cycle_max(k + 1) <= cycle_max(k));
        }
    }

    #[test]
    fn schedules_monotone_and_in_range() {
        let lin = DecaySchedule::linear(5.0, 3e-4, 1.5).unwrap();
        let exp = DecaySchedule::exponential(5.0, 3e-4, 1.5).unwrap();
        for s in [lin, exp] {
            let mut prev = f64::INFINITY;
            for t in 0..20_000 {
                let v = s.value(t);
                assert!(v <= prev && v >= s.floor && v <= s.base);
                prev = v;
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(DecaySchedule::constant(0.0).is_err());
        assert!(DecaySchedule::linear(4.0, 0.1, 5.0).is_err());
        assert!(DecaySchedule::linear(4.0, -0.1, 1.0).is_err());
        assert!(DecaySchedule::cyclic(4.0, 0.1, 0.1, 10, 1.0).is_err());
        assert!(DecaySchedule::cyclic(4.0, 0.1, 0.0, 0, 1.0).is_err());
    }

    #[test]
    fn clip_three_four() {
        let g = single_layer(vec![3.0], vec![4.0]);
        let c = clip_per_example(&g, 2.5).unwrap();
        assert!((c.layer(0).weight.as_slice()[0] - 1.5).abs() < 1e-15);
        assert!((c.layer(0).bias.as_slice()[0] - 2.0).abs() < 1e-15);
        assert!(c.layer_norm(0) <= 2.5);
    }

    #[test]
    fn clip_within_bound_is_identity() {
        let g = single_layer(vec![0.6], vec![0.8]);
        assert_eq!(clip_per_example(&g, 4.0).unwrap(), g);
        let z = single_layer(vec![0.0, 0.0], vec![0.0]);
        assert_eq!(clip_per_example(&z, 1.0).unwrap(), z);
        assert!(clip_per_example(&g, 0.0).is_err());
    }

    #[test]
    fn l2_max_examples() {
        let batch: Vec<GradientSet> = [0.5, 1.2, 0.9]
            .iter()
            .map(|&n| single_layer(vec![n], vec![0.0]))
            .collect();
        let s = sensitivity(&SensitivityStrategy::l2_max(), &batch, 4.0).unwrap();
        assert!((s.layer(0) - 1.2).abs() < 1e-15);
        let fixed = sensitivity(&SensitivityStrategy::fixed_c(), &batch, 4.0).unwrap();
        assert_eq!(fixed.layer(0), 4.0);
        assert!(sensitivity(&SensitivityStrategy::l2_max(), &[], 4.0).is_err());
    }

    #[test]
    fn l2_max_saturates_at_bound() {
        let c = 0.7;
        let batch: Vec<GradientSet> = [1.3, 2.9, 17.0]
            .iter()
            .map(|&n| clip_per_example(&single_layer(vec![n, n / 3.0], vec![n / 7.0]), c).unwrap())
            .collect();
        let s = sensitivity(&SensitivityStrategy::l2_max(), &batch, c).unwrap();
        assert_eq!(s.layer(0), c);
    }

    #[test]
    fn global_scope_takes_layer_max() {
        let g = GradientSet::from_layers(vec![
            LayerGrad {
                weight: Tensor::new(vec![1, 1], vec![0.3]).unwrap(),
                bias: Tensor::from_vec(vec![0.0]).unwrap(),
            },
            LayerGrad {
                weight: Tensor::new(vec![1, 1], vec![0.9]).unwrap(),
                bias: Tensor::from_vec(vec![0.0]).unwrap(),
            },
        ]);
        let strat = SensitivityStrategy::new(SensitivityKind::L2Max, SensitivityScope::Global);
        let s = sensitivity(&strat, &[g], 4.0).unwrap();
        assert_eq!(s.per_layer, vec![0.9, 0.9]);
    }
}
