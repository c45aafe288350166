//! WebAssembly bindings for the browser demo. Every exported function takes
//! plain numbers or JSON text and returns JSON text, so the page needs no
//! build tooling beyond the generated glue.

use dpdyn::accountants::{Accountant, BudgetLedger};
use dpdyn::attack::{reconstruct, AttackConfig};
use dpdyn::model::{init_mlp_with, Activation};
use dpdyn::ndcore::{Purpose, RngStream};
use dpdyn::policies::{clip_per_example, DecaySchedule};
use dpdyn::trainer::step_noise;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Side length of the demo images.
pub const SIDE: usize = 12;

#[derive(Debug, Serialize, PartialEq)]
pub struct Curves {
    pub iterations: Vec<usize>,
    pub basec: Vec<f64>,
    pub advc: Vec<f64>,
    pub optc: Vec<f64>,
    pub zcdp: Vec<f64>,
    pub ma: Vec<f64>,
}

/// Running totals under every accountant, sampled at `points` evenly spaced
/// iterations up to `iterations`, for noise scales from `schedule`.
pub fn accountant_curves(
    q: f64,
    schedule: &DecaySchedule,
    delta: f64,
    iterations: usize,
    points: usize,
) -> dpdyn::Result<Curves> {
    schedule.validate()?;
    let sigmas: Vec<f64> = (0..iterations).map(|t| schedule.value(t)).collect();
    let ledger = BudgetLedger::from_sigmas(q, delta, &sigmas)?;
    let running = ledger.running_totals();
    let points = points.clamp(1, iterations.max(1));
    let at: Vec<usize> = (1..=points).map(|k| k * iterations / points).filter(|&t| t > 0).collect();
    let pick = |a: Accountant| at.iter().map(|&t| running[t - 1].get(a)).collect();
    Ok(Curves {
        basec: pick(Accountant::BaseC),
        advc: pick(Accountant::AdvC),
        optc: pick(Accountant::OptC),
        zcdp: pick(Accountant::Zcdp),
        ma: pick(Accountant::Ma),
        iterations: at,
    })
}

/// Values of a schedule given as JSON for `t = 0..iterations`.
pub fn schedule_values(schedule_json: &str, iterations: usize) -> dpdyn::Result<Vec<f64>> {
    let schedule: DecaySchedule = serde_json::from_str(schedule_json)?;
    schedule.validate()?;
    Ok((0..iterations).map(|t| schedule.value(t)).collect())
}

/// A 12×12 test glyph: 0 ring, 1 cross, 2 diagonal bar, 3 checker block.
pub fn glyph(kind: u32) -> Vec<f64> {
    let c = (SIDE as f64 - 1.0) / 2.0;
    (0..SIDE * SIDE)
        .map(|i| {
            let (r, k) = ((i / SIDE) as f64, (i % SIDE) as f64);
            let on = match kind % 4 {
                0 => {
                    let d = ((r - c).powi(2) + (k - c).powi(2)).sqrt();
                    (3.0..=5.0).contains(&d)
                }
                1 => (r - c).abs() < 1.5 || (k - c).abs() < 1.5,
                2 => (r - k).abs() < 2.0,
                _ => ((i / SIDE) / 3 + (i % SIDE) / 3) % 2 == 0,
            };
            if on {
                0.9
            } else {
                0.1
            }
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct AttackDemo {
    pub side: usize,
    pub truth: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub mse: f64,
    pub iterations: usize,
    pub success: bool,
}

/// Leaks the clipped single-example gradient of `glyph(kind)` through a
/// random sigmoid MLP, adds Gaussian noise of standard deviation
/// `noise_stddev` per layer, and runs the reconstruction attack.
pub fn attack_demo(kind: u32, clip: f64, noise_stddev: f64, max_iters: usize, seed: u64) -> dpdyn::Result<AttackDemo> {
    let truth = glyph(kind);
    let model = init_mlp_with(&[SIDE * SIDE, 32, 10], Activation::Sigmoid, &mut RngStream::new(seed, Purpose::Init, 0, 0))?;
    let label = kind as usize % 10;
    let mut leaked = clip_per_example(&model.example_gradient(&truth, label)?, clip)?;
    if noise_stddev > 0.0 {
        let noise = step_noise(seed, 0, &vec![noise_stddev; model.num_layers()], &leaked);
        leaked.add_assign(&noise)?;
    }
    let cfg = AttackConfig {
        max_iters,
        seed,
        ..AttackConfig::default()
    };
    let rec = reconstruct(&model, &leaked, label, &[SIDE, SIDE], Some(&truth), &cfg, 0)?;
    Ok(AttackDemo {
        side: SIDE,
        mse: rec.row.mse.unwrap_or(f64::NAN),
        iterations: rec.row.iterations_run,
        success: rec.row.success,
        reconstruction: rec.input,
        truth,
    })
}

fn to_js<T: Serialize>(r: dpdyn::Result<T>) -> Result<String, JsValue> {
    r.and_then(|v| Ok(serde_json::to_string(&v)?))
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = accountantCurves)]
pub fn accountant_curves_js(q: f64, sigma_schedule_json: &str, delta: f64, iterations: usize, points: usize) -> Result<String, JsValue> {
    let schedule = serde_json::from_str::<DecaySchedule>(sigma_schedule_json)
        .map_err(|e| JsValue::from_str(&e.to_string()))?;
    to_js(accountant_curves(q, &schedule, delta, iterations, points))
}

#[wasm_bindgen(js_name = scheduleValues)]
pub fn schedule_values_js(schedule_json: &str, iterations: usize) -> Result<String, JsValue> {
    to_js(schedule_values(schedule_json, iterations))
}

#[wasm_bindgen(js_name = attackDemo)]
pub fn attack_demo_js(kind: u32, clip: f64, noise_stddev: f64, max_iters: usize, seed: u64) -> Result<String, JsValue> {
    to_js(attack_demo(kind, clip, noise_stddev, max_iters, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_end_at_the_golden_total() {
        let s = DecaySchedule::constant(6.0).unwrap();
        let c = accountant_curves(0.01, &s, 1e-5, 10_000, 20).unwrap();
        assert_eq!(c.iterations.len(), 20);
        assert_eq!(*c.iterations.last().unwrap(), 10_000);
        assert!((c.zcdp.last().unwrap() - 1.159).abs() < 1e-3);
        assert!(c.zcdp.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn schedule_json_is_validated() {
        let v = schedule_values(r#"{"kind":"linear","base":4.0,"gamma":0.001,"floor":2.0}"#, 3000).unwrap();
        assert_eq!(v[0], 4.0);
        assert_eq!(v[2999], 2.0);
        assert!(schedule_values(r#"{"kind":"linear","base":4.0,"floor":8.0}"#, 10).is_err());
    }

    #[test]
    fn noise_free_attack_recovers_the_glyph() {
        let out = attack_demo(0, 4.0, 0.0, 300, 1).unwrap();
        assert!(out.success);
        assert!(out.mse < 1e-6);
        let noisy = attack_demo(0, 4.0, 24.0, 100, 1).unwrap();
        assert!(!noisy.success);
    }
}
