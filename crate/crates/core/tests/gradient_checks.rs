//! Finite-difference checks of the training gradient and of the attack's
//! input gradient.

mod common;

use common::{perturbed, random_case, H};
use dpdyn::model::{GradientSet, MlpModel};
use dpdyn::ndcore::{Purpose, RngStream};

#[test]
fn parameter_gradients_match_central_differences() {
    let worst = common::worst_parameter_gradient_error(100);
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn per_example_gradients_sum_to_batch_gradient() {
    let (model, _, _) = random_case(7);
    let mut rng = RngStream::new(8, Purpose::Data, 0, 0);
    let n_in = model.input_dim();
    let k = model.num_classes();
    let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..n_in).map(|_| rng.next_f64()).collect()).collect();
    let ys: Vec<usize> = (0..6).map(|_| rng.next_below(k as u64) as usize).collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let per = model.per_example_gradients(&refs, &ys).unwrap();
    let mut sum = GradientSet::zeros_like(&model);
    per.iter().for_each(|g| sum.add_assign(g).unwrap());
    // gradient of the mean batch loss by central differences
    let batch_loss = |m: &MlpModel| xs.iter().zip(&ys).map(|(x, &y)| m.loss(x, y).unwrap()).sum::<f64>() / 6.0;
    for m in 0..model.num_layers() {
        for k in 0..sum.layer(m).bias.len() {
            let fd = (batch_loss(&perturbed(&model, m, false, k, H)) - batch_loss(&perturbed(&model, m, false, k, -H))) / (2.0 * H);
            assert!((sum.layer(m).bias.as_slice()[k] - fd).abs() < 1e-9);
        }
    }
    // and against the exact linear combination of raw example gradients
    let mut raw = GradientSet::zeros_like(&model);
    for (x, &y) in xs.iter().zip(&ys) {
        raw.add_assign(&model.example_gradient(x, y).unwrap()).unwrap();
    }
    raw.scale_in_place(1.0 / 6.0);
    assert!(raw.distance_sq(&sum).unwrap().sqrt() < 1e-10);
}

#[test]
fn attack_input_gradient_matches_central_differences() {
    let worst = common::worst_attack_gradient_error(100);
    assert!(worst < 1e-5, "worst relative error {worst}");
}
