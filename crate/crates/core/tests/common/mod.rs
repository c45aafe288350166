//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use dpdyn::attack::distance_and_input_grad;
use dpdyn::model::{init_mlp_with, Activation, MlpModel};
use dpdyn::ndcore::{Purpose, RngStream};

pub const H: f64 = 1e-5;

/// A small random MLP with non-zero biases, an input and a label.
/// Even seeds use ReLU, odd seeds sigmoid.
pub fn random_case(seed: u64) -> (MlpModel, Vec<f64>, usize) {
    let mut rng = RngStream::new(seed, Purpose::Init, 0, 0);
    let depth = 3 + rng.next_below(2) as usize;
    let mut sizes: Vec<usize> = (0..depth).map(|_| 2 + rng.next_below(6) as usize).collect();
    sizes[depth - 1] = 2 + rng.next_below(4) as usize;
    let activation = if seed % 2 == 0 { Activation::Relu } else { Activation::Sigmoid };
    let mut model = init_mlp_with(&sizes, activation, &mut rng).unwrap();
    let layers = model
        .layers()
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.bias.as_mut_slice().iter_mut().for_each(|b| *b = rng.uniform(-0.3, 0.3));
            l
        })
        .collect();
    model = MlpModel::from_layers(layers).unwrap().with_activation(activation);
    let x: Vec<f64> = (0..sizes[0]).map(|_| rng.uniform(0.0, 1.0)).collect();
    let label = rng.next_below(sizes[depth - 1] as u64) as usize;
    (model, x, label)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn perturbed(model: &MlpModel, m: usize, weight: bool, k: usize, h: f64) -> MlpModel {
    let mut layers = model.layers().to_vec();
    let t = if weight { &mut layers[m].weight } else { &mut layers[m].bias };
    t.as_mut_slice()[k] += h;
    MlpModel::from_layers(layers).unwrap().with_activation(model.activation())
}

/// Largest relative error between backprop parameter gradients and central
/// differences over `cases` random instances.
pub fn worst_parameter_gradient_error(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let (model, x, y) = random_case(seed);
        let g = model.example_gradient(&x, y).unwrap();
        for m in 0..model.num_layers() {
            for (weight, n) in [(true, g.layer(m).weight.len()), (false, g.layer(m).bias.len())] {
                for k in 0..n {
                    let up = perturbed(&model, m, weight, k, H).loss(&x, y).unwrap();
                    let down = perturbed(&model, m, weight, k, -H).loss(&x, y).unwrap();
                    let fd = (up - down) / (2.0 * H);
                    let an = if weight { g.layer(m).weight.as_slice()[k] } else { g.layer(m).bias.as_slice()[k] };
                    worst = worst.max(rel_err(an, fd));
                }
            }
        }
    }
    worst
}

/// Largest relative error between the attack's analytic input gradient and
/// central differences over `cases` random instances.
pub fn worst_attack_gradient_error(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let (model, x_true, y) = random_case(1000 + seed);
        let leaked = model.example_gradient(&x_true, y).unwrap();
        let mut rng = RngStream::new(seed, Purpose::Attack, 0, 0);
        let x: Vec<f64> = (0..x_true.len()).map(|_| rng.next_f64()).collect();
        let (_, g) = distance_and_input_grad(&model, &[x.clone()], &[y], &leaked).unwrap();
        for i in 0..x.len() {
            let eval = |h: f64| {
                let mut xp = x.clone();
                xp[i] += h;
                distance_and_input_grad(&model, &[xp], &[y], &leaked).unwrap().0
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            worst = worst.max(rel_err(g[0][i], fd));
        }
    }
    worst
}
