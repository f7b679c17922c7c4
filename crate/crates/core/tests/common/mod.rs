//! Toy models and oracles shared by the integration tests.
#![allow(dead_code)]

use hba_flow::coupling::{ConditionerConfig, StackConfig, TransformKind};
use hba_flow::data::Example;
use hba_flow::diffcore::check::{finite_diff_gradient, relative_error};
use hba_flow::diffcore::Array;
use hba_flow::haar::Trajectory;
use hba_flow::model::{AlphaMode, HbaFlowModel, ModelConfig, PriorKind};
use hba_flow::train::{nll_and_grads, nll_batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(t_fut: usize, scales: usize, prior: PriorKind, alpha: f64) -> ModelConfig {
    ModelConfig {
        dim: 1,
        t_obs: 3,
        t_fut,
        scales,
        stack: StackConfig {
            steps: 2,
            kind: TransformKind::Nlsq,
            conditioner: ConditionerConfig {
                channels: 4,
                layers: 2,
                kernel: 3,
            },
        },
        prior,
        alpha_init: alpha,
        alpha_mode: AlphaMode::Shared,
        learn_alpha: true,
        context_dim: 3,
        encoder_channels: 4,
        init_seed: 3,
    }
}

/// Add uniform noise of width `scale` to every parameter except the mixing one.
pub fn perturb(model: &mut HbaFlowModel, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, v) in model.params_mut().iter_mut() {
        if name.starts_with("mix.") {
            continue;
        }
        for x in v.data_mut() {
            *x += scale * (rng.random::<f64>() - 0.5);
        }
    }
}

pub fn traj(values: Vec<f64>, dim: usize) -> Trajectory {
    Trajectory::new(values, dim, 0.25).unwrap()
}

pub fn example(x: Vec<f64>, y: Vec<f64>, dim: usize) -> Example {
    Example {
        track_id: 0,
        start: 0,
        x: traj(x, dim),
        y: traj(y, dim),
        offset: [0.0, 0.0],
        scale: 1.0,
    }
}

/// Toy model for the normalization check (`T = 2`, `d = 1`, `K = 1`), with
/// its scales pulled in so the density lives well inside `[-4, 4]²`.
pub fn quadrature_model(prior: PriorKind, alpha: f64) -> HbaFlowModel {
    let mut model = HbaFlowModel::new(tiny_config(2, 1, prior, alpha)).unwrap();
    perturb(&mut model, 0.1, 17);
    // raw channel 1 of an NLSq conditioner is log b; z = b·h + ..., so a
    // larger b narrows the modelled density
    let shrink = 2f64.ln();
    model.params_mut().by_name_mut("fine1.step0.out.b").unwrap().data_mut()[1] += shrink - (1.0 - alpha).ln();
    model.params_mut().by_name_mut("coarse.step0.out.b").unwrap().data_mut()[1] += shrink;
    model
}

/// Midpoint-rule integral of `exp(log p(y | x))` over `[-4, 4]²` with `n²` cells.
pub fn quadrature_mass(model: &HbaFlowModel, x: &[f64], n: usize) -> f64 {
    let step = 8.0 / n as f64;
    let grid: Vec<f64> = (0..n).map(|i| -4.0 + (i as f64 + 0.5) * step).collect();
    let mut ys = Vec::with_capacity(2 * n * n);
    for &a in &grid {
        for &b in &grid {
            ys.push(a);
            ys.push(b);
        }
    }
    let y = Array::new(vec![n * n, 1, 2], ys).unwrap();
    let xs: Vec<f64> = (0..n * n).flat_map(|_| x.iter().copied()).collect();
    let xa = Array::new(vec![n * n, 1, x.len()], xs).unwrap();
    let ll = model.log_likelihood_batch(&y, &xa).unwrap();
    ll.iter().map(|l| l.exp()).sum::<f64>() * step * step
}

/// Worst relative error between tape gradients and central differences of
/// the batch NLL, over every entry of every parameter.
pub fn gradient_check(model: &HbaFlowModel, batch: &[&Example], floor: f64) -> (f64, String) {
    let (_, grads) = nll_and_grads(model, batch).unwrap();
    let mut worst = (0.0, String::new());
    for (i, name) in model.params().names().iter().enumerate() {
        let base = model.params().values()[i].clone();
        let mut probe = model.clone();
        let fd = finite_diff_gradient(
            |p: &Array| {
                *probe.params_mut().by_name_mut(name).unwrap() = p.clone();
                nll_batch(&probe, batch)
            },
            &base,
            1e-5,
        )
        .unwrap();
        for (j, (a, b)) in grads[i].data().iter().zip(fd.data()).enumerate() {
            let e = relative_error(*a, *b, floor);
            if e > worst.0 {
                worst = (e, format!("{name}[{j}]: tape {a:e} fd {b:e}"));
            }
        }
    }
    worst
}

/// The gradient-check model: `T = 4`, `d = 1`, `K = 1`, two coupling steps,
/// 4-channel networks, parameters moved off the identity init.
pub fn gradient_check_setup(prior: PriorKind) -> (HbaFlowModel, Vec<Example>) {
    let mut model = HbaFlowModel::new(tiny_config(4, 1, prior, 0.4)).unwrap();
    perturb(&mut model, 0.6, 5);
    let examples = vec![
        example(vec![-0.5, -0.2, 0.0], vec![0.3, 0.5, 0.9, 1.1], 1),
        example(vec![0.4, 0.1, 0.0], vec![-0.2, -0.7, -0.6, -1.3], 1),
    ];
    (model, examples)
}
