//! Compare the tape gradient of the training loss against central
//! differences for every parameter of a small model.

use hba_flow::data::{generate_synthetic, window_and_normalize, SyntheticScenarioConfig, WindowConfig};
use hba_flow::diffcore::check::{finite_diff_gradient, relative_error, DEFAULT_STEP};
use hba_flow::diffcore::Array;
use hba_flow::model::{HbaFlowModel, ModelConfig};
use hba_flow::train::{nll_and_grads, nll_batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_synthetic(&SyntheticScenarioConfig {
        count: 3,
        ..Default::default()
    })?;
    let ds = window_and_normalize(
        &data.tracks,
        &WindowConfig {
            t_fut: 8,
            stride: 16,
            ..Default::default()
        },
    )?;
    let batch: Vec<_> = ds.examples.iter().collect();
    let mut cfg = ModelConfig {
        t_fut: 8,
        ..Default::default()
    };
    cfg.stack.conditioner.channels = 4;
    let mut model = HbaFlowModel::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (_, v) in model.params_mut().iter_mut() {
        v.data_mut().iter_mut().for_each(|p| *p += 0.2 * (rng.random::<f64>() - 0.5));
    }
    let (loss, grads) = nll_and_grads(&model, &batch)?;
    println!("loss {loss:.6}");
    for (i, name) in model.params().names().iter().enumerate() {
        let mut probe = model.clone();
        let fd = finite_diff_gradient(
            |p: &Array| {
                *probe.params_mut().by_name_mut(name).unwrap() = p.clone();
                nll_batch(&probe, &batch)
            },
            &model.params().values()[i],
            DEFAULT_STEP,
        )?;
        let worst = grads[i]
            .data()
            .iter()
            .zip(fd.data())
            .map(|(a, b)| relative_error(*a, *b, 1e-6))
            .fold(0.0, f64::max);
        println!("{name:<28} {worst:.2e}");
    }
    Ok(())
}
