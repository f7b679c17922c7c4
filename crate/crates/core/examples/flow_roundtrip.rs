//! Push a batch of futures through a randomly perturbed flow to its latents
//! and back, and report the exact log-likelihood of each.

use hba_flow::data::{generate_synthetic, window_and_normalize, SyntheticScenarioConfig, WindowConfig};
use hba_flow::model::{batch_trajectories, HbaFlowModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_synthetic(&SyntheticScenarioConfig {
        count: 6,
        ..Default::default()
    })?;
    let ds = window_and_normalize(&data.tracks, &WindowConfig::default())?;
    let mut model = HbaFlowModel::new(ModelConfig::default())?;
    // move off the identity initialisation so the round trip is not trivial
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (_, v) in model.params_mut().iter_mut() {
        v.data_mut().iter_mut().for_each(|p| *p += 0.05 * (rng.random::<f64>() - 0.5));
    }
    let y = batch_trajectories(ds.examples.iter().map(|e| &e.y))?;
    let x = batch_trajectories(ds.examples.iter().map(|e| &e.x))?;
    let z = model.encode_latents(&y, &x)?;
    let back = model.decode_latents(&z, &x)?;
    let err = back.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("latent levels: {} fine + coarse {:?}", z.fines.len(), z.coarse.shape());
    println!("max round-trip error {err:e}");
    for (e, ll) in ds.examples.iter().zip(model.log_likelihood_batch(&y, &x)?) {
        println!("track {:>2} {:>8} log p = {ll:.4}", e.track_id, data.branches[e.track_id as usize].name());
    }
    Ok(())
}
