//! Time batched sampling for growing horizons with the maximal scale count,
//! where the number of sequential stages grows with log2 of the horizon.

use hba_flow::eval::benchmark_sampling;
use hba_flow::haar::Trajectory;
use hba_flow::model::{HbaFlowModel, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let batch: usize = std::env::args().nth(1).map_or(Ok(128), |s| s.parse())?;
    let x = Trajectory::new((0..8).flat_map(|i| [i as f64 * 0.1 - 0.7, 0.0]).collect(), 2, 0.25)?;
    println!("{:>4} {:>3} {:>7} {:>10} {:>8}", "T", "K", "stages", "median ms", "iqr ms");
    for k in 1..=5 {
        let t = 1 << k;
        let mut cfg = ModelConfig {
            t_fut: t,
            scales: k,
            ..Default::default()
        };
        cfg.stack.steps = 4;
        let model = HbaFlowModel::new(cfg)?;
        let b = benchmark_sampling(&model, &x, batch, 5, t, 0)?;
        println!("{t:>4} {k:>3} {:>7} {:>10.2} {:>8.2}", b.stages, b.median_ms, b.iqr_ms);
    }
    Ok(())
}
