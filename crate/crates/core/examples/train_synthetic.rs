//! Train a small flow on the synthetic intersection data and report NLL.

use std::time::Instant;

use hba_flow::coupling::{ConditionerConfig, StackConfig, TransformKind};
use hba_flow::data::{generate_synthetic, validation_split, window_and_normalize, SyntheticScenarioConfig, WindowConfig};
use hba_flow::model::{HbaFlowModel, ModelConfig};
use hba_flow::train::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(5), |s| s.parse())?;
    let data = generate_synthetic(&SyntheticScenarioConfig {
        count: 600,
        ..Default::default()
    })?;
    let ds = window_and_normalize(&data.tracks, &WindowConfig::default())?;
    let all: Vec<_> = ds.examples.iter().collect();
    let (train, val) = validation_split(&all, 0.1, 0)?;
    let model = HbaFlowModel::new(ModelConfig {
        stack: StackConfig {
            steps: 4,
            kind: TransformKind::Nlsq,
            conditioner: ConditionerConfig::default(),
        },
        ..Default::default()
    })?;
    println!("parameters: {}", model.params().total_size());
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            epochs,
            ..Default::default()
        },
    );
    let start = Instant::now();
    trainer.fit(&train, &val, &mut std::io::stdout())?;
    println!("steps {} in {:.1}s", trainer.opt.step, start.elapsed().as_secs_f64());
    Ok(())
}
