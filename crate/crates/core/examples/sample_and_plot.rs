//! Train briefly (or load a checkpoint), draw futures for a few held-out
//! pasts and write one SVG per past.

use hba_flow::cli::render_svg;
use hba_flow::data::{generate_synthetic, validation_split, window_and_normalize, SyntheticScenarioConfig, WindowConfig};
use hba_flow::model::{load_checkpoint, HbaFlowModel, ModelConfig};
use hba_flow::train::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_synthetic(&SyntheticScenarioConfig {
        count: 400,
        ..Default::default()
    })?;
    let ds = window_and_normalize(&data.tracks, &WindowConfig::default())?;
    let all: Vec<_> = ds.examples.iter().collect();
    let (train, test) = validation_split(&all, 0.1, 0)?;
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path.as_ref())?,
        None => {
            let mut t = Trainer::new(
                HbaFlowModel::new(ModelConfig::default())?,
                TrainConfig {
                    epochs: 10,
                    ..Default::default()
                },
            );
            t.fit(&train, &[], &mut std::io::sink())?;
            t.model
        }
    };
    let out = std::env::temp_dir().join("hbaflow-samples");
    std::fs::create_dir_all(&out)?;
    for (i, ex) in test.iter().take(3).enumerate() {
        let (samples, _) = model.sample(&ex.x, 30, ex.y.len(), i as u64)?;
        let path = out.join(format!("example{i}.svg"));
        std::fs::write(&path, render_svg(ex, &samples))?;
        println!("{}", path.display());
    }
    Ok(())
}
