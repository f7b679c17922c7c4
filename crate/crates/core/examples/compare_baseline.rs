//! Train on the synthetic intersection, then compare against a unimodal
//! conditional Gaussian on held-out tracks.

use hba_flow::coupling::{ConditionerConfig, StackConfig, TransformKind};
use hba_flow::data::{generate_synthetic, kfold_split, validation_split, window_and_normalize, SyntheticScenarioConfig, WindowConfig};
use hba_flow::eval::{evaluate, EvalConfig, GaussianBaseline};
use hba_flow::model::{HbaFlowModel, ModelConfig, PriorKind};
use hba_flow::train::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(Ok(40), |s| s.parse())?;
    let prior = match args.next().as_deref() {
        Some("gaussian") => PriorKind::Gaussian,
        _ => PriorKind::Hba,
    };
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let count: usize = args.next().map_or(Ok(600), |s| s.parse())?;
    let data = generate_synthetic(&SyntheticScenarioConfig {
        count,
        ..Default::default()
    })?;
    let ds = window_and_normalize(&data.tracks, &WindowConfig::default())?;
    let folds = kfold_split(&ds.examples, 5, 0)?;
    let (train_all, test) = folds.split(&ds.examples, 0);
    let (train, val) = validation_split(&train_all, 0.1, 0)?;
    let model = HbaFlowModel::new(ModelConfig {
        stack: StackConfig {
            steps: 4,
            kind: TransformKind::Nlsq,
            conditioner: ConditionerConfig::default(),
        },
        prior,
        init_seed: seed,
        ..Default::default()
    })?;
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            epochs,
            seed,
            ..Default::default()
        },
    );
    trainer.fit(&train, &val, &mut std::io::stdout())?;
    let cfg = EvalConfig::default();
    let flow = evaluate(trainer.best_model(), &test, &cfg)?;
    let base = GaussianBaseline::fit(&train_all, 1e-6, 1e-9)?;
    let gauss = evaluate(&base, &test, &cfg)?;
    println!("flow     {}", flow.csv_row());
    println!("baseline {}", gauss.csv_row());
    println!("{}", flow.csv_header());
    Ok(())
}
