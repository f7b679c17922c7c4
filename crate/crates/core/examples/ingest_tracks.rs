//! Load tracks from a `track_id,t,x,y` CSV (a generated one if no path is
//! given), window them and show the cross-validation folds.

use hba_flow::data::{generate_synthetic, kfold_split, load_tracks, window_and_normalize, write_tracks, SyntheticScenarioConfig, WindowConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let p = std::env::temp_dir().join("hbaflow-tracks.csv");
            let data = generate_synthetic(&SyntheticScenarioConfig {
                count: 25,
                ..Default::default()
            })?;
            write_tracks(&p, &data.tracks)?;
            p
        }
    };
    let tracks = load_tracks(&path)?;
    println!("{} tracks from {}", tracks.len(), path.display());
    let ds = window_and_normalize(
        &tracks,
        &WindowConfig {
            stride: 8,
            ..Default::default()
        },
    )?;
    print!("{}", ds.manifest().to_text());
    println!("{} windows", ds.examples.len());
    let folds = kfold_split(&ds.examples, 5, 0)?;
    for k in 0..5 {
        let (train, test) = folds.split(&ds.examples, k);
        println!("fold {k}: test tracks {:?}, {} train / {} test windows", folds.folds[k], train.len(), test.len());
    }
    Ok(())
}
