//! Decompose a short trajectory into its Haar pyramid and rebuild it.

use hba_flow::haar::{decompose, reconstruct, Trajectory};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let alpha: f64 = std::env::args().nth(1).map_or(Ok(0.5), |s| s.parse())?;
    // a gentle left turn, 8 steps of (x, y)
    let pts: Vec<Vec<f64>> = (0..8)
        .map(|i| {
            let a = i as f64 * 0.2;
            vec![3.0 * a.sin(), 3.0 * (1.0 - a.cos())]
        })
        .collect();
    let y = Trajectory::from_points(&pts, 0.25)?;
    let pyramid = decompose(&y, 3, &[alpha])?;
    print!("{}", pyramid.to_text());
    println!("total logdet {:.6}", pyramid.total_logdet());
    let back = reconstruct(&pyramid)?;
    println!("max reconstruction error {:e}", back.max_abs_diff(&y));
    Ok(())
}
