//! Neighborhood averaging of patch tokens on their grid, for m = 1, 3, 5.

use anomaly_rectify::mpfa::aggregate;
use ndarray::Array2;

fn main() -> anomaly_rectify::Result<()> {
    let side = 5;
    // one hot patch in the middle of a quiet grid
    let mut tokens = Array2::zeros((side * side, 1));
    tokens[[12, 0]] = 9.0;
    for m in [1, 3, 5] {
        let out = aggregate(&tokens, m)?;
        println!("m = {m}");
        for r in 0..side {
            let row: Vec<String> = (0..side).map(|c| format!("{:5.2}", out[[r * side + c, 0]])).collect();
            println!("  {}", row.join(" "));
        }
    }
    Ok(())
}
