//! Text-on-text scoring: a feature is compared with the abnormal and normal
//! prototypes, and the two tempered cosines go through a softmax.

use anomaly_rectify::numeric::{FeatureVector, ProbabilityMap};
use anomaly_rectify::scoring::{fuse_stages, image_score, tempered_score};

fn main() -> anomaly_rectify::Result<()> {
    let f_a = FeatureVector::new(vec![1.0, 0.0, 0.0])?;
    let f_n = FeatureVector::new(vec![0.0, 1.0, 0.0])?;
    for (name, f) in [
        ("towards abnormal", vec![0.9, 0.1, 0.2]),
        ("halfway", vec![1.0, 1.0, 0.0]),
        ("towards normal", vec![0.1, 0.9, 0.2]),
    ] {
        let s = image_score(&FeatureVector::new(f.clone())?, &f_a, &f_n)?;
        let sharp = tempered_score(&f, f_a.as_slice(), f_n.as_slice(), 0.07)?;
        println!("{name:>17}: p = {s:.4}  (t = 0.07: {sharp:.4})");
    }

    let a = ProbabilityMap::constant(2, 2, 0.2)?;
    let b = ProbabilityMap::constant(2, 2, 0.6)?;
    let fused = fuse_stages(&[a, b])?;
    println!("fused stage maps: {:?}", fused.values().iter().collect::<Vec<_>>());
    Ok(())
}
