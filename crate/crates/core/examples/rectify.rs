//! Rectifies a stateless text embedding with each visual token, so every
//! patch gets its own text feature.

use anomaly_rectify::cmfr::{rectify, RectificationWeights};
use anomaly_rectify::numeric::FeatureVector;
use anomaly_rectify::params::Linear;
use ndarray::{array, Array2};

fn main() -> anomaly_rectify::Result<()> {
    let d = 3;
    let w = RectificationWeights {
        conv1: Linear::new(Array2::from_elem((2 * d, 2), 0.3), Array2::zeros((1, 2)))?,
        conv2: Linear::new(Array2::from_elem((2, 2 * d), 0.5), Array2::zeros((1, 2 * d)))?,
        linear: Linear::identity(2 * d),
    };
    let f_s = FeatureVector::new(vec![0.2, 0.4, 0.1])?;
    let tokens = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, -1.0]];
    let r = rectify(&tokens, &f_s, &w, false)?;
    for (i, row) in r.f_ts_per_patch.rows().into_iter().enumerate() {
        println!("token {i}: gate {:.3?}  text {:.3?}", r.m_v.row(i).to_vec(), row.to_vec());
    }
    let bounded = rectify(&tokens, &f_s, &w, true)?;
    println!("bounded gates lie in (0, 1): {:.3?}", bounded.m_v.row(2).to_vec());
    Ok(())
}
