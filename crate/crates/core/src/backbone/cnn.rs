use ndarray::{Array2, Array3};

use super::{Backbone, CnnFeature};
use crate::error::Result;
use crate::numeric::{FeatureVector, Image};

/// 3×3 convolution, stride 2, zero padding 1, followed by ReLU.
///
/// `weight` is `[9·C_in × C_out]` with rows ordered `(ky, kx, c_in)`.
pub(crate) fn conv3x3_s2_relu(x: &Array3<f64>, weight: &Array2<f64>, bias: &Array2<f64>) -> Array3<f64> {
    let (h, w, cin) = x.dim();
    let cout = weight.ncols();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut cols = Array2::zeros((oh * ow, 9 * cin));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = cols.row_mut(oy * ow + ox);
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    let ix = (2 * ox + kx) as isize - 1;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for c in 0..cin {
                        row[(ky * 3 + kx) * cin + c] = x[[iy as usize, ix as usize, c]];
                    }
                }
            }
        }
    }
    let y = (cols.dot(weight) + bias).mapv(|v| v.max(0.0));
    y.into_shape_with_order((oh, ow, cout)).expect("conv output shape")
}

pub(super) fn forward(bb: &Backbone, image: &Image) -> Result<CnnFeature> {
    let mut x = image.clone();
    for i in 1..=3 {
        let w = bb.tensor(&format!("cnn.conv{i}.weight"));
        let b = bb.tensor(&format!("cnn.conv{i}.bias"));
        x = conv3x3_s2_relu(&x, w, b);
    }
    let (h, w, c) = x.dim();
    let mut pooled = vec![0.0; c];
    for ((_, _, k), v) in x.indexed_iter() {
        pooled[k] += v;
    }
    let n = (h * w) as f64;
    pooled.iter_mut().for_each(|v| *v /= n);
    Ok(CnnFeature(FeatureVector::new(pooled)?))
}
