//! Text-on-text scoring: rectified stateless embeddings are compared with
//! the normal and abnormal prototypes and the two cosines are softmaxed
//! into an abnormality probability.

use ndarray::Array2;

use crate::cmfr::RectifiedTextField;
use crate::error::{AfrError, Result};
use crate::numeric::{bilinear_resize, cosine_similarity, softmax_pair, FeatureVector, ProbabilityMap};

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub image_score: f64,
    /// Fused map at input resolution.
    pub heatmap: ProbabilityMap,
    /// One map per stage at input resolution, for inspection.
    pub per_stage_maps: Vec<ProbabilityMap>,
}

/// `softmax(cos(f, f_a)/t, cos(f, f_n)/t)`.
pub fn tempered_score(f: &[f64], f_a: &[f64], f_n: &[f64], temperature: f64) -> Result<f64> {
    if f.len() != f_a.len() || f.len() != f_n.len() {
        return Err(AfrError::shape("prototype width", f.len(), format!("{} and {}", f_a.len(), f_n.len())));
    }
    let s_a = cosine_similarity(f, f_a)?;
    let s_n = cosine_similarity(f, f_n)?;
    Ok(softmax_pair(s_a / temperature, s_n / temperature))
}

/// Abnormality probability of a rectified class-token embedding.
pub fn image_score(f_t1_s: &FeatureVector, f_a: &FeatureVector, f_n: &FeatureVector) -> Result<f64> {
    tempered_score(f_t1_s.as_slice(), f_a.as_slice(), f_n.as_slice(), 1.0)
}

/// Per-patch probabilities on the patch grid, before upsampling. Row 0 of
/// `rectified` is the class token and is skipped.
pub fn patch_grid(
    rectified: &Array2<f64>,
    f_a: &FeatureVector,
    f_n: &FeatureVector,
    grid_side: usize,
    temperature: f64,
) -> Result<ProbabilityMap> {
    let n_p = grid_side * grid_side;
    if rectified.nrows() != n_p + 1 {
        return Err(AfrError::shape("rectified rows", n_p + 1, rectified.nrows()));
    }
    let mut grid = Array2::zeros((grid_side, grid_side));
    for i in 0..n_p {
        let row = rectified.row(i + 1).to_vec();
        grid[[i / grid_side, i % grid_side]] = tempered_score(&row, f_a.as_slice(), f_n.as_slice(), temperature)?;
    }
    ProbabilityMap::new(grid)
}

/// Dense anomaly map at `target` resolution.
pub fn pixel_map(
    rect: &RectifiedTextField,
    f_a: &FeatureVector,
    f_n: &FeatureVector,
    grid_side: usize,
    target: (usize, usize),
) -> Result<ProbabilityMap> {
    bilinear_resize(&patch_grid(&rect.f_ts_per_patch, f_a, f_n, grid_side, 1.0)?, target)
}

/// Elementwise mean of equally sized maps.
pub fn fuse_stages(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps
        .first()
        .ok_or_else(|| AfrError::shape("stage maps", ">= 1", 0))?;
    let mut sum = Array2::zeros(first.dims());
    for m in maps {
        if m.dims() != first.dims() {
            return Err(AfrError::shape("stage map", format!("{:?}", first.dims()), format!("{:?}", m.dims())));
        }
        sum += m.values();
    }
    let n = maps.len() as f64;
    // The mean of values in [0, 1] can drift past 1 by an ulp.
    ProbabilityMap::new(sum.mapv(|v| (v / n).clamp(0.0, 1.0)))
}
