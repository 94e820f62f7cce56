//! Shared numeric primitives: cosine similarity, the two-way softmax,
//! bilinear upsampling and patch-grid reshaping.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{AfrError, Result};
use crate::graph::SparseMatrix;

/// `H × W × 3` image tensor, row-major, channels last.
pub type Image = Array3<f64>;

/// A finite, non-empty embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(AfrError::Degenerate("feature vector has zero length".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AfrError::Numeric("feature vector has non-finite entries".into()));
        }
        Ok(FeatureVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `1 × D` row matrix.
    pub fn to_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.0.len()), self.0.clone()).expect("row shape")
    }

    pub fn from_row(row: ArrayView2<'_, f64>) -> Result<Self> {
        FeatureVector::new(row.iter().copied().collect())
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

/// Cosine similarity `⟨u, v⟩ / (‖u‖ ‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(AfrError::shape("cosine_similarity", u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nu > 0.0 && nv > 0.0) {
        return Err(AfrError::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `exp(a) / (exp(a) + exp(b))`, evaluated after shifting both logits by their max.
pub fn softmax_pair(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    ea / (ea + eb)
}

/// A dense `h × w` map of probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    values: Array2<f64>,
}

impl ProbabilityMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(AfrError::Degenerate("empty probability map".into()));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AfrError::Numeric(format!("probability map entry {bad} outside [0, 1]")));
        }
        Ok(ProbabilityMap { values })
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Result<Self> {
        ProbabilityMap::new(Array2::from_elem((h, w), value))
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn min(&self) -> f64 {
        self.values.fold(f64::INFINITY, |a, &b| a.min(b))
    }

    pub fn max(&self) -> f64 {
        self.values.fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }
}

/// Source coordinate of output index `i` under the align-corners convention.
fn source_coord(i: usize, out_len: usize, in_len: usize) -> f64 {
    if out_len == 1 || in_len == 1 {
        0.0
    } else {
        i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

fn axis_taps(i: usize, out_len: usize, in_len: usize) -> [(usize, f64); 2] {
    let x = source_coord(i, out_len, in_len);
    let lo = (x.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    let frac = x - lo as f64;
    [(lo, 1.0 - frac), (hi, frac)]
}

/// Sparse operator mapping a row-major `h×w` map (as an `hw × 1` column)
/// onto its bilinear, align-corners upsampling at `H×W`.
pub fn bilinear_operator(src: (usize, usize), dst: (usize, usize)) -> Result<SparseMatrix> {
    let ((h, w), (big_h, big_w)) = (src, dst);
    if h == 0 || w == 0 {
        return Err(AfrError::shape("bilinear source", "h, w >= 1", format!("{h}x{w}")));
    }
    if big_h == 0 || big_w == 0 {
        return Err(AfrError::shape("bilinear target", "H, W >= 1", format!("{big_h}x{big_w}")));
    }
    let mut rows = Vec::with_capacity(big_h * big_w);
    for y in 0..big_h {
        let ty = axis_taps(y, big_h, h);
        for x in 0..big_w {
            let tx = axis_taps(x, big_w, w);
            let mut entries: Vec<(usize, f64)> = Vec::with_capacity(4);
            for &(sy, wy) in &ty {
                for &(sx, wx) in &tx {
                    let weight = wy * wx;
                    if weight == 0.0 {
                        continue;
                    }
                    let col = sy * w + sx;
                    match entries.iter_mut().find(|(c, _)| *c == col) {
                        Some(e) => e.1 += weight,
                        None => entries.push((col, weight)),
                    }
                }
            }
            rows.push(entries);
        }
    }
    Ok(SparseMatrix::new(rows, h * w))
}

/// Shared cache of upsampling operators, keyed by source and target dims.
#[derive(Default)]
pub struct BilinearCache {
    ops: std::sync::Mutex<std::collections::HashMap<((usize, usize), (usize, usize)), Arc<SparseMatrix>>>,
}

impl BilinearCache {
    pub fn get(&self, src: (usize, usize), dst: (usize, usize)) -> Result<Arc<SparseMatrix>> {
        let mut ops = self.ops.lock().expect("bilinear cache poisoned");
        if let Some(op) = ops.get(&(src, dst)) {
            return Ok(op.clone());
        }
        let op = Arc::new(bilinear_operator(src, dst)?);
        ops.insert((src, dst), op.clone());
        Ok(op)
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Bilinear resize with corners aligned.
///
/// Evaluated in interpolation form so an equal-size resize returns the input
/// bit for bit and constant maps stay exactly constant.
pub fn bilinear_resize(map: &ProbabilityMap, target: (usize, usize)) -> Result<ProbabilityMap> {
    let (h, w) = map.dims();
    let (big_h, big_w) = target;
    if big_h == 0 || big_w == 0 {
        return Err(AfrError::shape("bilinear target", "H, W >= 1", format!("{big_h}x{big_w}")));
    }
    let src = map.values();
    let out = Array2::from_shape_fn(target, |(y, x)| {
        let [(y0, _), (y1, fy)] = axis_taps(y, big_h, h);
        let [(x0, _), (x1, fx)] = axis_taps(x, big_w, w);
        let top = lerp(src[[y0, x0]], src[[y0, x1]], fx);
        let bottom = lerp(src[[y1, x0]], src[[y1, x1]], fx);
        lerp(top, bottom, fy)
    });
    ProbabilityMap::new(out)
}

/// Side length of the square grid holding `n_patches` tokens.
pub fn grid_side(n_patches: usize) -> Result<usize> {
    let side = (n_patches as f64).sqrt().round() as usize;
    if side == 0 || side * side != n_patches {
        return Err(AfrError::shape(
            "grid_reshape",
            "a perfect-square patch count",
            n_patches,
        ));
    }
    Ok(side)
}

/// `[N_p × D]` patch tokens to a row-major `side × side × D` grid.
pub fn grid_reshape(tokens: &Array2<f64>) -> Result<Array3<f64>> {
    let side = grid_side(tokens.nrows())?;
    let d = tokens.ncols();
    Ok(tokens
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((side, side, d))
        .expect("square grid"))
}

/// Inverse of [`grid_reshape`].
pub fn grid_flatten(grid: &Array3<f64>) -> Array2<f64> {
    let (h, w, d) = grid.dim();
    grid.as_standard_layout()
        .to_owned()
        .into_shape_with_order((h * w, d))
        .expect("flatten grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(AfrError::Degenerate(_))
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(AfrError::Shape { .. })
        ));
    }

    #[test]
    fn softmax_pair_examples() {
        assert_eq!(softmax_pair(0.5, 0.5), 0.5);
        assert!((softmax_pair(1.0, 0.0) - 0.73106).abs() < 1e-5);
        assert!((softmax_pair(-3.0, 3.0) - 0.00247).abs() < 1e-5);
        // large logits stay finite
        assert!((softmax_pair(1000.0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resize_identity_is_bit_exact() {
        let m = ProbabilityMap::new(array![[0.1, 0.7, 0.3], [0.9, 0.2, 0.55]]).unwrap();
        let r = bilinear_resize(&m, (2, 3)).unwrap();
        assert_eq!(r, m);
    }

    #[test]
    fn resize_two_by_two_to_two_by_four() {
        let m = ProbabilityMap::new(array![[0.0, 1.0], [0.0, 1.0]]).unwrap();
        let r = bilinear_resize(&m, (2, 4)).unwrap();
        // align corners: source x = i/3 for i = 0..3
        let golden = array![[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]];
        // the sparse operator used inside the trainable pipeline agrees
        let op = bilinear_operator((2, 2), (2, 4)).unwrap();
        let col = op.apply(&array![[0.0], [1.0], [0.0], [1.0]]);
        for (a, b) in col.iter().zip(golden.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in r.values().iter().zip(golden.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        for row in r.values().rows() {
            assert!(row.windows(2).into_iter().all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn resize_rejects_zero_target() {
        let m = ProbabilityMap::constant(2, 2, 0.5).unwrap();
        assert!(bilinear_resize(&m, (0, 4)).is_err());
        assert!(bilinear_resize(&m, (3, 0)).is_err());
    }

    #[test]
    fn single_pixel_source_broadcasts() {
        let m = ProbabilityMap::constant(1, 1, 0.25).unwrap();
        let r = bilinear_resize(&m, (3, 5)).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn grid_examples() {
        let tokens = Array2::from_shape_fn((4, 2), |(i, j)| (i * 10 + j) as f64);
        let grid = grid_reshape(&tokens).unwrap();
        assert_eq!(grid[[0, 0, 0]], 0.0);
        assert_eq!(grid[[1, 1, 1]], 31.0);
        assert_eq!(grid_flatten(&grid), tokens);
        assert!(grid_reshape(&Array2::zeros((5, 2))).is_err());
    }

    proptest! {
        #[test]
        fn softmax_complement(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            prop_assert!((softmax_pair(a, b) + softmax_pair(b, a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_shift_invariance(a in -20.0f64..20.0, b in -20.0f64..20.0, c in -20.0f64..20.0) {
            prop_assert!((softmax_pair(a + c, b + c) - softmax_pair(a, b)).abs() < 1e-12);
        }

        #[test]
        fn softmax_monotone(a in -5.0f64..5.0, b in -5.0f64..5.0, d in 0.01f64..2.0) {
            prop_assert!(softmax_pair(a + d, b) > softmax_pair(a, b));
            prop_assert!(softmax_pair(a, b + d) < softmax_pair(a, b));
        }

        #[test]
        fn cosine_scale_invariance(
            u in proptest::collection::vec(-3.0f64..3.0, 5),
            v in proptest::collection::vec(-3.0f64..3.0, 5),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let su: Vec<f64> = u.iter().map(|x| x * alpha).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * beta).collect();
            let c0 = cosine_similarity(&u, &v).unwrap();
            let c1 = cosine_similarity(&su, &sv).unwrap();
            prop_assert!((c0 - c1).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c0));
        }

        #[test]
        fn resize_preserves_bounds_and_constants(
            h in 1usize..6, w in 1usize..6, th in 1usize..20, tw in 1usize..20,
            seed in proptest::collection::vec(0.0f64..1.0, 36),
            c in 0.0f64..1.0,
        ) {
            let m = ProbabilityMap::new(Array2::from_shape_fn((h, w), |(i, j)| seed[i * 6 + j])).unwrap();
            let r = bilinear_resize(&m, (th, tw)).unwrap();
            prop_assert_eq!(r.dims(), (th, tw));
            prop_assert!(r.min() >= m.min() && r.max() <= m.max());
            let k = ProbabilityMap::constant(h, w, c).unwrap();
            let rk = bilinear_resize(&k, (th, tw)).unwrap();
            prop_assert!(rk.values().iter().all(|&v| v == c));
        }

        #[test]
        fn grid_round_trip(side in 1usize..7, d in 1usize..5, seed in any::<u64>()) {
            let tokens = Array2::from_shape_fn((side * side, d), |(i, j)| {
                ((seed ^ (i as u64 * 31 + j as u64)) % 1000) as f64 / 7.0
            });
            prop_assert_eq!(grid_flatten(&grid_reshape(&tokens).unwrap()), tokens);
        }
    }
}
