//! Multi-patch aggregation: each patch token becomes the mean of the
//! in-bounds `m×m` window around it on the patch grid.
//!
//! Border windows average over fewer cells instead of padding with zeros.

use crate::error::{AfrError, Result};
use crate::graph::SparseMatrix;
use crate::numeric::grid_side;
use ndarray::Array2;

fn check_window(side: usize, m: usize) -> Result<()> {
    if m == 0 || m % 2 == 0 {
        return Err(AfrError::Config(format!("window size must be odd and positive, got {m}")));
    }
    if m > side {
        return Err(AfrError::Config(format!(
            "window size {m} exceeds the {side}x{side} patch grid"
        )));
    }
    Ok(())
}

/// Averaging operator over a `side×side` grid in row-major patch order.
pub fn pooling_operator(side: usize, m: usize) -> Result<SparseMatrix> {
    check_window(side, m)?;
    let r = m / 2;
    let rows = (0..side * side)
        .map(|cell| {
            let (y, x) = (cell / side, cell % side);
            let ys = y.saturating_sub(r)..=(y + r).min(side - 1);
            let xs = x.saturating_sub(r)..=(x + r).min(side - 1);
            let count = (ys.clone().count() * xs.clone().count()) as f64;
            ys.flat_map(|yy| xs.clone().map(move |xx| (yy * side + xx, 1.0 / count)))
                .collect()
        })
        .collect();
    Ok(SparseMatrix::new(rows, side * side))
}

/// Aggregates patch tokens `[N_p × D]` (class token already removed).
pub fn aggregate(patch_tokens: &Array2<f64>, m: usize) -> Result<Array2<f64>> {
    let side = grid_side(patch_tokens.nrows())?;
    check_window(side, m)?;
    if m == 1 {
        return Ok(patch_tokens.clone());
    }
    Ok(pooling_operator(side, m)?.apply(patch_tokens))
}
