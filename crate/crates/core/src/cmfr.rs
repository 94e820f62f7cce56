//! Rectifies the stateless text embedding with per-patch visual features:
//! `concat → conv → ReLU → conv → sigmoid → linear → split`, then
//! `f_ts + f_v ⊙ M_v` for every token row.
//!
//! Both convolutions act on one position at a time (kernel size 1), so they
//! are channel-mixing affine maps applied row by row.

use ndarray::{s, Array2};

use crate::error::{AfrError, Result};
use crate::graph::{Graph, Var};
use crate::numeric::FeatureVector;
use crate::params::{Linear, LinearVars};

#[derive(Debug, Clone, PartialEq)]
pub struct RectificationWeights {
    /// `2D → hidden`
    pub conv1: Linear,
    /// `hidden → 2D`
    pub conv2: Linear,
    /// `2D → 2D`, split into `M_v | M_t`
    pub linear: Linear,
}

impl RectificationWeights {
    pub fn dim(&self) -> usize {
        self.conv1.in_dim() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let two_d = self.conv1.in_dim();
        if two_d == 0 || two_d % 2 != 0 {
            return Err(AfrError::shape("rectification input width", "even and positive", two_d));
        }
        let checks = [
            ("conv2 input", self.conv2.in_dim(), self.conv1.out_dim()),
            ("conv2 output", self.conv2.out_dim(), two_d),
            ("linear input", self.linear.in_dim(), two_d),
            ("linear output", self.linear.out_dim(), two_d),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(AfrError::shape(format!("rectification {what}"), want, got));
            }
        }
        Ok(())
    }

    pub(crate) fn leaves(&self, g: &mut Graph) -> RectificationVars {
        RectificationVars {
            conv1: self.conv1.leaves(g),
            conv2: self.conv2.leaves(g),
            linear: self.linear.leaves(g),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RectificationVars {
    pub conv1: LinearVars,
    pub conv2: LinearVars,
    pub linear: LinearVars,
}

/// Output of one rectification block over `N` token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedTextField {
    /// Row `i` is the stateless embedding rectified by token `i`.
    pub f_ts_per_patch: Array2<f64>,
    pub m_v: Array2<f64>,
    /// Computed and returned, consumed by nothing downstream.
    pub m_t: Array2<f64>,
    /// The sigmoid activations `[N × 2D]`, always in `[0, 1]`.
    pub gate: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct RectifiedVars {
    pub out: Var,
    pub m_v: Var,
    pub m_t: Var,
    pub gate: Var,
}

/// Graph form of [`rectify`]. `f_v` is `[N × D]`, `f_ts` is `[1 × D]`.
///
/// With `bounded_gate` the sigmoid moves after the final linear map, which
/// bounds `M_v` and `M_t` to `[0, 1]`.
pub fn rectify_graph(
    g: &mut Graph,
    f_v: Var,
    f_ts: Var,
    w: &RectificationVars,
    bounded_gate: bool,
) -> Result<RectifiedVars> {
    let (n, d) = g.shape(f_v);
    if g.shape(f_ts) != (1, d) {
        return Err(AfrError::shape("stateless embedding", format!("1x{d}"), format!("{:?}", g.shape(f_ts))));
    }
    if g.shape(w.conv1.weight).0 != 2 * d {
        return Err(AfrError::shape("rectification input width", 2 * d, g.shape(w.conv1.weight).0));
    }
    let text = g.broadcast_rows(f_ts, n);
    let joint = g.concat_cols(&[f_v, text]);
    let h = w.conv1.apply(g, joint);
    let h = g.relu(h);
    let h = w.conv2.apply(g, h);
    let (gate, mixed) = if bounded_gate {
        let lin = w.linear.apply(g, h);
        let gate = g.sigmoid(lin);
        (gate, gate)
    } else {
        let gate = g.sigmoid(h);
        (gate, w.linear.apply(g, gate))
    };
    let m_v = g.slice_cols(mixed, 0, d);
    let m_t = g.slice_cols(mixed, d, 2 * d);
    let residual = g.mul(f_v, m_v);
    let out = g.add(text, residual);
    Ok(RectifiedVars { out, m_v, m_t, gate })
}

fn check_inputs(f_v: &Array2<f64>, f_ts: &FeatureVector, w: &RectificationWeights) -> Result<()> {
    w.validate()?;
    if f_v.ncols() != f_ts.len() {
        return Err(AfrError::shape("visual feature width", f_ts.len(), f_v.ncols()));
    }
    if f_ts.len() != w.dim() {
        return Err(AfrError::shape("stateless embedding width", w.dim(), f_ts.len()));
    }
    if f_v.nrows() == 0 {
        return Err(AfrError::shape("visual feature rows", ">= 1", 0));
    }
    Ok(())
}

/// Rectifies `f_ts` once per row of `f_v`, with the same weights for every row.
pub fn rectify(
    f_v: &Array2<f64>,
    f_ts: &FeatureVector,
    w: &RectificationWeights,
    bounded_gate: bool,
) -> Result<RectifiedTextField> {
    check_inputs(f_v, f_ts, w)?;
    let mut g = Graph::new();
    let fv = g.constant(f_v.clone());
    let ft = g.constant(f_ts.to_row());
    let vars = w.leaves(&mut g);
    let r = rectify_graph(&mut g, fv, ft, &vars, bounded_gate)?;
    Ok(RectifiedTextField {
        f_ts_per_patch: g.value(r.out).clone(),
        m_v: g.value(r.m_v).clone(),
        m_t: g.value(r.m_t).clone(),
        gate: g.value(r.gate).clone(),
    })
}

/// Single-row case of [`rectify`], for the class token.
pub fn rectify_class_token(
    f_v_class: &FeatureVector,
    f_ts: &FeatureVector,
    w: &RectificationWeights,
    bounded_gate: bool,
) -> Result<FeatureVector> {
    let r = rectify(&f_v_class.to_row(), f_ts, w, bounded_gate)?;
    FeatureVector::from_row(r.f_ts_per_patch.slice(s![0..1, ..]))
}
