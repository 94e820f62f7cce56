use ndarray::Array2;

use super::Backbone;
use crate::graph::{Graph, Var};
use crate::numeric::Image;

const LN_EPS: f64 = 1e-5;

/// Flattens non-overlapping patches in row-major patch order. Each row is
/// laid out channel-major (`c, py, px`), matching a `[D, 3, p, p]`
/// convolution kernel reshaped to `[3·p·p, D]`.
pub(super) fn patchify(image: &Image, patch: usize) -> Array2<f64> {
    let side = image.dim().0 / patch;
    let mut out = Array2::zeros((side * side, 3 * patch * patch));
    for gy in 0..side {
        for gx in 0..side {
            let mut row = out.row_mut(gy * side + gx);
            let mut k = 0;
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        row[k] = image[[gy * patch + py, gx * patch + px, c]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

pub(super) fn embed(bb: &Backbone, g: &mut Graph, image: &Image) -> Var {
    let patches = g.constant(patchify(image, bb.config.patch_size));
    let w = bb.leaf(g, "visual.patch_embed.weight");
    let x = g.matmul(patches, w);
    let cls = bb.leaf(g, "visual.class_embedding");
    let tokens = g.concat_rows(&[cls, x]);
    let pos = bb.leaf(g, "visual.positional_embedding");
    let tokens = g.add(tokens, pos);
    let gamma = bb.leaf(g, "visual.ln_pre.weight");
    let beta = bb.leaf(g, "visual.ln_pre.bias");
    g.layer_norm(tokens, gamma, beta, LN_EPS)
}

pub(super) fn layer_norm(bb: &Backbone, g: &mut Graph, prefix: &str, x: Var) -> Var {
    let gamma = bb.leaf(g, &format!("{prefix}.weight"));
    let beta = bb.leaf(g, &format!("{prefix}.bias"));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

fn linear(bb: &Backbone, g: &mut Graph, prefix: &str, x: Var) -> Var {
    let w = bb.leaf(g, &format!("{prefix}.weight"));
    let b = bb.leaf(g, &format!("{prefix}.bias"));
    g.linear(x, w, b)
}

/// Pre-LN residual block: `x + attn(ln_1 x)`, then `x + mlp(ln_2 x)`.
pub(super) fn block(bb: &Backbone, g: &mut Graph, tower: &str, index: usize, x: Var, heads: usize) -> Var {
    let p = format!("{tower}.blocks.{index}");
    let d = g.shape(x).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let h = layer_norm(bb, g, &format!("{p}.ln_1"), x);
    let qkv = linear(bb, g, &format!("{p}.attn.qkv"), h);
    let mut head_out = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = g.slice_cols(qkv, i * dh, (i + 1) * dh);
        let k = g.slice_cols(qkv, d + i * dh, d + (i + 1) * dh);
        let v = g.slice_cols(qkv, 2 * d + i * dh, 2 * d + (i + 1) * dh);
        let scores = g.matmul_transb(q, k);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        head_out.push(g.matmul(attn, v));
    }
    let o = if heads == 1 { head_out[0] } else { g.concat_cols(&head_out) };
    let o = linear(bb, g, &format!("{p}.attn.out"), o);
    let x = g.add(x, o);

    let h = layer_norm(bb, g, &format!("{p}.ln_2"), x);
    let h = linear(bb, g, &format!("{p}.mlp.fc"), h);
    let h = g.activation(h, bb.config.activation.into());
    let h = linear(bb, g, &format!("{p}.mlp.proj"), h);
    g.add(x, h)
}
