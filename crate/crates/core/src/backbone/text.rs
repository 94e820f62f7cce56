use ndarray::Array2;

use super::{vit, Backbone};
use crate::error::{AfrError, Result};
use crate::graph::Graph;
use crate::numeric::FeatureVector;

/// 256 byte tokens plus begin/end markers.
pub const TEXT_VOCAB: usize = 258;
pub const BOS_TOKEN: usize = 256;
pub const EOS_TOKEN: usize = 257;

/// Byte-level tokens framed by BOS/EOS.
pub fn tokenize(prompt: &str, context_length: usize) -> Result<Vec<usize>> {
    if prompt.trim().is_empty() {
        return Err(AfrError::Config("prompt must not be empty".into()));
    }
    let mut tokens = Vec::with_capacity(prompt.len() + 2);
    tokens.push(BOS_TOKEN);
    tokens.extend(prompt.bytes().map(usize::from));
    tokens.push(EOS_TOKEN);
    if tokens.len() > context_length {
        return Err(AfrError::Config(format!(
            "prompt {prompt:?} needs {} tokens, context length is {context_length}",
            tokens.len()
        )));
    }
    Ok(tokens)
}

/// Token embeddings and positions, bidirectional blocks, final norm, then
/// the EOS row projected to `text_dim`.
pub(super) fn encode(bb: &Backbone, prompt: &str) -> Result<FeatureVector> {
    let cfg = &bb.config;
    let tokens = tokenize(prompt, cfg.context_length)?;
    let table = bb.tensor("text.token_embedding");
    let pos = bb.tensor("text.positional_embedding");
    let mut emb = Array2::zeros((tokens.len(), cfg.text_width));
    for (i, &t) in tokens.iter().enumerate() {
        let row = &table.row(t) + &pos.row(i);
        emb.row_mut(i).assign(&row);
    }

    let mut g = Graph::new();
    let mut x = g.constant(emb);
    for l in 0..cfg.text_layers {
        x = vit::block(bb, &mut g, "text", l, x, cfg.text_heads);
    }
    let x = vit::layer_norm(bb, &mut g, "text.ln_final", x);
    let last = tokens.len() - 1;
    let eos = g.slice_rows(x, last, last + 1);
    let proj = bb.leaf(&mut g, "text.projection");
    let out = g.matmul(eos, proj);
    FeatureVector::from_row(g.value(out).view())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_are_framed_bytes() {
        assert_eq!(tokenize("ab", 10).unwrap(), vec![BOS_TOKEN, 97, 98, EOS_TOKEN]);
        assert!(tokenize("abc", 4).is_err());
        assert!(tokenize("  ", 10).is_err());
    }
}
