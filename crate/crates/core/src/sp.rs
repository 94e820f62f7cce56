//! Self-prompting: `K` adapters turn the pooled CNN feature into visual
//! prompt tokens, a learnable bank is added on top, and the sum replaces
//! the last `K` tokens before every hooked transformer layer.

use std::sync::Arc;

use ndarray::Array2;

use crate::backbone::{BackboneConfig, CnnFeature, TokenInjectionHook};
use crate::error::{AfrError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Linear, LinearVars};

#[derive(Debug, Clone, PartialEq)]
pub struct VisualPromptBank {
    /// `K` maps `D_cnn → D_v`.
    pub adapters: Vec<Linear>,
    /// Learnable tokens `[K × D_v]`.
    pub tokens: Array2<f64>,
}

impl VisualPromptBank {
    pub fn k(&self) -> usize {
        self.adapters.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(AfrError::Config("prompt bank needs at least one adapter".into()));
        }
        if self.tokens.nrows() != k {
            return Err(AfrError::shape("learnable prompt rows", k, self.tokens.nrows()));
        }
        let (din, dout) = (self.adapters[0].in_dim(), self.adapters[0].out_dim());
        for (i, a) in self.adapters.iter().enumerate() {
            if a.in_dim() != din || a.out_dim() != dout {
                return Err(AfrError::shape(
                    format!("prompt adapter {i}"),
                    format!("{din}x{dout}"),
                    format!("{}x{}", a.in_dim(), a.out_dim()),
                ));
            }
        }
        if self.tokens.ncols() != dout {
            return Err(AfrError::shape("learnable prompt width", dout, self.tokens.ncols()));
        }
        Ok(())
    }
}

/// Row `i` is adapter `i` applied to `f_cnn`.
pub fn make_visual_prompts(f_cnn: &CnnFeature, bank: &VisualPromptBank) -> Result<Array2<f64>> {
    bank.validate()?;
    let x = f_cnn.0.to_row();
    let d_out = bank.tokens.ncols();
    let mut out = Array2::zeros((bank.k(), d_out));
    for (i, a) in bank.adapters.iter().enumerate() {
        if a.in_dim() != x.ncols() {
            return Err(AfrError::shape("CNN feature width", a.in_dim(), x.ncols()));
        }
        out.row_mut(i).assign(&a.apply(&x)?.row(0));
    }
    Ok(out)
}

pub fn combine_prompts(p_v: &Array2<f64>, p_l: &Array2<f64>) -> Result<Array2<f64>> {
    if p_v.dim() != p_l.dim() {
        return Err(AfrError::shape(
            "prompt tokens",
            format!("{:?}", p_v.dim()),
            format!("{:?}", p_l.dim()),
        ));
    }
    Ok(p_v + p_l)
}

/// Graph form of the prompt tokens. Disabling one source drops its term;
/// at least one must stay on.
pub fn prompt_tokens_graph(
    g: &mut Graph,
    f_cnn: Var,
    adapters: &[LinearVars],
    tokens: Var,
    use_pv: bool,
    use_pl: bool,
) -> Var {
    assert!(use_pv || use_pl, "prompt tokens need P_v or P_l");
    let p_v = use_pv.then(|| {
        let rows: Vec<Var> = adapters.iter().map(|a| a.apply(g, f_cnn)).collect();
        g.concat_rows(&rows)
    });
    match (p_v, use_pl) {
        (Some(p_v), true) => g.add(p_v, tokens),
        (Some(p_v), false) => p_v,
        (None, _) => tokens,
    }
}

#[derive(Debug, Clone)]
enum Prompts {
    Values(Arc<Array2<f64>>),
    Node(Var),
}

/// Replaces the last `K` token rows with the prompt tokens before every
/// layer (from the second on) of the configured stages.
#[derive(Debug, Clone)]
pub struct ReplaceTailHook {
    prompts: Prompts,
    k: usize,
    stages: Vec<usize>,
}

/// Hook for stage 1 only.
pub fn make_injection_hook(prompts: Array2<f64>) -> ReplaceTailHook {
    make_staged_hook(prompts, &[1])
}

pub fn make_staged_hook(prompts: Array2<f64>, stages: &[usize]) -> ReplaceTailHook {
    ReplaceTailHook {
        k: prompts.nrows(),
        prompts: Prompts::Values(Arc::new(prompts)),
        stages: stages.to_vec(),
    }
}

impl ReplaceTailHook {
    /// Hook whose prompts already live on the graph it will run on.
    pub fn on_graph(g: &Graph, prompts: Var, stages: &[usize]) -> Self {
        ReplaceTailHook {
            k: g.shape(prompts).0,
            prompts: Prompts::Node(prompts),
            stages: stages.to_vec(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn stages(&self) -> &[usize] {
        &self.stages
    }

    /// Plain-matrix form of [`TokenInjectionHook::inject`].
    pub fn replace(&self, tokens: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let x = g.constant(tokens.clone());
        let y = self.inject(&mut g, 0, x)?;
        Ok(g.value(y).clone())
    }
}

impl TokenInjectionHook for ReplaceTailHook {
    fn applies_before(&self, layer: usize, config: &BackboneConfig) -> bool {
        layer >= 2 && self.stages.contains(&config.stage_of(layer))
    }

    fn inject(&self, g: &mut Graph, _layer: usize, tokens: Var) -> Result<Var> {
        let (n, d) = g.shape(tokens);
        if n < self.k + 1 {
            return Err(AfrError::shape(
                "tokens reaching the prompt hook",
                format!(">= {}", self.k + 1),
                n,
            ));
        }
        let p = match &self.prompts {
            Prompts::Values(v) => g.constant_shared(v.clone()),
            Prompts::Node(v) => *v,
        };
        if g.shape(p).1 != d {
            return Err(AfrError::shape("prompt token width", d, g.shape(p).1));
        }
        let kept = g.slice_rows(tokens, 0, n - self.k);
        Ok(g.concat_rows(&[kept, p]))
    }
}
