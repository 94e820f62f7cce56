//! The trainable parameter registry: per-stage visual adapters, the text
//! adapter, four rectification blocks and the self-prompting bank.
//! Backbone tensors never appear here.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{self, Dtype, TensorMap};
use crate::config::ModelConfig;
use crate::error::{AfrError, Result};
use crate::graph::{Graph, Var};

pub const STAGES: usize = 4;

/// An affine map `x W + b` with `W` stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array2<f64>) -> Result<Self> {
        if bias.dim() != (1, weight.ncols()) {
            return Err(AfrError::shape(
                "linear bias",
                format!("1x{}", weight.ncols()),
                format!("{}x{}", bias.nrows(), bias.ncols()),
            ));
        }
        Ok(Linear { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: Array2::eye(dim),
            bias: Array2::zeros((1, dim)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(AfrError::shape("linear input", self.in_dim(), x.ncols()));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    pub(crate) fn leaves(&self, g: &mut Graph) -> LinearVars {
        LinearVars {
            weight: g.constant(self.weight.clone()),
            bias: g.constant(self.bias.clone()),
        }
    }
}

/// A [`Linear`] living on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.weight, self.bias)
    }
}

pub fn visual_adapter(stage: usize) -> String {
    format!("adapter.visual.stage{stage}")
}

pub const TEXT_ADAPTER: &str = "adapter.text";

pub fn cmfr_block(stage: usize) -> String {
    format!("cmfr.stage{stage}")
}

pub fn sp_adapter(i: usize) -> String {
    format!("sp.adapter{i}")
}

pub const SP_PROMPT_TOKENS: &str = "sp.prompt_tokens";

/// Names and shapes of every trainable tensor for `cfg`.
pub fn param_shapes(cfg: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    let b = &cfg.backbone;
    let d = b.shared_dim;
    let hidden = cfg.cmfr.hidden_width(d);
    let mut m = BTreeMap::new();
    let linear = |m: &mut BTreeMap<_, _>, prefix: String, i: usize, o: usize| {
        m.insert(format!("{prefix}.weight"), (i, o));
        m.insert(format!("{prefix}.bias"), (1, o));
    };
    for k in 1..=STAGES {
        linear(&mut m, visual_adapter(k), b.embed_dim, d);
        let c = cmfr_block(k);
        linear(&mut m, format!("{c}.conv1"), 2 * d, hidden);
        linear(&mut m, format!("{c}.conv2"), hidden, 2 * d);
        linear(&mut m, format!("{c}.linear"), 2 * d, 2 * d);
    }
    linear(&mut m, TEXT_ADAPTER.to_string(), b.text_dim, d);
    for i in 0..cfg.sp.k {
        linear(&mut m, sp_adapter(i), b.cnn_dim(), b.embed_dim);
    }
    m.insert(SP_PROMPT_TOKENS.to_string(), (cfg.sp.k, b.embed_dim));
    m
}

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    tensors: TensorMap,
}

/// Standard deviation of the learnable prompt tokens and prompt adapters at init.
pub const PROMPT_INIT_STD: f64 = 0.02;

impl ParamStore {
    /// Seeded initialization: biases zero, prompt tokens and prompt adapters
    /// `N(0, 0.02²)`, every other weight `N(0, 1/fan_in)`, drawn in name
    /// order from one ChaCha8 stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = TensorMap::new();
        for (name, (r, c)) in param_shapes(cfg) {
            let t = if name.ends_with(".bias") {
                Array2::zeros((r, c))
            } else {
                let std = if name.starts_with("sp.") {
                    PROMPT_INIT_STD
                } else {
                    (1.0 / r as f64).sqrt()
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                Array2::from_shape_simple_fn((r, c), || dist.sample(&mut rng))
            };
            tensors.insert(name, t);
        }
        ParamStore { tensors }
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: TensorMap) -> Result<Self> {
        checkpoint::validate_shapes(&param_shapes(cfg), &tensors)?;
        Ok(ParamStore { tensors })
    }

    pub fn load(cfg: &ModelConfig, dir: &Path) -> Result<Self> {
        Self::from_tensors(cfg, checkpoint::read_tensors(dir)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::write_tensors(dir, &self.tensors, Dtype::F32)
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let slot = self.get_mut(name);
        if slot.dim() != value.dim() {
            return Err(AfrError::shape(format!("parameter {name}"), format!("{:?}", slot.dim()), format!("{:?}", value.dim())));
        }
        *slot = value;
        Ok(())
    }

    pub fn linear(&self, prefix: &str) -> Linear {
        Linear {
            weight: self.get(&format!("{prefix}.weight")).clone(),
            bias: self.get(&format!("{prefix}.bias")).clone(),
        }
    }

    pub fn set_linear(&mut self, prefix: &str, l: &Linear) -> Result<()> {
        self.set(&format!("{prefix}.weight"), l.weight.clone())?;
        self.set(&format!("{prefix}.bias"), l.bias.clone())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    /// Puts every parameter on `g`, as trainable leaves or as constants.
    pub fn leaves(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }
}

/// Graph handles for a [`ParamStore`].
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    pub fn linear(&self, prefix: &str) -> LinearVars {
        LinearVars {
            weight: self.get(&format!("{prefix}.weight")),
            bias: self.get(&format!("{prefix}.bias")),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
