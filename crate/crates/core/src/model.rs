//! The full scoring pipeline on top of a frozen backbone:
//! self-prompted image encoding, per-stage adapters, patch aggregation,
//! rectification, text-on-text scoring and stage fusion.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use ndarray::Array2;

use crate::backbone::{Backbone, TokenInjectionHook};
use crate::cmfr::{rectify_graph, RectificationVars, RectificationWeights};
use crate::config::{CmfrFallback, ModelConfig};
use crate::error::{AfrError, Result};
use crate::graph::{Graph, SparseMatrix, Var};
use crate::mpfa::pooling_operator;
use crate::numeric::{bilinear_resize, BilinearCache, FeatureVector, Image, ProbabilityMap};
use crate::params::{self, Linear, ParamStore, ParamVars, STAGES};
use crate::prompts::{PromptCache, RawTextEmbeddings};
use crate::scoring::AnomalyResult;
use crate::sp::{prompt_tokens_graph, ReplaceTailHook, VisualPromptBank};

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    /// `1×1` abnormality probability.
    pub image_prob: Var,
    /// Fused map at input resolution as an `(H·W)×1` column, row-major.
    pub heatmap: Var,
    /// Per-stage patch probabilities, `N_p×1` each.
    pub stage_patches: Vec<Var>,
}

pub struct Model {
    backbone: Arc<Backbone>,
    params: ParamStore,
    config: ModelConfig,
    prompts: PromptCache,
    pooling: Mutex<HashMap<(usize, usize), Arc<SparseMatrix>>>,
    upsample: BilinearCache,
}

impl Model {
    pub fn new(backbone: Arc<Backbone>, params: ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if backbone.config() != &config.backbone {
            return Err(AfrError::Config(
                "model backbone settings differ from the loaded backbone".into(),
            ));
        }
        let params = ParamStore::from_tensors(&config, params.tensors().clone())?;
        Ok(Model {
            prompts: PromptCache::new(config.prompts.clone()),
            backbone,
            params,
            config,
            pooling: Mutex::new(HashMap::new()),
            upsample: BilinearCache::default(),
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(backbone: Arc<Backbone>, config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed);
        Self::new(backbone, params, config)
    }

    /// Persists prompt encodings under `dir` as well as in memory.
    pub fn with_prompt_cache_dir(mut self, dir: PathBuf, backbone_tag: String) -> Self {
        self.prompts = PromptCache::new(self.config.prompts.clone()).with_dir(dir, backbone_tag);
        self
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same parameters under a different (compatible) configuration.
    pub fn reconfigured(&self, config: ModelConfig) -> Result<Self> {
        Self::new(self.backbone.clone(), self.params.clone(), config)
    }

    pub fn visual_adapter(&self, stage: usize) -> Linear {
        self.params.linear(&params::visual_adapter(stage))
    }

    pub fn text_adapter(&self) -> Linear {
        self.params.linear(params::TEXT_ADAPTER)
    }

    pub fn rectification(&self, stage: usize) -> RectificationWeights {
        let c = params::cmfr_block(stage);
        RectificationWeights {
            conv1: self.params.linear(&format!("{c}.conv1")),
            conv2: self.params.linear(&format!("{c}.conv2")),
            linear: self.params.linear(&format!("{c}.linear")),
        }
    }

    pub fn prompt_bank(&self) -> VisualPromptBank {
        VisualPromptBank {
            adapters: (0..self.config.sp.k).map(|i| self.params.linear(&params::sp_adapter(i))).collect(),
            tokens: self.params.get(params::SP_PROMPT_TOKENS).clone(),
        }
    }

    pub fn raw_text(&self, class_name: &str) -> Result<Arc<RawTextEmbeddings>> {
        self.prompts.get(&self.backbone, class_name)
    }

    fn pooling(&self, side: usize, m: usize) -> Result<Arc<SparseMatrix>> {
        let mut ops = self.pooling.lock().expect("pooling cache poisoned");
        if let Some(op) = ops.get(&(side, m)) {
            return Ok(op.clone());
        }
        let op = Arc::new(pooling_operator(side, m)?);
        ops.insert((side, m), op.clone());
        Ok(op)
    }

    /// Builds the forward pass for one raw RGB image in `[0, 1]` on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        image: &Image,
        class_name: &str,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let bb = &cfg.backbone;
        let normalized = bb.normalize(image);
        let raw = self.raw_text(class_name)?;

        let hook = if cfg.sp.active() {
            let f_cnn = self.backbone.extract_cnn_features(&normalized)?;
            let f_cnn = g.constant(f_cnn.0.to_row());
            let adapters: Vec<_> = (0..cfg.sp.k).map(|i| pv.linear(&params::sp_adapter(i))).collect();
            let tokens = pv.get(params::SP_PROMPT_TOKENS);
            let p = prompt_tokens_graph(g, f_cnn, &adapters, tokens, cfg.sp.use_pv, cfg.sp.use_pl);
            Some(ReplaceTailHook::on_graph(g, p, &cfg.sp.stages))
        } else {
            None
        };
        let taps = self
            .backbone
            .encode_image_graph(g, &normalized, hook.as_ref().map(|h| h as &dyn TokenInjectionHook))?;

        let text = pv.linear(params::TEXT_ADAPTER);
        let mut embed = |v: &FeatureVector| {
            let row = g.constant(v.to_row());
            text.apply(g, row)
        };
        let f_n = embed(&raw.normal);
        let f_a = embed(&raw.abnormal);
        let f_s = embed(&raw.stateless);

        let side = bb.grid_side();
        let n = bb.num_tokens();
        let m = cfg.mpfa.effective_m();
        let pool = if m > 1 { Some(self.pooling(side, m)?) } else { None };
        let inv_t = 1.0 / cfg.score.temperature;

        let mut stage_patches = Vec::with_capacity(STAGES);
        let mut class_probs = Vec::with_capacity(STAGES);
        for (k, &tap) in taps.iter().enumerate() {
            let stage = k + 1;
            let mut f_v = pv.linear(&params::visual_adapter(stage)).apply(g, tap);
            if let Some(op) = &pool {
                let cls = g.slice_rows(f_v, 0, 1);
                let patches = g.slice_rows(f_v, 1, n);
                let pooled = g.sparse(op.clone(), patches);
                f_v = g.concat_rows(&[cls, pooled]);
            }
            let rect = if cfg.cmfr.enabled {
                let c = params::cmfr_block(stage);
                let w = RectificationVars {
                    conv1: pv.linear(&format!("{c}.conv1")),
                    conv2: pv.linear(&format!("{c}.conv2")),
                    linear: pv.linear(&format!("{c}.linear")),
                };
                rectify_graph(g, f_v, f_s, &w, cfg.cmfr.bounded_gate)?.out
            } else {
                match cfg.cmfr.fallback {
                    CmfrFallback::Visual => f_v,
                    CmfrFallback::Stateless => g.broadcast_rows(f_s, n),
                }
            };
            let s_a = g.cosine_rows(rect, f_a)?;
            let s_n = g.cosine_rows(rect, f_n)?;
            let s_a = g.scale(s_a, inv_t);
            let s_n = g.scale(s_n, inv_t);
            let p = g.softmax_pair(s_a, s_n);
            class_probs.push(g.slice_rows(p, 0, 1));
            stage_patches.push(g.slice_rows(p, 1, n));
        }

        let image_prob = if cfg.score.average_image_stages {
            let sum = class_probs.iter().skip(1).fold(class_probs[0], |acc, &p| g.add(acc, p));
            g.scale(sum, 1.0 / class_probs.len() as f64)
        } else {
            *class_probs.last().expect("four stages")
        };
        let sum = stage_patches.iter().skip(1).fold(stage_patches[0], |acc, &p| g.add(acc, p));
        let fused = g.scale(sum, 1.0 / stage_patches.len() as f64);
        let up = self.upsample.get((side, side), (bb.image_size, bb.image_size))?;
        let heatmap = g.sparse(up, fused);
        Ok(ForwardVars {
            image_prob,
            heatmap,
            stage_patches,
        })
    }

    /// Scores one raw RGB image in `[0, 1]` at the configured size.
    pub fn infer(&self, image: &Image, class_name: &str) -> Result<AnomalyResult> {
        let mut g = Graph::new();
        let pv = self.params.leaves(&mut g, false);
        let fw = self.forward_graph(&mut g, &pv, image, class_name)?;
        let size = self.config.backbone.image_size;
        let side = self.config.backbone.grid_side();
        let image_score = g.value(fw.image_prob)[[0, 0]];
        let heatmap = column_to_map(g.value(fw.heatmap), size, size)?;
        let per_stage_maps = fw
            .stage_patches
            .iter()
            .map(|&p| bilinear_resize(&column_to_map(g.value(p), side, side)?, (size, size)))
            .collect::<Result<Vec<_>>>()?;
        if !image_score.is_finite() {
            return Err(AfrError::Numeric("image score is not finite".into()));
        }
        Ok(AnomalyResult {
            image_score,
            heatmap,
            per_stage_maps,
        })
    }
}

fn column_to_map(col: &Array2<f64>, h: usize, w: usize) -> Result<ProbabilityMap> {
    if col.iter().any(|v| !v.is_finite()) {
        return Err(AfrError::Numeric("anomaly map has non-finite values".into()));
    }
    let values = col
        .clone()
        .into_shape_with_order((h, w))
        .map_err(|_| AfrError::shape("anomaly map", h * w, col.len()))?;
    // bilinear weights can sum to 1 ± ulp
    ProbabilityMap::new(values.mapv(|v| v.clamp(0.0, 1.0)))
}
