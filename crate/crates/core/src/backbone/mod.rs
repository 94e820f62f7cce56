//! Frozen vision/text encoders with the stage structure the pipeline needs.
//!
//! The image tower is a pre-LN ViT split into four equal stages; the token
//! state after the last layer of each stage is tapped. A
//! [`TokenInjectionHook`] may rewrite the token matrix before any layer
//! except the very first. The text tower embeds prompts byte by byte, and a
//! small strided CNN provides one pooled feature vector per image.
//!
//! Weights come either from a seed ([`BackboneSource::Surrogate`]) or from
//! a named-tensor checkpoint directory ([`BackboneSource::File`]).

mod cnn;
mod text;
mod vit;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Dtype, TensorMap};
use crate::error::{AfrError, Result};
use crate::graph::{Activation, Graph, Var};
use crate::numeric::{FeatureVector, Image};

pub use text::{tokenize, BOS_TOKEN, EOS_TOKEN, TEXT_VOCAB};

/// Geometry and widths of both towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers_total: usize,
    pub stages: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub activation: ActivationKind,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_dim: usize,
    pub context_length: usize,
    /// Width of the adapted visual and text embeddings.
    pub shared_dim: usize,
    /// Output channels of the three stride-2 convolutions; the last is `D_cnn`.
    pub cnn_channels: [usize; 3],
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Gelu,
    QuickGelu,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Gelu => Activation::Gelu,
            ActivationKind::QuickGelu => Activation::QuickGelu,
        }
    }
}

const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::surrogate()
    }
}

impl BackboneConfig {
    /// Desk-scale stand-in: 64×64 input, patch 8, 8 layers, width 32.
    pub fn surrogate() -> Self {
        BackboneConfig {
            image_size: 64,
            patch_size: 8,
            layers_total: 8,
            stages: 4,
            embed_dim: 32,
            heads: 2,
            mlp_ratio: 4,
            activation: ActivationKind::Gelu,
            text_width: 32,
            text_layers: 2,
            text_heads: 2,
            text_dim: 32,
            context_length: 77,
            shared_dim: 32,
            cnn_channels: [8, 16, 32],
            pixel_mean: CLIP_MEAN,
            pixel_std: CLIP_STD,
        }
    }

    /// Smallest useful layout (32×32 input, 16 patches, width 8), for
    /// exhaustive oracle and finite-difference checks.
    pub fn tiny() -> Self {
        BackboneConfig {
            image_size: 32,
            embed_dim: 8,
            mlp_ratio: 2,
            text_width: 8,
            text_layers: 1,
            text_dim: 8,
            shared_dim: 8,
            cnn_channels: [4, 8, 8],
            ..Self::surrogate()
        }
    }

    /// ViT-L/14 CLIP geometry at 518×518 input: 24 layers tapped at 6, 12, 18, 24.
    pub fn clip_vit_l14() -> Self {
        BackboneConfig {
            image_size: 518,
            patch_size: 14,
            layers_total: 24,
            stages: 4,
            embed_dim: 1024,
            heads: 16,
            mlp_ratio: 4,
            activation: ActivationKind::QuickGelu,
            text_width: 768,
            text_layers: 12,
            text_heads: 12,
            text_dim: 768,
            context_length: 77,
            shared_dim: 768,
            cnn_channels: [64, 256, 2048],
            pixel_mean: CLIP_MEAN,
            pixel_std: CLIP_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(AfrError::Config(m));
        if self.stages != 4 {
            return fail(format!("backbone.stages must be 4, got {}", self.stages));
        }
        if self.layers_total == 0 || self.layers_total % self.stages != 0 {
            return fail(format!(
                "backbone.layers_total ({}) must be a positive multiple of {}",
                self.layers_total, self.stages
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "backbone.image_size ({}) must be divisible by backbone.patch_size ({})",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail("backbone.embed_dim must be divisible by backbone.heads".into());
        }
        if self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return fail("backbone.text_width must be divisible by backbone.text_heads".into());
        }
        if [self.embed_dim, self.text_dim, self.shared_dim, self.mlp_ratio, self.context_length]
            .contains(&0)
            || self.cnn_channels.contains(&0)
        {
            return fail("backbone widths must be positive".into());
        }
        if self.context_length < 3 {
            return fail("backbone.context_length must leave room for one byte".into());
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return fail("backbone.pixel_std must be positive".into());
        }
        Ok(())
    }

    pub fn layers_per_stage(&self) -> usize {
        self.layers_total / self.stages
    }

    /// 1-based index of the last layer of each stage.
    pub fn tap_layers(&self) -> Vec<usize> {
        (1..=self.stages).map(|k| k * self.layers_per_stage()).collect()
    }

    /// 1-based stage holding 1-based `layer`.
    pub fn stage_of(&self, layer: usize) -> usize {
        (layer - 1) / self.layers_per_stage() + 1
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn cnn_dim(&self) -> usize {
        self.cnn_channels[2]
    }

    /// Per-channel `(x - mean) / std`.
    pub fn normalize(&self, image: &Image) -> Image {
        let mut out = image.clone();
        for ((_, _, c), v) in out.indexed_iter_mut() {
            *v = (*v - self.pixel_mean[c]) / self.pixel_std[c];
        }
        out
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let want = (self.image_size, self.image_size, 3);
        if image.dim() != want {
            return Err(AfrError::shape(
                "backbone input image",
                format!("{want:?}"),
                format!("{:?}", image.dim()),
            ));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(AfrError::Numeric("input image has non-finite pixels".into()));
        }
        Ok(())
    }
}

/// Raw (pre-adapter) token matrices tapped at the end of each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureSet {
    /// One `[N × D_v]` matrix per stage; row 0 is the class token.
    pub stages: Vec<Array2<f64>>,
    pub grid_side: usize,
}

impl PatchFeatureSet {
    pub fn num_tokens(&self) -> usize {
        self.stages[0].nrows()
    }
}

/// Globally pooled CNN feature of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnFeature(pub FeatureVector);

/// Rewrites the token matrix between transformer layers.
///
/// The backbone never calls the hook before layer 1, and rejects any
/// replacement whose shape differs from the input.
pub trait TokenInjectionHook: Send + Sync {
    /// Whether to run before 1-based `layer` (always `>= 2`).
    fn applies_before(&self, layer: usize, config: &BackboneConfig) -> bool;

    fn inject(&self, g: &mut Graph, layer: usize, tokens: Var) -> Result<Var>;
}

/// Returns its input untouched at every stage-1 layer after the first.
pub struct IdentityHook;

impl TokenInjectionHook for IdentityHook {
    fn applies_before(&self, layer: usize, config: &BackboneConfig) -> bool {
        config.stage_of(layer) == 1
    }

    fn inject(&self, _g: &mut Graph, _layer: usize, tokens: Var) -> Result<Var> {
        Ok(tokens)
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneSource {
    Surrogate { seed: u64 },
    File(PathBuf),
}

impl Default for BackboneSource {
    fn default() -> Self {
        BackboneSource::Surrogate { seed: 0 }
    }
}

impl FromStr for BackboneSource {
    type Err = AfrError;

    /// `surrogate`, `surrogate:<seed>` or `file:<path>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "surrogate" {
            return Ok(BackboneSource::Surrogate { seed: 0 });
        }
        if let Some(seed) = s.strip_prefix("surrogate:") {
            let seed = seed
                .parse()
                .map_err(|_| AfrError::Config(format!("bad surrogate seed in {s:?}")))?;
            return Ok(BackboneSource::Surrogate { seed });
        }
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(BackboneSource::File(PathBuf::from(path)));
        }
        Err(AfrError::Config(format!(
            "backbone must be `surrogate`, `surrogate:<seed>` or `file:<path>`, got {s:?}"
        )))
    }
}

impl fmt::Display for BackboneSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneSource::Surrogate { seed } => write!(f, "surrogate:{seed}"),
            BackboneSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// Frozen encoders. Immutable once constructed.
pub struct Backbone {
    config: BackboneConfig,
    tensors: BTreeMap<String, Arc<Array2<f64>>>,
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backbone")
            .field("config", &self.config)
            .field("tensors", &self.tensors.len())
            .finish()
    }
}

impl Backbone {
    pub fn load(source: &BackboneSource, config: BackboneConfig) -> Result<Self> {
        match source {
            BackboneSource::Surrogate { seed } => Self::surrogate(config, *seed),
            BackboneSource::File(dir) => Self::from_checkpoint(dir, config),
        }
    }

    /// Seeded weights. Tensors are drawn in lexicographic name order from one
    /// ChaCha8 stream: layer-norm scales are 1, biases 0, projection matrices
    /// `N(0, 1/fan_in)` (`N(0, 2/fan_in)` for the ReLU convolutions, and
    /// `N(0, 1/(2·L·fan_in))` for the residual output projections of an
    /// `L`-layer tower), token
    /// tables `N(0, 1)` and class/positional embeddings `N(0, 0.1²)`.
    pub fn surrogate(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, (r, c)) in expected_shapes(&config) {
            let t = match init_rule(&name, r, config.layers_total) {
                Init::Ones => Array2::ones((r, c)),
                Init::Zeros => Array2::zeros((r, c)),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    Array2::from_shape_simple_fn((r, c), || dist.sample(&mut rng))
                }
            };
            tensors.insert(name, Arc::new(t));
        }
        Ok(Backbone { config, tensors })
    }

    pub fn from_checkpoint(dir: &Path, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let found = checkpoint::read_tensors(dir)?;
        Self::from_tensors(found, config)
    }

    pub fn from_tensors(found: TensorMap, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        checkpoint::validate_shapes(&expected_shapes(&config), &found)?;
        let tensors = found.into_iter().map(|(k, v)| (k, Arc::new(v))).collect();
        Ok(Backbone { config, tensors })
    }

    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        checkpoint::write_tensors(dir, &self.tensor_map(), dtype)
    }

    pub fn tensor_map(&self) -> TensorMap {
        self.tensors.iter().map(|(k, v)| (k.clone(), (**v).clone())).collect()
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn tensor(&self, name: &str) -> &Arc<Array2<f64>> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("backbone tensor {name} missing"))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub(crate) fn leaf(&self, g: &mut Graph, name: &str) -> Var {
        g.constant_shared(self.tensor(name).clone())
    }

    /// Runs the image tower on a normalized image, returning the four stage taps.
    pub fn encode_image(
        &self,
        image: &Image,
        hook: Option<&dyn TokenInjectionHook>,
    ) -> Result<PatchFeatureSet> {
        let mut g = Graph::new();
        let taps = self.encode_image_graph(&mut g, image, hook)?;
        Ok(PatchFeatureSet {
            stages: taps.iter().map(|&v| g.value(v).clone()).collect(),
            grid_side: self.config.grid_side(),
        })
    }

    /// [`Backbone::encode_image`] on a caller-owned graph so gradients can
    /// reach injected tokens.
    pub fn encode_image_graph(
        &self,
        g: &mut Graph,
        image: &Image,
        hook: Option<&dyn TokenInjectionHook>,
    ) -> Result<Vec<Var>> {
        self.config.check_image(image)?;
        let taps = self.config.tap_layers();
        let mut out = Vec::with_capacity(taps.len());
        let mut x = vit::embed(self, g, image);
        for layer in 1..=self.config.layers_total {
            if let Some(h) = hook {
                if layer >= 2 && h.applies_before(layer, &self.config) {
                    let before = g.shape(x);
                    let y = h.inject(g, layer, x)?;
                    if g.shape(y) != before {
                        return Err(AfrError::shape(
                            format!("token injection before layer {layer}"),
                            format!("{before:?}"),
                            format!("{:?}", g.shape(y)),
                        ));
                    }
                    x = y;
                }
            }
            x = vit::block(self, g, "visual", layer - 1, x, self.config.heads);
            if taps.contains(&layer) {
                out.push(x);
            }
        }
        Ok(out)
    }

    /// Token state before the first layer (patch embedding, class token,
    /// positions, pre-norm).
    pub fn embed_tokens(&self, image: &Image) -> Result<Array2<f64>> {
        self.config.check_image(image)?;
        let mut g = Graph::new();
        let x = vit::embed(self, &mut g, image);
        Ok(g.value(x).clone())
    }

    /// Applies 1-based image-tower `layer` to a token matrix.
    pub fn apply_layer(&self, layer: usize, tokens: &Array2<f64>) -> Result<Array2<f64>> {
        if layer == 0 || layer > self.config.layers_total {
            return Err(AfrError::Config(format!("no image layer {layer}")));
        }
        let mut g = Graph::new();
        let x = g.constant(tokens.clone());
        let y = vit::block(self, &mut g, "visual", layer - 1, x, self.config.heads);
        Ok(g.value(y).clone())
    }

    pub fn encode_text(&self, prompt: &str) -> Result<FeatureVector> {
        text::encode(self, prompt)
    }

    pub fn extract_cnn_features(&self, image: &Image) -> Result<CnnFeature> {
        self.config.check_image(image)?;
        cnn::forward(self, image)
    }
}

enum Init {
    Ones,
    Zeros,
    Normal(f64),
}

fn init_rule(name: &str, rows: usize, layers: usize) -> Init {
    if name.contains(".ln") && name.ends_with(".weight") {
        Init::Ones
    } else if name.ends_with(".bias") {
        Init::Zeros
    } else if name.ends_with("class_embedding") || name.ends_with("positional_embedding") {
        Init::Normal(0.1)
    } else if name.ends_with("token_embedding") {
        Init::Normal(1.0)
    } else if name.starts_with("cnn.") {
        Init::Normal((2.0 / rows as f64).sqrt())
    } else if name.ends_with("attn.out.weight") || name.ends_with("mlp.proj.weight") {
        // residual branches scaled down by depth, so tokens stay close to their patch
        Init::Normal((1.0 / (rows * 2 * layers) as f64).sqrt())
    } else {
        Init::Normal((1.0 / rows as f64).sqrt())
    }
}

/// Every backbone tensor name with its `[rows × cols]` shape.
pub fn expected_shapes(c: &BackboneConfig) -> BTreeMap<String, (usize, usize)> {
    let mut m = BTreeMap::new();
    let d = c.embed_dim;
    let p = c.patch_size;
    m.insert("visual.patch_embed.weight".into(), (3 * p * p, d));
    m.insert("visual.class_embedding".into(), (1, d));
    m.insert("visual.positional_embedding".into(), (c.num_tokens(), d));
    m.insert("visual.ln_pre.weight".into(), (1, d));
    m.insert("visual.ln_pre.bias".into(), (1, d));
    for l in 0..c.layers_total {
        block_shapes(&mut m, &format!("visual.blocks.{l}"), d, d * c.mlp_ratio);
    }
    let w = c.text_width;
    m.insert("text.token_embedding".into(), (TEXT_VOCAB, w));
    m.insert("text.positional_embedding".into(), (c.context_length, w));
    for l in 0..c.text_layers {
        block_shapes(&mut m, &format!("text.blocks.{l}"), w, w * c.mlp_ratio);
    }
    m.insert("text.ln_final.weight".into(), (1, w));
    m.insert("text.ln_final.bias".into(), (1, w));
    m.insert("text.projection".into(), (w, c.text_dim));
    let mut cin = 3;
    for (i, &cout) in c.cnn_channels.iter().enumerate() {
        m.insert(format!("cnn.conv{}.weight", i + 1), (cin * 9, cout));
        m.insert(format!("cnn.conv{}.bias", i + 1), (1, cout));
        cin = cout;
    }
    m
}

fn block_shapes(m: &mut BTreeMap<String, (usize, usize)>, prefix: &str, d: usize, hidden: usize) {
    for (name, shape) in [
        ("ln_1.weight", (1, d)),
        ("ln_1.bias", (1, d)),
        ("attn.qkv.weight", (d, 3 * d)),
        ("attn.qkv.bias", (1, 3 * d)),
        ("attn.out.weight", (d, d)),
        ("attn.out.bias", (1, d)),
        ("ln_2.weight", (1, d)),
        ("ln_2.bias", (1, d)),
        ("mlp.fc.weight", (d, hidden)),
        ("mlp.fc.bias", (1, hidden)),
        ("mlp.proj.weight", (hidden, d)),
        ("mlp.proj.bias", (1, d)),
    ] {
        m.insert(format!("{prefix}.{name}"), shape);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn image(cfg: &BackboneConfig, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = size_of_image(cfg);
        let dist = Normal::new(0.0, 1.0).unwrap();
        Array3::from_shape_simple_fn(n, || dist.sample(&mut rng))
    }

    fn size_of_image(cfg: &BackboneConfig) -> (usize, usize, usize) {
        (cfg.image_size, cfg.image_size, 3)
    }

    #[test]
    fn surrogate_shapes() {
        let cfg = BackboneConfig::surrogate();
        let bb = Backbone::surrogate(cfg.clone(), 0).unwrap();
        let f = bb.encode_image(&image(&cfg, 1), None).unwrap();
        assert_eq!(f.stages.len(), 4);
        for s in &f.stages {
            assert_eq!(s.dim(), (65, 32));
        }
        assert_eq!(f.grid_side, 8);
        assert_eq!(cfg.tap_layers(), vec![2, 4, 6, 8]);
    }

    #[test]
    fn default_geometry_token_count() {
        let cfg = BackboneConfig::clip_vit_l14();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_tokens(), 1370);
        assert_eq!(cfg.tap_layers(), vec![6, 12, 18, 24]);
        assert_eq!(cfg.image_size, 518);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = BackboneConfig::surrogate();
        c.layers_total = 6;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::surrogate();
        c.patch_size = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn wrong_image_size_is_an_error() {
        let cfg = BackboneConfig::tiny();
        let bb = Backbone::surrogate(cfg, 0).unwrap();
        let bad = Array3::zeros((16, 16, 3));
        assert!(matches!(bb.encode_image(&bad, None), Err(AfrError::Shape { .. })));
        assert!(bb.extract_cnn_features(&bad).is_err());
    }

    #[test]
    fn identity_hook_is_bit_exact() {
        let cfg = BackboneConfig::tiny();
        let bb = Backbone::surrogate(cfg.clone(), 3).unwrap();
        let img = image(&cfg, 4);
        let plain = bb.encode_image(&img, None).unwrap();
        let hooked = bb.encode_image(&img, Some(&IdentityHook)).unwrap();
        assert_eq!(plain, hooked);
    }

    struct Shrink;
    impl TokenInjectionHook for Shrink {
        fn applies_before(&self, _layer: usize, _c: &BackboneConfig) -> bool {
            true
        }
        fn inject(&self, g: &mut Graph, _layer: usize, tokens: Var) -> Result<Var> {
            let n = g.shape(tokens).0;
            Ok(g.slice_rows(tokens, 0, n - 1))
        }
    }

    #[test]
    fn shape_changing_hook_is_rejected() {
        let cfg = BackboneConfig::tiny();
        let bb = Backbone::surrogate(cfg.clone(), 0).unwrap();
        assert!(matches!(
            bb.encode_image(&image(&cfg, 0), Some(&Shrink)),
            Err(AfrError::Shape { .. })
        ));
    }

    struct Recorder(std::sync::Mutex<Vec<usize>>);
    impl TokenInjectionHook for Recorder {
        fn applies_before(&self, layer: usize, c: &BackboneConfig) -> bool {
            c.stage_of(layer) <= 2
        }
        fn inject(&self, _g: &mut Graph, layer: usize, tokens: Var) -> Result<Var> {
            self.0.lock().unwrap().push(layer);
            Ok(tokens)
        }
    }

    #[test]
    fn hook_never_runs_before_first_layer() {
        let cfg = BackboneConfig::tiny();
        let bb = Backbone::surrogate(cfg.clone(), 0).unwrap();
        let rec = Recorder(Default::default());
        bb.encode_image(&image(&cfg, 0), Some(&rec)).unwrap();
        assert_eq!(*rec.0.lock().unwrap(), vec![2, 3, 4]);
    }

    #[test]
    fn taps_match_layer_by_layer_recomputation() {
        let cfg = BackboneConfig::tiny();
        let bb = Backbone::surrogate(cfg.clone(), 5).unwrap();
        let img = image(&cfg, 6);
        let f = bb.encode_image(&img, None).unwrap();
        let mut x = bb.embed_tokens(&img).unwrap();
        let taps = cfg.tap_layers();
        let mut k = 0;
        for layer in 1..=cfg.layers_total {
            x = bb.apply_layer(layer, &x).unwrap();
            if taps.contains(&layer) {
                assert_eq!(x, f.stages[k]);
                k += 1;
            }
        }
        assert_eq!(k, 4);
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let a = Backbone::surrogate(BackboneConfig::tiny(), 0).unwrap().tensor_map();
        let b = Backbone::surrogate(BackboneConfig::tiny(), 0).unwrap().tensor_map();
        let c = Backbone::surrogate(BackboneConfig::tiny(), 1).unwrap().tensor_map();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let bb = Backbone::surrogate(BackboneConfig::tiny(), 2).unwrap();
        bb.save(dir.path(), Dtype::F64).unwrap();
        let back = Backbone::load(&BackboneSource::File(dir.path().into()), BackboneConfig::tiny()).unwrap();
        assert_eq!(back.tensor_map(), bb.tensor_map());

        let mut wider = BackboneConfig::tiny();
        wider.embed_dim = 16;
        let err = Backbone::from_checkpoint(dir.path(), wider).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, AfrError::Checkpoint(_)));
        assert!(msg.contains("visual.class_embedding: expected 1x16, found 1x8"), "{msg}");
    }

    #[test]
    fn source_parsing() {
        assert_eq!("surrogate".parse::<BackboneSource>().unwrap(), BackboneSource::Surrogate { seed: 0 });
        assert_eq!("surrogate:7".parse::<BackboneSource>().unwrap(), BackboneSource::Surrogate { seed: 7 });
        assert_eq!(
            "file:/tmp/x".parse::<BackboneSource>().unwrap(),
            BackboneSource::File("/tmp/x".into())
        );
        assert!("clip".parse::<BackboneSource>().is_err());
    }

    #[test]
    fn text_encoding_contract() {
        let bb = Backbone::surrogate(BackboneConfig::surrogate(), 0).unwrap();
        let a = bb.encode_text("a photo of a screw").unwrap();
        let a2 = bb.encode_text("a photo of a screw").unwrap();
        let b = bb.encode_text("a photo of a bottle").unwrap();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        assert_eq!(a.len(), 32);
        assert!(bb.encode_text("").is_err());
        assert!(bb.encode_text(&"x".repeat(200)).is_err());
    }

    #[test]
    fn cnn_feature_contract() {
        let cfg = BackboneConfig::surrogate();
        let bb = Backbone::surrogate(cfg.clone(), 0).unwrap();
        let zero = Array3::zeros((64, 64, 3));
        let f0 = bb.extract_cnn_features(&zero).unwrap();
        assert_eq!(f0, bb.extract_cnn_features(&zero).unwrap());
        assert_eq!(f0.0.len(), cfg.cnn_dim());

        let base = image(&cfg, 9);
        let mut patched = base.clone();
        for y in 40..48 {
            for x in 8..16 {
                for c in 0..3 {
                    patched[[y, x, c]] += 1.5;
                }
            }
        }
        assert_ne!(
            bb.extract_cnn_features(&base).unwrap(),
            bb.extract_cnn_features(&patched).unwrap()
        );
    }
}
