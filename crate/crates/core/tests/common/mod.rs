#![allow(dead_code)]

pub mod oracle;

use std::path::Path;
use std::sync::Arc;

use anomaly_rectify::backbone::{Backbone, BackboneConfig};
use anomaly_rectify::config::ModelConfig;
use anomaly_rectify::model::Model;
use anomaly_rectify::numeric::Image;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn to_mat(a: &Array2<f64>) -> oracle::Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// D = 8, 16 patches, K = 2, m = 3.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        backbone: BackboneConfig::tiny(),
        ..ModelConfig::default()
    };
    cfg.sp.k = 2;
    cfg.mpfa.m = 3;
    cfg
}

/// A model whose every trainable scalar is drawn uniformly from
/// `[-0.8, 0.8)`, so no weight or bias is left at a special value.
pub fn scrambled_model(cfg: ModelConfig, seed: u64) -> Model {
    let backbone = Arc::new(Backbone::surrogate(cfg.backbone.clone(), seed).unwrap());
    let mut model = Model::init(backbone, cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = model.params().names().map(String::from).collect();
    for name in names {
        model
            .params_mut()
            .get_mut(&name)
            .mapv_inplace(|_| rng.random_range(-0.8..0.8));
    }
    model
}

pub fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((size, size, 3), || rng.random::<f64>())
}

pub fn read_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("reading {}: {e}", p.display()))
}

/// Every file under `dir`, as (relative path, bytes), sorted by path.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, read_bytes(&p)));
            }
        }
    }
    out.sort();
    out
}

/// Small run configuration for command-line tests: tiny backbone, two
/// synthetic classes per split, two epochs.
pub fn tiny_run_toml(extra: &str) -> String {
    format!(
        r#"
[backbone]
image_size = 32
embed_dim = 8
mlp_ratio = 2
text_width = 8
text_layers = 1
text_dim = 8
shared_dim = 8
cnn_channels = [4, 8, 8]

[sp]
k = 2

[train]
epochs = 2
batch_size = 2
lr0 = 0.01
validation_fraction = 0.0

[data.train]
id = "synthetic-a"
classes = ["stripes", "checker"]
per_class = 4

[data.test]
id = "synthetic-b"
classes = ["blobs", "rings"]
per_class = 4
{extra}
"#
    )
}
