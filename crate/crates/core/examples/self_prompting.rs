//! Builds prompt tokens from an image's CNN feature plus the learnable bank,
//! and shows which layers receive them.

use std::sync::Arc;

use anomaly_rectify::backbone::{Backbone, BackboneConfig};
use anomaly_rectify::config::ModelConfig;
use anomaly_rectify::dataio::make_synthetic_dataset;
use anomaly_rectify::model::Model;
use anomaly_rectify::sp::{combine_prompts, make_staged_hook, make_visual_prompts};
use anomaly_rectify::backbone::TokenInjectionHook;

fn main() -> anomaly_rectify::Result<()> {
    let cfg = ModelConfig::default();
    let backbone = Arc::new(Backbone::surrogate(BackboneConfig::surrogate(), 0)?);
    let model = Model::init(backbone.clone(), cfg.clone(), 0)?;
    let ds = make_synthetic_dataset(0, 1, 2, cfg.backbone.image_size);
    let image = cfg.backbone.normalize(&ds.samples[0].image);

    let f_cnn = backbone.extract_cnn_features(&image)?;
    let bank = model.prompt_bank();
    let p_v = make_visual_prompts(&f_cnn, &bank)?;
    let prompts = combine_prompts(&p_v, &bank.tokens)?;
    println!("{} prompt tokens of width {}", prompts.nrows(), prompts.ncols());

    for stages in [vec![1], vec![1, 2]] {
        let hook = make_staged_hook(prompts.clone(), &stages);
        let layers: Vec<usize> = (2..=cfg.backbone.layers_total)
            .filter(|&l| hook.applies_before(l, &cfg.backbone))
            .collect();
        println!("stages {stages:?}: tokens replaced before layers {layers:?}");
    }

    let tokens = backbone.embed_tokens(&image)?;
    let replaced = make_staged_hook(prompts, &[1]).replace(&tokens)?;
    let n = tokens.nrows();
    println!("class token untouched: {}", replaced.row(0) == tokens.row(0));
    println!("last {} of {n} tokens now hold the prompts", bank.k());
    Ok(())
}
