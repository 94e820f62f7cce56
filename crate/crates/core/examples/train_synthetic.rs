//! Trains adapters on two synthetic texture classes and evaluates on two
//! unseen ones, using the small-data preset.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [epochs]
//! ```

use std::sync::Arc;
use std::time::Instant;

use anomaly_rectify::backbone::Backbone;
use anomaly_rectify::config::RunConfig;
use anomaly_rectify::dataio::materialize;
use anomaly_rectify::evaluate::evaluate;
use anomaly_rectify::model::Model;
use anomaly_rectify::training::train;

fn main() -> anomaly_rectify::Result<()> {
    env_logger::init();
    let mut cfg = RunConfig::desk_scale();
    if let Some(e) = std::env::args().nth(1) {
        cfg.train.epochs = e.parse().expect("epochs");
    }
    let size = cfg.backbone.image_size;
    let train_set = materialize(&cfg.data.train, size)?;
    let test_set = materialize(&cfg.data.test, size)?;

    let backbone = Arc::new(Backbone::load(&cfg.backbone()?, cfg.backbone.clone())?);
    let mut model = Model::init(backbone, cfg.model(), cfg.seed)?;
    let mode = cfg.metrics.pixel_mode;
    let before = evaluate(&model, &test_set, mode)?;
    println!("untrained: image {:.3} pixel {:.3}", before.image.0, before.pixel.unwrap().0);

    let t = Instant::now();
    let report = train(&cfg.train, &train_set, &mut model, None)?;
    let first = &report.epochs[0];
    let last = report.epochs.last().unwrap();
    println!(
        "trained {} epochs in {:.1}s: loss {:.4} -> {:.4}, best epoch {}",
        cfg.train.epochs,
        t.elapsed().as_secs_f64(),
        first.train.total,
        last.train.total,
        report.best_epoch
    );
    let after = evaluate(&model, &test_set, mode)?;
    println!("trained:   image {:.3} pixel {:.3}", after.image.0, after.pixel.unwrap().0);
    Ok(())
}
