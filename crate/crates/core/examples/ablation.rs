//! Trains the desk-scale preset with each component switched off in turn and
//! prints held-out metrics.
//!
//! cargo run --release --example ablation -- [epochs] [sweep]

use std::sync::Arc;

use anomaly_rectify::ablation::{render, run_sweep, variants, Sweep};
use anomaly_rectify::backbone::Backbone;
use anomaly_rectify::config::RunConfig;
use anomaly_rectify::dataio::materialize;

fn main() -> anomaly_rectify::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::desk_scale();
    if let Some(e) = args.next() {
        cfg.train.epochs = e.parse().expect("epochs");
    }
    let sweep: Sweep = args.next().as_deref().unwrap_or("components").parse()?;
    let size = cfg.backbone.image_size;
    let train_set = materialize(&cfg.data.train, size)?;
    let test_set = materialize(&cfg.data.test, size)?;
    let backbone = Arc::new(Backbone::load(&cfg.backbone()?, cfg.backbone.clone())?);

    let mut vs = variants(sweep, &cfg.model());
    if sweep == Sweep::Components {
        vs.retain(|v| v.name != "none" && v.name != "cmfr");
    }
    let rows = run_sweep(&backbone, &vs, &cfg.train, cfg.seed, &train_set, &test_set, cfg.metrics.pixel_mode)?;
    print!("{}", render(&rows));
    Ok(())
}
