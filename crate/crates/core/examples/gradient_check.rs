//! Compares backpropagated gradients of the training loss with central
//! differences for a few scalars of every parameter tensor.

use std::sync::Arc;

use anomaly_rectify::backbone::{Backbone, BackboneConfig};
use anomaly_rectify::config::{ModelConfig, TrainConfig};
use anomaly_rectify::dataio::make_synthetic_dataset;
use anomaly_rectify::model::Model;
use anomaly_rectify::training::{loss_and_gradients, sample_loss};

fn main() -> anomaly_rectify::Result<()> {
    let cfg = ModelConfig {
        backbone: BackboneConfig::tiny(),
        ..ModelConfig::default()
    };
    let size = cfg.backbone.image_size;
    let backbone = Arc::new(Backbone::surrogate(cfg.backbone.clone(), 0)?);
    let mut model = Model::init(backbone, cfg, 0)?;
    let tc = TrainConfig::default();
    let ds = make_synthetic_dataset(0, 1, 2, size);
    let sample = ds.samples.iter().find(|s| s.label).expect("a defect sample");

    let (loss, grads) = loss_and_gradients(&model, sample, &tc)?;
    println!("loss {:.6} (image {:.6}, focal {:.6}, dice {:.6})", loss.total, loss.bce, loss.focal, loss.dice);
    let h = 1e-5;
    for (name, g) in &grads {
        let mut worst = 0.0f64;
        let n = g.len();
        for flat in (0..n).step_by((n / 3).max(1)) {
            let (i, j) = (flat / g.ncols(), flat % g.ncols());
            let orig = model.params().get(name)[[i, j]];
            model.params_mut().get_mut(name)[[i, j]] = orig + h;
            let up = sample_loss(&model, sample, &tc)?.total;
            model.params_mut().get_mut(name)[[i, j]] = orig - h;
            let down = sample_loss(&model, sample, &tc)?.total;
            model.params_mut().get_mut(name)[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((g[[i, j]] - numeric).abs() / g[[i, j]].abs().max(numeric.abs()).max(1e-5));
        }
        println!("{name:<28} {n:>5} scalars, worst relative error {worst:.1e}");
    }
    Ok(())
}
