//! Image-level AUROC and max-F1, and pixel-level metrics over a few maps.

use anomaly_rectify::config::PixelMode;
use anomaly_rectify::metrics::{auroc, max_f1_threshold, pixel_metrics, render_table, Level, MetricRow};
use anomaly_rectify::numeric::ProbabilityMap;
use ndarray::array;

fn main() -> anomaly_rectify::Result<()> {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [false, false, true, true];
    let (f1, t) = max_f1_threshold(&scores, &labels)?;
    let a = auroc(&scores, &labels)?;
    println!("image AUROC {a:.3}, max-F1 {f1:.3} at threshold {t}");

    let maps = vec![
        ProbabilityMap::new(array![[0.9, 0.2], [0.1, 0.3]])?,
        ProbabilityMap::new(array![[0.1, 0.2], [0.7, 0.1]])?,
    ];
    let masks = vec![array![[1.0, 0.0], [0.0, 0.0]], array![[0.0, 0.0], [1.0, 1.0]]];
    let global = pixel_metrics(&maps, &masks, PixelMode::Global)?;
    let per_image = pixel_metrics(&maps, &masks, PixelMode::PerImage)?;
    println!("pixel AUROC global {:.3}, per image {:.3}", global.0, per_image.0);

    let rows = vec![
        MetricRow { dataset: "toy".into(), level: Level::Image, auroc: a, max_f1: f1 },
        MetricRow { dataset: "toy".into(), level: Level::Pixel, auroc: global.0, max_f1: global.1 },
    ];
    print!("{}", render_table(&rows));
    Ok(())
}
