//! Scores one image and writes its heatmap as an 8-bit PNG at the image's
//! own resolution. Without an image argument a synthetic defect is used.
//!
//! ```text
//! cargo run --release --example predict_heatmap -- [image.png] [class] [checkpoint-dir]
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anomaly_rectify::backbone::Backbone;
use anomaly_rectify::config::RunConfig;
use anomaly_rectify::dataio::{array_to_rgb, make_synthetic_dataset, read_image_native, resize_image};
use anomaly_rectify::export::write_heatmap_png;
use anomaly_rectify::model::Model;
use anomaly_rectify::numeric::bilinear_resize;
use anomaly_rectify::params::ParamStore;

fn main() -> anomaly_rectify::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::desk_scale();
    let size = cfg.backbone.image_size;
    let out = std::env::temp_dir().join("afr-predict");
    std::fs::create_dir_all(&out).expect("temp dir");

    let path = match args.first() {
        Some(p) => PathBuf::from(p),
        None => {
            let ds = make_synthetic_dataset(1, 1, 2, size);
            let s = ds.samples.iter().find(|s| s.label).expect("a defect sample");
            let p = out.join("defect.png");
            array_to_rgb(&s.image).save(&p).expect("write probe");
            p
        }
    };
    let class = args.get(1).map_or("texture", String::as_str);

    let backbone = Arc::new(Backbone::load(&cfg.backbone()?, cfg.backbone.clone())?);
    let mcfg = cfg.model();
    let model = match args.get(2) {
        Some(dir) => Model::new(backbone, ParamStore::load(&mcfg, Path::new(dir))?, mcfg)?,
        None => Model::init(backbone, mcfg, cfg.seed)?,
    };

    let native = read_image_native(&path)?;
    let (h, w) = (native.shape()[0], native.shape()[1]);
    let result = model.infer(&resize_image(&native, size), class)?;
    let heatmap = bilinear_resize(&result.heatmap, (h, w))?;
    let png = out.join("heatmap.png");
    write_heatmap_png(&heatmap, &png)?;
    println!("{}: score {:.4}, heatmap {w}x{h} -> {}", path.display(), result.image_score, png.display());
    Ok(())
}
