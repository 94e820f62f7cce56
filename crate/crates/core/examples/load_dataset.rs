//! Writes a synthetic split as an MVTec-style folder tree, scans it back,
//! and round-trips the manifest.
//!
//! ```text
//! cargo run --example load_dataset -- [root]
//! ```

use std::path::PathBuf;

use anomaly_rectify::dataio::{load_dataset, load_samples, make_synthetic_dataset, write_dataset, DatasetManifest};

fn main() -> anomaly_rectify::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("afr-dataset"), PathBuf::from);
    let ds = make_synthetic_dataset(7, 2, 4, 64);
    write_dataset(&ds, &root, "test")?;

    let manifest = load_dataset(&root, "test", "synthetic")?;
    println!("{} records in {} classes under {}", manifest.records.len(), manifest.classes.len(), root.display());
    for r in manifest.records.iter().take(4) {
        let mask = r.mask.as_ref().map_or("-".into(), |m| m.display().to_string());
        println!("  {} label={} mask={mask}", r.id, u8::from(r.label));
    }

    let text = manifest.to_text();
    assert_eq!(DatasetManifest::from_text(&text)?, manifest);
    let samples = load_samples(&manifest, 32)?;
    let positive = samples.iter().filter(|s| s.label).count();
    println!("loaded {} samples at 32x32, {positive} defective", samples.len());
    Ok(())
}
