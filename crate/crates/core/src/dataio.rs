//! Datasets: MVTec-style folder trees, a procedural texture generator for
//! desk-scale runs, and the cross-dataset bookkeeping.
//!
//! Folder layout, per class:
//!
//! ```text
//! <root>/<class>/<split>/good/*.png
//! <root>/<class>/<split>/<defect>/*.png
//! <root>/<class>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use log::warn;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, DatasetSpec};
use crate::error::{AfrError, Result};
use crate::numeric::Image;
use crate::prompts::fnv1a;

/// Mask pixels above this 8-bit level are defects.
pub const MASK_THRESHOLD: f64 = 127.5;

/// One image with its ground truth. Pixels are RGB in `[0, 1]`; the model
/// applies the backbone's normalization itself.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Image,
    /// `1.0` on defect pixels, `0.0` elsewhere.
    pub mask: Array2<f64>,
    pub label: bool,
    pub class_name: String,
    pub dataset_id: String,
}

impl LabeledSample {
    pub fn has_mask(&self) -> bool {
        self.mask.iter().any(|&v| v > 0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.class_name.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn count_positive(&self) -> usize {
        self.samples.iter().filter(|s| s.label).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub class_name: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub classes: Vec<String>,
    pub split: String,
    pub records: Vec<SampleRecord>,
}

const MANIFEST_HEADER: &str = "# afr-dataset v1";

impl DatasetManifest {
    /// Line-delimited text: a header, `key\tvalue` lines, then one
    /// `sample\tid\tclass\tlabel\timage\tmask` line per record (`-` for no mask).
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        let _ = writeln!(out, "dataset\t{}", self.dataset_id);
        let _ = writeln!(out, "split\t{}", self.split);
        let _ = writeln!(out, "classes\t{}", self.classes.join(","));
        let _ = writeln!(out, "mask_threshold\t{MASK_THRESHOLD}");
        for r in &self.records {
            let mask = r.mask.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            let _ = writeln!(
                out,
                "sample\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.class_name,
                u8::from(r.label),
                r.image.display(),
                mask
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| AfrError::Dataset(format!("manifest line {line}: {why}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut m = DatasetManifest {
            dataset_id: String::new(),
            classes: Vec::new(),
            split: String::new(),
            records: Vec::new(),
        };
        for (i, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["dataset", v] => m.dataset_id = v.to_string(),
                ["split", v] => m.split = v.to_string(),
                ["classes", v] => {
                    m.classes = v.split(',').filter(|c| !c.is_empty()).map(String::from).collect()
                }
                ["mask_threshold", _] => {}
                ["sample", id, class, label, image, mask] => m.records.push(SampleRecord {
                    id: id.to_string(),
                    class_name: class.to_string(),
                    label: match *label {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad(i + 1, "label must be 0 or 1")),
                    },
                    image: PathBuf::from(image),
                    mask: (*mask != "-").then(|| PathBuf::from(mask)),
                }),
                [""] => {}
                _ => return Err(bad(i + 1, "unrecognized record")),
            }
        }
        let mut ids = BTreeSet::new();
        if let Some(dup) = m.records.iter().find(|r| !ids.insert(r.id.as_str())) {
            return Err(AfrError::Dataset(format!("duplicate sample id {}", dup.id)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| AfrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AfrError::io(path, e))?;
        Self::from_text(&text)
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| AfrError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| AfrError::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Scans an MVTec-style tree. Folders named `good` hold normal images;
/// every other folder is a defect type whose images need masks.
pub fn load_dataset(root: &Path, split: &str, dataset_id: &str) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(AfrError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut manifest = DatasetManifest {
        dataset_id: dataset_id.to_string(),
        classes: Vec::new(),
        split: split.to_string(),
        records: Vec::new(),
    };
    for class_dir in read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()) {
        let split_dir = class_dir.join(split);
        if !split_dir.is_dir() {
            continue;
        }
        let class = class_dir.file_name().unwrap().to_string_lossy().to_string();
        manifest.classes.push(class.clone());
        for kind_dir in read_dir_sorted(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
            let kind = kind_dir.file_name().unwrap().to_string_lossy().to_string();
            let label = kind != "good";
            for image in read_dir_sorted(&kind_dir)?.into_iter().filter(|p| is_image(p)) {
                let stem = image.file_stem().unwrap().to_string_lossy().to_string();
                let mask = if label {
                    let m = class_dir.join("ground_truth").join(&kind).join(format!("{stem}_mask.png"));
                    if !m.is_file() {
                        return Err(AfrError::Dataset(format!(
                            "defect image {} has no mask at {}",
                            image.display(),
                            m.display()
                        )));
                    }
                    Some(m)
                } else {
                    None
                };
                manifest.records.push(SampleRecord {
                    id: format!("{class}/{split}/{kind}/{stem}"),
                    class_name: class.clone(),
                    image,
                    mask,
                    label,
                });
            }
        }
    }
    if manifest.records.is_empty() {
        return Err(AfrError::Dataset(format!(
            "no `{split}` images found under {}",
            root.display()
        )));
    }
    Ok(manifest)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| AfrError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an RGB image as `[0, 1]` floats, bilinearly resized to `size×size`.
pub fn read_image(path: &Path, size: usize) -> Result<Image> {
    let img = open_image(path)?.to_rgb8();
    Ok(rgb_to_array(&resize_rgb(&img, size)))
}

/// Reads an RGB image at its own resolution.
pub fn read_image_native(path: &Path) -> Result<Image> {
    Ok(rgb_to_array(&open_image(path)?.to_rgb8()))
}

fn resize_rgb(img: &RgbImage, size: usize) -> RgbImage {
    if img.dimensions() == (size as u32, size as u32) {
        return img.clone();
    }
    image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle)
}

pub fn rgb_to_array(img: &RgbImage) -> Image {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

/// Resizes to the square working size, bilinear in the `[0, 1]` domain.
pub fn resize_image(image: &Image, size: usize) -> Image {
    rgb_to_array(&resize_rgb(&array_to_rgb(image), size))
}

pub fn array_to_rgb(image: &Image) -> RgbImage {
    let (h, w, _) = image.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Reads a mask, binarizes it at 127.5 and resizes it nearest-neighbour.
pub fn read_mask(path: &Path, size: usize) -> Result<Array2<f64>> {
    let img = open_image(path)?.to_luma8();
    if img.pixels().any(|p| p[0] != 0 && p[0] != 255) {
        warn!("mask {} is not binary; thresholding at {MASK_THRESHOLD}", path.display());
    }
    let bin: GrayImage = ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        Luma([if img.get_pixel(x, y)[0] as f64 > MASK_THRESHOLD { 255 } else { 0 }])
    });
    let bin = if bin.dimensions() == (size as u32, size as u32) {
        bin
    } else {
        image::imageops::resize(&bin, size as u32, size as u32, FilterType::Nearest)
    };
    Ok(Array2::from_shape_fn((size, size), |(y, x)| {
        f64::from(bin.get_pixel(x as u32, y as u32)[0] > 127)
    }))
}

/// Decodes every record at `size×size`.
pub fn load_samples(manifest: &DatasetManifest, size: usize) -> Result<Vec<LabeledSample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let native = open_image(&r.image)?;
            let image = rgb_to_array(&resize_rgb(&native.to_rgb8(), size));
            let mask = match &r.mask {
                Some(p) => {
                    let m = open_image(p)?;
                    if m.width() != native.width() || m.height() != native.height() {
                        return Err(AfrError::Dataset(format!(
                            "mask {} is {}x{}, image is {}x{}",
                            p.display(),
                            m.width(),
                            m.height(),
                            native.width(),
                            native.height()
                        )));
                    }
                    read_mask(p, size)?
                }
                None => Array2::zeros((size, size)),
            };
            Ok(LabeledSample {
                id: r.id.clone(),
                image,
                mask,
                label: r.label,
                class_name: r.class_name.clone(),
                dataset_id: manifest.dataset_id.clone(),
            })
        })
        .collect()
}

/// Texture families of the generator, in the order `make_synthetic_dataset` uses them.
pub const SYNTHETIC_CLASSES: &[&str] = &["stripes", "checker", "blobs", "rings", "weave", "dots", "waves", "grain"];

/// Procedural textures; odd-indexed samples of each class carry one defect.
pub fn make_synthetic_dataset(seed: u64, n_classes: usize, n_per_class: usize, image_size: usize) -> Dataset {
    assert!(n_classes <= SYNTHETIC_CLASSES.len(), "at most {} synthetic classes", SYNTHETIC_CLASSES.len());
    let classes: Vec<String> = SYNTHETIC_CLASSES[..n_classes].iter().map(|s| s.to_string()).collect();
    make_synthetic_classes("synthetic", seed, &classes, n_per_class, image_size)
        .expect("built-in class names")
}

/// As [`make_synthetic_dataset`] for named classes. A class's samples only
/// depend on `(seed, class, index)`, not on which other classes are requested.
pub fn make_synthetic_classes(
    dataset_id: &str,
    seed: u64,
    classes: &[String],
    n_per_class: usize,
    image_size: usize,
) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(classes.len() * n_per_class);
    for class in classes {
        let family = SYNTHETIC_CLASSES
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| AfrError::Config(format!(
                "unknown synthetic class {class:?}; choose from {SYNTHETIC_CLASSES:?}"
            )))?;
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(class.as_bytes()));
            rng.set_stream(i as u64);
            let mut image = texture(family, image_size, &mut rng);
            let label = i % 2 == 1;
            let mut mask = Array2::zeros((image_size, image_size));
            if label {
                inject_defect(&mut image, &mut mask, &mut rng);
            }
            samples.push(LabeledSample {
                id: format!("{class}/{i:04}"),
                image,
                mask,
                label,
                class_name: class.clone(),
                dataset_id: dataset_id.to_string(),
            });
        }
    }
    Ok(Dataset {
        id: dataset_id.to_string(),
        samples,
    })
}

fn texture(family: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let freq = rng.random_range(3.0..6.0) / s;
    let angle = rng.random_range(0.0..PI);
    let (cx, cy) = (rng.random_range(0.2..0.8) * s, rng.random_range(0.2..0.8) * s);
    let cell = rng.random_range(5..10) as f64;
    let blobs: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.08..0.2) * s))
        .collect();
    let grey = rng.random_range(0.4..0.6);
    let base: [f64; 3] = std::array::from_fn(|_| grey + rng.random_range(-0.03..0.03));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.9..1.0));
    let mut img = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let u = xf * angle.cos() + yf * angle.sin();
            let r = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
            let v = match family {
                0 => (2.0 * PI * freq * u + phase).sin(),
                1 => {
                    let a = ((xf + phase * 3.0) / cell).floor() as i64 + ((yf + phase * 5.0) / cell).floor() as i64;
                    if a.rem_euclid(2) == 0 { 0.8 } else { -0.8 }
                }
                2 => {
                    let b: f64 = blobs.iter().map(|&(bx, by, br)| (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * br * br)).exp()).sum();
                    2.0 * b.min(1.0) - 1.0
                }
                3 => (2.0 * PI * freq * r + phase).sin(),
                4 => (2.0 * PI * freq * xf + phase).sin() * (2.0 * PI * freq * yf).cos(),
                5 => {
                    let (gx, gy) = ((xf + phase) % cell - cell / 2.0, (yf + phase) % cell - cell / 2.0);
                    if gx * gx + gy * gy < cell * cell / 8.0 { 0.8 } else { -0.5 }
                }
                6 => (2.0 * PI * freq * (u + 4.0 * (2.0 * PI * yf / s * 2.0).sin()) + phase).sin(),
                _ => ((xf * 12.9898 + yf * 78.233 + phase).sin() * 43758.5453).fract() * 2.0 - 1.0,
            };
            let noise = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                img[[y, x, c]] = (base[c] + 0.18 * v * tint[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Saturated colours. Textures are close to grey, so colour alone marks a defect.
const DEFECT_COLOURS: &[[f64; 3]] = &[
    [0.9, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.1, 0.1, 0.9],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
    [0.9, 0.9, 0.1],
];

/// Paints a rectangle or a thick scratch and marks exactly the painted pixels.
fn inject_defect(image: &mut Image, mask: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
    let size = mask.nrows();
    let s = size as f64;
    let colour = DEFECT_COLOURS[rng.random_range(0..DEFECT_COLOURS.len())];
    if rng.random_bool(0.5) {
        let h = rng.random_range(size / 6..=size / 3).max(1);
        let w = rng.random_range(size / 6..=size / 3).max(1);
        let y0 = rng.random_range(0..=size - h);
        let x0 = rng.random_range(0..=size - w);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                mask[[y, x]] = 1.0;
            }
        }
    } else {
        let (x0, y0) = (rng.random_range(0.15..0.85) * s, rng.random_range(0.15..0.85) * s);
        let angle = rng.random_range(0.0..PI);
        let len = rng.random_range(0.4..0.7) * s;
        let half_width = rng.random_range(0.04..0.07) * s;
        let (dx, dy) = (angle.cos(), angle.sin());
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5 - x0, y as f64 + 0.5 - y0);
                let along = px * dx + py * dy;
                let across = (-px * dy + py * dx).abs();
                if along.abs() <= len / 2.0 && across <= half_width {
                    mask[[y, x]] = 1.0;
                }
            }
        }
    }
    for ((y, x), &m) in mask.indexed_iter() {
        if m > 0.0 {
            let shade = rng.random_range(-0.1..0.1);
            for c in 0..3 {
                image[[y, x, c]] = (colour[c] + shade).clamp(0.0, 1.0);
            }
        }
    }
}

/// Writes `dataset` as an MVTec-style tree under `root` (defects go to the
/// `defect` folder) and returns its manifest.
pub fn write_dataset(dataset: &Dataset, root: &Path, split: &str) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        dataset_id: dataset.id.clone(),
        classes: dataset.classes(),
        split: split.to_string(),
        records: Vec::new(),
    };
    for s in &dataset.samples {
        let kind = if s.label { "defect" } else { "good" };
        let stem = s.id.rsplit('/').next().unwrap_or(&s.id).to_string();
        let class_dir = root.join(&s.class_name);
        let dir = class_dir.join(split).join(kind);
        std::fs::create_dir_all(&dir).map_err(|e| AfrError::io(&dir, e))?;
        let image = dir.join(format!("{stem}.png"));
        array_to_rgb(&s.image).save(&image).map_err(|source| AfrError::Image { path: image.clone(), source })?;
        let mask = if s.label {
            let gt = class_dir.join("ground_truth").join(kind);
            std::fs::create_dir_all(&gt).map_err(|e| AfrError::io(&gt, e))?;
            let p = gt.join(format!("{stem}_mask.png"));
            let (h, w) = s.mask.dim();
            let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([if s.mask[[y as usize, x as usize]] > 0.5 { 255 } else { 0 }])
            });
            img.save(&p).map_err(|source| AfrError::Image { path: p.clone(), source })?;
            Some(p)
        } else {
            None
        };
        manifest.records.push(SampleRecord {
            id: format!("{}/{split}/{kind}/{stem}", s.class_name),
            class_name: s.class_name.clone(),
            image,
            mask,
            label: s.label,
        });
    }
    Ok(manifest)
}

/// Builds the dataset a config entry describes, at `image_size`.
pub fn materialize(spec: &DatasetSpec, image_size: usize) -> Result<Dataset> {
    match spec.kind {
        DatasetKind::Synthetic => {
            if spec.classes.is_empty() || spec.per_class == 0 {
                return Err(AfrError::Config(format!(
                    "synthetic dataset {:?} needs classes and per_class >= 1",
                    spec.id
                )));
            }
            make_synthetic_classes(&dataset_id(spec), spec.seed, &spec.classes, spec.per_class, image_size)
        }
        DatasetKind::Folder => {
            let manifest = load_dataset(&spec.root, &spec.split, &dataset_id(spec))?;
            Ok(Dataset {
                id: manifest.dataset_id.clone(),
                samples: load_samples(&manifest, image_size)?,
            })
        }
        DatasetKind::Manifest => {
            let mut manifest = DatasetManifest::load(&spec.root)?;
            let base = spec.root.parent().unwrap_or(Path::new("."));
            for r in &mut manifest.records {
                r.image = base.join(&r.image);
                r.mask = r.mask.as_ref().map(|m| base.join(m));
            }
            let id = dataset_id(spec);
            let mut samples = load_samples(&manifest, image_size)?;
            samples.iter_mut().for_each(|s| s.dataset_id = id.clone());
            Ok(Dataset { id, samples })
        }
    }
}

/// The configured id, or the root folder's name for unnamed folder datasets.
pub fn dataset_id(spec: &DatasetSpec) -> String {
    if !spec.id.is_empty() {
        return spec.id.clone();
    }
    let name = match spec.kind {
        DatasetKind::Manifest => spec.root.file_stem(),
        _ => spec.root.file_name(),
    };
    name
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "dataset".into())
}

fn canonical_id(id: &str) -> String {
    id.trim().to_lowercase().chars().filter(|c| c.is_alphanumeric()).collect()
}

/// Refuses to evaluate on the dataset the adapters were trained on.
pub fn check_protocol(train_id: &str, test_id: &str) -> Result<()> {
    if train_id.trim().is_empty() || test_id.trim().is_empty() {
        return Err(AfrError::Config("dataset ids must not be empty".into()));
    }
    if canonical_id(train_id) == canonical_id(test_id) {
        return Err(AfrError::Protocol(format!(
            "training and test dataset are both {test_id:?}; they must be disjoint"
        )));
    }
    Ok(())
}

/// Standard pairing: VisA is evaluated with MVTec AD adapters, everything
/// else with VisA adapters.
pub fn default_training_set(test_id: &str) -> &'static str {
    if canonical_id(test_id) == "visa" {
        "mvtec"
    } else {
        "visa"
    }
}
