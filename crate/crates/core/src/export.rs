//! Writing scores and heatmaps to disk.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};

use crate::checkpoint::{write_tensors, Dtype, TensorMap};
use crate::error::{AfrError, Result};
use crate::numeric::ProbabilityMap;

/// 8-bit level of a probability, rounding half up.
pub fn to_level(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn heatmap_image(map: &ProbabilityMap) -> GrayImage {
    let (h, w) = map.dims();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_level(map.values()[[y as usize, x as usize]])]))
}

pub fn write_heatmap_png(map: &ProbabilityMap, path: &Path) -> Result<()> {
    heatmap_image(map).save(path).map_err(|source| AfrError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Raw float32 dump in the tensor-directory format, one tensor named `heatmap`.
pub fn write_heatmap_raw(map: &ProbabilityMap, dir: &Path) -> Result<()> {
    let mut t = TensorMap::new();
    t.insert("heatmap".into(), map.values().clone());
    write_tensors(dir, &t, Dtype::F32)
}

pub fn write_score(score: f64, path: &Path) -> Result<()> {
    std::fs::write(path, format!("{score:.6}\n")).map_err(|e| AfrError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::read_tensors;
    use ndarray::array;

    #[test]
    fn levels_round_half_up() {
        assert_eq!(to_level(0.0), 0);
        assert_eq!(to_level(1.0), 255);
        assert_eq!(to_level(0.5), 128);
        assert_eq!(to_level(0.25), 64);
        assert_eq!(to_level(1.5 / 255.0), 2);
    }

    #[test]
    fn png_and_raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = ProbabilityMap::new(array![[0.0, 0.5, 1.0], [0.2, 0.4, 0.6]]).unwrap();
        let png = dir.path().join("h.png");
        write_heatmap_png(&map, &png).unwrap();
        let back = image::open(&png).unwrap().to_luma8();
        assert_eq!(back.dimensions(), (3, 2));
        assert_eq!(back.get_pixel(1, 0)[0], 128);
        write_heatmap_raw(&map, &dir.path().join("raw")).unwrap();
        let raw = read_tensors(&dir.path().join("raw")).unwrap();
        assert!((raw["heatmap"][[1, 2]] - 0.6).abs() < 1e-7);
        write_score(0.123_456_78, &dir.path().join("s.txt")).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("s.txt")).unwrap(), "0.123457\n");
    }
}
