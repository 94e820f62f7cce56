//! Scoring a whole dataset and summarizing it with image- and pixel-level metrics.

use log::warn;
use rayon::prelude::*;

use crate::config::PixelMode;
use crate::dataio::Dataset;
use crate::error::Result;
use crate::metrics::{auroc, max_f1, pixel_metrics, Level, MetricRow};
use crate::model::Model;
use crate::scoring::AnomalyResult;

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub results: Vec<AnomalyResult>,
    pub image: (f64, f64),
    /// Absent when no sample has a defect mask.
    pub pixel: Option<(f64, f64)>,
}

impl Evaluation {
    pub fn rows(&self, dataset: &str) -> Vec<MetricRow> {
        let mut rows = vec![MetricRow {
            dataset: dataset.to_string(),
            level: Level::Image,
            auroc: self.image.0,
            max_f1: self.image.1,
        }];
        if let Some((a, f)) = self.pixel {
            rows.push(MetricRow {
                dataset: dataset.to_string(),
                level: Level::Pixel,
                auroc: a,
                max_f1: f,
            });
        }
        rows
    }
}

/// Runs inference on every sample (in parallel, results kept in sample order).
pub fn infer_all(model: &Model, ds: &Dataset) -> Result<Vec<AnomalyResult>> {
    ds.samples
        .par_iter()
        .map(|s| model.infer(&s.image, &s.class_name))
        .collect()
}

pub fn evaluate(model: &Model, ds: &Dataset, mode: PixelMode) -> Result<Evaluation> {
    let results = infer_all(model, ds)?;
    let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    let labels: Vec<bool> = ds.samples.iter().map(|s| s.label).collect();
    let image = (auroc(&scores, &labels)?, max_f1(&scores, &labels)?);
    let pixel = if ds.samples.iter().any(|s| s.has_mask()) {
        let maps: Vec<_> = results.iter().map(|r| r.heatmap.clone()).collect();
        let masks: Vec<_> = ds.samples.iter().map(|s| s.mask.clone()).collect();
        Some(pixel_metrics(&maps, &masks, mode)?)
    } else {
        warn!("dataset {} has no defect masks; reporting image-level metrics only", ds.id);
        None
    };
    Ok(Evaluation { results, image, pixel })
}
