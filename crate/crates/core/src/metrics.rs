//! Image- and pixel-level AUROC and max-F1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;

use crate::config::PixelMode;
use crate::error::{AfrError, Result};
use crate::numeric::ProbabilityMap;

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(AfrError::shape("metric labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(AfrError::Numeric("metric scores contain non-finite values".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(AfrError::Degenerate(format!(
            "metrics need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score.
fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Mann–Whitney AUROC with ties counted as one half, in `O(n log n)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let idx = order(scores);
    // Counted per tie group: positives above all negatives seen so far, plus half the in-group pairs.
    let (mut wins, mut neg_below) = (0.0f64, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0usize, 0usize);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins += p as f64 * neg_below as f64 + 0.5 * p as f64 * n as f64;
        neg_below += n;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Best F1 over thresholds `τ ∈ scores`, predicting positive when `s ≥ τ`.
pub fn max_f1(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(max_f1_threshold(scores, labels)?.0)
}

/// [`max_f1`] together with the threshold achieving it (the highest one on ties).
pub fn max_f1_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let (pos, _) = check(scores, labels)?;
    let mut idx = order(scores);
    idx.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (0.0, scores[idx[0]]);
    let mut i = 0;
    while i < idx.len() {
        let tau = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == tau {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (pos - tp)) as f64;
        if f1 > best.0 {
            best = (f1, tau);
        }
    }
    Ok(best)
}

/// Pixel-level `(auroc, max_f1)`.
///
/// `Global` pools every pixel of every image into one ranking. `PerImage`
/// averages the per-image values over images that contain both classes.
pub fn pixel_metrics(heatmaps: &[ProbabilityMap], masks: &[Array2<f64>], mode: PixelMode) -> Result<(f64, f64)> {
    if heatmaps.len() != masks.len() {
        return Err(AfrError::shape("mask count", heatmaps.len(), masks.len()));
    }
    for (i, (h, m)) in heatmaps.iter().zip(masks).enumerate() {
        if h.dims() != m.dim() {
            return Err(AfrError::shape(format!("mask {i}"), format!("{:?}", h.dims()), format!("{:?}", m.dim())));
        }
    }
    if !masks.iter().any(|m| m.iter().any(|&v| v > 0.5)) {
        return Err(AfrError::Degenerate("no positive pixel in the dataset".into()));
    }
    match mode {
        PixelMode::Global => {
            let scores: Vec<f64> = heatmaps.iter().flat_map(|h| h.values().iter().copied()).collect();
            let labels: Vec<bool> = masks.iter().flat_map(|m| m.iter().map(|&v| v > 0.5)).collect();
            Ok((auroc(&scores, &labels)?, max_f1(&scores, &labels)?))
        }
        PixelMode::PerImage => {
            let (mut a, mut f, mut n) = (0.0, 0.0, 0.0);
            for (h, m) in heatmaps.iter().zip(masks) {
                let labels: Vec<bool> = m.iter().map(|&v| v > 0.5).collect();
                if labels.iter().all(|&l| l) || !labels.iter().any(|&l| l) {
                    continue;
                }
                let scores: Vec<f64> = h.values().iter().copied().collect();
                a += auroc(&scores, &labels)?;
                f += max_f1(&scores, &labels)?;
                n += 1.0;
            }
            Ok((a / n, f / n))
        }
    }
}

/// Unweighted mean of `(auroc, max_f1)` pairs.
pub fn domain_average(per_dataset: &BTreeMap<String, (f64, f64)>) -> Result<(f64, f64)> {
    if per_dataset.is_empty() {
        return Err(AfrError::Degenerate("nothing to average".into()));
    }
    let n = per_dataset.len() as f64;
    let (a, f) = per_dataset.values().fold((0.0, 0.0), |(a, f), (x, y)| (a + x, f + y));
    Ok((a / n, f / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Image,
    Pixel,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Image => "image",
            Level::Pixel => "pixel",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub level: Level,
    pub auroc: f64,
    pub max_f1: f64,
}

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("dataset,level,auroc,max_f1\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6}", r.dataset, r.level.as_str(), r.auroc, r.max_f1);
    }
    out
}

/// Percent table with one row per dataset and an average row when there is
/// more than one dataset.
pub fn render_table(rows: &[MetricRow]) -> String {
    let mut table: BTreeMap<&str, [Option<(f64, f64)>; 2]> = BTreeMap::new();
    for r in rows {
        table.entry(&r.dataset).or_default()[r.level as usize] = Some((r.auroc, r.max_f1));
    }
    let cell = |v: Option<(f64, f64)>| match v {
        Some((a, f)) => format!("{:>6.1} {:>6.1}", 100.0 * a, 100.0 * f),
        None => format!("{:>6} {:>6}", "-", "-"),
    };
    let width = table.keys().map(|k| k.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(out, "{:width$}  {:^13}  {:^13}", "", "image", "pixel");
    let _ = writeln!(out, "{:width$}  {:>6} {:>6}  {:>6} {:>6}", "dataset", "AUROC", "F1", "AUROC", "F1");
    for (name, levels) in &table {
        let _ = writeln!(out, "{name:width$}  {}  {}", cell(levels[0]), cell(levels[1]));
    }
    if table.len() > 1 {
        let avg = |lvl: usize| {
            let vals: BTreeMap<String, (f64, f64)> = table
                .iter()
                .filter_map(|(k, v)| v[lvl].map(|x| (k.to_string(), x)))
                .collect();
            domain_average(&vals).ok()
        };
        let _ = writeln!(out, "{:width$}  {}  {}", "Average", cell(avg(0)), cell(avg(1)));
    }
    out
}
