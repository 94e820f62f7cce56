//! Component and hyper-parameter sweeps: each variant is trained from the
//! same initialization seed and evaluated on the same held-out set.

use std::fmt::Write;
use std::str::FromStr;
use std::sync::Arc;

use log::info;

use crate::backbone::Backbone;
use crate::config::{ModelConfig, PixelMode, TrainConfig};
use crate::dataio::Dataset;
use crate::error::{AfrError, Result};
use crate::evaluate::evaluate;
use crate::metrics::{Level, MetricRow};
use crate::model::Model;
use crate::training::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    /// Rectification, self-prompting and aggregation switched on and off, in
    /// the order none, no rectification, rectification only, no aggregation,
    /// no self-prompting, full.
    Components,
    /// Self-prompting applied to stages 1, 1–2, 1–3 and 1–4.
    SpStages,
    /// Aggregation window m in {1, 3, 5}.
    Window,
    /// Image prompts and learnable prompts used alone or together.
    PvPl,
}

impl FromStr for Sweep {
    type Err = AfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Sweep::Components),
            "sp_stages" => Ok(Sweep::SpStages),
            "m" => Ok(Sweep::Window),
            "pv_pl" => Ok(Sweep::PvPl),
            other => Err(AfrError::Config(format!(
                "unknown sweep {other:?}; expected components, sp_stages, m or pv_pl"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
}

fn variant(name: &str, base: &ModelConfig, edit: impl FnOnce(&mut ModelConfig)) -> Variant {
    let mut config = base.clone();
    edit(&mut config);
    Variant { name: name.to_string(), config }
}

/// The configurations a sweep compares, derived from `base`.
pub fn variants(sweep: Sweep, base: &ModelConfig) -> Vec<Variant> {
    match sweep {
        Sweep::Components => vec![
            variant("none", base, |c| {
                c.cmfr.enabled = false;
                c.sp.enabled = false;
                c.mpfa.enabled = false;
            }),
            variant("no_cmfr", base, |c| {
                c.cmfr.enabled = false;
                c.sp.enabled = true;
                c.mpfa.enabled = true;
            }),
            variant("cmfr", base, |c| {
                c.cmfr.enabled = true;
                c.sp.enabled = false;
                c.mpfa.enabled = false;
            }),
            variant("no_mpfa", base, |c| {
                c.cmfr.enabled = true;
                c.sp.enabled = true;
                c.mpfa.enabled = false;
            }),
            variant("no_sp", base, |c| {
                c.cmfr.enabled = true;
                c.sp.enabled = false;
                c.mpfa.enabled = true;
            }),
            variant("full", base, |c| {
                c.cmfr.enabled = true;
                c.sp.enabled = true;
                c.mpfa.enabled = true;
            }),
        ],
        Sweep::SpStages => (1..=base.backbone.stages)
            .map(|last| {
                variant(&format!("stages_1-{last}"), base, |c| {
                    c.sp.enabled = true;
                    c.sp.stages = (1..=last).collect();
                })
            })
            .collect(),
        Sweep::Window => [1, 3, 5]
            .into_iter()
            .map(|m| {
                variant(&format!("m{m}"), base, |c| {
                    c.mpfa.enabled = true;
                    c.mpfa.m = m;
                })
            })
            .collect(),
        Sweep::PvPl => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(pv, pl)| {
                let name = match (pv, pl) {
                    (false, false) => "neither",
                    (true, false) => "pv",
                    (false, true) => "pl",
                    (true, true) => "pv_pl",
                };
                variant(name, base, |c| {
                    c.sp.enabled = true;
                    c.sp.use_pv = pv;
                    c.sp.use_pl = pl;
                })
            })
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub image: (f64, f64),
    pub pixel: Option<(f64, f64)>,
}

impl AblationRow {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let mut rows = vec![MetricRow {
            dataset: self.variant.clone(),
            level: Level::Image,
            auroc: self.image.0,
            max_f1: self.image.1,
        }];
        if let Some((a, f)) = self.pixel {
            rows.push(MetricRow {
                dataset: self.variant.clone(),
                level: Level::Pixel,
                auroc: a,
                max_f1: f,
            });
        }
        rows
    }
}

/// Trains and evaluates one variant.
pub fn run_variant(
    backbone: &Arc<Backbone>,
    v: &Variant,
    train_cfg: &TrainConfig,
    init_seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
    mode: PixelMode,
) -> Result<AblationRow> {
    let mut model = Model::init(backbone.clone(), v.config.clone(), init_seed)?;
    train(train_cfg, train_set, &mut model, None)?;
    let e = evaluate(&model, test_set, mode)?;
    info!("variant {}: image auroc {:.4}", v.name, e.image.0);
    Ok(AblationRow {
        variant: v.name.clone(),
        image: e.image,
        pixel: e.pixel,
    })
}

pub fn run_sweep(
    backbone: &Arc<Backbone>,
    variants: &[Variant],
    train_cfg: &TrainConfig,
    init_seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
    mode: PixelMode,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| run_variant(backbone, v, train_cfg, init_seed, train_set, test_set, mode))
        .collect()
}

/// Percent table in sweep order.
pub fn render(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
    let cell = |v: Option<(f64, f64)>| match v {
        Some((a, f)) => format!("{:>6.1} {:>6.1}", 100.0 * a, 100.0 * f),
        None => format!("{:>6} {:>6}", "-", "-"),
    };
    let mut out = String::new();
    let _ = writeln!(out, "{:width$}  {:^13}  {:^13}", "", "image", "pixel");
    let _ = writeln!(out, "{:width$}  {:>6} {:>6}  {:>6} {:>6}", "variant", "AUROC", "F1", "AUROC", "F1");
    for r in rows {
        let _ = writeln!(out, "{:width$}  {}  {}", r.variant, cell(Some(r.image)), cell(r.pixel));
    }
    out
}
