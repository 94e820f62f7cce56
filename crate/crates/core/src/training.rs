//! Adapter training on an auxiliary dataset. The backbone stays frozen;
//! only the parameter registry is updated.
//!
//! The objective is `BCE(image) + λ_f·Focal(map) + λ_d·Dice(map)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::TensorMap;
use crate::config::TrainConfig;
use crate::dataio::{Dataset, LabeledSample};
use crate::error::{AfrError, Result};
use crate::graph::{Graph, Var};
use crate::model::{ForwardVars, Model};
use crate::params::ParamStore;
use crate::scoring::AnomalyResult;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub focal: f64,
    pub dice: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.bce += o.bce;
        self.focal += o.focal;
        self.dice += o.dice;
    }

    fn scaled(mut self, c: f64) -> Self {
        self.total *= c;
        self.bce *= c;
        self.focal *= c;
        self.dice *= c;
        self
    }
}

/// `lr0 / (epoch + 1)` for 0-based `epoch`.
pub fn lr_at(epoch: usize, lr0: f64) -> f64 {
    lr0 / (epoch as f64 + 1.0)
}

struct LossVars {
    total: Var,
    bce: Var,
    focal: Var,
    dice: Var,
}

fn loss_graph(g: &mut Graph, image_prob: Var, heatmap: Var, label: bool, mask: &Array2<f64>, cfg: &TrainConfig) -> LossVars {
    let target = mask.clone().into_shape_with_order((mask.len(), 1)).expect("mask column");
    let bce = g.bce(image_prob, Array2::from_elem((1, 1), f64::from(u8::from(label))));
    let focal = g.focal(heatmap, target.clone(), cfg.focal_gamma);
    let dice = g.dice(heatmap, target, cfg.dice_smooth);
    let f = g.scale(focal, cfg.focal_weight);
    let d = g.scale(dice, cfg.dice_weight);
    let total = g.add(bce, f);
    let total = g.add(total, d);
    LossVars { total, bce, focal, dice }
}

fn read(g: &Graph, l: &LossVars) -> LossBreakdown {
    LossBreakdown {
        total: g.value(l.total)[[0, 0]],
        bce: g.value(l.bce)[[0, 0]],
        focal: g.value(l.focal)[[0, 0]],
        dice: g.value(l.dice)[[0, 0]],
    }
}

fn check_mask(result_dims: (usize, usize), mask: &Array2<f64>) -> Result<()> {
    if result_dims != mask.dim() {
        return Err(AfrError::shape("mask", format!("{result_dims:?}"), format!("{:?}", mask.dim())));
    }
    Ok(())
}

/// Loss of an already computed result.
pub fn compute_loss(result: &AnomalyResult, label: bool, mask: &Array2<f64>, cfg: &TrainConfig) -> Result<LossBreakdown> {
    check_mask(result.heatmap.dims(), mask)?;
    let mut g = Graph::new();
    let p = g.constant(Array2::from_elem((1, 1), result.image_score));
    let h = result.heatmap.values();
    let h = g.constant(h.clone().into_shape_with_order((h.len(), 1)).expect("heatmap column"));
    let l = loss_graph(&mut g, p, h, label, mask, cfg);
    let out = read(&g, &l);
    if !out.total.is_finite() {
        return Err(AfrError::Numeric(format!("loss is not finite: {out:?}")));
    }
    Ok(out)
}

fn diagnostic(g: &Graph, fw: &ForwardVars, params: &ParamStore, loss: &LossBreakdown, sample: &LabeledSample) -> String {
    let norm = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut s = format!(
        "non-finite loss on sample {}: {loss:?}\n  image_prob = {:?}\n  |heatmap| = {}\n",
        sample.id,
        g.value(fw.image_prob)[[0, 0]],
        norm(g.value(fw.heatmap))
    );
    for (k, &v) in fw.stage_patches.iter().enumerate() {
        s += &format!("  |stage {} patch probs| = {}\n", k + 1, norm(g.value(v)));
    }
    for (name, t) in params.iter() {
        s += &format!("  |{name}| = {}\n", norm(t));
    }
    s
}

/// Loss for one sample and its gradient with respect to every registry tensor.
pub fn loss_and_gradients(model: &Model, sample: &LabeledSample, cfg: &TrainConfig) -> Result<(LossBreakdown, TensorMap)> {
    let size = model.config().backbone.image_size;
    check_mask((size, size), &sample.mask)?;
    let mut g = Graph::new();
    let pv = model.params().leaves(&mut g, true);
    let fw = model.forward_graph(&mut g, &pv, &sample.image, &sample.class_name)?;
    let lv = loss_graph(&mut g, fw.image_prob, fw.heatmap, sample.label, &sample.mask, cfg);
    let loss = read(&g, &lv);
    if !loss.total.is_finite() {
        return Err(AfrError::Numeric(diagnostic(&g, &fw, model.params(), &loss, sample)));
    }
    let grads = g.backward(lv.total);
    let out = pv
        .iter()
        .map(|(name, var)| {
            let grad = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(g.shape(var)));
            (name.to_string(), grad)
        })
        .collect();
    Ok((loss, out))
}

/// Forward-only loss of one sample.
pub fn sample_loss(model: &Model, sample: &LabeledSample, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let pv = model.params().leaves(&mut g, false);
    let fw = model.forward_graph(&mut g, &pv, &sample.image, &sample.class_name)?;
    let lv = loss_graph(&mut g, fw.image_prob, fw.heatmap, sample.label, &sample.mask, cfg);
    let loss = read(&g, &lv);
    if !loss.total.is_finite() {
        return Err(AfrError::Numeric(diagnostic(&g, &fw, model.params(), &loss, sample)));
    }
    Ok(loss)
}

/// Adam with bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: TensorMap,
    v: TensorMap,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: TensorMap::new(),
            v: TensorMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &TensorMap, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let (b1, b2) = (self.beta1, self.beta2);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = params.get_mut(name);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// Checks that a dataset can supervise training.
pub fn check_training_set(ds: &Dataset) -> Result<()> {
    if ds.samples.is_empty() {
        return Err(AfrError::Dataset(format!("training set {:?} is empty", ds.id)));
    }
    let pos = ds.count_positive();
    if pos == 0 || pos == ds.samples.len() {
        return Err(AfrError::Dataset(format!(
            "training set {:?} needs normal and abnormal samples, has {pos} of {} abnormal",
            ds.id,
            ds.samples.len()
        )));
    }
    if let Some(s) = ds.samples.iter().find(|s| s.label && !s.has_mask()) {
        return Err(AfrError::Dataset(format!("abnormal sample {} has an empty mask", s.id)));
    }
    Ok(())
}

/// Label-stratified `(train, validation)` index split.
pub fn stratified_split(ds: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for want in [false, true] {
        let mut idx: Vec<usize> = (0..ds.samples.len()).filter(|&i| ds.samples[i].label == want).collect();
        idx.shuffle(&mut rng);
        let n_val = if fraction > 0.0 {
            ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub validation: Option<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation loss of the best epoch, or its training loss without a validation split.
    pub best_loss: f64,
    pub best_params: ParamStore,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    kind: &'a str,
    epoch: usize,
    step: usize,
    lr: f64,
    #[serde(flatten)]
    loss: LossBreakdown,
}

fn mean_loss(model: &Model, samples: &[&LabeledSample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let losses: Vec<LossBreakdown> = samples
        .par_iter()
        .map(|s| sample_loss(model, s, cfg))
        .collect::<Result<_>>()?;
    let mut sum = LossBreakdown::default();
    losses.iter().for_each(|l| sum.add(l));
    Ok(sum.scaled(1.0 / samples.len() as f64))
}

/// Where [`train`] writes its artifacts.
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("epoch-{epoch:03}"))
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("checkpoints").join("best")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("checkpoints").join("last")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AfrError + '_ {
    move |e| AfrError::io(path, e)
}

/// Trains `model` in place. Given the same seed, data and thread-independent
/// summation order, runs are bit-identical.
///
/// Per-sample gradients run in parallel and are summed in sample order.
/// Leaves `model` with the final-epoch parameters; the best ones are in the report.
pub fn train(cfg: &TrainConfig, ds: &Dataset, model: &mut Model, out: Option<&TrainOutput>) -> Result<TrainReport> {
    cfg.validate()?;
    check_training_set(ds)?;
    let (train_idx, val_idx) = stratified_split(ds, cfg.validation_fraction, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(cfg);
    let val: Vec<&LabeledSample> = val_idx.iter().map(|&i| &ds.samples[i]).collect();

    let mut log = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(io_err(&o.dir))?;
            let p = o.log();
            Some((BufWriter::new(File::create(&p).map_err(io_err(&p))?), p))
        }
        None => None,
    };

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut order = train_idx.clone();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.lr0);
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(LossBreakdown, TensorMap)> = batch
                .par_iter()
                .map(|&i| loss_and_gradients(model, &ds.samples[i], cfg))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: TensorMap = TensorMap::new();
            let mut batch_loss = LossBreakdown::default();
            for (loss, g) in &results {
                batch_loss.add(loss);
                for (name, t) in g {
                    match grads.get_mut(name) {
                        Some(acc) => *acc += t,
                        None => {
                            grads.insert(name.clone(), t.clone());
                        }
                    }
                }
            }
            grads.values_mut().for_each(|g| *g *= scale);
            adam.step(model.params_mut(), &grads, lr);
            epoch_loss.add(&batch_loss);
            let batch_loss = batch_loss.scaled(scale);
            if let Some((w, p)) = log.as_mut() {
                let rec = StepRecord { kind: "step", epoch, step, lr, loss: batch_loss };
                writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io_err(p))?;
            }
            step += 1;
        }
        let train_loss = epoch_loss.scaled(1.0 / order.len() as f64);
        let validation = if val.is_empty() { None } else { Some(mean_loss(model, &val, cfg)?) };
        let score = validation.unwrap_or(train_loss).total;
        let record = EpochRecord { epoch, lr, train: train_loss, validation };
        info!(
            "epoch {epoch}: lr {lr:.2e} train {:.5}{}",
            train_loss.total,
            validation.map_or(String::new(), |v| format!(" validation {:.5}", v.total))
        );
        if let Some((w, p)) = log.as_mut() {
            #[derive(Serialize)]
            struct EpochLine<'a> {
                kind: &'a str,
                #[serde(flatten)]
                rec: &'a EpochRecord,
            }
            let line = serde_json::to_string(&EpochLine { kind: "epoch", rec: &record }).expect("record serializes");
            writeln!(w, "{line}").map_err(io_err(p))?;
            w.flush().map_err(io_err(p))?;
        }
        epochs.push(record);

        let improved = best.as_ref().is_none_or(|(_, b, _)| score < *b);
        if improved {
            best = Some((epoch, score, model.params().clone()));
        }
        if let Some(o) = out {
            let periodic = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if periodic {
                model.params().save(&o.checkpoint(epoch))?;
            }
            if improved {
                model.params().save(&o.best())?;
            }
        }
    }
    if let Some(o) = out {
        model.params().save(&o.last())?;
    }
    let (best_epoch, best_loss, best_params) = best.expect("at least one epoch");
    Ok(TrainReport { epochs, best_epoch, best_loss, best_params })
}
