//! Mini-batch training and evaluation over scans.

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;

use super::data::{Encoder, ScanData};
use super::spec::PhaseConfig;
use super::HarnessError;
use crate::featurize::FeatureStats;
use crate::losses::mixed_loss_weighted;
use crate::metrics::{miou_with, ConfusionMatrix, MiouMode};
use crate::model::{self, MHGradients, MHModel, Model, Parameters};
use crate::optim::{sgd_step, OptState, Schedule};
use crate::{seed, IGNORE_CLASS};

/// A scan paired with the encoder of its dataset and the head it trains.
#[derive(Clone, Copy)]
pub struct Sample<'a> {
    pub scan: &'a ScanData,
    pub encoder: &'a Encoder,
    pub head: usize,
    /// Dataset the scan comes from, for balanced draws.
    pub source: usize,
}

/// Network shapes the loop can train.
pub trait Trainable: Parameters {
    type Grad: Parameters;

    fn n_heads(&self) -> usize;
    fn n_classes(&self, head: usize) -> usize;
    fn zero_grad(&self) -> Self::Grad;
    fn logits(&self, x: &Array2<f64>, head: usize) -> Result<Array2<f64>, HarnessError>;
    /// Adds `scale · ∂loss/∂θ` to `acc` and returns the unscaled loss.
    fn accumulate_grad(
        &self,
        x: &Array2<f64>,
        targets: &[u32],
        head: usize,
        lovasz_weight: f64,
        scale: f64,
        acc: &mut Self::Grad,
    ) -> Result<f64, HarnessError>;
}

fn add_scaled<P: Parameters>(acc: &mut P, g: &P, scale: f64) {
    for (a, t) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        for (x, y) in a.iter_mut().zip(t) {
            *x += scale * y;
        }
    }
}

impl Trainable for Model {
    type Grad = model::Gradients;

    fn n_heads(&self) -> usize {
        1
    }
    fn n_classes(&self, _head: usize) -> usize {
        Model::n_classes(self)
    }
    fn zero_grad(&self) -> Self::Grad {
        self.zero_gradients()
    }
    fn logits(&self, x: &Array2<f64>, _head: usize) -> Result<Array2<f64>, HarnessError> {
        Ok(model::forward(self, x)?.0)
    }
    fn accumulate_grad(
        &self,
        x: &Array2<f64>,
        targets: &[u32],
        _head: usize,
        lovasz_weight: f64,
        scale: f64,
        acc: &mut Self::Grad,
    ) -> Result<f64, HarnessError> {
        let (logits, cache) = model::forward(self, x)?;
        let out = mixed_loss_weighted(&logits, targets, IGNORE_CLASS, lovasz_weight)?;
        let g = model::backward(self, &cache, &out.grad)?;
        add_scaled(acc, &g, scale);
        Ok(out.loss)
    }
}

fn head_name(m: &MHModel, head: usize) -> &str {
    m.heads.keys().nth(head).map(String::as_str).unwrap_or("")
}

impl Trainable for MHModel {
    type Grad = MHGradients;

    fn n_heads(&self) -> usize {
        self.heads.len()
    }
    fn n_classes(&self, head: usize) -> usize {
        self.heads.values().nth(head).map_or(0, |h| h.fan_out())
    }
    fn zero_grad(&self) -> Self::Grad {
        self.zero_gradients()
    }
    fn logits(&self, x: &Array2<f64>, head: usize) -> Result<Array2<f64>, HarnessError> {
        Ok(self.forward(x, head_name(self, head))?.0)
    }
    fn accumulate_grad(
        &self,
        x: &Array2<f64>,
        targets: &[u32],
        head: usize,
        lovasz_weight: f64,
        scale: f64,
        acc: &mut Self::Grad,
    ) -> Result<f64, HarnessError> {
        let name = head_name(self, head);
        let (logits, cache) = self.forward(x, name)?;
        let out = mixed_loss_weighted(&logits, targets, IGNORE_CLASS, lovasz_weight)?;
        let g = self.backward(&cache, name, &out.grad)?;
        add_scaled(acc, &g, scale);
        Ok(out.loss)
    }
}

/// Settings shared by one training phase.
pub struct PhaseContext<'a> {
    pub name: &'a str,
    pub config: &'a PhaseConfig,
    pub voxel_size: f64,
    pub stats: &'a FeatureStats,
    pub seed: u64,
    pub miou_mode: MiouMode,
    /// Draw scans per epoch evenly across source datasets instead of
    /// uniformly.
    pub balance_sources: bool,
}

/// Labeled, standardized rows of one scan, at most `cap` of them.
fn scan_rows(
    sample: &Sample,
    ctx: &PhaseContext,
    cap: Option<usize>,
    augment_seed: u64,
    pick_seed: u64,
) -> Result<(Array2<f64>, Vec<u32>), HarnessError> {
    let f = sample
        .scan
        .features_for(ctx.voxel_size, ctx.config.augment.as_ref(), augment_seed)?;
    let labeled: Vec<usize> = (0..f.labels.len())
        .filter(|&i| sample.encoder.encode(f.labels[i]) != IGNORE_CLASS)
        .collect();
    let rows: Vec<usize> = match cap {
        Some(cap) if labeled.len() > cap => {
            let mut pick = index::sample(&mut seed::rng(pick_seed, &[]), labeled.len(), cap).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|i| labeled[i]).collect()
        }
        _ => labeled,
    };
    let x = f.features.select(Axis(0), &rows).mapv(f64::from);
    let y = rows.iter().map(|&i| sample.encoder.encode(f.labels[i])).collect();
    Ok((ctx.stats.apply(&x), y))
}

fn scan_key<'a>(sample: &Sample<'a>) -> [seed::SeedPart<'a>; 2] {
    [sample.scan.scene_id.as_str().into(), sample.scan.scan_id.as_str().into()]
}

/// Scan draw order for one epoch.
fn epoch_order(samples: &[Sample], ctx: &PhaseContext, epoch: usize) -> Vec<usize> {
    let mut rng = seed::rng(ctx.seed, &[ctx.name.into(), "order".into(), epoch.into()]);
    let n_sources = samples.iter().map(|s| s.source + 1).max().unwrap_or(0);
    if !ctx.balance_sources || n_sources < 2 {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        return order;
    }
    let by_source: Vec<Vec<usize>> = (0..n_sources)
        .map(|k| (0..samples.len()).filter(|&i| samples[i].source == k).collect())
        .filter(|v: &Vec<usize>| !v.is_empty())
        .collect();
    (0..samples.len())
        .map(|_| {
            let group = &by_source[rng.random_range(0..by_source.len())];
            group[rng.random_range(0..group.len())]
        })
        .collect()
}

/// Trains `net` in place and returns validation mIoU after each epoch
/// (empty without validation scans).
pub fn train<M: Trainable>(
    net: &mut M,
    train: &[Sample],
    validation: &[Sample],
    ctx: &PhaseContext,
) -> Result<Vec<f64>, HarnessError> {
    let cfg = ctx.config;
    if train.is_empty() {
        return Err(HarnessError::InvalidSpec(format!("{}: no training scans", ctx.name)));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_scans);
    let total = (cfg.epochs * steps_per_epoch) as u64;
    let mut opt = OptState::new(cfg.learning_rate, cfg.momentum, Schedule::new(cfg.schedule, total), net);
    if opt.velocity.len() != net.tensors().len() {
        return Err(HarnessError::InvalidSpec("optimizer does not cover every tensor".into()));
    }
    let n_heads = net.n_heads();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train, ctx, epoch);
        for (step, chunk) in order.chunks(cfg.batch_scans).enumerate() {
            let mut groups: Vec<(Vec<Array2<f64>>, Vec<u32>)> = vec![(Vec::new(), Vec::new()); n_heads];
            for (slot, &i) in chunk.iter().enumerate() {
                let s = &train[i];
                let key = scan_key(s);
                let draw = [ctx.name.into(), epoch.into(), step.into(), slot.into()];
                let augment_seed = seed::derive(ctx.seed, &[&draw[..], &key[..]].concat());
                let pick_seed = seed::derive(augment_seed, &["pick".into()]);
                let (x, y) = scan_rows(s, ctx, Some(cfg.max_voxels_per_scan), augment_seed, pick_seed)?;
                groups[s.head].0.push(x);
                groups[s.head].1.extend(y);
            }
            let total_rows: usize = groups.iter().map(|g| g.1.len()).sum();
            if total_rows == 0 {
                continue;
            }
            let mut grad = net.zero_grad();
            for (head, (xs, y)) in groups.iter().enumerate() {
                if y.is_empty() {
                    continue;
                }
                let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
                let x = ndarray::concatenate(Axis(0), &views).expect("equal widths");
                let scale = y.len() as f64 / total_rows as f64;
                let loss = net.accumulate_grad(&x, y, head, cfg.lovasz_weight, scale, &mut grad)?;
                if !loss.is_finite() {
                    return Err(HarnessError::Diverged {
                        phase: ctx.name.to_string(),
                        epoch,
                    });
                }
            }
            sgd_step(net, &grad, &mut opt).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        }
        if !net.all_finite() {
            return Err(HarnessError::Diverged {
                phase: ctx.name.to_string(),
                epoch,
            });
        }
        if !validation.is_empty() {
            let cms = evaluate(net, validation, ctx)?;
            curve.push(mean_miou(&cms, ctx.miou_mode));
        }
        log::debug!("{} epoch {epoch}: {:?}", ctx.name, curve.last());
    }
    Ok(curve)
}

/// Mean over heads of each head's mIoU; heads without evaluable classes
/// are skipped.
pub fn mean_miou(cms: &[ConfusionMatrix], mode: MiouMode) -> f64 {
    let values: Vec<f64> = cms.iter().filter_map(|cm| miou_with(cm, mode).ok()).collect();
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<u32> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Voxel-level confusion matrix per head over every labeled voxel.
pub fn evaluate<M: Trainable>(
    net: &M,
    samples: &[Sample],
    ctx: &PhaseContext,
) -> Result<Vec<ConfusionMatrix>, HarnessError> {
    let mut cms: Vec<ConfusionMatrix> = (0..net.n_heads()).map(|h| ConfusionMatrix::new(net.n_classes(h))).collect();
    let plain = PhaseContext {
        config: &PhaseConfig {
            augment: None,
            ..ctx.config.clone()
        },
        ..*ctx
    };
    for s in samples {
        let (x, y) = scan_rows(s, &plain, None, 0, 0)?;
        if y.is_empty() {
            continue;
        }
        let pred = argmax_rows(&net.logits(&x, s.head)?);
        cms[s.head].accumulate(&pred, &y, IGNORE_CLASS)?;
    }
    Ok(cms)
}

/// Point-level confusion matrix: each point takes its voxel's prediction.
pub fn evaluate_points(
    net: &Model,
    samples: &[Sample],
    voxel_size: f64,
    stats: &FeatureStats,
) -> Result<ConfusionMatrix, HarnessError> {
    let mut cm = ConfusionMatrix::new(net.n_classes());
    for s in samples {
        let (f, grid) = s.scan.featurize_with_grid(voxel_size)?;
        if f.labels.is_empty() {
            continue;
        }
        let x = stats.apply(&f.features.mapv(f64::from));
        let voxel_pred = argmax_rows(&model::forward(net, &x)?.0);
        let rows = grid.point_rows(s.scan.points.len());
        let pred: Vec<u32> = rows.iter().map(|&r| voxel_pred[r]).collect();
        let truth: Vec<u32> = s.scan.labels.iter().map(|&l| s.encoder.encode(l)).collect();
        cm.accumulate(&pred, &truth, IGNORE_CLASS)?;
    }
    Ok(cm)
}

/// Standardization statistics over every labeled voxel of the samples.
pub fn fit_stats(samples: &[Sample], voxel_size: f64) -> Result<FeatureStats, HarnessError> {
    let mut acc = crate::featurize::StatsAccumulator::new();
    for s in samples {
        let f = s.scan.featurized(voxel_size)?;
        let rows: Vec<usize> = (0..f.labels.len())
            .filter(|&i| s.encoder.encode(f.labels[i]) != IGNORE_CLASS)
            .collect();
        acc.add(f.features.select(Axis(0), &rows).mapv(f64::from).view());
    }
    Ok(acc.finish())
}

/// Label histogram over labeled voxels of the samples for one head.
pub fn class_histogram(samples: &[Sample], n_classes: usize, voxel_size: f64) -> Result<Vec<u64>, HarnessError> {
    let mut hist = vec![0u64; n_classes];
    for s in samples {
        let f = s.scan.featurized(voxel_size)?;
        for &l in &f.labels {
            let c = s.encoder.encode(l);
            if c != IGNORE_CLASS {
                hist[c as usize] += 1;
            }
        }
    }
    Ok(hist)
}
