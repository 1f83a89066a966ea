//! Pre-training loop: per-sample preparation, batched gradient computation
//! and AdamW updates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autograd::Graph;
use crate::cloud::PointCloud;
use crate::error::{config_err, Error, Result};
use crate::guidance::{
    build_saliency_cloud, build_semantic_targets, sample_mask, MaskPolicy, SaliencyAgg,
    SaliencyCloud, TargetAgg,
};
use crate::model::{group_tokens, I2pMae, LossWeights, TargetAssignment, TokenGroups};
use crate::optim::{clip_global_norm, AdamWConfig, OptimState, Schedule};
use crate::projection::{render_views, GridMap};
use crate::rng::{derive, seeded};
use crate::vision::FeatureExtractor;

/// Everything fixed per sample before training starts.
#[derive(Debug, Clone, PartialEq)]
pub struct PrepConfig {
    pub tokens: usize,
    pub k: usize,
    pub views: usize,
    pub image: (usize, usize),
    pub sal_agg: SaliencyAgg,
    pub tgt_agg: TargetAgg,
    /// Seeds the first FPS center of every sample.
    pub token_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub label: Option<usize>,
    pub tokens: TokenGroups,
    pub saliency: SaliencyCloud,
    /// `M x width` 2D targets in token order.
    pub semantic: Vec<f64>,
    pub semantic_width: usize,
}

/// Per-view 2D features and saliency of one cloud, in axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMaps {
    pub features: Vec<GridMap>,
    pub saliency: Vec<GridMap>,
}

/// Renders the first `views` depth maps and runs the extractor on each.
pub fn extract_views(
    cloud: &PointCloud,
    views: usize,
    image: (usize, usize),
    ex: &dyn FeatureExtractor,
) -> Result<ViewMaps> {
    let mut out = ViewMaps {
        features: Vec::with_capacity(views),
        saliency: Vec::with_capacity(views),
    };
    for d in render_views(&cloud.points, views, image)? {
        let f = ex.extract_features(&cloud.source_id, &d)?;
        out.saliency
            .push(ex.extract_saliency(&cloud.source_id, &f)?);
        out.features.push(f);
    }
    Ok(out)
}

/// Builds tokens, saliency and semantic targets from precomputed view maps
/// (at least `cfg.views` of them).
pub fn prepare_from_views(
    cloud: &PointCloud,
    maps: &ViewMaps,
    cfg: &PrepConfig,
) -> Result<PreparedSample> {
    if maps.features.len() < cfg.views || maps.saliency.len() < cfg.views || cfg.views == 0 {
        return Err(config_err!(
            "{} views requested, {} available",
            cfg.views,
            maps.features.len()
        ));
    }
    let features = &maps.features[..cfg.views];
    let tokens = group_tokens(cloud, cfg.tokens, cfg.k, cfg.token_seed)?;
    let saliency = build_saliency_cloud(&maps.saliency[..cfg.views], &tokens.centers, cfg.sal_agg)?;
    let target = build_semantic_targets(features, &tokens.centers, cfg.tgt_agg)?;
    Ok(PreparedSample {
        id: cloud.source_id.clone(),
        label: cloud.label,
        tokens,
        saliency,
        semantic: target.values,
        semantic_width: target.width,
    })
}

pub fn prepare_sample(
    cloud: &PointCloud,
    ex: &dyn FeatureExtractor,
    cfg: &PrepConfig,
) -> Result<PreparedSample> {
    let maps = extract_views(cloud, cfg.views, cfg.image, ex)?;
    prepare_from_views(cloud, &maps, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub adamw: AdamWConfig,
    pub mask_ratio: f64,
    pub policy: MaskPolicy,
    pub assignment: TargetAssignment,
    pub loss_weights: LossWeights,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            warmup_epochs: 10,
            lr: 1e-3,
            lr_min: 1e-5,
            adamw: AdamWConfig::default(),
            mask_ratio: 0.8,
            policy: MaskPolicy::Important,
            assignment: TargetAssignment::M3dV2d,
            loss_weights: LossWeights::default(),
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(
            self.warmup_epochs as f64,
            self.epochs as f64,
            self.lr,
            self.lr_min,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(config_err!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        self.schedule().map(|_| ())
    }
}

/// Loss values and parameter gradients of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub grads: Vec<Vec<f64>>,
    pub loss_3d: f64,
    pub loss_2d: f64,
    pub loss_total: f64,
}

/// Maps a per-index job over `0..n`, returning results in index order.
pub trait BatchExecutor {
    fn map(
        &self,
        n: usize,
        job: &(dyn Fn(usize) -> Result<SampleGrad> + Sync),
    ) -> Vec<Result<SampleGrad>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl BatchExecutor for Sequential {
    fn map(
        &self,
        n: usize,
        job: &(dyn Fn(usize) -> Result<SampleGrad> + Sync),
    ) -> Vec<Result<SampleGrad>> {
        (0..n).map(job).collect()
    }
}

/// Seed of the mask drawn for dataset sample `index` in `epoch`.
pub fn mask_seed(run_seed: u64, epoch: usize, index: usize) -> u64 {
    derive(derive(run_seed, epoch as u64 + 1), index as u64)
}

/// Forward and backward pass for one sample under a fixed mask seed.
pub fn sample_gradient(
    model: &I2pMae,
    sample: &PreparedSample,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SampleGrad> {
    let partition = sample_mask(&sample.saliency, cfg.mask_ratio, cfg.policy, seed)?;
    let mut g = Graph::new();
    let losses = match model.forward(
        &mut g,
        &sample.tokens,
        &partition,
        Some(&sample.semantic),
        cfg.assignment,
        cfg.loss_weights,
    ) {
        Ok(l) => l,
        Err(Error::Numeric(msg)) => return Err(non_finite(&g, model, &sample.id, &msg)),
        Err(e) => return Err(e),
    };
    let scalar = |v: Option<crate::autograd::Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let total = scalar(Some(losses.total));
    if !total.is_finite() {
        return Err(non_finite(&g, model, &sample.id, "loss is not finite"));
    }
    let (loss_3d, loss_2d) = (scalar(losses.l3d), scalar(losses.l2d));
    g.backward(losses.total)?;
    let grads = g
        .param_grads()
        .zip(model.params().iter())
        .map(|((_, d), p)| d.map_or_else(|| vec![0.0; p.tensor.len()], |d| d.to_vec()))
        .collect();
    Ok(SampleGrad {
        grads,
        loss_3d,
        loss_2d,
        loss_total: total,
    })
}

fn non_finite(g: &Graph, model: &I2pMae, id: &str, what: &str) -> Error {
    let node = match g.first_non_finite() {
        Some((i, op)) => match g.param_at(i) {
            Some(p) => format!("node {i} (parameter {})", model.params().get(p).name),
            None => format!("node {i} ({op})"),
        },
        None => String::from("no stored tensor"),
    };
    Error::Numeric(format!(
        "sample {id}: {what}; first non-finite tensor: {node}"
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub loss_3d: f64,
    pub loss_2d: f64,
    pub loss_total: f64,
}

/// Trains `model` in place. `observer` sees the metrics and model after every
/// epoch and may abort by returning an error.
pub fn pretrain(
    model: &mut I2pMae,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
    executor: &dyn BatchExecutor,
    observer: &mut dyn FnMut(&EpochMetrics, &I2pMae) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(config_err!("pre-training set is empty"));
    }
    let schedule = cfg.schedule()?;
    let mut opt = OptimState::new(model.params(), cfg.adamw);
    let batches = samples.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seeded(derive(cfg.seed, u64::MAX - epoch as u64)));
        let mut sums = [0.0f64; 3];
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let m: &I2pMae = model;
            let job = |i: usize| {
                let s = batch[i];
                sample_gradient(m, &samples[s], cfg, mask_seed(cfg.seed, epoch, s))
            };
            let results = executor.map(batch.len(), &job);
            let mut grads: Option<Vec<Vec<f64>>> = None;
            for r in results {
                let r = r?;
                sums[0] += r.loss_3d;
                sums[1] += r.loss_2d;
                sums[2] += r.loss_total;
                match &mut grads {
                    None => grads = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = grads.expect("batches are nonempty");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            lr = schedule.lr_at(epoch as f64 + (b + 1) as f64 / batches as f64);
            opt.step(model.params_mut(), &grads, lr)?;
        }
        let n = samples.len() as f64;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr,
            loss_3d: sums[0] / n,
            loss_2d: sums[1] / n,
            loss_total: sums[2] / n,
        };
        observer(&metrics, model)?;
        history.push(metrics);
    }
    Ok(history)
}
