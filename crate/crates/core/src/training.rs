//! Episodic training: backbone warm-up, single-pass IOM supervision with a
//! last-epoch prediction cache, and mini-batch SGD.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{FeaturePair, FeatureVars, BACKBONE_PREFIX};
use crate::episodes::{rng_for, usable_bbox_mask, ClassSplit, Episode, Phase, ShapeDataset};
use crate::error::{Error, Result};
use crate::evaluation::{all_foreground_baseline, evaluate_episodes, evaluation_episodes, EvalConfig};
use crate::layers::Registrar;
use crate::model::{scaled_dims, InferenceOptions, Model};
use crate::ops::{self, ConvGeometry};
use crate::refinement::{empty_prior, mask_dropout, ConfidenceMap};
use crate::state::{sgd_step, ModelState};
use crate::tensor::BinaryMask;

const TAG_EPISODES: u64 = 0x7261_696e;
const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_DROPOUT: u64 = 0x4452_4f50;
const TAG_WARMUP: u64 = 0x5741_524d;
const TAG_VALIDATION: u64 = 0x5641_4c49;
const TAG_SUPPORTS: u64 = 0x5355_5050;
const TAG_SCALE: u64 = 0x5343_414c;
const TAG_BOX: u64 = 0x424f_5845;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_episodes: usize,
    pub p_r: f64,
    pub k_train: usize,
    pub episodes_per_epoch: usize,
    /// Support sets cycled per query across epochs; 1 keeps each episode's own supports.
    pub support_redraws: usize,
    /// Query rescaling factors; each training episode keeps one, drawn uniformly.
    pub query_scales: Vec<f64>,
    /// Chance that a training support mask is replaced by the filled box of one component.
    pub box_support_prob: f64,
    pub seed: u64,
    pub backbone_frozen: bool,
    /// Mini-batches of the per-pixel classification warm-up; 0 disables it.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    /// Held-out train-class episodes scored after training; 0 skips validation.
    pub validation_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.0025,
            momentum: 0.9,
            batch_episodes: 4,
            p_r: 0.7,
            k_train: 1,
            episodes_per_epoch: 4800,
            support_redraws: 20,
            query_scales: vec![1.0],
            box_support_prob: 0.0,
            seed: 0,
            backbone_frozen: true,
            warmup_steps: 300,
            warmup_lr: 0.01,
            validation_episodes: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("train.lr must be non-negative, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.p_r) {
            return Err(Error::config(format!("train.p_r must lie in [0,1], got {}", self.p_r)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("train.momentum must lie in [0,1), got {}", self.momentum)));
        }
        if self.batch_episodes == 0 || self.k_train == 0 || self.episodes_per_epoch == 0 || self.support_redraws == 0 {
            return Err(Error::config(
                "train.batch_episodes, train.k_train, train.episodes_per_epoch and train.support_redraws must be positive",
            ));
        }
        if self.query_scales.is_empty() || self.query_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("train.query_scales must be a non-empty list of positive factors"));
        }
        if !(0.0..=1.0).contains(&self.box_support_prob) {
            return Err(Error::config(format!("train.box_support_prob must lie in [0,1], got {}", self.box_support_prob)));
        }
        Ok(())
    }
}

/// SGD, optionally with heavy-ball momentum `v <- m v + g; p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Optimizer {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, state: &mut ModelState) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(state, self.lr);
        }
        if let Some(p) = state.params().iter().find(|p| !p.frozen && p.tensor.grad.is_none()) {
            return Err(Error::State(format!("missing gradient for {}", p.name)));
        }
        for p in state.params_mut() {
            if p.frozen {
                continue;
            }
            let grad = p.tensor.grad.take().expect("checked above");
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((vi, gi), x) in v.iter_mut().zip(&grad).zip(p.tensor.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *x -= self.lr * *vi;
            }
            p.tensor.grad = Some(vec![0.0; grad.len()]);
        }
        Ok(())
    }
}

/// Last-epoch predictions keyed by training-episode index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionCache {
    previous: BTreeMap<u64, ConfidenceMap>,
    current: BTreeMap<u64, ConfidenceMap>,
}

impl PredictionCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// The prediction made for `id` during the previous epoch.
    pub fn previous(&self, id: u64) -> Option<&ConfidenceMap> {
        self.previous.get(&id)
    }

    pub fn store(&mut self, id: u64, map: ConfidenceMap) {
        self.current.insert(id, map);
    }

    /// This epoch's predictions become the lookup table for the next one.
    pub fn end_epoch(&mut self) {
        self.previous = std::mem::take(&mut self.current);
    }

    pub fn previous_entries(&self) -> &BTreeMap<u64, ConfidenceMap> {
        &self.previous
    }

    pub fn from_previous(previous: BTreeMap<u64, ConfidenceMap>) -> Self {
        PredictionCache {
            previous,
            current: BTreeMap::new(),
        }
    }
}

/// Plurality label per cell after assigning each pixel to its nearest
/// corner-aligned grid point; ties go to the lower label.
pub fn downsample_labels(labels: &[usize], h: usize, w: usize, out_h: usize, out_w: usize, num_labels: usize) -> Result<Vec<usize>> {
    if labels.len() != h * w || out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "cannot downsample {} labels of {h}x{w} to {out_h}x{out_w}",
            labels.len()
        )));
    }
    let nearest = |i: usize, n: usize, m: usize| -> usize {
        if n <= 1 || m <= 1 {
            0
        } else {
            // i * (m-1) / (n-1) rounded half up, in integers
            (2 * i * (m - 1) + (n - 1)) / (2 * (n - 1))
        }
    };
    let mut votes = vec![0u32; out_h * out_w * num_labels];
    for y in 0..h {
        let oy = nearest(y, h, out_h);
        for x in 0..w {
            let ox = nearest(x, w, out_w);
            let l = labels[y * w + x];
            if l >= num_labels {
                return Err(Error::shape(format!("label {l} out of range")));
            }
            votes[(oy * out_w + ox) * num_labels + l] += 1;
        }
    }
    Ok(votes
        .chunks(num_labels)
        .map(|v| {
            let mut best = 0;
            for (l, &n) in v.iter().enumerate() {
                if n > v[best] {
                    best = l;
                }
            }
            best
        })
        .collect())
}

/// Query mask at feature resolution: foreground only with a strict majority of its pixels.
pub fn downsample_mask_majority(mask: &BinaryMask, out_h: usize, out_w: usize) -> Result<BinaryMask> {
    let labels: Vec<usize> = mask.data().iter().map(|&v| v as usize).collect();
    let out = downsample_labels(&labels, mask.height(), mask.width(), out_h, out_w, 2)?;
    BinaryMask::new(out_h, out_w, out.into_iter().map(|l| l as u8).collect())
}

/// Backbone outputs for every image of an episode.
#[derive(Debug, Clone)]
pub struct EpisodeFeatures {
    pub support: Vec<FeaturePair>,
    pub query: FeaturePair,
}

impl EpisodeFeatures {
    pub fn compute(model: &Model, ep: &Episode) -> Result<Self> {
        Ok(EpisodeFeatures {
            support: ep
                .support
                .iter()
                .map(|s| model.extract_features(&s.image))
                .collect::<Result<_>>()?,
            query: model.extract_features(&ep.query_image)?,
        })
    }
}

/// One training episode with its stable identity and optional cached features.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub id: u64,
    pub episode: &'a Episode,
    pub features: Option<&'a EpisodeFeatures>,
}

/// Builds the single-pass training graph and returns the foreground/background probabilities.
pub fn episode_forward(model: &Model, g: &mut Graph, item: &TrainItem<'_>, y_prev: Option<&ConfidenceMap>) -> Result<Var> {
    let s = &model.state;
    let net = &model.net;
    let ep = item.episode;
    let encode = |g: &mut Graph, image: &crate::tensor::Tensor, pair: Option<&FeaturePair>| -> Result<Var> {
        match pair {
            Some(p) => {
                let vars = FeatureVars::from_pair(g, p);
                net.encoder.forward(g, s, vars)
            }
            None => {
                let img = g.constant(image.clone());
                net.encode_image(g, s, img)
            }
        }
    };
    let qenc = encode(g, &ep.query_image, item.features.map(|f| &f.query))?;
    let mut concats = Vec::with_capacity(ep.support.len());
    let mut comps = Vec::with_capacity(ep.support.len());
    for (i, sup) in ep.support.iter().enumerate() {
        let senc = encode(g, &sup.image, item.features.map(|f| &f.support[i]))?;
        let cv = net.dcm.forward(g, s, senc, &sup.mask, qenc)?;
        concats.push(cv.concat);
        comps.push(cv.comparison);
    }
    let x = net.attention.fuse(g, s, &concats, &comps)?;
    let (_, h, w) = g.value(x).chw()?;
    let prior = match y_prev {
        Some(m) => m.probs().clone(),
        None => empty_prior(h, w),
    };
    let pv = g.constant(prior);
    net.iom.step(g, s, x, pv)
}

/// One SGD update on a mini-batch; returns the mean episode loss.
pub fn training_step(
    model: &mut Model,
    split: &ClassSplit,
    batch: &[TrainItem<'_>],
    cache: &mut PredictionCache,
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("empty training batch"));
    }
    if let Some(bad) = batch
        .iter()
        .find(|it| split.phase_of(it.episode.class_id) != Some(Phase::Train))
    {
        return Err(Error::config(format!(
            "class {} is not a training class",
            bad.episode.class_id
        )));
    }
    model.state.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for item in batch {
        let prior = mask_dropout(cache.previous(item.id).cloned(), cfg.p_r, rng);
        let mut g = Graph::new();
        let probs = episode_forward(model, &mut g, item, prior.as_ref())?;
        let (_, h, w) = g.value(probs).chw()?;
        let target = downsample_mask_majority(&item.episode.query_mask, h, w)?;
        let loss = g.cross_entropy(probs, &target)?;
        total += g.value(loss).data()[0];
        let grads = g.backward(loss);
        grads.accumulate_into(&g, &mut model.state, scale);
        cache.store(item.id, ConfidenceMap::new(g.value(probs).clone())?);
    }
    optimizer.step(&mut model.state)?;
    Ok(total * scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("epoch,step,loss\n");
    for r in curve {
        s.push_str(&format!("{},{},{:.17e}\n", r.epoch, r.step, r.loss));
    }
    s
}

/// Everything needed to continue an interrupted run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainProgress {
    pub warmup_done: bool,
    pub epochs_done: usize,
    pub cache: PredictionCache,
    pub optimizer: Optimizer,
    pub loss_curve: Vec<LossRecord>,
}

impl TrainProgress {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainProgress {
            warmup_done: false,
            epochs_done: 0,
            cache: PredictionCache::new(),
            optimizer: Optimizer::new(cfg.lr, cfg.momentum),
            loss_curve: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub loss_curve: Vec<LossRecord>,
    pub warmup_losses: Vec<f64>,
    /// (meanIoU, all-foreground meanIoU) on held-out train-class episodes.
    pub validation: Option<(f64, f64)>,
}

impl TrainSummary {
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut by_epoch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.loss_curve {
            let e = by_epoch.entry(r.epoch).or_default();
            e.0 += r.loss;
            e.1 += 1;
        }
        by_epoch.into_iter().map(|(e, (s, n))| (e, s / n as f64)).collect()
    }
}

/// Per-pixel classification over the training classes with a throwaway 1x1
/// head on the stage-2/3 features. Only backbone parameters are kept.
pub fn warm_up_backbone(model: &mut Model, dataset: &ShapeDataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let train_classes = dataset.split.classes(Phase::Train).to_vec();
    let num_labels = train_classes.len() + 1;
    let mut state = model.state.clone();
    for p in state.params_mut() {
        p.frozen = !p.name.starts_with(BACKBONE_PREFIX);
    }
    let c = model.config.backbone.stage_channels;
    let head = {
        let mut rng = ChaCha8Rng::seed_from_u64(rand_seed(cfg.seed, TAG_WARMUP, u64::MAX));
        let mut reg = Registrar {
            state: &mut state,
            rng: &mut rng,
        };
        reg.conv("warmup.head", c[1] + c[2], num_labels, 1, ConvGeometry::new(1, 1, 0), false)?
    };
    let mut opt = Optimizer::new(cfg.warmup_lr, cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.warmup_steps);
    let batch = cfg.batch_episodes;
    for step in 0..cfg.warmup_steps {
        state.zero_grads();
        let mut total = 0.0;
        for j in 0..batch {
            let mut rng = rng_for(&[cfg.seed, TAG_WARMUP, step as u64, j as u64]);
            let target = train_classes[rng.random_range(0..train_classes.len())];
            let scene = dataset.scene(target, Phase::Train, &mut rng)?;
            let (_, h, w) = scene.image.chw()?;
            let mut labels = vec![0usize; h * w];
            for (cls, mask) in &scene.masks {
                let l = 1 + train_classes.iter().position(|t| t == cls).expect("train class");
                for (dst, &m) in labels.iter_mut().zip(mask.data()) {
                    if m != 0 {
                        *dst = l;
                    }
                }
            }
            let mut g = Graph::new();
            let img = g.constant(scene.image.clone());
            let feats = model.net.backbone.forward(&mut g, &state, img, false)?;
            let cat = g.concat(feats.f2, feats.f3)?;
            let logits = head.forward(&mut g, &state, cat)?;
            let probs = g.softmax_channels(logits)?;
            let (_, fh, fw) = g.value(probs).chw()?;
            let target = downsample_labels(&labels, h, w, fh, fw, num_labels)?;
            let loss = g.cross_entropy_labels(probs, &target)?;
            total += g.value(loss).data()[0];
            g.backward(loss).accumulate_into(&g, &mut state, 1.0 / batch as f64);
        }
        opt.step(&mut state)?;
        losses.push(total / batch as f64);
    }
    for p in model.state.params_mut() {
        if p.name.starts_with(BACKBONE_PREFIX) {
            let src = state.by_name(&p.name).expect("same layout");
            p.tensor = src.tensor.clone();
            p.tensor.grad = None;
        }
    }
    Ok(losses)
}

fn rand_seed(seed: u64, tag: u64, idx: u64) -> u64 {
    crate::episodes::derive_seed(&[seed, tag, idx])
}

/// Replaces every episode's supports with support set `epoch % support_redraws` of its class;
/// queries, and so cache identities, stay fixed.
fn redraw_supports(
    model: &Model,
    dataset: &ShapeDataset,
    cfg: &TrainConfig,
    epoch: usize,
    episodes: &mut [Episode],
    features: Option<&mut Vec<EpisodeFeatures>>,
) -> Result<()> {
    use rayon::prelude::*;
    let variant = (epoch % cfg.support_redraws) as u64;
    episodes.par_iter_mut().enumerate().try_for_each(|(i, ep)| -> Result<()> {
        let mut rng = rng_for(&[cfg.seed, TAG_SUPPORTS, i as u64, variant]);
        ep.support = dataset.draw_supports(ep.class_id, Phase::Train, ep.k, &mut rng)?;
        box_supports(ep, cfg, i as u64, variant)
    })?;
    if let Some(feats) = features {
        feats.par_iter_mut().zip(episodes.par_iter()).try_for_each(|(f, ep)| -> Result<()> {
            f.support = ep.support.iter().map(|s| model.extract_features(&s.image)).collect::<Result<_>>()?;
            Ok(())
        })?;
    }
    Ok(())
}

/// Swaps support masks for component boxes with probability `cfg.box_support_prob`.
/// A mask with no usable box keeps its pixels.
fn box_supports(ep: &mut Episode, cfg: &TrainConfig, index: u64, variant: u64) -> Result<()> {
    if cfg.box_support_prob == 0.0 {
        return Ok(());
    }
    let mut rng = rng_for(&[cfg.seed, TAG_BOX, index, variant]);
    for s in &mut ep.support {
        if rng.random_bool(cfg.box_support_prob) {
            if let Ok(b) = usable_bbox_mask(&s.mask, &mut rng) {
                s.mask = b;
            }
        }
    }
    Ok(())
}

/// The fixed episode set of a run, queries rescaled per `cfg.query_scales`.
pub fn training_episodes(dataset: &ShapeDataset, cfg: &TrainConfig) -> Result<Vec<Episode>> {
    use rayon::prelude::*;
    let mut episodes = dataset.episodes(Phase::Train, cfg.k_train, rand_seed(cfg.seed, TAG_EPISODES, 0), 0..cfg.episodes_per_epoch as u64)?;
    for (i, ep) in episodes.iter_mut().enumerate() {
        box_supports(ep, cfg, i as u64, 0)?;
    }
    if cfg.query_scales.iter().any(|&s| s != 1.0) {
        episodes.par_iter_mut().enumerate().try_for_each(|(i, ep)| -> Result<()> {
            let mut rng = rng_for(&[cfg.seed, TAG_SCALE, i as u64]);
            let scale = cfg.query_scales[rng.random_range(0..cfg.query_scales.len())];
            if scale != 1.0 {
                rescale_query(ep, scale)?;
            }
            Ok(())
        })?;
    }
    Ok(episodes)
}

/// Bilinearly resizes the query image, and its mask at a 0.5 threshold.
fn rescale_query(ep: &mut Episode, scale: f64) -> Result<()> {
    let (_, h, w) = ep.query_image.chw()?;
    let (sh, sw) = scaled_dims(h, w, scale)?;
    ep.query_image = ops::bilinear_resize(&ep.query_image, sh, sw)?;
    let m = ops::bilinear_resize(&ep.query_mask.to_tensor(), sh, sw)?;
    ep.query_mask = BinaryMask::from_fn(sh, sw, |y, x| m.data()[y * sw + x] >= 0.5);
    Ok(())
}

/// Full run from `progress` to `cfg.epochs`; `on_epoch` sees the model after every epoch.
pub fn train(
    cfg: &TrainConfig,
    dataset: &ShapeDataset,
    model: &mut Model,
    progress: &mut TrainProgress,
    mut on_epoch: impl FnMut(&Model, &TrainProgress) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut warmup_losses = Vec::new();
    if !progress.warmup_done {
        if cfg.warmup_steps > 0 {
            model.freeze_backbone(false);
            warmup_losses = warm_up_backbone(model, dataset, cfg)?;
        }
        model.freeze_backbone(cfg.backbone_frozen);
        progress.warmup_done = true;
        on_epoch(model, progress)?;
    } else {
        model.freeze_backbone(cfg.backbone_frozen);
    }

    let mut episodes = training_episodes(dataset, cfg)?;
    let mut features: Option<Vec<EpisodeFeatures>> = if cfg.backbone_frozen {
        Some(
            episodes
                .iter()
                .map(|ep| EpisodeFeatures::compute(model, ep))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    for epoch in progress.epochs_done..cfg.epochs {
        if cfg.support_redraws > 1 {
            redraw_supports(model, dataset, cfg, epoch, &mut episodes, features.as_mut())?;
        }
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        order.shuffle(&mut rng_for(&[cfg.seed, TAG_SHUFFLE, epoch as u64]));
        for (step, chunk) in order.chunks(cfg.batch_episodes).enumerate() {
            let batch: Vec<TrainItem<'_>> = chunk
                .iter()
                .map(|&i| TrainItem {
                    id: i as u64,
                    episode: &episodes[i],
                    features: features.as_ref().map(|f| &f[i]),
                })
                .collect();
            let mut rng = rng_for(&[cfg.seed, TAG_DROPOUT, epoch as u64, step as u64]);
            let loss = training_step(
                model,
                &dataset.split,
                &batch,
                &mut progress.cache,
                cfg,
                &mut progress.optimizer,
                &mut rng,
            )?;
            progress.loss_curve.push(LossRecord { epoch, step, loss });
        }
        progress.cache.end_epoch();
        progress.epochs_done = epoch + 1;
        model.state.clear_grads();
        on_epoch(model, progress)?;
    }
    model.state.clear_grads();

    let validation = if cfg.validation_episodes > 0 {
        let ecfg = EvalConfig {
            phase: Phase::Train,
            episodes: cfg.validation_episodes,
            seed: rand_seed(cfg.seed, TAG_VALIDATION, 0),
            ..EvalConfig::default()
        };
        let eps = evaluation_episodes(dataset, &ecfg)?;
        let report = evaluate_episodes(&*model, &eps, &InferenceOptions::default(), String::new())?;
        Some((report.mean_iou, all_foreground_baseline(&eps)))
    } else {
        None
    };

    Ok(TrainSummary {
        loss_curve: progress.loss_curve.clone(),
        warmup_losses,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_downsample_ties_to_background() {
        // 4x4 -> 2x2: rows/cols 0,1 map to 0; 2,3 map to 1
        let mut m = BinaryMask::zeros(4, 4);
        m.set(0, 0, true);
        m.set(0, 1, true);
        m.set(1, 0, true);
        m.set(2, 2, true);
        m.set(2, 3, true);
        let d = downsample_mask_majority(&m, 2, 2).unwrap();
        assert_eq!(d.data(), &[1, 0, 0, 0]);
    }

    #[test]
    fn downsample_identity_at_same_size() {
        let m = BinaryMask::from_fn(5, 3, |y, x| (y + x) % 2 == 0);
        assert_eq!(downsample_mask_majority(&m, 5, 3).unwrap(), m);
    }

    #[test]
    fn cache_serves_previous_epoch_only() {
        let mut c = PredictionCache::new();
        let m = ConfidenceMap::from_foreground(1, 1, &[0.3]).unwrap();
        c.store(7, m.clone());
        assert!(c.previous(7).is_none());
        c.end_epoch();
        assert_eq!(c.previous(7), Some(&m));
        c.end_epoch();
        assert!(c.previous(7).is_none());
    }

    #[test]
    fn momentum_zero_matches_plain_sgd() {
        let mut a = ModelState::new();
        let id = a.register("p", crate::tensor::Tensor::scalar(1.0), false).unwrap();
        a.param_mut(id).tensor.grad = Some(vec![2.0]);
        let mut b = a.clone();
        Optimizer::new(0.1, 0.0).step(&mut a).unwrap();
        sgd_step(&mut b, 0.1).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut s = ModelState::new();
        let id = s.register("p", crate::tensor::Tensor::scalar(0.0), false).unwrap();
        let mut opt = Optimizer::new(1.0, 0.5);
        for _ in 0..2 {
            s.param_mut(id).tensor.grad = Some(vec![1.0]);
            opt.step(&mut s).unwrap();
        }
        // v1 = 1, v2 = 1.5
        assert_eq!(s.params()[0].tensor.data()[0], -2.5);
    }
}
