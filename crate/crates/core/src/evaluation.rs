//! Episode-set evaluation and report formatting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::episodes::{annotate, Annotation, Episode, Phase, ShapeDataset};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::metrics::{fb_iou, mean_iou, Counts, EpisodeResult};
use crate::model::{InferenceOptions, Model};
use crate::tensor::BinaryMask;

/// Anything that turns an episode into a predicted query mask.
pub trait Segmenter: Sync {
    fn segment_episode(&self, episode: &Episode, opts: &InferenceOptions) -> Result<BinaryMask>;
}

impl Segmenter for Model {
    fn segment_episode(&self, episode: &Episode, opts: &InferenceOptions) -> Result<BinaryMask> {
        Ok(self.segment(&episode.support, &episode.query_image, opts)?.mask)
    }
}

/// Returns the ground truth.
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn segment_episode(&self, episode: &Episode, _: &InferenceOptions) -> Result<BinaryMask> {
        Ok(episode.query_mask.clone())
    }
}

/// Labels every query pixel as foreground.
pub struct AllForeground;

impl Segmenter for AllForeground {
    fn segment_episode(&self, episode: &Episode, _: &InferenceOptions) -> Result<BinaryMask> {
        Ok(BinaryMask::ones(
            episode.query_mask.height(),
            episode.query_mask.width(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub phase: Phase,
    pub episodes: usize,
    pub k: usize,
    pub fusion: Fusion,
    pub annotation: Annotation,
    pub scales: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            phase: Phase::Test,
            episodes: 1000,
            k: 1,
            fusion: Fusion::Attention,
            annotation: Annotation::Pixel,
            scales: vec![1.0],
            iterations: 4,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn inference_options(&self) -> InferenceOptions {
        InferenceOptions {
            fusion: self.fusion,
            iterations: self.iterations,
            scales: self.scales.clone(),
        }
    }

    /// Stable text form used for fingerprints.
    pub fn canonical(&self) -> String {
        let scales: Vec<String> = self.scales.iter().map(|s| format!("{s}")).collect();
        format!(
            "eval.phase = {}\neval.episodes = {}\neval.k = {}\neval.fusion = {}\neval.annotation = {}\neval.scales = {}\neval.iterations = {}\neval.seed = {}\n",
            self.phase,
            self.episodes,
            self.k,
            self.fusion,
            self.annotation,
            scales.join(","),
            self.iterations,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class_iou: BTreeMap<usize, f64>,
    pub mean_iou: f64,
    pub fb_iou: f64,
    pub episodes_evaluated: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn from_results(results: &[EpisodeResult], fingerprint: String) -> Self {
        let (per_class_iou, mean) = mean_iou(results);
        EvalReport {
            per_class_iou,
            mean_iou: mean,
            fb_iou: fb_iou(results),
            episodes_evaluated: results.len(),
            config_fingerprint: fingerprint,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fingerprint {}", self.config_fingerprint);
        let _ = writeln!(s, "{:>8}  {:>8}", "class", "IoU");
        for (c, v) in &self.per_class_iou {
            let _ = writeln!(s, "{c:>8}  {:>7.2}%", v * 100.0);
        }
        let _ = writeln!(s, "{:>8}  {:>7.2}%", "mean", self.mean_iou * 100.0);
        let _ = writeln!(s, "{:>8}  {:>7.2}%", "FB-IoU", self.fb_iou * 100.0);
        let _ = writeln!(s, "episodes: {}", self.episodes_evaluated);
        s
    }

    /// `key = value` lines followed by one `class.<id> = <iou>` row per class.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fingerprint = {}", self.config_fingerprint);
        let _ = writeln!(s, "episodes = {}", self.episodes_evaluated);
        let _ = writeln!(s, "mean_iou = {:.17e}", self.mean_iou);
        let _ = writeln!(s, "fb_iou = {:.17e}", self.fb_iou);
        for (c, v) in &self.per_class_iou {
            let _ = writeln!(s, "class.{c} = {v:.17e}");
        }
        s
    }
}

pub fn fingerprint(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// The deterministic episode set an evaluation run uses, after annotation.
pub fn evaluation_episodes(dataset: &ShapeDataset, cfg: &EvalConfig) -> Result<Vec<Episode>> {
    (0..cfg.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let ep = dataset.episode_at(cfg.phase, cfg.k, cfg.seed, i)?;
            annotate(&ep, cfg.annotation)
        })
        .collect()
}

/// Runs `segmenter` on a fixed episode list.
pub fn evaluate_episodes(segmenter: &dyn Segmenter, episodes: &[Episode], opts: &InferenceOptions, fingerprint: String) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let results = episodes
        .par_iter()
        .map(|ep| {
            let pred = segmenter.segment_episode(ep, opts)?;
            Ok(EpisodeResult {
                class_id: ep.class_id,
                counts: Counts::of(&pred, &ep.query_mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_results(&results, fingerprint))
}

pub fn evaluate(segmenter: &dyn Segmenter, dataset: &ShapeDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.episodes == 0 {
        return Err(Error::config("eval.episodes must be positive"));
    }
    let episodes = evaluation_episodes(dataset, cfg)?;
    let fp = fingerprint(&format!("{:?}\n{}", dataset.config, cfg.canonical()));
    evaluate_episodes(segmenter, &episodes, &cfg.inference_options(), fp)
}

/// meanIoU of predicting all-foreground, read off the ground-truth areas:
/// each class scores `Σ|gt| / Σ(H·W)` over its episodes.
pub fn all_foreground_baseline(episodes: &[Episode]) -> f64 {
    let mut per: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for ep in episodes {
        let e = per.entry(ep.class_id).or_default();
        e.0 += ep.query_mask.count() as u64;
        e.1 += (ep.query_mask.height() * ep.query_mask.width()) as u64;
    }
    if per.is_empty() {
        return 0.0;
    }
    per.values().map(|&(a, t)| a as f64 / t as f64).sum::<f64>() / per.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::DatasetConfig;

    fn small_cfg(n: usize) -> EvalConfig {
        EvalConfig {
            episodes: n,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn zero_episodes_is_config_error() {
        let ds = ShapeDataset::new(DatasetConfig::default()).unwrap();
        assert!(matches!(evaluate(&OracleSegmenter, &ds, &small_cfg(0)), Err(Error::Config(_))));
    }

    #[test]
    fn oracle_scores_one_and_baseline_matches_area_formula() {
        let ds = ShapeDataset::new(DatasetConfig::default()).unwrap();
        let cfg = small_cfg(12);
        let r = evaluate(&OracleSegmenter, &ds, &cfg).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.fb_iou, 1.0);
        let eps = evaluation_episodes(&ds, &cfg).unwrap();
        let base = evaluate(&AllForeground, &ds, &cfg).unwrap();
        assert!((base.mean_iou - all_foreground_baseline(&eps)).abs() < 1e-12);
    }
}
