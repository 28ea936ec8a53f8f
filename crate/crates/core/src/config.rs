//! Flat `section.key = value` run configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::FeatureSelection;
use crate::episodes::{Annotation, DatasetConfig, Phase};
use crate::error::{Error, Result};
use crate::evaluation::{fingerprint, EvalConfig};
use crate::fusion::Fusion;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Every setting a subcommand can read, fully materialised.
///
/// `iom.p_r` drives training-time mask dropout and `iom.inference_iterations`
/// is the default evaluation iteration count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for key {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_array4(key: &str, value: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::config(format!("key {key} needs exactly 4 values")))
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 39] = [
        "backbone.blocks_per_stage",
        "backbone.embed_dim",
        "backbone.features",
        "backbone.frozen",
        "backbone.input_channels",
        "backbone.stage_channels",
        "dataset.image_size",
        "dataset.max_area_frac",
        "dataset.max_classes_per_scene",
        "dataset.min_area",
        "dataset.num_classes",
        "dataset.num_splits",
        "dataset.second_instance_prob",
        "dataset.seed",
        "dataset.test_split",
        "eval.annotation",
        "eval.episodes",
        "eval.fusion",
        "eval.k",
        "eval.phase",
        "eval.scales",
        "eval.seed",
        "iom.aspp_rates",
        "iom.inference_iterations",
        "iom.num_vanilla_resblocks",
        "iom.p_r",
        "train.batch_episodes",
        "train.box_support_prob",
        "train.epochs",
        "train.episodes_per_epoch",
        "train.k_train",
        "train.lr",
        "train.momentum",
        "train.query_scales",
        "train.seed",
        "train.support_redraws",
        "train.validation_episodes",
        "train.warmup_lr",
        "train.warmup_steps",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.dataset;
        let b = &mut self.model.backbone;
        let i = &mut self.model.iom;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "dataset.num_classes" => d.num_classes = parse(key, value)?,
            "dataset.num_splits" => d.num_splits = parse(key, value)?,
            "dataset.test_split" => d.test_split = parse(key, value)?,
            "dataset.image_size" => d.image_size = parse(key, value)?,
            "dataset.seed" => d.seed = parse(key, value)?,
            "dataset.min_area" => d.min_area = parse(key, value)?,
            "dataset.max_area_frac" => d.max_area_frac = parse(key, value)?,
            "dataset.max_classes_per_scene" => d.max_classes_per_scene = parse(key, value)?,
            "dataset.second_instance_prob" => d.second_instance_prob = parse(key, value)?,
            "backbone.stage_channels" => b.stage_channels = parse_array4(key, value)?,
            "backbone.blocks_per_stage" => b.blocks_per_stage = parse_array4(key, value)?,
            "backbone.embed_dim" => b.embed_dim = parse(key, value)?,
            "backbone.input_channels" => b.input_channels = parse(key, value)?,
            "backbone.frozen" => {
                b.frozen = parse(key, value)?;
                t.backbone_frozen = b.frozen;
            }
            "backbone.features" => b.features = parse::<FeatureSelection>(key, value)?,
            "iom.aspp_rates" => i.aspp_rates = parse_list(key, value)?,
            "iom.num_vanilla_resblocks" => i.num_vanilla_resblocks = parse(key, value)?,
            "iom.p_r" => {
                i.p_r = parse(key, value)?;
                t.p_r = i.p_r;
            }
            "iom.inference_iterations" => {
                i.inference_iterations = parse(key, value)?;
                e.iterations = i.inference_iterations;
            }
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.batch_episodes" => t.batch_episodes = parse(key, value)?,
            "train.k_train" => t.k_train = parse(key, value)?,
            "train.episodes_per_epoch" => t.episodes_per_epoch = parse(key, value)?,
            "train.query_scales" => t.query_scales = parse_list(key, value)?,
            "train.box_support_prob" => t.box_support_prob = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.support_redraws" => t.support_redraws = parse(key, value)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, value)?,
            "train.warmup_lr" => t.warmup_lr = parse(key, value)?,
            "train.validation_episodes" => t.validation_episodes = parse(key, value)?,
            "eval.phase" => e.phase = parse::<Phase>(key, value)?,
            "eval.episodes" => e.episodes = parse(key, value)?,
            "eval.k" => e.k = parse(key, value)?,
            "eval.fusion" => e.fusion = parse::<Fusion>(key, value)?,
            "eval.annotation" => e.annotation = parse::<Annotation>(key, value)?,
            "eval.scales" => e.scales = parse_list(key, value)?,
            "eval.seed" => e.seed = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let d = &self.dataset;
        let b = &self.model.backbone;
        let i = &self.model.iom;
        let t = &self.train;
        let e = &self.eval;
        Ok(match key {
            "dataset.num_classes" => d.num_classes.to_string(),
            "dataset.num_splits" => d.num_splits.to_string(),
            "dataset.test_split" => d.test_split.to_string(),
            "dataset.image_size" => d.image_size.to_string(),
            "dataset.seed" => d.seed.to_string(),
            "dataset.min_area" => d.min_area.to_string(),
            "dataset.max_area_frac" => d.max_area_frac.to_string(),
            "dataset.max_classes_per_scene" => d.max_classes_per_scene.to_string(),
            "dataset.second_instance_prob" => d.second_instance_prob.to_string(),
            "backbone.stage_channels" => list(&b.stage_channels),
            "backbone.blocks_per_stage" => list(&b.blocks_per_stage),
            "backbone.embed_dim" => b.embed_dim.to_string(),
            "backbone.input_channels" => b.input_channels.to_string(),
            "backbone.frozen" => b.frozen.to_string(),
            "backbone.features" => b.features.to_string(),
            "iom.aspp_rates" => list(&i.aspp_rates),
            "iom.num_vanilla_resblocks" => i.num_vanilla_resblocks.to_string(),
            "iom.p_r" => i.p_r.to_string(),
            "iom.inference_iterations" => i.inference_iterations.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.batch_episodes" => t.batch_episodes.to_string(),
            "train.k_train" => t.k_train.to_string(),
            "train.episodes_per_epoch" => t.episodes_per_epoch.to_string(),
            "train.query_scales" => list(&t.query_scales),
            "train.box_support_prob" => t.box_support_prob.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.support_redraws" => t.support_redraws.to_string(),
            "train.warmup_steps" => t.warmup_steps.to_string(),
            "train.warmup_lr" => t.warmup_lr.to_string(),
            "train.validation_episodes" => t.validation_episodes.to_string(),
            "eval.phase" => e.phase.to_string(),
            "eval.episodes" => e.episodes.to_string(),
            "eval.k" => e.k.to_string(),
            "eval.fusion" => e.fusion.to_string(),
            "eval.annotation" => e.annotation.to_string(),
            "eval.scales" => list(&e.scales),
            "eval.seed" => e.seed.to_string(),
            _ => return Err(Error::config(format!("unknown config key {key}"))),
        })
    }

    fn all_keys() -> impl Iterator<Item = &'static str> {
        Self::KEYS.into_iter()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.iom.validate()?;
        self.train.validate()?;
        if self.eval.k == 0 {
            return Err(Error::config("eval.k must be at least 1"));
        }
        if self.eval.scales.is_empty() {
            return Err(Error::config("eval.scales must list at least one scale"));
        }
        if self.model.backbone.embed_dim == 0 {
            return Err(Error::config("backbone.embed_dim must be positive"));
        }
        Ok(())
    }

    /// Sorted `key = value` lines; parsing it back gives an equal config.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for k in Self::all_keys() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&self.get(k).expect("listed key"));
            s.push('\n');
        }
        s
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.canonical())
    }

    /// The model-shaping subset; checkpoints must match it.
    pub fn model_canonical(&self) -> String {
        Self::all_keys()
            .filter(|k| k.starts_with("backbone.") && *k != "backbone.frozen" || k.starts_with("iom.aspp") || *k == "iom.num_vanilla_resblocks")
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut c = RunConfig::default();
        c.set("train.epochs", "7").unwrap();
        c.set("eval.scales", "0.7,1,1.3").unwrap();
        c.set("backbone.features", "b2+b3+b4").unwrap();
        let back = RunConfig::parse_text(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = RunConfig::parse_text("train.epochz = 3\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("train.epochz")));
        let err = RunConfig::parse_text("train.lr = fast\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("train.lr")));
    }

    #[test]
    fn every_key_is_settable() {
        let c = RunConfig::default();
        for k in RunConfig::all_keys() {
            let mut d = c.clone();
            d.set(k, &c.get(k).unwrap()).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse_text("# desk run\n\ndataset.num_classes = 12 # fewer\n").unwrap();
        assert_eq!(c.dataset.num_classes, 12);
    }
}
