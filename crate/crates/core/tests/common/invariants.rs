//! Deterministic invariant checks; each returns a description of the first violation.

use fewseg::autograd::Graph;
use fewseg::checkpoint::Checkpoint;
use fewseg::dense_comparison::ComparisonFeature;
use fewseg::episodes::{Annotation, DatasetConfig, Phase, ShapeDataset};
use fewseg::evaluation::{evaluate, EvalConfig};
use fewseg::fusion::{normalize_weights, Fusion};
use fewseg::model::{InferenceOptions, Model, ModelConfig};
use fewseg::ops;
use fewseg::refinement::ConfidenceMap;
use fewseg::state::ModelState;
use fewseg::tensor::Tensor;
use fewseg::training::{
    train, training_episodes, training_step, EpisodeFeatures, Optimizer, PredictionCache, TrainConfig, TrainItem, TrainProgress,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn dataset() -> ShapeDataset {
    ShapeDataset::new(DatasetConfig::default()).unwrap()
}

fn model(seed: u64) -> Model {
    Model::new(ModelConfig::default(), seed).unwrap()
}

/// Per-location channel softmax and the attention softmax over supports, up to logits of 1e4.
pub fn softmax_normalization(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..cases {
        let scale = [1.0, 30.0, 1e4][i % 3];
        let c = rng.random_range(1..6);
        let t = Tensor::from_fn(&[c, 3, 3], |_| rng.random_range(-1.0..1.0) * scale);
        let p = ops::softmax_channels(&t).map_err(|e| e.to_string())?;
        for loc in 0..9 {
            let s: f64 = (0..c).map(|ci| p.channel(ci)[loc]).sum();
            ensure((s - 1.0).abs() <= 1e-6, || format!("channel softmax sums to {s} at scale {scale}"))?;
        }
        let lambdas: Vec<f64> = (0..rng.random_range(1..8)).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let w = normalize_weights(&lambdas).map_err(|e| e.to_string())?;
        let s: f64 = w.normalized.iter().sum();
        ensure((s - 1.0).abs() <= 1e-9, || format!("attention weights sum to {s}"))?;
    }
    Ok(())
}

/// With one support, attention fusion and feature averaging both reduce to the plain 1-shot chain.
pub fn one_shot_degeneracy(episodes: u64) -> Check {
    let ds = dataset();
    let m = model(4);
    for index in 0..episodes {
        let ep = ds.episode_at(Phase::Test, 1, 5, index).unwrap();
        let direct = m
            .iterate(&m.dcm_forward(&ep.support[0], &ep.query_image).unwrap(), 4)
            .unwrap();
        for fusion in [Fusion::Attention, Fusion::FeatureAvg] {
            let opts = InferenceOptions {
                fusion,
                ..InferenceOptions::default()
            };
            let seg = m.segment(&ep.support, &ep.query_image, &opts).unwrap();
            ensure(seg.steps.len() == direct.len(), || "step count differs".into())?;
            for (t, (a, d)) in seg.steps.iter().zip(&direct).enumerate() {
                ensure(a.probs().bit_eq(d.probs()), || {
                    format!("{fusion} k=1 differs from the 1-shot chain at t={t}, episode {index}")
                })?;
            }
        }
    }
    Ok(())
}

/// Every fusion mode gives the same mask under a reordering of the supports.
pub fn permutation_invariance(episodes: u64) -> Check {
    let ds = dataset();
    let m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for index in 0..episodes {
        let ep = ds.episode_at(Phase::Test, 5, 11, index).unwrap();
        let mut shuffled = ep.support.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        for fusion in Fusion::ALL {
            let opts = InferenceOptions {
                fusion,
                iterations: 2,
                scales: vec![1.0],
            };
            let a = m.segment(&ep.support, &ep.query_image, &opts).unwrap();
            let b = m.segment(&shuffled, &ep.query_image, &opts).unwrap();
            ensure(a.mask == b.mask, || format!("{fusion} mask changed under permutation, episode {index}"))?;
            if let (Some(ca), Some(cb)) = (&a.confidence, &b.confidence) {
                let d = ca.probs().max_abs_diff(cb.probs());
                ensure(d <= 1e-12, || format!("{fusion} confidence moved by {d:e}"))?;
            }
        }
    }
    Ok(())
}

/// Zeroing the last conv of the fusion branch makes `M = x` and every iteration a fixed point.
pub fn residual_identity() -> Check {
    let mut m = model(6);
    m.net.iom.fuse2.zero(&mut m.state);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let x = Tensor::from_fn(&[32, 8, 8], |_| rng.random_range(-2.0..2.0));
        let fg: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let prior = ConfidenceMap::from_foreground(8, 8, &fg).unwrap();
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let pv = g.constant(prior.into_tensor());
        let out = m.net.iom.residual_fuse(&mut g, &m.state, xv, pv).unwrap();
        ensure(g.value(out).bit_eq(&x), || "residual fusion is not the identity".into())?;
        let maps = m.iterate(&ComparisonFeature(x), 4).unwrap();
        ensure(maps.iter().all(|y| y.probs().bit_eq(maps[0].probs())), || {
            "iterations are not a fixed point".into()
        })?;
    }
    Ok(())
}

/// Training steps with a frozen backbone leave every backbone bit in place and move the rest.
pub fn frozen_backbone() -> Check {
    let ds = dataset();
    let cfg = TrainConfig {
        episodes_per_epoch: 4,
        lr: 0.05,
        momentum: 0.9,
        ..TrainConfig::default()
    };
    let mut m = model(7);
    m.freeze_backbone(true);
    let before = m.state.clone();
    let eps = training_episodes(&ds, &cfg).unwrap();
    let feats: Vec<_> = eps.iter().map(|e| EpisodeFeatures::compute(&m, e).unwrap()).collect();
    let items: Vec<TrainItem<'_>> = eps
        .iter()
        .zip(&feats)
        .enumerate()
        .map(|(i, (e, f))| TrainItem {
            id: i as u64,
            episode: e,
            features: Some(f),
        })
        .collect();
    let mut cache = PredictionCache::new();
    let mut opt = Optimizer::new(cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..3 {
        training_step(&mut m, &ds.split, &items, &mut cache, &cfg, &mut opt, &mut rng).map_err(|e| e.to_string())?;
    }
    let mut moved = 0;
    for (a, b) in before.params().iter().zip(m.state.params()) {
        if a.name.starts_with("backbone.") {
            ensure(a.tensor.bit_eq(&b.tensor), || format!("{} changed", a.name))?;
        } else if !a.tensor.bit_eq(&b.tensor) {
            moved += 1;
        }
    }
    ensure(moved > 0, || "no trainable parameter moved".into())
}

/// Encode/decode is the identity on bits, including NaN payloads, infinities and signed zeros.
pub fn checkpoint_round_trip(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let specials = [f64::NAN, f64::INFINITY, f64::NEG_INFINITY, -0.0, f64::MIN_POSITIVE, f64::MAX];
    for _ in 0..cases {
        let mut s = ModelState::new();
        let n = rng.random_range(1..50);
        let t = Tensor::from_fn(&[n], |i| {
            if i < specials.len() && rng.random_bool(0.5) {
                specials[i]
            } else {
                f64::from_bits(rng.random())
            }
        });
        s.register("a.weight", t, rng.random()).unwrap();
        s.register("a.bias", Tensor::full(&[3, 1], rng.random()), rng.random()).unwrap();
        let c = Checkpoint::new(format!("seed = {}", rng.random::<u32>()), s);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(back.state.bit_eq(&c.state) && back.to_bytes() == bytes, || {
            "checkpoint round trip changed bits".into()
        })?;
    }
    // and a real model survives the file format
    let m = model(12);
    let back = Checkpoint::from_bytes(&Checkpoint::new(String::new(), m.state.clone()).to_bytes()).unwrap();
    ensure(back.state.bit_eq(&m.state), || "model state changed".into())
}

/// Two identical short train-then-evaluate runs agree bit for bit.
pub fn seeded_determinism() -> Check {
    let ds = dataset();
    let cfg = TrainConfig {
        epochs: 2,
        episodes_per_epoch: 8,
        warmup_steps: 3,
        momentum: 0.9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = model(8);
        let mut progress = TrainProgress::new(&cfg);
        let summary = train(&cfg, &ds, &mut m, &mut progress, |_, _| Ok(())).unwrap();
        let ecfg = EvalConfig {
            episodes: 12,
            annotation: Annotation::BoundingBox,
            ..EvalConfig::default()
        };
        let report = evaluate(&m, &ds, &ecfg).unwrap();
        (m, summary, report)
    };
    let (m1, s1, r1) = run();
    let (m2, s2, r2) = run();
    ensure(m1.state.bit_eq(&m2.state), || "parameters differ".into())?;
    ensure(s1 == s2, || "loss curves differ".into())?;
    ensure(
        r1.mean_iou.to_bits() == r2.mean_iou.to_bits() && r1.per_class_iou == r2.per_class_iou,
        || "evaluation differs".into(),
    )
}

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("softmax normalization", softmax_normalization(300)),
        ("k=1 degeneracy", one_shot_degeneracy(5)),
        ("fusion permutation invariance", permutation_invariance(4)),
        ("residual identity", residual_identity()),
        ("frozen backbone", frozen_backbone()),
        ("checkpoint round trip", checkpoint_round_trip(200)),
        ("seeded determinism", seeded_determinism()),
    ]
}
