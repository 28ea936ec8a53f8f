//! k-shot fusion: learned attention weights over per-support comparison
//! features, plus three non-learnable baselines.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::dense_comparison::ComparisonFeature;
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, Registrar};
use crate::ops::{self, ConvGeometry};
use crate::refinement::ConfidenceMap;
use crate::state::ModelState;
use crate::tensor::{BinaryMask, Tensor};

pub const ATTENTION_POOL_WINDOW: usize = 3;
pub const ATTENTION_POOL_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fusion {
    Attention,
    FeatureAvg,
    MaskAvg,
    MaskOr,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [
        Fusion::Attention,
        Fusion::FeatureAvg,
        Fusion::MaskAvg,
        Fusion::MaskOr,
    ];

    /// Whether fusion happens on comparison features (before refinement).
    pub fn is_feature_level(self) -> bool {
        matches!(self, Fusion::Attention | Fusion::FeatureAvg)
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Attention => "attention",
            Fusion::FeatureAvg => "feature_avg",
            Fusion::MaskAvg => "mask_avg",
            Fusion::MaskOr => "mask_or",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fusion::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub lambdas: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Softmax over the raw attention logits.
pub fn normalize_weights(lambdas: &[f64]) -> Result<AttentionWeights> {
    if lambdas.is_empty() {
        return Err(Error::EmptySupport);
    }
    let t = Tensor::new(&[lambdas.len(), 1, 1], lambdas.to_vec())?;
    let normalized = ops::softmax_channels(&t)?.into_data();
    Ok(AttentionWeights {
        lambdas: lambdas.to_vec(),
        normalized,
    })
}

/// Conv block, max pool, single-filter conv, global average: one scalar per support.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl AttentionHead {
    pub fn build<R: Rng>(reg: &mut Registrar<'_, R>, dim: usize) -> Result<Self> {
        let same3 = ConvGeometry::same(3, 1);
        Ok(AttentionHead {
            conv1: reg.conv("attention.conv1", 2 * dim, dim, 3, same3, false)?,
            conv2: reg.conv("attention.conv2", dim, 1, 3, same3, false)?,
        })
    }

    /// `λ` for one support, computed from the tiled-and-concatenated features.
    pub fn logit(&self, g: &mut Graph, s: &ModelState, concat: Var) -> Result<Var> {
        let h = self.conv1.forward_relu(g, s, concat)?;
        let (_, fh, fw) = g.value(h).chw()?;
        // small feature grids (16x16 inputs give 2x2) shrink the window to fit
        let window = ATTENTION_POOL_WINDOW.min(fh).min(fw);
        let p = g.max_pool2d(h, window, ATTENTION_POOL_STRIDE)?;
        let y = self.conv2.forward(g, s, p)?;
        g.global_avg_pool(y)
    }

    /// Softmax-weighted sum of per-support comparison features.
    pub fn fuse(&self, g: &mut Graph, s: &ModelState, concats: &[Var], comparisons: &[Var]) -> Result<Var> {
        if comparisons.is_empty() {
            return Err(Error::EmptySupport);
        }
        if comparisons.len() == 1 {
            // softmax of a single logit is exactly 1
            let one = g.constant(Tensor::scalar(1.0));
            return g.weighted_sum(comparisons, one);
        }
        let lambdas = concats
            .iter()
            .map(|&c| self.logit(g, s, c))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.stack_scalars(&lambdas)?;
        let weights = g.softmax_channels(stacked)?;
        g.weighted_sum(comparisons, weights)
    }
}

fn check_same_shapes<'a>(mut shapes: impl Iterator<Item = &'a [usize]>) -> Result<()> {
    let Some(first) = shapes.next() else {
        return Err(Error::EmptySupport);
    };
    if shapes.any(|s| s != first) {
        return Err(Error::shape("fusion inputs differ in shape"));
    }
    Ok(())
}

/// `Σ_i λ̂_i · feature_i`.
pub fn fuse_attention(features: &[ComparisonFeature], weights: &AttentionWeights) -> Result<ComparisonFeature> {
    check_same_shapes(features.iter().map(|f| f.0.shape()))?;
    if weights.normalized.len() != features.len() {
        return Err(Error::shape(format!(
            "{} weights for {} features",
            weights.normalized.len(),
            features.len()
        )));
    }
    let w = &weights.normalized;
    let mut out: Vec<f64> = features[0].0.data().iter().map(|x| w[0] * x).collect();
    for (f, wi) in features.iter().zip(w).skip(1) {
        for (o, x) in out.iter_mut().zip(f.0.data()) {
            *o += wi * x;
        }
    }
    Ok(ComparisonFeature(Tensor::new(features[0].0.shape(), out)?))
}

fn mean_of(tensors: &[&Tensor]) -> Result<Tensor> {
    check_same_shapes(tensors.iter().map(|t| t.shape()))?;
    let mut out = tensors[0].data().to_vec();
    for t in &tensors[1..] {
        for (o, x) in out.iter_mut().zip(t.data()) {
            *o += x;
        }
    }
    let k = tensors.len() as f64;
    for o in &mut out {
        *o /= k;
    }
    Tensor::new(tensors[0].shape(), out)
}

pub fn fuse_feature_avg(features: &[ComparisonFeature]) -> Result<ComparisonFeature> {
    let refs: Vec<&Tensor> = features.iter().map(|f| &f.0).collect();
    mean_of(&refs).map(ComparisonFeature)
}

pub fn fuse_mask_avg(maps: &[ConfidenceMap]) -> Result<ConfidenceMap> {
    let refs: Vec<&Tensor> = maps.iter().map(|m| m.probs()).collect();
    ConfidenceMap::new(mean_of(&refs)?)
}

pub fn fuse_mask_or(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let first = masks.first().ok_or(Error::EmptySupport)?;
    let (h, w) = (first.height(), first.width());
    if masks.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::shape("mask-or inputs differ in size"));
    }
    Ok(BinaryMask::from_fn(h, w, |y, x| masks.iter().any(|m| m.get(y, x))))
}
