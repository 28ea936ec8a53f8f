//! Iterative refinement: residual fusion of the previous prediction with the
//! comparison features, two residual blocks, ASPP, and a two-class head,
//! applied recurrently with one shared set of weights.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, Registrar, ResBlock};
use crate::ops::{self, ConvGeometry};
use crate::state::ModelState;
use crate::tensor::{BinaryMask, Tensor};

pub const IOM_PREFIX: &str = "iom.";

/// Two-channel (background, foreground) probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(Tensor);

impl ConfidenceMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        let (c, h, w) = probs.chw()?;
        if c != 2 {
            return Err(Error::shape(format!("confidence map needs 2 channels, got {c}")));
        }
        let hw = h * w;
        let d = probs.data();
        for p in 0..hw {
            let (b, f) = (d[p], d[hw + p]);
            if !(0.0..=1.0).contains(&b) || !(0.0..=1.0).contains(&f) || (b + f - 1.0).abs() > 1e-6 {
                return Err(Error::shape(format!(
                    "confidence map not normalized at {p}: ({b}, {f})"
                )));
            }
        }
        Ok(ConfidenceMap(probs))
    }

    /// Uniform map from per-location foreground probabilities.
    pub fn from_foreground(h: usize, w: usize, fg: &[f64]) -> Result<Self> {
        let mut data: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
        data.extend_from_slice(fg);
        ConfidenceMap::new(Tensor::new(&[2, h, w], data)?)
    }

    pub fn probs(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn foreground(&self) -> &[f64] {
        self.0.channel(1)
    }

    pub fn background(&self) -> &[f64] {
        self.0.channel(0)
    }

    /// Bilinear resize followed by per-location renormalisation.
    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        let t = ops::bilinear_resize(&self.0, h, w)?;
        Ok(ConfidenceMap(renormalize(t)))
    }
}

pub(crate) fn renormalize(mut t: Tensor) -> Tensor {
    let hw = t.shape()[1] * t.shape()[2];
    let d = t.data_mut();
    for p in 0..hw {
        let s = d[p] + d[hw + p];
        if s > 0.0 {
            d[p] /= s;
            d[hw + p] /= s;
        } else {
            d[p] = 0.5;
            d[hw + p] = 0.5;
        }
    }
    t
}

/// The "no prediction" input to the fusion block: an all-zeros 2-channel map.
pub fn empty_prior(h: usize, w: usize) -> Tensor {
    Tensor::zeros(&[2, h, w])
}

#[derive(Debug, Clone, PartialEq)]
pub struct IomConfig {
    pub aspp_rates: Vec<usize>,
    pub num_vanilla_resblocks: usize,
    pub p_r: f64,
    pub inference_iterations: usize,
}

impl Default for IomConfig {
    fn default() -> Self {
        IomConfig {
            aspp_rates: vec![6, 12, 18],
            num_vanilla_resblocks: 2,
            p_r: 0.7,
            inference_iterations: 4,
        }
    }
}

impl IomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::config("ASPP rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_r) {
            return Err(Error::config(format!("p_r = {} outside [0, 1]", self.p_r)));
        }
        Ok(())
    }
}

/// Effective atrous rate on an axis of length `dim`.
pub fn clamp_rate(rate: usize, dim: usize) -> usize {
    rate.min(dim.saturating_sub(1)).max(1)
}

#[derive(Debug, Clone)]
pub struct Aspp {
    pub branches: Vec<(usize, ConvLayer)>,
    pub image_level: ConvLayer,
    pub project: ConvLayer,
}

impl Aspp {
    fn build<R: Rng>(reg: &mut Registrar<'_, R>, dim: usize, rates: &[usize]) -> Result<Self> {
        let mut branches = Vec::with_capacity(rates.len());
        for (i, &r) in rates.iter().enumerate() {
            let conv = reg.conv(
                &format!("iom.aspp.branch{i}"),
                dim,
                dim,
                3,
                ConvGeometry::same(3, r),
                false,
            )?;
            branches.push((r, conv));
        }
        let image_level = reg.conv("iom.aspp.image", dim, dim, 1, ConvGeometry::new(1, 1, 0), false)?;
        let project = reg.conv(
            "iom.aspp.project",
            dim * (rates.len() + 1),
            dim,
            1,
            ConvGeometry::new(1, 1, 0),
            false,
        )?;
        Ok(Aspp {
            branches,
            image_level,
            project,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ModelState, x: Var) -> Result<Var> {
        let (d, h, w) = g.value(x).chw()?;
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for (rate, conv) in &self.branches {
            let (rh, rw) = (clamp_rate(*rate, h), clamp_rate(*rate, w));
            let geom = ConvGeometry {
                stride: 1,
                dilation: (rh, rw),
                padding: (rh, rw),
            };
            let y = conv.forward_with(g, s, x, geom)?;
            outs.push(g.relu(y));
        }
        outs.push(self.image_branch(g, s, x, d, h, w)?);
        let mut cat = outs[0];
        for &o in &outs[1..] {
            cat = g.concat(cat, o)?;
        }
        self.project.forward_relu(g, s, cat)
    }

    /// Global-average-pooled vector through a 1x1 conv, upsampled back to `h`x`w`.
    pub fn image_branch(&self, g: &mut Graph, s: &ModelState, x: Var, d: usize, h: usize, w: usize) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let pooled = g.reshape(pooled, &[d, 1, 1])?;
        let y = self.image_level.forward_relu(g, s, pooled)?;
        g.resize(y, h, w)
    }
}

#[derive(Debug, Clone)]
pub struct Iom {
    pub fuse1: ConvLayer,
    pub fuse2: ConvLayer,
    pub resblocks: Vec<ResBlock>,
    pub aspp: Aspp,
    pub classifier: ConvLayer,
}

impl Iom {
    pub fn build<R: Rng>(reg: &mut Registrar<'_, R>, dim: usize, cfg: &IomConfig) -> Result<Self> {
        cfg.validate()?;
        let same3 = ConvGeometry::same(3, 1);
        let fuse1 = reg.conv("iom.fuse.conv1", dim + 2, dim, 3, same3, false)?;
        let fuse2 = reg.conv("iom.fuse.conv2", dim, dim, 3, same3, false)?;
        let resblocks = (0..cfg.num_vanilla_resblocks)
            .map(|i| ResBlock::build(reg, &format!("iom.res{i}"), dim, dim, 1, 1, false))
            .collect::<Result<Vec<_>>>()?;
        let aspp = Aspp::build(reg, dim, &cfg.aspp_rates)?;
        let classifier = reg.conv("iom.classifier", dim, 2, 1, ConvGeometry::new(1, 1, 0), false)?;
        Ok(Iom {
            fuse1,
            fuse2,
            resblocks,
            aspp,
            classifier,
        })
    }

    /// `x + F(x, y_prev)` where `F` is concat followed by two conv blocks.
    pub fn residual_fuse(&self, g: &mut Graph, s: &ModelState, x: Var, y_prev: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).chw()?;
        let (c, ph, pw) = g.value(y_prev).chw()?;
        if c != 2 || (ph, pw) != (h, w) {
            return Err(Error::shape(format!(
                "prior {:?} does not match features {h}x{w}",
                g.value(y_prev).shape()
            )));
        }
        let cat = g.concat(x, y_prev)?;
        let f = self.fuse1.forward_relu(g, s, cat)?;
        let f = self.fuse2.forward_relu(g, s, f)?;
        g.add(x, f)
    }

    pub fn classify(&self, g: &mut Graph, s: &ModelState, x: Var) -> Result<Var> {
        let logits = self.classifier.forward(g, s, x)?;
        g.softmax_channels(logits)
    }

    /// One refinement step; returns the `[2,h,w]` probability node.
    pub fn step(&self, g: &mut Graph, s: &ModelState, x: Var, y_prev: Var) -> Result<Var> {
        let mut m = self.residual_fuse(g, s, x, y_prev)?;
        for block in &self.resblocks {
            m = block.forward(g, s, m)?;
        }
        let a = self.aspp.forward(g, s, m)?;
        self.classify(g, s, a)
    }

    /// Initial prediction from the empty prior followed by `iterations` refinements.
    pub fn iterate(&self, g: &mut Graph, s: &ModelState, x: Var, iterations: usize) -> Result<Vec<Var>> {
        let (_, h, w) = g.value(x).chw()?;
        let empty = g.constant(empty_prior(h, w));
        let mut maps = Vec::with_capacity(iterations + 1);
        let mut y = self.step(g, s, x, empty)?;
        maps.push(y);
        for _ in 0..iterations {
            y = self.step(g, s, x, y)?;
            maps.push(y);
        }
        Ok(maps)
    }
}

/// Training-time reset of the previous prediction: with probability `p_r`
/// the prior becomes empty. Exactly one uniform draw is consumed.
pub fn mask_dropout(y_prev: Option<ConfidenceMap>, p_r: f64, rng: &mut impl Rng) -> Option<ConfidenceMap> {
    let u: f64 = rng.random();
    if u < p_r {
        None
    } else {
        y_prev
    }
}

/// Upsample to `out_h`x`out_w` and take the per-pixel argmax; ties go to background.
pub fn predict_mask(map: &ConfidenceMap, out_h: usize, out_w: usize) -> Result<BinaryMask> {
    let up = ops::bilinear_resize(map.probs(), out_h, out_w)?;
    let n = out_h * out_w;
    let d = up.data();
    BinaryMask::new(out_h, out_w, (0..n).map(|p| u8::from(d[n + p] > d[p])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clamp_rates_for_small_maps() {
        assert_eq!(clamp_rate(6, 8), 6);
        assert_eq!(clamp_rate(12, 8), 7);
        assert_eq!(clamp_rate(18, 2), 1);
        assert_eq!(clamp_rate(6, 1), 1);
    }

    #[test]
    fn dropout_extremes_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let map = ConfidenceMap::from_foreground(1, 2, &[0.2, 0.9]).unwrap();
        for _ in 0..100 {
            assert!(mask_dropout(Some(map.clone()), 1.0, &mut rng).is_none());
            assert_eq!(mask_dropout(Some(map.clone()), 0.0, &mut rng), Some(map.clone()));
            assert!(mask_dropout(None, 0.3, &mut rng).is_none());
        }
    }

    #[test]
    fn dropout_consumes_one_draw() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        mask_dropout(None, 0.5, &mut a);
        let _: f64 = b.random();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn predict_mask_rules() {
        let uniform = ConfidenceMap::from_foreground(2, 2, &[0.5; 4]).unwrap();
        assert!(predict_mask(&uniform, 8, 8).unwrap().is_empty());
        let sure = ConfidenceMap::from_foreground(2, 2, &[1.0; 4]).unwrap();
        assert_eq!(predict_mask(&sure, 5, 7).unwrap().count(), 35);
    }

    #[test]
    fn confidence_map_validation() {
        assert!(ConfidenceMap::new(Tensor::full(&[2, 2, 2], 0.6)).is_err());
        assert!(ConfidenceMap::new(Tensor::full(&[3, 2, 2], 1.0 / 3.0)).is_err());
        assert!(ConfidenceMap::new(Tensor::full(&[2, 2, 2], 0.5)).is_ok());
    }
}
