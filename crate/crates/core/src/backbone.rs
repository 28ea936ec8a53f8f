//! Residual feature extractor and the comparison-feature encoder.
//!
//! Layout: a stride-2 stem, then four residual stages. Stages 1 and 2 halve
//! the resolution again, so stage-2 output sits at 1/8 of the input. Stages 3
//! and 4 keep that resolution with dilation 2 and 4.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, Registrar, ResBlock};
use crate::ops::ConvGeometry;
use crate::state::ModelState;
use crate::tensor::Tensor;

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const ENCODER_PREFIX: &str = "encoder.";

const STAGE_STRIDES: [usize; 4] = [2, 2, 1, 1];
const STAGE_DILATIONS: [usize; 4] = [1, 1, 2, 4];

/// Which backbone stages feed the comparison encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureSelection {
    B2,
    B3,
    B4,
    B2B3,
    B3B4,
    B2B4,
    B2B3B4,
}

impl FeatureSelection {
    pub const ALL: [FeatureSelection; 7] = [
        FeatureSelection::B2,
        FeatureSelection::B3,
        FeatureSelection::B4,
        FeatureSelection::B2B3,
        FeatureSelection::B3B4,
        FeatureSelection::B2B4,
        FeatureSelection::B2B3B4,
    ];

    /// Stage indices (2, 3, 4) consumed by the encoder, in concatenation order.
    pub fn stages(self) -> &'static [usize] {
        match self {
            FeatureSelection::B2 => &[2],
            FeatureSelection::B3 => &[3],
            FeatureSelection::B4 => &[4],
            FeatureSelection::B2B3 => &[2, 3],
            FeatureSelection::B3B4 => &[3, 4],
            FeatureSelection::B2B4 => &[2, 4],
            FeatureSelection::B2B3B4 => &[2, 3, 4],
        }
    }

    pub fn needs_stage4(self) -> bool {
        self.stages().contains(&4)
    }

    pub fn encoder_in_channels(self, stage_channels: &[usize; 4]) -> usize {
        self.stages().iter().map(|&s| stage_channels[s - 1]).sum()
    }
}

impl fmt::Display for FeatureSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureSelection::B2 => "b2",
            FeatureSelection::B3 => "b3",
            FeatureSelection::B4 => "b4",
            FeatureSelection::B2B3 => "b2b3",
            FeatureSelection::B3B4 => "b3b4",
            FeatureSelection::B2B4 => "b2b4",
            FeatureSelection::B2B3B4 => "b2b3b4",
        };
        f.write_str(s)
    }
}

impl FromStr for FeatureSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureSelection::ALL
            .into_iter()
            .find(|m| m.to_string() == s.replace('+', ""))
            .ok_or_else(|| Error::config(format!("unknown feature selection {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    /// Width `D` of the encoded comparison features.
    pub embed_dim: usize,
    pub input_channels: usize,
    pub frozen: bool,
    pub features: FeatureSelection,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: [1, 1, 1, 1],
            embed_dim: 32,
            input_channels: 3,
            frozen: true,
            features: FeatureSelection::B2B3,
        }
    }
}

/// Stage-2 and stage-3 outputs (plus stage 4 when requested) at 1/8 resolution.
#[derive(Debug, Clone)]
pub struct FeaturePair {
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Option<Tensor>,
}

/// Graph handles for the backbone outputs.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub f2: Var,
    pub f3: Var,
    pub f4: Option<Var>,
}

impl FeatureVars {
    pub fn from_pair(g: &mut Graph, pair: &FeaturePair) -> Self {
        FeatureVars {
            f2: g.constant(pair.f2.clone()),
            f3: g.constant(pair.f3.clone()),
            f4: pair.f4.as_ref().map(|t| g.constant(t.clone())),
        }
    }

    pub fn to_pair(self, g: &Graph) -> FeaturePair {
        FeaturePair {
            f2: g.value(self.f2).clone(),
            f3: g.value(self.f3).clone(),
            f4: self.f4.map(|v| g.value(v).clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: ConvLayer,
    pub stages: Vec<Vec<ResBlock>>,
}

pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
        return Err(Error::shape(format!(
            "input {h}x{w} must be a multiple of 8 and at least 16x16"
        )));
    }
    Ok(())
}

impl Backbone {
    pub fn build<R: Rng>(reg: &mut Registrar<'_, R>, cfg: &BackboneConfig) -> Result<Self> {
        let frozen = cfg.frozen;
        let stem = reg.conv(
            "backbone.stem",
            cfg.input_channels,
            cfg.stage_channels[0],
            3,
            ConvGeometry::new(2, 1, 1),
            frozen,
        )?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = cfg.stage_channels[0];
        for s in 0..4 {
            let out_ch = cfg.stage_channels[s];
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage[s] {
                let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
                blocks.push(ResBlock::build(
                    reg,
                    &format!("backbone.stage{}.block{b}", s + 1),
                    in_ch,
                    out_ch,
                    stride,
                    STAGE_DILATIONS[s],
                    frozen,
                )?);
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        Ok(Backbone { stem, stages })
    }

    /// Runs the stem and stages; stage 4 only when `with_stage4`.
    pub fn forward(&self, g: &mut Graph, s: &ModelState, image: Var, with_stage4: bool) -> Result<FeatureVars> {
        let (_, h, w) = g.value(image).chw()?;
        check_input_dims(h, w)?;
        let mut x = self.stem.forward_relu(g, s, image)?;
        let mut outs = Vec::with_capacity(4);
        let n_stages = if with_stage4 { 4 } else { 3 };
        for blocks in &self.stages[..n_stages] {
            for block in blocks {
                x = block.forward(g, s, x)?;
            }
            outs.push(x);
        }
        Ok(FeatureVars {
            f2: outs[1],
            f3: outs[2],
            f4: outs.get(3).copied(),
        })
    }

    /// Feature extraction outside of any training graph.
    pub fn extract_features(&self, s: &ModelState, image: &Tensor, with_stage4: bool) -> Result<FeaturePair> {
        let mut g = Graph::inference();
        let img = g.constant(image.clone());
        let vars = self.forward(&mut g, s, img, with_stage4)?;
        Ok(vars.to_pair(&g))
    }
}

/// 3x3 conv + ReLU from the selected stage outputs to `D` channels.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub conv: ConvLayer,
    pub selection: FeatureSelection,
}

impl Encoder {
    pub fn build<R: Rng>(reg: &mut Registrar<'_, R>, cfg: &BackboneConfig) -> Result<Self> {
        let in_ch = cfg.features.encoder_in_channels(&cfg.stage_channels);
        let conv = reg.conv("encoder.conv", in_ch, cfg.embed_dim, 3, ConvGeometry::same(3, 1), false)?;
        Ok(Encoder {
            conv,
            selection: cfg.features,
        })
    }

    /// Concatenation of exactly the selected stage outputs.
    pub fn select(&self, g: &mut Graph, feats: FeatureVars) -> Result<Var> {
        let pick = |stage: usize| -> Result<Var> {
            match stage {
                2 => Ok(feats.f2),
                3 => Ok(feats.f3),
                _ => feats
                    .f4
                    .ok_or_else(|| Error::shape("stage-4 features were not extracted")),
            }
        };
        let stages = self.selection.stages();
        let mut x = pick(stages[0])?;
        for &st in &stages[1..] {
            let next = pick(st)?;
            x = g.concat(x, next)?;
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, s: &ModelState, feats: FeatureVars) -> Result<Var> {
        let x = self.select(g, feats)?;
        self.conv.forward_relu(g, s, x)
    }
}
