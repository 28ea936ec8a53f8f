//! The assembled network and its inference entry points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{check_input_dims, Backbone, BackboneConfig, Encoder, FeaturePair, FeatureVars};
use crate::dense_comparison::{ComparisonFeature, DenseComparison, SupportExample};
use crate::error::{Error, Result};
use crate::fusion::{fuse_mask_avg, fuse_mask_or, AttentionHead, Fusion};
use crate::layers::Registrar;
use crate::ops;
use crate::refinement::{empty_prior, predict_mask, renormalize, ConfidenceMap, Iom, IomConfig};
use crate::state::ModelState;
use crate::tensor::{BinaryMask, Tensor};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub iom: IomConfig,
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.backbone.embed_dim
    }
}

/// Parameter handles for every sub-module.
#[derive(Debug, Clone)]
pub struct Network {
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub dcm: DenseComparison,
    pub attention: AttentionHead,
    pub iom: Iom,
}

impl Network {
    fn build(cfg: &ModelConfig, state: &mut ModelState, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = Registrar {
            state,
            rng: &mut rng,
        };
        let d = cfg.embed_dim();
        Ok(Network {
            backbone: Backbone::build(&mut reg, &cfg.backbone)?,
            encoder: Encoder::build(&mut reg, &cfg.backbone)?,
            dcm: DenseComparison::build(&mut reg, d)?,
            attention: AttentionHead::build(&mut reg, d)?,
            iom: Iom::build(&mut reg, d, &cfg.iom)?,
        })
    }

    pub fn needs_stage4(&self) -> bool {
        self.encoder.selection.needs_stage4()
    }

    /// Backbone then encoder: image `[3,H,W]` to `[D,H/8,W/8]`.
    pub fn encode_image(&self, g: &mut Graph, s: &ModelState, image: Var) -> Result<Var> {
        let feats = self.backbone.forward(g, s, image, self.needs_stage4())?;
        self.encoder.forward(g, s, feats)
    }
}

/// Inference settings shared by evaluation and prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOptions {
    pub fusion: Fusion,
    pub iterations: usize,
    pub scales: Vec<f64>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            fusion: Fusion::Attention,
            iterations: 4,
            scales: vec![1.0],
        }
    }
}

/// Result of segmenting one query.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub mask: BinaryMask,
    /// Final map at query resolution; absent for mask-level OR fusion.
    pub confidence: Option<ConfidenceMap>,
    /// Initial prediction and each refinement at feature resolution (unit scale only).
    pub steps: Vec<ConfidenceMap>,
}

/// Query dimensions snapped to the nearest multiple of 8.
pub fn scaled_dims(h: usize, w: usize, scale: f64) -> Result<(usize, usize)> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::config(format!("invalid scale {scale}")));
    }
    let snap = |v: usize| ((v as f64 * scale / 8.0).round() as usize) * 8;
    let (sh, sw) = (snap(h), snap(w));
    if sh < 16 || sw < 16 {
        return Err(Error::config(format!(
            "scale {scale} gives {sh}x{sw}, below the 16x16 minimum"
        )));
    }
    Ok((sh, sw))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub net: Network,
    pub state: ModelState,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut state = ModelState::new();
        let net = Network::build(&config, &mut state, seed)?;
        Ok(Model { config, net, state })
    }

    /// Binds loaded parameters to the layout implied by `config`; names and shapes must match.
    pub fn from_state(config: ModelConfig, state: ModelState) -> Result<Self> {
        let mut fresh = ModelState::new();
        let net = Network::build(&config, &mut fresh, 0)?;
        if fresh.len() != state.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                fresh.len(),
                state.len()
            )));
        }
        for (a, b) in fresh.params().iter().zip(state.params()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(Model { config, net, state })
    }

    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.state.set_frozen_prefix(crate::backbone::BACKBONE_PREFIX, frozen);
        self.config.backbone.frozen = frozen;
    }

    pub fn extract_features(&self, image: &Tensor) -> Result<FeaturePair> {
        self.net
            .backbone
            .extract_features(&self.state, image, self.net.needs_stage4())
    }

    pub fn encode_comparison_features(&self, pair: &FeaturePair) -> Result<Tensor> {
        let mut g = Graph::inference();
        let vars = FeatureVars::from_pair(&mut g, pair);
        let y = self.net.encoder.forward(&mut g, &self.state, vars)?;
        Ok(g.value(y).clone())
    }

    pub fn dcm_forward(&self, support: &SupportExample, query_image: &Tensor) -> Result<ComparisonFeature> {
        let mut g = Graph::inference();
        let s = &self.state;
        let simg = g.constant(support.image.clone());
        let senc = self.net.encode_image(&mut g, s, simg)?;
        let qimg = g.constant(query_image.clone());
        let qenc = self.net.encode_image(&mut g, s, qimg)?;
        let cv = self.net.dcm.forward(&mut g, s, senc, &support.mask, qenc)?;
        Ok(ComparisonFeature(g.value(cv.comparison).clone()))
    }

    /// Raw attention logit for a tiled-and-concatenated `[2D,h,w]` input.
    pub fn attention_logit(&self, concat: &Tensor) -> Result<f64> {
        let mut g = Graph::inference();
        let x = g.constant(concat.clone());
        let l = self.net.attention.logit(&mut g, &self.state, x)?;
        Ok(g.value(l).data()[0])
    }

    pub fn iom_step(&self, x: &ComparisonFeature, y_prev: Option<&ConfidenceMap>) -> Result<ConfidenceMap> {
        let (_, h, w) = x.0.chw()?;
        let mut g = Graph::inference();
        let xv = g.constant(x.0.clone());
        let prior = match y_prev {
            Some(m) => m.probs().clone(),
            None => empty_prior(h, w),
        };
        let pv = g.constant(prior);
        let y = self.net.iom.step(&mut g, &self.state, xv, pv)?;
        ConfidenceMap::new(g.value(y).clone())
    }

    /// Initial map plus `iterations` refinements.
    pub fn iterate(&self, x: &ComparisonFeature, iterations: usize) -> Result<Vec<ConfidenceMap>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.0.clone());
        let maps = self.net.iom.iterate(&mut g, &self.state, xv, iterations)?;
        maps.into_iter()
            .map(|m| ConfidenceMap::new(g.value(m).clone()))
            .collect()
    }

    /// Full k-shot inference on one query image.
    pub fn segment(&self, supports: &[SupportExample], query: &Tensor, opts: &InferenceOptions) -> Result<Segmentation> {
        if supports.is_empty() {
            return Err(Error::EmptySupport);
        }
        if opts.scales.is_empty() {
            return Err(Error::config("at least one scale is required"));
        }
        let (_, qh, qw) = query.chw()?;
        check_input_dims(qh, qw)?;
        let s = &self.state;
        let mut g = Graph::inference();
        let support_encs = supports
            .iter()
            .map(|sup| {
                let img = g.constant(sup.image.clone());
                self.net.encode_image(&mut g, s, img)
            })
            .collect::<Result<Vec<_>>>()?;

        // per scale: one chain of maps per fused stream (1 for feature-level fusion, k otherwise)
        let mut per_scale: Vec<Vec<Vec<ConfidenceMap>>> = Vec::with_capacity(opts.scales.len());
        for &scale in &opts.scales {
            let qimg = if scale == 1.0 {
                g.constant(query.clone())
            } else {
                let (sh, sw) = scaled_dims(qh, qw, scale)?;
                g.constant(ops::bilinear_resize(query, sh, sw)?)
            };
            let qenc = self.net.encode_image(&mut g, s, qimg)?;
            let mut concats = Vec::with_capacity(supports.len());
            let mut comps = Vec::with_capacity(supports.len());
            for (sup, &senc) in supports.iter().zip(&support_encs) {
                let cv = self.net.dcm.forward(&mut g, s, senc, &sup.mask, qenc)?;
                concats.push(cv.concat);
                comps.push(cv.comparison);
            }
            let streams: Vec<Var> = match opts.fusion {
                Fusion::Attention => vec![self.net.attention.fuse(&mut g, s, &concats, &comps)?],
                Fusion::FeatureAvg => vec![g.mean(&comps)?],
                Fusion::MaskAvg | Fusion::MaskOr => comps,
            };
            let mut chains = Vec::with_capacity(streams.len());
            for x in streams {
                let maps = self.net.iom.iterate(&mut g, s, x, opts.iterations)?;
                chains.push(
                    maps.into_iter()
                        .map(|m| ConfidenceMap::new(g.value(m).clone()))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            per_scale.push(chains);
        }

        let unit = opts.scales.iter().position(|&sc| sc == 1.0);
        let steps = match unit {
            Some(i) => {
                let chains = &per_scale[i];
                (0..=opts.iterations)
                    .map(|t| {
                        let at_t: Vec<ConfidenceMap> = chains.iter().map(|c| c[t].clone()).collect();
                        if at_t.len() == 1 {
                            Ok(at_t.into_iter().next().expect("one chain"))
                        } else {
                            fuse_mask_avg(&at_t)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };

        let n_streams = per_scale[0].len();
        let stream_maps: Vec<ConfidenceMap> = (0..n_streams)
            .map(|k| {
                let finals: Vec<&ConfidenceMap> = per_scale
                    .iter()
                    .map(|chains| chains[k].last().expect("non-empty chain"))
                    .collect();
                combine_scales(&finals, qh, qw)
            })
            .collect::<Result<Vec<_>>>()?;

        match opts.fusion {
            Fusion::MaskOr => {
                let masks = stream_maps
                    .iter()
                    .map(|m| predict_mask(m, qh, qw))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Segmentation {
                    mask: fuse_mask_or(&masks)?,
                    confidence: None,
                    steps,
                })
            }
            _ => {
                let map = if stream_maps.len() == 1 {
                    stream_maps.into_iter().next().expect("one stream")
                } else {
                    fuse_mask_avg(&stream_maps)?
                };
                Ok(Segmentation {
                    mask: predict_mask(&map, qh, qw)?,
                    confidence: Some(map),
                    steps,
                })
            }
        }
    }
}

/// Resize every per-scale map to the query resolution, average, renormalise.
fn combine_scales(maps: &[&ConfidenceMap], h: usize, w: usize) -> Result<ConfidenceMap> {
    if maps.len() == 1 {
        let t = ops::bilinear_resize(maps[0].probs(), h, w)?;
        return ConfidenceMap::new(t);
    }
    let resized = maps
        .iter()
        .map(|m| ops::bilinear_resize(m.probs(), h, w))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = resized[0].data().to_vec();
    for r in &resized[1..] {
        for (a, v) in acc.iter_mut().zip(r.data()) {
            *a += v;
        }
    }
    let k = resized.len() as f64;
    for a in &mut acc {
        *a /= k;
    }
    ConfidenceMap::new(renormalize(Tensor::new(&[2, h, w], acc)?))
}

/// Multi-scale confidence for a single support, at query resolution.
pub fn multi_scale_predict(model: &Model, support: &SupportExample, query: &Tensor, iterations: usize, scales: &[f64]) -> Result<ConfidenceMap> {
    let opts = InferenceOptions {
        fusion: Fusion::Attention,
        iterations,
        scales: scales.to_vec(),
    };
    model
        .segment(std::slice::from_ref(support), query, &opts)?
        .confidence
        .ok_or_else(|| Error::config("no confidence map produced"))
}
