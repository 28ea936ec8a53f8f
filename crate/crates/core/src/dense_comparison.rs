//! Masked pooling of the support foreground and dense comparison against the query.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, Registrar};
use crate::ops::{self, ConvGeometry};
use crate::state::ModelState;
use crate::tensor::{BinaryMask, Tensor};

/// Minimum summed mask weight at feature resolution.
pub const MIN_FOREGROUND_WEIGHT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportExample {
    pub image: Tensor,
    pub mask: BinaryMask,
}

impl SupportExample {
    pub fn new(image: Tensor, mask: BinaryMask) -> Result<Self> {
        let (_, h, w) = image.chw()?;
        if (h, w) != (mask.height(), mask.width()) {
            return Err(Error::shape(format!(
                "support image {h}x{w} vs mask {}x{}",
                mask.height(),
                mask.width()
            )));
        }
        Ok(SupportExample { image, mask })
    }
}

/// Output of the comparison block, `[D, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonFeature(pub Tensor);

/// Bilinearly downsampled (soft) mask weights at `h`x`w`; errors when the
/// total foreground weight vanishes.
pub fn downsampled_mask_weights(mask: &BinaryMask, h: usize, w: usize) -> Result<Vec<f64>> {
    let small = ops::bilinear_resize(&mask.to_tensor(), h, w)?;
    let weight: f64 = small.data().iter().sum();
    if weight < MIN_FOREGROUND_WEIGHT {
        return Err(Error::EmptyForeground { weight });
    }
    Ok(small.into_data())
}

/// Average of `features` over the foreground of `mask_full`, after resizing
/// the mask to the feature resolution.
pub fn masked_average_pool(features: &Tensor, mask_full: &BinaryMask) -> Result<Tensor> {
    let (_, h, w) = features.chw()?;
    let weights = downsampled_mask_weights(mask_full, h, w)?;
    ops::weighted_spatial_pool(features, &weights).map(|(t, _)| t)
}

/// Broadcast `vec` over the query grid and put it in front of the query channels.
pub fn tile_and_concat(vec: &Tensor, query: &Tensor) -> Result<Tensor> {
    let (d, h, w) = query.chw()?;
    if vec.ndim() != 1 || vec.len() != d {
        return Err(Error::shape(format!(
            "vector {:?} does not match {d} query channels",
            vec.shape()
        )));
    }
    ops::concat_channels(&ops::tile(vec, h, w)?, query)
}

pub fn tile_and_concat_var(g: &mut Graph, vec: Var, query: Var) -> Result<Var> {
    let (d, h, w) = g.value(query).chw()?;
    if g.value(vec).len() != d {
        return Err(Error::shape(format!(
            "vector of {} does not match {d} query channels",
            g.value(vec).len()
        )));
    }
    let tiled = g.tile(vec, h, w)?;
    g.concat(tiled, query)
}

/// The comparison conv block: `2D -> D`, 3x3, ReLU.
#[derive(Debug, Clone)]
pub struct DenseComparison {
    pub compare: ConvLayer,
}

/// Intermediate results of one support/query comparison.
#[derive(Debug, Clone, Copy)]
pub struct ComparisonVars {
    pub prototype: Var,
    /// Tiled prototype concatenated with query features, `[2D,h,w]`.
    pub concat: Var,
    pub comparison: Var,
}

impl DenseComparison {
    pub fn build<R: Rng>(reg: &mut Registrar<'_, R>, dim: usize) -> Result<Self> {
        let compare = reg.conv("dcm.compare", 2 * dim, dim, 3, ConvGeometry::same(3, 1), false)?;
        Ok(DenseComparison { compare })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ModelState,
        support_enc: Var,
        support_mask: &BinaryMask,
        query_enc: Var,
    ) -> Result<ComparisonVars> {
        let (_, h, w) = g.value(support_enc).chw()?;
        let weights = downsampled_mask_weights(support_mask, h, w)?;
        let prototype = g.weighted_pool(support_enc, weights)?;
        let concat = tile_and_concat_var(g, prototype, query_enc)?;
        let comparison = self.compare.forward_relu(g, s, concat)?;
        Ok(ComparisonVars {
            prototype,
            concat,
            comparison,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_over_top_row() {
        let f = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(masked_average_pool(&f, &m).unwrap().data(), &[1.5]);
    }

    #[test]
    fn all_ones_mask_matches_global_average() {
        let f = Tensor::from_fn(&[3, 4, 4], |i| (i as f64).sin());
        let m = BinaryMask::ones(32, 32);
        let a = masked_average_pool(&f, &m).unwrap();
        let b = ops::global_avg_pool(&f).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let f = Tensor::zeros(&[2, 2, 2]);
        let m = BinaryMask::zeros(8, 8);
        assert!(matches!(
            masked_average_pool(&f, &m),
            Err(Error::EmptyForeground { .. })
        ));
    }

    #[test]
    fn single_cell_mask_returns_that_cell() {
        let f = Tensor::from_fn(&[3, 3, 3], |i| i as f64 * 0.7 - 4.0);
        let mut m = BinaryMask::zeros(3, 3);
        m.set(1, 2, true);
        let v = masked_average_pool(&f, &m).unwrap();
        let expected: Vec<f64> = (0..3).map(|c| f.at3(c, 1, 2)).collect();
        assert_eq!(v.data(), expected.as_slice());
    }

    #[test]
    fn tile_and_concat_layout() {
        let v = Tensor::new(&[2], vec![7.0, 8.0]).unwrap();
        let q = Tensor::new(&[2, 1, 1], vec![1.0, 2.0]).unwrap();
        assert_eq!(tile_and_concat(&v, &q).unwrap().data(), &[7.0, 8.0, 1.0, 2.0]);

        let q = Tensor::zeros(&[2, 3, 4]);
        let out = tile_and_concat(&v, &q).unwrap();
        assert!(out.channel(0).iter().all(|&x| x == 7.0));
        assert!(out.channel(1).iter().all(|&x| x == 8.0));
        assert!(tile_and_concat(&Tensor::zeros(&[3]), &q).is_err());
    }
}
