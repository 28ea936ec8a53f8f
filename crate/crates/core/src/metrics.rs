//! Foreground IoU, class-averaged meanIoU, and FB-IoU.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::BinaryMask;

/// Pixel counts from one predicted mask against its ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub fg_intersection: u64,
    pub fg_union: u64,
    pub bg_intersection: u64,
    pub bg_union: u64,
}

impl Counts {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        check_same(pred, gt)?;
        let mut c = Counts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p != 0, g != 0) {
                (true, true) => {
                    c.fg_intersection += 1;
                    c.fg_union += 1;
                }
                (false, false) => {
                    c.bg_intersection += 1;
                    c.bg_union += 1;
                }
                _ => {
                    c.fg_union += 1;
                    c.bg_union += 1;
                }
            }
        }
        Ok(c)
    }

    pub fn merge(self, o: Counts) -> Counts {
        Counts {
            fg_intersection: self.fg_intersection + o.fg_intersection,
            fg_union: self.fg_union + o.fg_union,
            bg_intersection: self.bg_intersection + o.bg_intersection,
            bg_union: self.bg_union + o.bg_union,
        }
    }
}

fn check_same(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// `|pred ∧ gt| / |pred ∨ gt|`, and 1.0 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = Counts::of(pred, gt)?;
    Ok(ratio(c.fg_intersection, c.fg_union))
}

/// One evaluated episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeResult {
    pub class_id: usize,
    pub counts: Counts,
}

/// Per-class ratio of summed intersections to summed unions, then the unweighted mean over classes.
pub fn mean_iou(results: &[EpisodeResult]) -> (BTreeMap<usize, f64>, f64) {
    let mut acc: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for r in results {
        let e = acc.entry(r.class_id).or_default();
        e.0 += r.counts.fg_intersection;
        e.1 += r.counts.fg_union;
    }
    let per_class: BTreeMap<usize, f64> = acc.into_iter().map(|(c, (i, u))| (c, ratio(i, u))).collect();
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    (per_class, mean)
}

/// Class-agnostic mean of foreground and background IoU, each a ratio of sums.
pub fn fb_iou(results: &[EpisodeResult]) -> f64 {
    let t = results.iter().fold(Counts::default(), |a, r| a.merge(r.counts));
    0.5 * (ratio(t.fg_intersection, t.fg_union) + ratio(t.bg_intersection, t.bg_union))
}
