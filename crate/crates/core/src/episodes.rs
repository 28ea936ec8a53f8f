//! Class splits, episode sampling, and support annotation modes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense_comparison::{downsampled_mask_weights, SupportExample};
use crate::error::{Error, Result};
use crate::shapes::{class_catalogue, generate_scene_with_instances, Scene, SceneConfig, ShapeClass};
use crate::tensor::{BinaryMask, Tensor};

/// Mixes a sequence of words into one seed (splitmix64 finaliser per step).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x6a09_e667_f3bc_c909;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    pub fn tag(self) -> u64 {
        match self {
            Phase::Train => 1,
            Phase::Test => 2,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Test => "test",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "test" => Ok(Phase::Test),
            _ => Err(Error::config(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Annotation {
    Pixel,
    BoundingBox,
}

impl fmt::Display for Annotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Annotation::Pixel => "pixel",
            Annotation::BoundingBox => "bbox",
        })
    }
}

impl FromStr for Annotation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Annotation::Pixel),
            "bbox" => Ok(Annotation::BoundingBox),
            _ => Err(Error::config(format!("unknown annotation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub num_splits: usize,
    pub test_split: usize,
    pub image_size: usize,
    pub seed: u64,
    pub min_area: usize,
    pub max_area_frac: f64,
    pub max_classes_per_scene: usize,
    /// Probability that the target class appears twice in a scene.
    pub second_instance_prob: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 16,
            num_splits: 4,
            test_split: 0,
            image_size: 64,
            seed: 0,
            min_area: 16,
            max_area_frac: 0.6,
            max_classes_per_scene: 3,
            second_instance_prob: 0.2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_splits < 2 || self.num_classes < self.num_splits {
            return Err(Error::config(format!(
                "{} classes cannot form {} splits",
                self.num_classes, self.num_splits
            )));
        }
        if self.test_split >= self.num_splits {
            return Err(Error::config(format!(
                "test split {} out of range for {} splits",
                self.test_split, self.num_splits
            )));
        }
        if self.image_size % 8 != 0 || self.image_size < 16 {
            return Err(Error::config(format!(
                "image size {} must be a multiple of 8 and >= 16",
                self.image_size
            )));
        }
        if self.max_classes_per_scene == 0 {
            return Err(Error::config("scenes need at least one class"));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.image_size,
            width: self.image_size,
            min_area: self.min_area,
            max_area_frac: self.max_area_frac,
            ..SceneConfig::default()
        }
    }
}

/// Disjoint train/test class sets; split `i` holds classes with `id * splits / classes == i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub num_splits: usize,
    pub test_split_index: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

impl ClassSplit {
    pub fn new(num_classes: usize, num_splits: usize, test_split_index: usize) -> Result<Self> {
        if num_splits == 0 || test_split_index >= num_splits || num_classes < num_splits {
            return Err(Error::config(format!(
                "invalid split {test_split_index} of {num_splits} over {num_classes} classes"
            )));
        }
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..num_classes).partition(|&c| c * num_splits / num_classes == test_split_index);
        Ok(ClassSplit {
            num_splits,
            test_split_index,
            train_classes: train,
            test_classes: test,
        })
    }

    pub fn classes(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Train => &self.train_classes,
            Phase::Test => &self.test_classes,
        }
    }

    pub fn phase_of(&self, class_id: usize) -> Option<Phase> {
        if self.train_classes.contains(&class_id) {
            Some(Phase::Train)
        } else if self.test_classes.contains(&class_id) {
            Some(Phase::Test)
        } else {
            None
        }
    }
}

/// One few-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<SupportExample>,
    pub query_image: Tensor,
    pub query_mask: BinaryMask,
    pub class_id: usize,
    pub k: usize,
    /// Seed this episode was generated from; also drives bounding-box instance choice.
    pub seed: u64,
}

/// Class catalogue plus split: everything needed to draw episodes.
#[derive(Debug, Clone)]
pub struct ShapeDataset {
    pub config: DatasetConfig,
    pub classes: Vec<ShapeClass>,
    pub split: ClassSplit,
}

const SCENE_RETRIES: usize = 50;

impl ShapeDataset {
    pub fn new(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let classes = class_catalogue(config.num_classes);
        let split = ClassSplit::new(config.num_classes, config.num_splits, config.test_split)?;
        Ok(ShapeDataset {
            config,
            classes,
            split,
        })
    }

    /// A scene that contains `target` plus up to `max_classes_per_scene - 1`
    /// distractors drawn from the same phase.
    pub fn scene(&self, target: usize, phase: Phase, rng: &mut impl Rng) -> Result<Scene> {
        let pool: Vec<usize> = self
            .split
            .classes(phase)
            .iter()
            .copied()
            .filter(|&c| c != target)
            .collect();
        let max_extra = (self.config.max_classes_per_scene - 1).min(pool.len());
        let n_extra = rng.random_range(0..=max_extra);
        let mut present = vec![target];
        present.extend(sample(rng, pool.len(), n_extra).into_iter().map(|i| pool[i]));
        let mut instances = vec![1; present.len()];
        if rng.random::<f64>() < self.config.second_instance_prob {
            instances[0] = 2;
        }
        let refs: Vec<&ShapeClass> = present.iter().map(|&c| &self.classes[c]).collect();
        generate_scene_with_instances(&refs, &instances, &self.config.scene_config(), rng)
    }

    fn scene_with(&self, target: usize, phase: Phase, rng: &mut impl Rng) -> Result<(Tensor, BinaryMask)> {
        let scene = self.scene(target, phase, rng)?;
        let mask = scene.mask_of(target).expect("target present").clone();
        Ok((scene.image, mask))
    }

    /// Draw an episode for `phase` with `k` supports.
    pub fn sample_episode(&self, phase: Phase, k: usize, rng: &mut impl Rng) -> Result<Episode> {
        if k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        let classes = self.split.classes(phase);
        let class_id = classes[rng.random_range(0..classes.len())];
        let seed: u64 = rng.random();
        let support = self.draw_supports(class_id, phase, k, rng)?;
        let (query_image, query_mask) = self.scene_with(class_id, phase, rng)?;
        Ok(Episode {
            support,
            query_image,
            query_mask,
            class_id,
            k,
            seed,
        })
    }

    /// `k` support examples of `class_id`.
    pub fn draw_supports(&self, class_id: usize, phase: Phase, k: usize, rng: &mut impl Rng) -> Result<Vec<SupportExample>> {
        let feat = self.config.image_size / 8;
        let mut support = Vec::with_capacity(k);
        for _ in 0..k {
            let mut found = None;
            for _ in 0..SCENE_RETRIES {
                let (image, mask) = self.scene_with(class_id, phase, rng)?;
                // supports whose foreground vanishes at feature resolution are redrawn
                if downsampled_mask_weights(&mask, feat, feat).is_ok() {
                    found = Some(SupportExample { image, mask });
                    break;
                }
            }
            support.push(found.ok_or_else(|| {
                Error::Generation(format!("no usable support for class {class_id}"))
            })?);
        }
        Ok(support)
    }

    /// The `index`-th episode of a stream; a pure function of its arguments.
    pub fn episode_at(&self, phase: Phase, k: usize, seed: u64, index: u64) -> Result<Episode> {
        let mut rng = rng_for(&[self.config.seed, seed, phase.tag(), k as u64, index]);
        self.sample_episode(phase, k, &mut rng)
    }

    pub fn episodes(&self, phase: Phase, k: usize, seed: u64, range: std::ops::Range<u64>) -> Result<Vec<Episode>> {
        use rayon::prelude::*;
        range
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&i| self.episode_at(phase, k, seed, i))
            .collect()
    }
}

/// 4-connected foreground components in row-major order of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data()[start] == 0 {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            comp.push((y, x));
            let mut visit = |q: usize| {
                if !seen[q] && mask.data()[q] != 0 {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        comps.push(comp);
    }
    comps
}

/// Filled tight box around one connected component, picked uniformly at random.
pub fn mask_to_bbox_mask(mask: &BinaryMask, rng: &mut impl Rng) -> Result<BinaryMask> {
    let mut boxes = component_boxes(mask);
    if boxes.is_empty() {
        return Err(Error::EmptyForeground { weight: 0.0 });
    }
    let i = rng.random_range(0..boxes.len());
    Ok(boxes.swap_remove(i))
}

/// Filled tight box of every connected component, in component order.
pub fn component_boxes(mask: &BinaryMask) -> Vec<BinaryMask> {
    connected_components(mask)
        .iter()
        .map(|comp| {
            let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
            for &(y, x) in comp {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
            BinaryMask::from_fn(mask.height(), mask.width(), |y, x| {
                (y0..=y1).contains(&y) && (x0..=x1).contains(&x)
            })
        })
        .collect()
}

/// Like [`mask_to_bbox_mask`], but only boxes that keep some weight at feature
/// resolution are candidates, so a box around a tiny second instance can't empty the support.
pub fn usable_bbox_mask(mask: &BinaryMask, rng: &mut impl Rng) -> Result<BinaryMask> {
    let (fh, fw) = (mask.height() / 8, mask.width() / 8);
    let mut boxes: Vec<BinaryMask> = component_boxes(mask)
        .into_iter()
        .filter(|b| downsampled_mask_weights(b, fh, fw).is_ok())
        .collect();
    if boxes.is_empty() {
        return Err(Error::EmptyForeground { weight: 0.0 });
    }
    let i = rng.random_range(0..boxes.len());
    Ok(boxes.swap_remove(i))
}

/// Replace support masks according to `mode`; the query ground truth is never touched.
pub fn annotate(ep: &Episode, mode: Annotation) -> Result<Episode> {
    match mode {
        Annotation::Pixel => Ok(ep.clone()),
        Annotation::BoundingBox => {
            let mut rng = rng_for(&[ep.seed, 0xb0b]);
            let support = ep
                .support
                .iter()
                .map(|s| {
                    Ok(SupportExample {
                        image: s.image.clone(),
                        mask: usable_bbox_mask(&s.mask, &mut rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Episode {
                support,
                ..ep.clone()
            })
        }
    }
}

/// Distinct class ids over a set of episodes.
pub fn class_ids(episodes: &[Episode]) -> BTreeSet<usize> {
    episodes.iter().map(|e| e.class_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_partitions_classes() {
        let s = ClassSplit::new(16, 4, 1).unwrap();
        assert_eq!(s.test_classes, vec![4, 5, 6, 7]);
        assert_eq!(s.train_classes.len(), 12);
        assert!(s.train_classes.iter().all(|c| !s.test_classes.contains(c)));
        assert!(ClassSplit::new(16, 4, 4).is_err());
    }

    #[test]
    fn bbox_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = BinaryMask::zeros(6, 6);
        m.set(2, 3, true);
        assert_eq!(mask_to_bbox_mask(&m, &mut rng).unwrap(), m);

        let full = BinaryMask::ones(4, 5);
        assert_eq!(mask_to_bbox_mask(&full, &mut rng).unwrap(), full);

        let mut m = BinaryMask::zeros(5, 5);
        for (y, x) in [(1, 1), (2, 1), (2, 2), (3, 2)] {
            m.set(y, x, true);
        }
        let b = mask_to_bbox_mask(&m, &mut rng).unwrap();
        let expected = BinaryMask::from_fn(5, 5, |y, x| (1..=3).contains(&y) && (1..=2).contains(&x));
        assert_eq!(b, expected);

        assert!(matches!(
            mask_to_bbox_mask(&BinaryMask::zeros(3, 3), &mut rng),
            Err(Error::EmptyForeground { .. })
        ));
    }

    #[test]
    fn bbox_picks_one_component() {
        let mut m = BinaryMask::zeros(8, 8);
        m.set(0, 0, true);
        m.set(6, 6, true);
        m.set(7, 7, true);
        let mut sizes = BTreeSet::new();
        for seed in 0..40 {
            let b = mask_to_bbox_mask(&m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            sizes.insert(b.count());
        }
        // (0,0) alone, or the two diagonal pixels (separate under 4-connectivity)
        assert!(sizes.iter().all(|&n| n == 1));
        assert_eq!(connected_components(&m).len(), 3);
    }

    #[test]
    fn usable_bbox_skips_boxes_between_grid_points() {
        // 64x64 samples the 8x8 grid at multiples of 9; a 2x2 blob at (3,3) misses every sample
        let mut m = BinaryMask::zeros(64, 64);
        for (y, x) in [(3, 3), (3, 4), (4, 3), (4, 4)] {
            m.set(y, x, true);
        }
        for y in 30..40 {
            for x in 30..40 {
                m.set(y, x, true);
            }
        }
        for seed in 0..20 {
            let b = usable_bbox_mask(&m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(b.count(), 100);
        }
        let mut tiny = BinaryMask::zeros(64, 64);
        tiny.set(3, 3, true);
        assert!(usable_bbox_mask(&tiny, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn derive_seed_separates_inputs() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
        assert_eq!(derive_seed(&[5, 9]), derive_seed(&[5, 9]));
    }
}
