//! Shared checks used by the dedicated suites and by the acceptance run.
#![allow(dead_code)]

pub mod cli;
pub mod invariants;

use fewseg::autograd::{Graph, Var};
use fewseg::dense_comparison::{masked_average_pool, SupportExample};
use fewseg::episodes::Episode;
use fewseg::metrics::{fb_iou, iou, mean_iou, Counts, EpisodeResult};
use fewseg::model::{Model, ModelConfig};
use fewseg::ops::{self, ConvGeometry};
use fewseg::refinement::ConfidenceMap;
use fewseg::tensor::{BinaryMask, Tensor};
use fewseg::training::{episode_forward, TrainItem};
use fewseg::Result;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;
pub const MIN_PROBES: usize = 50;
pub const CONV_TOL: f64 = 1e-10;

/// Relative error with a small floor so that two near-zero values compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: &'static str,
    pub probes: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.probes >= MIN_PROBES && self.max_rel_err <= FD_TOL
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One random instance of an op: its inputs and how to apply it.
pub struct OpCase {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced far more than the probe step, so max-pool never ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

fn projected(g: &Graph, out: Var, r: &[f64]) -> f64 {
    g.value(out).data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Central differences of `Σ r·op(inputs)` at random coordinates against the tape gradient.
pub fn check_case(case: &OpCase, probes: usize, rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let run = |inputs: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = (case.build)(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = run(&case.inputs)?;
    let r: Vec<f64> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = g.backward_with(out, r.clone());

    let coords: Vec<(usize, usize)> = case
        .inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let picked: Vec<(usize, usize)> = coords.choose_multiple(rng, probes).copied().collect();
    let mut worst: f64 = 0.0;
    for &(i, j) in &picked {
        let analytic = grads.wrt(vars[i]).map_or(0.0, |gr| gr[j]);
        let mut plus = case.inputs.clone();
        plus[i].data_mut()[j] += FD_EPS;
        let mut minus = case.inputs.clone();
        minus[i].data_mut()[j] -= FD_EPS;
        let (gp, _, op) = run(&plus)?;
        let (gm, _, om) = run(&minus)?;
        let numeric = (projected(&gp, op, &r) - projected(&gm, om, &r)) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok((picked.len(), worst))
}

/// Draws cases until at least `MIN_PROBES` coordinates have been checked.
pub fn check_op(name: &'static str, seed: u64, mut gen: impl FnMut(&mut ChaCha8Rng) -> OpCase) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = 0;
    let mut worst: f64 = 0.0;
    while probes < MIN_PROBES {
        let case = gen(&mut rng);
        let (n, w) = check_case(&case, MIN_PROBES - probes, &mut rng)?;
        probes += n;
        worst = worst.max(w);
    }
    Ok(GradReport {
        name,
        probes,
        max_rel_err: worst,
    })
}

pub fn op_gradient_reports() -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    out.push(check_op("conv2d", 1, |rng| {
        loop {
            let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
            let (h, w) = (rng.random_range(3..8), rng.random_range(3..8));
            let k = [1, 3][rng.random_range(0..2)];
            let geom = ConvGeometry::new(rng.random_range(1..3), rng.random_range(1..3), rng.random_range(0..3));
            if geom.output_dims(h, w, k, k).is_err() {
                continue;
            }
            break OpCase {
                inputs: vec![randn(rng, &[ci, h, w]), randn(rng, &[co, ci, k, k]), randn(rng, &[co])],
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), geom)),
            };
        }
    })?);
    out.push(check_op("max_pool2d", 2, |rng| {
        let (c, h, w) = (rng.random_range(1..3), rng.random_range(4..8), rng.random_range(4..8));
        let (win, stride) = (rng.random_range(2..4), rng.random_range(1..3));
        OpCase {
            inputs: vec![distinct(rng, &[c, h, w])],
            build: Box::new(move |g, v| g.max_pool2d(v[0], win, stride)),
        }
    })?);
    out.push(check_op("bilinear_resize", 3, |rng| {
        let (c, h, w) = (rng.random_range(1..3), rng.random_range(2..7), rng.random_range(2..7));
        let (oh, ow) = (rng.random_range(1..12), rng.random_range(1..12));
        OpCase {
            inputs: vec![randn(rng, &[c, h, w])],
            build: Box::new(move |g, v| g.resize(v[0], oh, ow)),
        }
    })?);
    out.push(check_op("relu", 4, |rng| OpCase {
        inputs: vec![away_from_zero(rng, &[2, 5, 5])],
        build: Box::new(|g, v| Ok(g.relu(v[0]))),
    })?);
    out.push(check_op("add", 5, |rng| OpCase {
        inputs: vec![randn(rng, &[2, 4, 4]), randn(rng, &[2, 4, 4])],
        build: Box::new(|g, v| g.add(v[0], v[1])),
    })?);
    out.push(check_op("mul", 6, |rng| OpCase {
        inputs: vec![randn(rng, &[2, 4, 4]), randn(rng, &[2, 4, 4])],
        build: Box::new(|g, v| g.mul(v[0], v[1])),
    })?);
    out.push(check_op("concat", 7, |rng| OpCase {
        inputs: vec![randn(rng, &[2, 3, 4]), randn(rng, &[3, 3, 4])],
        build: Box::new(|g, v| g.concat(v[0], v[1])),
    })?);
    out.push(check_op("softmax_channels", 8, |rng| {
        let c = rng.random_range(2..5);
        OpCase {
            inputs: vec![randn(rng, &[c, 3, 4])],
            build: Box::new(|g, v| g.softmax_channels(v[0])),
        }
    })?);
    out.push(check_op("global_avg_pool", 9, |rng| OpCase {
        inputs: vec![randn(rng, &[3, 4, 5])],
        build: Box::new(|g, v| g.global_avg_pool(v[0])),
    })?);
    out.push(check_op("weighted_pool", 10, |rng| {
        let weights: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        OpCase {
            inputs: vec![randn(rng, &[3, 4, 5])],
            build: Box::new(move |g, v| g.weighted_pool(v[0], weights.clone())),
        }
    })?);
    out.push(check_op("tile", 11, |rng| OpCase {
        inputs: vec![randn(rng, &[4])],
        build: Box::new(|g, v| g.tile(v[0], 3, 2)),
    })?);
    out.push(check_op("reshape", 12, |rng| OpCase {
        inputs: vec![randn(rng, &[2, 3, 4])],
        build: Box::new(|g, v| g.reshape(v[0], &[6, 4])),
    })?);
    out.push(check_op("stack_scalars", 13, |rng| OpCase {
        inputs: (0..3).map(|_| randn(rng, &[1])).collect(),
        build: Box::new(|g, v| g.stack_scalars(v)),
    })?);
    out.push(check_op("weighted_sum", 14, |rng| {
        let k = rng.random_range(1..4);
        let mut inputs: Vec<Tensor> = (0..k).map(|_| randn(rng, &[2, 3, 3])).collect();
        inputs.push(randn(rng, &[k, 1, 1]));
        OpCase {
            inputs,
            build: Box::new(move |g, v| g.weighted_sum(&v[..k], v[k])),
        }
    })?);
    out.push(check_op("mean", 15, |rng| {
        let k = rng.random_range(1..4);
        OpCase {
            inputs: (0..k).map(|_| randn(rng, &[2, 3, 3])).collect(),
            build: Box::new(|g, v| g.mean(v)),
        }
    })?);
    out.push(check_op("cross_entropy", 16, |rng| {
        let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
        let probs = Tensor::from_fn(&[2, h, w], |_| rng.random_range(0.2..0.8));
        let target = BinaryMask::from_fn(h, w, |_, _| rng.random_bool(0.5));
        OpCase {
            inputs: vec![probs],
            build: Box::new(move |g, v| g.cross_entropy(v[0], &target)),
        }
    })?);
    out.push(check_op("cross_entropy_labels", 17, |rng| {
        let (c, h, w) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5));
        let probs = Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.2..0.8));
        let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..c)).collect();
        OpCase {
            inputs: vec![probs],
            build: Box::new(move |g, v| g.cross_entropy_labels(v[0], &labels)),
        }
    })?);
    out.push(check_op("softmax_then_cross_entropy", 18, |rng| {
        let target = BinaryMask::from_fn(3, 3, |_, _| rng.random_bool(0.5));
        OpCase {
            inputs: vec![randn(rng, &[2, 3, 3])],
            build: Box::new(move |g, v| {
                let p = g.softmax_channels(v[0])?;
                g.cross_entropy(p, &target)
            }),
        }
    })?);
    Ok(out)
}

/// Random 16x16 k-shot episode. Support masks touch a corner because a 2x2
/// feature grid samples the mask only at the four corners.
pub fn tiny_episode(rng: &mut ChaCha8Rng, k: usize) -> Episode {
    let blob = |rng: &mut ChaCha8Rng| {
        let (h, w) = (rng.random_range(4..12), rng.random_range(4..12));
        let (flip_y, flip_x) = (rng.random_bool(0.5), rng.random_bool(0.5));
        BinaryMask::from_fn(16, 16, |y, x| {
            let yy = if flip_y { 15 - y } else { y };
            let xx = if flip_x { 15 - x } else { x };
            yy < h && xx < w
        })
    };
    let image = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(0.0..1.0));
    let support = (0..k)
        .map(|_| SupportExample::new(image(rng), blob(rng)).unwrap())
        .collect();
    Episode {
        support,
        query_image: image(rng),
        query_mask: blob(rng),
        class_id: 0,
        k,
        seed: 0,
    }
}

fn e2e_loss(model: &Model, ep: &Episode, prior: &ConfidenceMap, target: &BinaryMask) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let item = TrainItem {
        id: 0,
        episode: ep,
        features: None,
    };
    let probs = episode_forward(model, &mut g, &item, Some(prior))?;
    let loss = g.cross_entropy(probs, target)?;
    Ok((g, loss))
}

/// Full-model check on a 16x16, 2-shot episode with every parameter trainable.
pub fn end_to_end_gradient_report(probes: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut model = Model::new(ModelConfig::default(), 5)?;
    model.freeze_backbone(false);
    let ep = tiny_episode(&mut rng, 2);
    let prior = ConfidenceMap::from_foreground(2, 2, &[0.2, 0.7, 0.4, 0.9])?;
    let target = BinaryMask::from_fn(2, 2, |y, x| (y + x) % 2 == 0);

    let (g, loss) = e2e_loss(&model, &ep, &prior, &target)?;
    model.state.zero_grads();
    g.backward(loss).accumulate_into(&g, &mut model.state, 1.0);

    let n_params = model.state.len();
    let mut worst: f64 = 0.0;
    for i in 0..probes {
        // cycle through every parameter tensor before repeating one
        let pi = if i < n_params { i } else { rng.random_range(0..n_params) };
        let len = model.state.params()[pi].tensor.len();
        let j = rng.random_range(0..len);
        let analytic = model.state.params()[pi].tensor.grad.as_ref().expect("zeroed")[j];
        let eval = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            m.state.params_mut()[pi].tensor.data_mut()[j] += delta;
            let (g, l) = e2e_loss(&m, &ep, &prior, &target)?;
            Ok(g.value(l).data()[0])
        };
        let numeric = (eval(FD_EPS)? - eval(-FD_EPS)?) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(GradReport {
        name: "end_to_end_16x16",
        probes,
        max_rel_err: worst,
    })
}

/// Direct seven-loop convolution.
pub fn conv2d_reference(input: &Tensor, weight: &Tensor, bias: &Tensor, geom: ConvGeometry) -> Tensor {
    let (c, h, w) = input.chw().unwrap();
    let s = weight.shape();
    let (o, kh, kw) = (s[0], s[2], s[3]);
    let (oh, ow) = geom.output_dims(h, w, kh, kw).unwrap();
    let (dy, dx) = geom.dilation;
    let (py, px) = geom.padding;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias.data()[oc];
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * geom.stride + ky * dy) as isize - py as isize;
                            let ix = (x * geom.stride + kx * dx) as isize - px as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = weight.data()[((oc * c + ic) * kh + ky) * kw + kx];
                            acc += wv * input.at3(ic, iy as usize, ix as usize);
                        }
                    }
                }
                out[(oc * oh + y) * ow + x] = acc;
            }
        }
    }
    Tensor::new(&[o, oh, ow], out).unwrap()
}

/// Largest deviation from the reference over `cases` random geometries.
pub fn conv_oracle_max_diff(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < cases {
        let (ci, co) = (rng.random_range(1..6), rng.random_range(1..6));
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let (kh, kw) = (rng.random_range(1..5), rng.random_range(1..5));
        let geom = ConvGeometry {
            stride: rng.random_range(1..4),
            dilation: (rng.random_range(1..4), rng.random_range(1..4)),
            padding: (rng.random_range(0..4), rng.random_range(0..4)),
        };
        if geom.output_dims(h, w, kh, kw).is_err() {
            continue;
        }
        let input = randn(&mut rng, &[ci, h, w]);
        let weight = randn(&mut rng, &[co, ci, kh, kw]);
        let bias = randn(&mut rng, &[co]);
        let params = ops::Conv2dParams {
            weight: weight.clone(),
            bias: Some(bias.clone()),
            geometry: geom,
        };
        let got = ops::conv2d(&input, &params).unwrap();
        worst = worst.max(got.max_abs_diff(&conv2d_reference(&input, &weight, &bias, geom)));
        done += 1;
    }
    worst
}

/// Resample the mask with an independent corner-aligned bilinear kernel, then average.
pub fn masked_pool_reference(features: &Tensor, mask: &BinaryMask) -> Vec<f64> {
    let (c, h, w) = features.chw().unwrap();
    let (mh, mw) = (mask.height(), mask.width());
    let coord = |i: usize, n_out: usize, n_in: usize| -> f64 {
        if n_out == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut weights = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (coord(y, h, mh), coord(x, w, mw));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(mh - 1), (x0 + 1).min(mw - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let m = |yy: usize, xx: usize| mask.get(yy, xx) as u8 as f64;
            weights[y * w + x] = (1.0 - fy) * ((1.0 - fx) * m(y0, x0) + fx * m(y0, x1))
                + fy * ((1.0 - fx) * m(y1, x0) + fx * m(y1, x1));
        }
    }
    let total: f64 = weights.iter().sum();
    (0..c)
        .map(|ci| {
            (0..h * w)
                .map(|p| features.channel(ci)[p] * weights[p])
                .sum::<f64>()
                / total
        })
        .collect()
}

pub fn masked_pool_oracle_max_diff(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let scale = rng.random_range(1..5);
        let (mh, mw) = (h * scale + rng.random_range(0..3), w * scale + rng.random_range(0..3));
        let c = rng.random_range(1..5);
        let features = randn(&mut rng, &[c, h, w]);
        // force at least one foreground pixel at a corner so the weight never vanishes
        let mut mask = BinaryMask::from_fn(mh, mw, |_, _| rng.random_bool(0.4));
        mask.set(0, 0, true);
        let got = masked_average_pool(&features, &mask).unwrap();
        let want = masked_pool_reference(&features, &mask);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn mask_from_rows(rows: &[&str]) -> BinaryMask {
    let h = rows.len();
    let w = rows[0].len();
    BinaryMask::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
}

/// Hand-counted cases; returns the descriptions of any mismatches.
pub fn metric_oracle_failures() -> Vec<String> {
    let mut fails = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-12 {
            fails.push(format!("{what}: got {got}, want {want}"));
        }
    };
    // 4x4: pred has 6 fg, gt has 4 fg, overlap 3 -> fg IoU 3/7; bg: 9 shared of 13 in union
    let pred = mask_from_rows(&["###.", "###.", "....", "...."]);
    let gt = mask_from_rows(&[".##.", ".#..", ".#..", "...."]);
    check("iou", iou(&pred, &gt).unwrap(), 3.0 / 7.0);
    check("iou symmetric", iou(&gt, &pred).unwrap(), 3.0 / 7.0);
    let c = Counts::of(&pred, &gt).unwrap();
    check("bg intersection", c.bg_intersection as f64, 9.0);
    check("bg union", c.bg_union as f64, 13.0);
    check("both empty", iou(&BinaryMask::zeros(3, 3), &BinaryMask::zeros(3, 3)).unwrap(), 1.0);
    check("disjoint", iou(&mask_from_rows(&["#."]), &mask_from_rows(&[".#"])).unwrap(), 0.0);

    // class 1 pools two episodes (3+2)/(7+3); class 2 has a perfect episode
    let e1 = EpisodeResult {
        class_id: 1,
        counts: c,
    };
    let g2 = mask_from_rows(&["##", ".."]);
    let p2 = mask_from_rows(&["##", "#."]);
    let e2 = EpisodeResult {
        class_id: 1,
        counts: Counts::of(&g2, &p2).unwrap(),
    };
    let e3 = EpisodeResult {
        class_id: 2,
        counts: Counts::of(&g2, &g2).unwrap(),
    };
    let (per_class, miou) = mean_iou(&[e1, e2, e3]);
    check("class 1 pooled", per_class[&1], 5.0 / 10.0);
    check("class 2", per_class[&2], 1.0);
    check("meanIoU", miou, (0.5 + 1.0) / 2.0);
    // FB-IoU pools counts over all episodes: fg (3+2+2)/(7+3+2), bg (9+1+2)/(13+2+2)
    let want_fb = (7.0 / 12.0 + 12.0 / 17.0) / 2.0;
    check("FB-IoU", fb_iou(&[e1, e2, e3]), want_fb);
    fails
}
