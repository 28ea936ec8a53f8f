//! Checks the tape gradient of a small conv -> relu -> pool network against
//! central finite differences and prints the worst relative error per input.

use fewseg::autograd::Graph;
use fewseg::ops::ConvGeometry;
use fewseg::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;

fn forward(x: &Tensor, w: &Tensor, b: &Tensor) -> fewseg::Result<(Graph, [fewseg::autograd::Var; 4])> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.variable(x.clone()), g.variable(w.clone()), g.variable(b.clone()));
    let h = g.conv2d(xv, wv, Some(bv), ConvGeometry::same(3, 2))?;
    let h = g.relu(h);
    let p = g.global_avg_pool(h)?;
    let s = g.reshape(p, &[4, 1, 1])?;
    let y = g.softmax_channels(s)?;
    Ok((g, [xv, wv, bv, y]))
}

fn main() -> fewseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let inputs = [rand_t(&[2, 6, 6]), rand_t(&[4, 2, 3, 3]), rand_t(&[4])];
    // loss = first softmax output
    let loss_of = |t: &[Tensor; 3]| -> fewseg::Result<f64> {
        let (g, v) = forward(&t[0], &t[1], &t[2])?;
        Ok(g.value(v[3]).data()[0])
    };
    let (g, v) = forward(&inputs[0], &inputs[1], &inputs[2])?;
    let mut seed = vec![0.0; 4];
    seed[0] = 1.0;
    let grads = g.backward_with(v[3], seed);

    for (i, name) in ["input", "weight", "bias"].iter().enumerate() {
        let analytic = grads.wrt(v[i]).expect("variable");
        let mut worst: f64 = 0.0;
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * EPS);
            let rel = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        println!("{name:<7} {:>3} entries  worst relative error {worst:.2e}", inputs[i].len());
    }
    Ok(())
}
