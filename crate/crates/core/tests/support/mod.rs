//! Helpers shared by the oracle tests and the acceptance suite.
#![allow(dead_code)]

use aspnn::autodiff::{Activation, DenseNet, Tape};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain nested-loop evaluation of a dense net, independent of ndarray.
pub fn scalar_forward(net: &DenseNet, input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    for layer in net.layers() {
        let mut y = vec![0.0; layer.out_dim()];
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = layer.bias[r];
            for (c, xc) in x.iter().enumerate() {
                acc += layer.weight[[r, c]] * xc;
            }
            *out = acc;
        }
        match layer.activation {
            Activation::Tanh => y.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Identity => {}
            Activation::Softmax => {
                let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = y.iter().map(|v| (v - m).exp()).sum();
                y.iter_mut().for_each(|v| *v = (*v - m).exp() / s);
            }
        }
        x = y;
    }
    x
}

pub fn random_net(rng: &mut ChaCha8Rng) -> DenseNet {
    let depth = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(1..=8)];
    for _ in 0..depth {
        sizes.push(rng.random_range(1..=8));
    }
    let output = match rng.random_range(0..3) {
        0 => Activation::Identity,
        1 => Activation::Tanh,
        _ if *sizes.last().unwrap() > 1 => Activation::Softmax,
        _ => Activation::Identity,
    };
    let mut net = DenseNet::glorot(&sizes, Activation::Tanh, output, rng);
    for layer in net.layers_mut() {
        layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    net
}

/// Loss used by the finite-difference check: Σ out² + mean(out ∘ c).
fn loss_value(net: &DenseNet, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
    let out = net.forward_batch(x).unwrap();
    out.iter().map(|v| v * v).sum::<f64>() + (&out * c).mean().unwrap()
}

pub fn max_relative_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = random_net(&mut rng);
    let rows = rng.random_range(1..=4);
    let x = Array2::from_shape_fn((rows, net.input_dim()), |_| rng.random_range(-1.5..1.5));
    let c = Array2::from_shape_fn((rows, net.output_dim()), |_| rng.random_range(-2.0..2.0));

    let mut tape = Tape::new();
    let input = tape.constant(x.clone());
    let (out, binding) = net.record(&mut tape, input).unwrap();
    let sq = tape.sum_squares(out);
    let cv = tape.constant(c.clone());
    let prod = tape.mul(out, cv);
    let m = tape.mean(prod);
    let loss = tape.add(sq, m);
    let grads = tape.backward(loss, &Array2::ones((1, 1))).unwrap();
    let analytic = net.collect_grads(&binding, &grads);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (t, g_t) in analytic.iter().enumerate() {
        for (i, &a) in g_t.iter().enumerate() {
            let orig = net.params_mut()[t][i];
            net.params_mut()[t][i] = orig + h;
            let up = loss_value(&net, &x, &c);
            net.params_mut()[t][i] = orig - h;
            let down = loss_value(&net, &x, &c);
            net.params_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

