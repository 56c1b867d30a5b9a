#![allow(dead_code)]

use mtl_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

/// Independent finite-difference oracle: central differences of a scalar
/// function of several tensors, perturbing one element at a time.
pub fn central_difference(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    h: f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for which in 0..inputs.len() {
        let mut grads = Vec::with_capacity(inputs[which].numel());
        for e in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[e] -= h;
            grads.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out.push(grads);
    }
    out
}

/// Max over all elements of |autodiff - fd| / (|fd| + 1e-8).
pub fn max_rel_err(auto: &[Vec<f64>], fd: &[Vec<f64>]) -> f64 {
    auto.iter()
        .flatten()
        .zip(fd.iter().flatten())
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Builds `build` on a fresh tape with every input tracked, runs backward, and
/// compares against central differences.
pub fn grad_check(
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    inputs: &[Tensor],
    h: f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let auto: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    let f = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x)).collect();
        let l = build(&mut t, &vs);
        t.value(l).item().unwrap()
    };
    let fd = central_difference(&f, inputs, h);
    max_rel_err(&auto, &fd)
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let mut r = rng(seed ^ 0x9e37);
    let w = rand_tensor(&mut r, &shape, 1.0);
    let wv = tape.constant(&w);
    let p = tape.mul(v, wv).unwrap();
    tape.sum_all(p).unwrap()
}

/// Naive quadruple-loop cross-correlation, written independently of the
/// im2col path.
pub fn naive_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [b, c, h, w] = *input.shape() else { panic!() };
    let [k, _, kh, kw] = *weight.shape() else { panic!() };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; b * k * oh * ow];
    for bi in 0..b {
        for f in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[f];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((f * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((bi * k + f) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, k, oh, ow], out).unwrap()
}
