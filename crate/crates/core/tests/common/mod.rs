#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylekernel::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-scale, scale]`.
pub fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..=scale))
}

pub fn uniform_f32(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..=scale))
}

/// Naive `[M, K]·[K, N]` product.
pub fn matmul_loops(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Six-nested-loop cross-correlation over `[H, W, Cin]` with `[Cout, Cin, kh, kw]` weights.
#[allow(clippy::too_many_arguments)]
pub fn conv_loops(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.data()[(iy as usize * wd + ix as usize) * cin + ci]
                                * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    Tensor::new([ho, wo, cout], out).unwrap()
}

/// Applies the `k×k` outer-product kernel `f1 ⊗ f2` stored at each output
/// position to its zero-padded neighbourhood, then adds the bias.
pub fn outer_product_dynamic_conv(
    x: &Tensor<f64>,
    f1: &Tensor<f64>,
    f2: &Tensor<f64>,
    bias: &Tensor<f64>,
) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = f1.shape()[3];
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let pos = (i * w + j) * c + ch;
                let mut acc = bias.data()[pos];
                for a in 0..k {
                    for bb in 0..k {
                        let kernel = f1.data()[pos * k + a] * f2.data()[pos * k + bb];
                        let ii = i as isize + a as isize - r;
                        let jj = j as isize + bb as isize - r;
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                            continue;
                        }
                        acc += kernel * x.data()[(ii as usize * w + jj as usize) * c + ch];
                    }
                }
                out[pos] = acc;
            }
        }
    }
    Tensor::new([h, w, c], out).unwrap()
}

/// `Σ x ⊙ w` for fixed pseudo-random weights, so that the gradient of a
/// normalized output is not identically zero.
pub fn weighted_sum<'t>(
    tape: &'t stylekernel::tensor::Tape<f64>,
    x: stylekernel::tensor::Var<'t, f64>,
    seed: u64,
) -> stylekernel::Result<stylekernel::tensor::Var<'t, f64>> {
    let w = uniform(&x.shape(), 1.0, &mut rng(seed ^ 0x5eed));
    Ok(x.mul(tape.constant(w))?.sum())
}

/// Worst relative error between the tape's parameter gradients and central
/// differences over up to `coords` random entries of each named parameter.
pub fn param_grad_error<M, F>(model: &M, f: F, coords: usize, seed: u64) -> f64
where
    M: stylekernel::nn::Parameters<f64> + Clone,
    F: for<'t> Fn(
        &M,
        &stylekernel::nn::ParamScope<'t, f64>,
    ) -> stylekernel::Result<stylekernel::tensor::Var<'t, f64>>,
{
    param_grad_error_except(model, f, coords, seed, "")
}

/// [`param_grad_error`] skipping parameters whose name starts with `skip`
/// (an empty prefix skips nothing).
pub fn param_grad_error_except<M, F>(model: &M, f: F, coords: usize, seed: u64, skip: &str) -> f64
where
    M: stylekernel::nn::Parameters<f64> + Clone,
    F: for<'t> Fn(
        &M,
        &stylekernel::nn::ParamScope<'t, f64>,
    ) -> stylekernel::Result<stylekernel::tensor::Var<'t, f64>>,
{
    use rand::seq::index::sample;
    use stylekernel::nn::ParamScope;
    use stylekernel::tensor::Tape;

    let analytic = {
        let tape = Tape::new();
        let scope = ParamScope::trainable(&tape);
        let root = f(model, &scope).unwrap();
        scope.gradients(&tape.backward(root).unwrap())
    };
    let eval = |m: &M| {
        let tape = Tape::new();
        let scope = ParamScope::frozen(&tape);
        f(m, &scope).unwrap().value().item()
    };
    let mut shapes = Vec::new();
    model.visit(&mut |name, t| shapes.push((name.to_owned(), t.len())));
    let mut r = rng(seed);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, len) in shapes {
        let Some(grad) = analytic.get(&name) else {
            continue;
        };
        if !skip.is_empty() && name.starts_with(skip) {
            continue;
        }
        for idx in sample(&mut r, len, coords.min(len)).into_vec() {
            let nudge = |delta: f64| {
                let mut m = model.clone();
                m.visit_mut(&mut |n, t| {
                    if n == name {
                        t.data_mut()[idx] += delta;
                    }
                });
                eval(&m)
            };
            let numeric = (nudge(eps) - nudge(-eps)) / (2.0 * eps);
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}

/// Replaces every bias with small random values. Zero-initialized biases put
/// pre-activations exactly on the ReLU kink wherever the input patch is zero,
/// where central differences see half the slope.
pub fn jitter_biases<M: stylekernel::nn::Parameters<f64>>(model: &mut M, seed: u64) {
    let mut r = rng(seed ^ 0xb1a5);
    model.visit_mut(&mut |name, t| {
        if name.ends_with(".bias") {
            *t = uniform(t.shape(), 0.1, &mut r);
        }
    });
}
