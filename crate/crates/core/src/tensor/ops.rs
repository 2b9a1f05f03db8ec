//! Differentiable operations on [`Var`].

use std::cell::Cell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::tape::BackwardFn;
use super::{Element, Tensor, Var};
use crate::error::{Error, Result};

fn same_tape<T: Element>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(
        std::ptr::eq(a.tape(), b.tape()),
        "operands recorded on different tapes"
    );
}

/// `[rows, cols]` view of a tensor of rank ≥ 1, splitting off the last axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, lead)) => (lead.iter().product(), c),
        None => (1, 1),
    }
}

fn unary<'t, T: Element>(
    x: Var<'t, T>,
    op: &'static str,
    f: impl Fn(T) -> T,
    // derivative expressed through input and output values
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let xv = x.value();
    let out = xv.map(f);
    let yv = Rc::new(out.clone());
    let backward: BackwardFn<T> = Box::new(move |g, _| {
        let data = g
            .data()
            .iter()
            .zip(xv.data().iter().zip(yv.data()))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(Tensor::new(g.shape().to_vec(), data).expect("shape"))]
    });
    x.tape().push(op, out, &[x], backward)
}

fn broadcast_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn binary<'t, T: Element>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
    // partials (∂f/∂a, ∂f/∂b) at (a, b)
    df: impl Fn(T, T) -> (T, T) + 'static,
) -> Result<Var<'t, T>> {
    same_tape(&a, &b);
    let av = a.value();
    let bv = b.value();
    let shape = broadcast_shape(op, &av, &bv)?;
    let n: usize = shape.iter().product();
    let a_step = usize::from(av.len() != 1);
    let b_step = usize::from(bv.len() != 1);
    let data: Vec<T> = (0..n)
        .map(|i| f(av.data()[i * a_step], bv.data()[i * b_step]))
        .collect();
    let out = Tensor::new(shape, data)?;
    let backward: BackwardFn<T> = Box::new(move |g, needs| {
        let mut ga = vec![T::zero(); av.len()];
        let mut gb = vec![T::zero(); bv.len()];
        let a_scalar = av.len() == 1;
        let b_scalar = bv.len() == 1;
        for (i, &gi) in g.data().iter().enumerate() {
            let x = av.data()[if a_scalar { 0 } else { i }];
            let y = bv.data()[if b_scalar { 0 } else { i }];
            let (da, db) = df(x, y);
            if needs[0] {
                ga[if a_scalar { 0 } else { i }] += gi * da;
            }
            if needs[1] {
                gb[if b_scalar { 0 } else { i }] += gi * db;
            }
        }
        vec![
            needs[0].then(|| Tensor::new(av.shape().to_vec(), ga).expect("shape")),
            needs[1].then(|| Tensor::new(bv.shape().to_vec(), gb).expect("shape")),
        ]
    });
    Ok(a.tape().push(op, out, &[a, b], backward))
}

/// Counts scalar multiply-accumulates performed by the dynamic convolution in
/// the interior region, where the whole window lies inside the grid.
#[derive(Debug, Default)]
pub struct MacCounter {
    interior_macs: Cell<u64>,
    interior_outputs: Cell<u64>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn interior_macs(&self) -> u64 {
        self.interior_macs.get()
    }

    /// Number of interior output scalars the MACs were spent on.
    pub fn interior_outputs(&self) -> u64 {
        self.interior_outputs.get()
    }
}

/// Extents of a per-position separable dynamic convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DynGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
}

impl DynGeom {
    fn radius(&self) -> isize {
        (self.k / 2) as isize
    }

    fn input_at(&self, i: isize, j: isize, c: usize) -> Option<usize> {
        (i >= 0 && j >= 0 && i < self.h as isize && j < self.w as isize)
            .then(|| (i as usize * self.w + j as usize) * self.c + c)
    }

    fn is_interior(&self, i: usize, j: usize) -> bool {
        let r = self.k / 2;
        i >= r && j >= r && i + r < self.h && j + r < self.w
    }
}

/// Two-pass separable convolution with filters gathered at the output
/// position: for output `(i, j, c)`, a vertical pass with `f1[i, j, c]` over
/// each of the `k` columns of the window, then a horizontal pass with
/// `f2[i, j, c]` over the `k` intermediate values, then the bias.
pub(crate) fn dynamic_conv_forward<T: Element>(
    g: &DynGeom,
    x: &[T],
    f1: &[T],
    f2: &[T],
    bias: &[T],
    counter: Option<&MacCounter>,
) -> Vec<T> {
    let (k, r) = (g.k, g.radius());
    let mut out = vec![T::zero(); g.h * g.w * g.c];
    let mut column = vec![T::zero(); k];
    let mut macs: u64 = 0;
    let mut outputs: u64 = 0;
    for i in 0..g.h {
        for j in 0..g.w {
            let interior = counter.is_some() && g.is_interior(i, j);
            for c in 0..g.c {
                let pos = (i * g.w + j) * g.c + c;
                let taps1 = &f1[pos * k..(pos + 1) * k];
                let taps2 = &f2[pos * k..(pos + 1) * k];
                let mut local_macs = 0u64;
                for (b, slot) in column.iter_mut().enumerate() {
                    let jj = j as isize + b as isize - r;
                    let mut t = T::zero();
                    for (a, &fa) in taps1.iter().enumerate() {
                        let ii = i as isize + a as isize - r;
                        if let Some(idx) = g.input_at(ii, jj, c) {
                            t += fa * x[idx];
                            local_macs += 1;
                        }
                    }
                    *slot = t;
                }
                let mut y = bias[pos];
                local_macs += 1;
                for (&fb, &t) in taps2.iter().zip(&column) {
                    y += fb * t;
                    local_macs += 1;
                }
                out[pos] = y;
                if interior {
                    macs += local_macs;
                    outputs += 1;
                }
            }
        }
    }
    if let Some(counter) = counter {
        counter.interior_macs.set(counter.interior_macs.get() + macs);
        counter.interior_outputs.set(counter.interior_outputs.get() + outputs);
    }
    out
}

#[allow(clippy::type_complexity)]
fn dynamic_conv_backward<T: Element>(
    g: &DynGeom,
    x: &[T],
    f1: &[T],
    f2: &[T],
    grad: &[T],
    needs: &[bool],
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let (k, r) = (g.k, g.radius());
    let mut dx = vec![T::zero(); if needs[0] { x.len() } else { 0 }];
    let mut df1 = vec![T::zero(); if needs[1] { f1.len() } else { 0 }];
    let mut df2 = vec![T::zero(); if needs[2] { f2.len() } else { 0 }];
    let db = if needs[3] { grad.to_vec() } else { Vec::new() };
    for i in 0..g.h {
        for j in 0..g.w {
            for c in 0..g.c {
                let pos = (i * g.w + j) * g.c + c;
                let gy = grad[pos];
                if gy == T::zero() {
                    continue;
                }
                let taps1 = &f1[pos * k..(pos + 1) * k];
                let taps2 = &f2[pos * k..(pos + 1) * k];
                for b in 0..k {
                    let jj = j as isize + b as isize - r;
                    let mut t = T::zero();
                    for a in 0..k {
                        let ii = i as isize + a as isize - r;
                        let Some(idx) = g.input_at(ii, jj, c) else {
                            continue;
                        };
                        t += taps1[a] * x[idx];
                        if needs[0] {
                            dx[idx] += gy * taps1[a] * taps2[b];
                        }
                        if needs[1] {
                            df1[pos * k + a] += gy * taps2[b] * x[idx];
                        }
                    }
                    if needs[2] {
                        df2[pos * k + b] += gy * t;
                    }
                }
            }
        }
    }
    (dx, df1, df2, db)
}

impl<'t, T: Element> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(self, other, "add", |a, b| a + b, |_, _| (T::one(), T::one()))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(self, other, "sub", |a, b| a - b, |_, _| (T::one(), -T::one()))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(self, other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(
            self,
            other,
            "div",
            |a, b| a / b,
            |a, b| (T::one() / b, -a / (b * b)),
        )
    }

    /// Element-wise maximum; ties send the gradient to `self`.
    pub fn maximum(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(
            self,
            other,
            "maximum",
            |a, b| if a >= b { a } else { b },
            |a, b| {
                if a >= b {
                    (T::one(), T::zero())
                } else {
                    (T::zero(), T::one())
                }
            },
        )
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        unary(self, "add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(self, c: T) -> Var<'t, T> {
        unary(self, "mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.mul_scalar(-T::one())
    }

    pub fn square(self) -> Var<'t, T> {
        unary(self, "square", |x| x * x, |x, _| x + x)
    }

    pub fn relu(self) -> Var<'t, T> {
        unary(
            self,
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        unary(
            self,
            "leaky_relu",
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'t, T> {
        unary(self, "tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(self) -> Var<'t, T> {
        unary(self, "exp", |x| x.exp(), |_, y| y)
    }

    /// 1 for strictly positive input, 0 otherwise. The gradient is zero
    /// everywhere.
    pub fn sign(self) -> Var<'t, T> {
        unary(
            self,
            "sign",
            |x| if x > T::zero() { T::one() } else { T::zero() },
            |_, _| T::zero(),
        )
    }

    pub fn sum(self) -> Var<'t, T> {
        let xv = self.value();
        let out = Tensor::scalar(xv.sum());
        let shape = xv.shape().to_vec();
        let backward: BackwardFn<T> =
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]);
        self.tape().push("sum", out, &[self], backward)
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().mul_scalar(T::one() / T::from_count(n))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let xv = self.value();
        let in_shape = xv.shape().to_vec();
        let out = (*xv).clone().reshape(shape)?;
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            vec![Some(g.clone().reshape(in_shape.clone()).expect("shape"))]
        });
        Ok(self.tape().push("reshape", out, &[self], backward))
    }

    /// `[M, K] · [K, N] → [M, N]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let av = self.value();
        let bv = other.value();
        let (m, k, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (a, b) => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
        let mut data = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, &mut data, T::zero());
        let out = Tensor::new([m, n], data)?;
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                kernels::gemm(m, n, k, g.data(), false, bv.data(), true, &mut d, T::zero());
                Tensor::new([m, k], d).expect("shape")
            });
            let db = needs[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                kernels::gemm(k, m, n, av.data(), true, g.data(), false, &mut d, T::zero());
                Tensor::new([k, n], d).expect("shape")
            });
            vec![da, db]
        });
        Ok(self.tape().push("matmul", out, &[self, other], backward))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let &[m, n] = xv.shape() else {
            return Err(Error::shape(
                "transpose",
                format!("expected rank 2, got {:?}", xv.shape()),
            ));
        };
        let out = transpose_data(xv.data(), m, n);
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            vec![Some(
                Tensor::new([m, n], transpose_data(g.data(), n, m)).expect("shape"),
            )]
        });
        Ok(self
            .tape()
            .push("transpose", Tensor::new([n, m], out)?, &[self], backward))
    }

    /// Row-wise softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_rows(self) -> Var<'t, T> {
        let xv = self.value();
        let (rows, cols) = rows_cols(xv.shape());
        let mut y = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let src = &xv.data()[r * cols..(r + 1) * cols];
            let dst = &mut y[r * cols..(r + 1) * cols];
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), y).expect("shape");
        let yv = Rc::new(out.clone());
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let gy = &g.data()[r * cols..(r + 1) * cols];
                let y = &yv.data()[r * cols..(r + 1) * cols];
                let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for ((d, &gi), &yi) in dx[r * cols..(r + 1) * cols].iter_mut().zip(gy).zip(y) {
                    *d = yi * (gi - dot);
                }
            }
            vec![Some(Tensor::new(g.shape().to_vec(), dx).expect("shape"))]
        });
        self.tape().push("softmax_rows", out, &[self], backward)
    }

    /// Cross-correlation of an `[H, W, Cin]` map with `[Cout, Cin, kh, kw]`
    /// weights and a `[Cout]` bias.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        same_tape(&self, &weight);
        same_tape(&self, &bias);
        let xv = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let (h, w, cin) = xv.dims3()?;
        let &[cout, wcin, kh, kw] = wv.shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [Cout, Cin, kh, kw], got {:?}", wv.shape()),
            ));
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        if bv.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![cout],
                rhs: bv.shape().to_vec(),
            });
        }
        let geom = ConvGeom::new(h, w, cin, cout, kh, kw, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!(
                    "nonpositive output extent for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
                ),
            )
        })?;
        let data = kernels::conv2d_forward(&geom, xv.data(), wv.data(), bv.data());
        let out = Tensor::new([geom.ho, geom.wo, cout], data)?;
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let (dx, dw, db) =
                kernels::conv2d_backward(&geom, xv.data(), wv.data(), g.data(), needs[0], needs[1]);
            vec![
                dx.map(|d| Tensor::new(xv.shape().to_vec(), d).expect("shape")),
                dw.map(|d| Tensor::new(wv.shape().to_vec(), d).expect("shape")),
                needs[2].then(|| Tensor::new([cout], db).expect("shape")),
            ]
        });
        Ok(self
            .tape()
            .push("conv2d", out, &[self, weight, bias], backward))
    }

    /// Nearest-neighbour 2× upsampling of an `[H, W, C]` map.
    pub fn upsample_nearest2x(self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (h, w, c) = xv.dims3()?;
        let mut y = vec![T::zero(); 4 * xv.len()];
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let src = ((oy / 2) * w + ox / 2) * c;
                let dst = (oy * 2 * w + ox) * c;
                y[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
            }
        }
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = vec![T::zero(); h * w * c];
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let dst = ((oy / 2) * w + ox / 2) * c;
                    let src = (oy * 2 * w + ox) * c;
                    for (d, &s) in dx[dst..dst + c].iter_mut().zip(&g.data()[src..src + c]) {
                        *d += s;
                    }
                }
            }
            vec![Some(Tensor::new([h, w, c], dx).expect("shape"))]
        });
        Ok(self.tape().push(
            "upsample_nearest2x",
            Tensor::new([2 * h, 2 * w, c], y)?,
            &[self],
            backward,
        ))
    }

    /// 2×2 stride-2 max pooling; odd trailing rows/columns are dropped.
    pub fn max_pool2x2(self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (h, w, c) = xv.dims3()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("max_pool2x2", format!("input {h}x{w} too small")));
        }
        let mut y = vec![T::zero(); ho * wo * c];
        let mut arg = vec![0usize; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if xv.data()[idx] > best {
                            best = xv.data()[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (oy * wo + ox) * c + ch;
                    y[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = vec![T::zero(); h * w * c];
            for (&src, &gi) in arg.iter().zip(g.data()) {
                dx[src] += gi;
            }
            vec![Some(Tensor::new([h, w, c], dx).expect("shape"))]
        });
        Ok(self
            .tape()
            .push("max_pool2x2", Tensor::new([ho, wo, c], y)?, &[self], backward))
    }

    /// 2×2 stride-2 average pooling; odd trailing rows/columns are dropped.
    pub fn avg_pool2x2(self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (h, w, c) = xv.dims3()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("avg_pool2x2", format!("input {h}x{w} too small")));
        }
        let quarter = T::lit(0.25);
        let mut y = vec![T::zero(); ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut s = T::zero();
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        s += xv.data()[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                    }
                    y[(oy * wo + ox) * c + ch] = s * quarter;
                }
            }
        }
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = vec![T::zero(); h * w * c];
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let gi = g.data()[(oy * wo + ox) * c + ch] * quarter;
                        for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            dx[((2 * oy + dy) * w + 2 * ox + ddx) * c + ch] += gi;
                        }
                    }
                }
            }
            vec![Some(Tensor::new([h, w, c], dx).expect("shape"))]
        });
        Ok(self
            .tape()
            .push("avg_pool2x2", Tensor::new([ho, wo, c], y)?, &[self], backward))
    }

    /// Per-channel mean over all positions, `[.., C] → [C]`.
    pub fn channel_mean(self) -> Var<'t, T> {
        let xv = self.value();
        let (n, c) = rows_cols(xv.shape());
        let shape = xv.shape().to_vec();
        let out = Tensor::from_vec(channel_means(xv.data(), n, c));
        let inv = T::one() / T::from_count(n.max(1));
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = Vec::with_capacity(n * c);
            for _ in 0..n {
                dx.extend(g.data().iter().map(|&v| v * inv));
            }
            vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
        });
        self.tape().push("channel_mean", out, &[self], backward)
    }

    /// Per-channel population standard deviation floored at `eps`.
    pub fn channel_std(self, eps: T) -> Var<'t, T> {
        let xv = self.value();
        let (n, c) = rows_cols(xv.shape());
        let mu = channel_means(xv.data(), n, c);
        let raw = channel_raw_std(xv.data(), &mu, n, c);
        let sigma: Vec<T> = raw.iter().map(|&s| s.max(eps)).collect();
        let out = Tensor::from_vec(sigma.clone());
        let shape = xv.shape().to_vec();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let inv_n = T::one() / T::from_count(n.max(1));
            let mut dx = vec![T::zero(); n * c];
            for p in 0..n {
                for ch in 0..c {
                    if raw[ch] > eps {
                        dx[p * c + ch] =
                            g.data()[ch] * (xv.data()[p * c + ch] - mu[ch]) * inv_n / sigma[ch];
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
        });
        self.tape().push("channel_std", out, &[self], backward)
    }

    /// `(mean, std)` per channel, the std floored at `eps`.
    pub fn instance_norm_stats(self, eps: T) -> (Var<'t, T>, Var<'t, T>) {
        (self.channel_mean(), self.channel_std(eps))
    }

    /// Per-channel `(x − μ) / σ` with σ floored at `eps`; no affine terms.
    pub fn instance_normalize(self, eps: T) -> Var<'t, T> {
        let xv = self.value();
        let (n, c) = rows_cols(xv.shape());
        let mu = channel_means(xv.data(), n, c);
        let raw = channel_raw_std(xv.data(), &mu, n, c);
        let sigma: Vec<T> = raw.iter().map(|&s| s.max(eps)).collect();
        let mut y = vec![T::zero(); n * c];
        for p in 0..n {
            for ch in 0..c {
                y[p * c + ch] = (xv.data()[p * c + ch] - mu[ch]) / sigma[ch];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), y).expect("shape");
        let yv = Rc::new(out.clone());
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let inv_n = T::one() / T::from_count(n.max(1));
            let mut mean_g = vec![T::zero(); c];
            let mut mean_gy = vec![T::zero(); c];
            for p in 0..n {
                for ch in 0..c {
                    let gi = g.data()[p * c + ch];
                    mean_g[ch] += gi;
                    mean_gy[ch] += gi * yv.data()[p * c + ch];
                }
            }
            for ch in 0..c {
                mean_g[ch] *= inv_n;
                mean_gy[ch] *= inv_n;
            }
            let mut dx = vec![T::zero(); n * c];
            for p in 0..n {
                for ch in 0..c {
                    let i = p * c + ch;
                    let centered = g.data()[i] - mean_g[ch];
                    dx[i] = if raw[ch] > eps {
                        (centered - yv.data()[i] * mean_gy[ch]) / sigma[ch]
                    } else {
                        centered / sigma[ch]
                    };
                }
            }
            vec![Some(Tensor::new(g.shape().to_vec(), dx).expect("shape"))]
        });
        self.tape().push("instance_normalize", out, &[self], backward)
    }

    /// Divides each row (last axis) by `max(‖row‖₂, floor)`.
    pub fn l2_normalize_rows(self, floor: T) -> Var<'t, T> {
        let xv = self.value();
        let (rows, cols) = rows_cols(xv.shape());
        let norms: Vec<T> = (0..rows)
            .map(|r| {
                xv.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|&v| v * v)
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let mut y = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let d = norms[r].max(floor);
            for col in 0..cols {
                y[r * cols + col] = xv.data()[r * cols + col] / d;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), y).expect("shape");
        let yv = Rc::new(out.clone());
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let yr = &yv.data()[r * cols..(r + 1) * cols];
                let dst = &mut dx[r * cols..(r + 1) * cols];
                if norms[r] > floor {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = (gi - yi * dot) / norms[r];
                    }
                } else {
                    for (d, &gi) in dst.iter_mut().zip(gr) {
                        *d = gi / floor;
                    }
                }
            }
            vec![Some(Tensor::new(g.shape().to_vec(), dx).expect("shape"))]
        });
        self.tape().push("l2_normalize_rows", out, &[self], backward)
    }

    /// Mean over the last axis, `[M, N] → [M]`.
    pub fn row_mean(self) -> Var<'t, T> {
        let xv = self.value();
        let (rows, cols) = rows_cols(xv.shape());
        let inv = T::one() / T::from_count(cols.max(1));
        let data: Vec<T> = (0..rows)
            .map(|r| xv.data()[r * cols..(r + 1) * cols].iter().copied().sum::<T>() * inv)
            .collect();
        let shape = xv.shape().to_vec();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = Vec::with_capacity(rows * cols);
            for &gi in g.data() {
                dx.extend(std::iter::repeat_n(gi * inv, cols));
            }
            vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
        });
        self.tape()
            .push("row_mean", Tensor::from_vec(data), &[self], backward)
    }

    /// `[M] → [M, n]`, copying each entry across its row.
    pub fn repeat_cols(self, n: usize) -> Var<'t, T> {
        let xv = self.value();
        let m = xv.len();
        let mut data = Vec::with_capacity(m * n);
        for &v in xv.data() {
            data.extend(std::iter::repeat_n(v, n));
        }
        let shape = xv.shape().to_vec();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let d: Vec<T> = (0..m)
                .map(|r| g.data()[r * n..(r + 1) * n].iter().copied().sum())
                .collect();
            vec![Some(Tensor::new(shape.clone(), d).expect("shape"))]
        });
        self.tape().push(
            "repeat_cols",
            Tensor::new([m, n], data).expect("shape"),
            &[self],
            backward,
        )
    }

    /// Minimum over the last axis, `[M, N] → [M]`; the gradient goes to the
    /// first minimizing entry.
    pub fn min_rows(self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (rows, cols) = rows_cols(xv.shape());
        if cols == 0 {
            return Err(Error::shape("min_rows", "empty rows"));
        }
        let mut arg = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let (best, val) = row
                .iter()
                .enumerate()
                .fold((0, row[0]), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            arg.push(r * cols + best);
            data.push(val);
        }
        let shape = xv.shape().to_vec();
        let n = xv.len();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = vec![T::zero(); n];
            for (&i, &gi) in arg.iter().zip(g.data()) {
                dx[i] += gi;
            }
            vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
        });
        Ok(self
            .tape()
            .push("min_rows", Tensor::from_vec(data), &[self], backward))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (rows, cols) = rows_cols(xv.shape());
        if start + len > cols {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} exceeds {cols} channels", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = len;
        let in_shape = xv.shape().to_vec();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                dx[r * cols + start..r * cols + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::new(in_shape.clone(), dx).expect("shape"))]
        });
        Ok(self
            .tape()
            .push("slice_channels", Tensor::new(shape, data)?, &[self], backward))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        for (p, v) in parts.iter().zip(&values) {
            same_tape(first, p);
            if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &wd) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let in_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let mut offset = 0;
            let mut out = Vec::with_capacity(widths.len());
            for ((&wd, shape), &need) in widths.iter().zip(&in_shapes).zip(needs) {
                if need {
                    let mut d = Vec::with_capacity(rows * wd);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + wd]);
                    }
                    out.push(Some(Tensor::new(shape.clone(), d).expect("shape")));
                } else {
                    out.push(None);
                }
                offset += wd;
            }
            out
        });
        Ok(first
            .tape()
            .push("concat_channels", Tensor::new(shape, data)?, parts, backward))
    }

    /// Reorders the last axis: output channel `i` is input channel `index[i]`.
    pub fn gather_channels(self, index: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (rows, cols) = rows_cols(xv.shape());
        if index.len() != cols || index.iter().any(|&i| i >= cols) {
            return Err(Error::shape(
                "gather_channels",
                format!("index of length {} invalid for {cols} channels", index.len()),
            ));
        }
        let index = index.to_vec();
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            data.extend(index.iter().map(|&i| row[i]));
        }
        let shape = xv.shape().to_vec();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                for (o, &i) in index.iter().enumerate() {
                    dx[r * cols + i] += g.data()[r * cols + o];
                }
            }
            vec![Some(Tensor::new(g.shape().to_vec(), dx).expect("shape"))]
        });
        Ok(self
            .tape()
            .push("gather_channels", Tensor::new(shape, data)?, &[self], backward))
    }

    /// Per-position depthwise separable convolution of an `[H, W, C]` map.
    ///
    /// `f1` and `f2` are `[H, W, C, k]` vertical and horizontal taps and
    /// `bias` is `[H, W, C, 1]`. Output `(i, j, c)` depends only on the taps
    /// stored at `(i, j, c)` and the `k×k` neighbourhood of the input, which
    /// is zero-padded at the borders.
    pub fn dynamic_separable_conv(
        self,
        f1: Var<'t, T>,
        f2: Var<'t, T>,
        bias: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.dynamic_separable_conv_counted(f1, f2, bias, None)
    }

    pub fn dynamic_separable_conv_counted(
        self,
        f1: Var<'t, T>,
        f2: Var<'t, T>,
        bias: Var<'t, T>,
        counter: Option<&MacCounter>,
    ) -> Result<Var<'t, T>> {
        same_tape(&self, &f1);
        same_tape(&self, &f2);
        same_tape(&self, &bias);
        let xv = self.value();
        let (h, w, c) = xv.dims3()?;
        let f1v = f1.value();
        let f2v = f2.value();
        let bv = bias.value();
        let k = match f1v.shape() {
            &[fh, fw, fc, k] if (fh, fw, fc) == (h, w, c) => k,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "dynamic_separable_conv f1",
                    lhs: vec![h, w, c],
                    rhs: s.to_vec(),
                })
            }
        };
        if k == 0 || k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "dynamic kernel size must be odd and positive, got {k}"
            )));
        }
        if f2v.shape() != f1v.shape() {
            return Err(Error::ShapeMismatch {
                op: "dynamic_separable_conv f2",
                lhs: f1v.shape().to_vec(),
                rhs: f2v.shape().to_vec(),
            });
        }
        if bv.shape() != [h, w, c, 1] {
            return Err(Error::ShapeMismatch {
                op: "dynamic_separable_conv bias",
                lhs: vec![h, w, c, 1],
                rhs: bv.shape().to_vec(),
            });
        }
        let geom = DynGeom { h, w, c, k };
        let data = dynamic_conv_forward(&geom, xv.data(), f1v.data(), f2v.data(), bv.data(), counter);
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let (dx, df1, df2, db) =
                dynamic_conv_backward(&geom, xv.data(), f1v.data(), f2v.data(), g.data(), needs);
            vec![
                needs[0].then(|| Tensor::new(xv.shape().to_vec(), dx).expect("shape")),
                needs[1].then(|| Tensor::new(f1v.shape().to_vec(), df1).expect("shape")),
                needs[2].then(|| Tensor::new(f2v.shape().to_vec(), df2).expect("shape")),
                needs[3].then(|| Tensor::new(bv.shape().to_vec(), db).expect("shape")),
            ]
        });
        Ok(self.tape().push(
            "dynamic_separable_conv",
            Tensor::new([h, w, c], data)?,
            &[self, f1, f2, bias],
            backward,
        ))
    }
}

fn transpose_data<T: Element>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn channel_means<T: Element>(x: &[T], n: usize, c: usize) -> Vec<T> {
    let mut mu = vec![T::zero(); c];
    for p in 0..n {
        for (m, &v) in mu.iter_mut().zip(&x[p * c..(p + 1) * c]) {
            *m += v;
        }
    }
    let inv = T::one() / T::from_count(n.max(1));
    mu.iter_mut().for_each(|m| *m *= inv);
    mu
}

fn channel_raw_std<T: Element>(x: &[T], mu: &[T], n: usize, c: usize) -> Vec<T> {
    let mut var = vec![T::zero(); c];
    for p in 0..n {
        for ch in 0..c {
            let d = x[p * c + ch] - mu[ch];
            var[ch] += d * d;
        }
    }
    let inv = T::one() / T::from_count(n.max(1));
    var.into_iter().map(|v| (v * inv).sqrt()).collect()
}
