//! Differentiable primitives. Each forward computes a fresh [`Tensor`] and
//! registers its vector-Jacobian product with the tape.

use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{axis_split, Tensor};

/// Per-group mean and (biased) variance produced by a normalization op.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.expect_same_shape(b, op)
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf())
}

fn gelu_deriv<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() / T::lit((2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

impl<'t, T: Scalar> Var<'t, T> {
    // ----- elementwise binary -------------------------------------------

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value().add(&other.value())?;
        Ok(self.tape.record(out, &[self, other], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value().sub(&other.value())?;
        Ok(self.tape.record(out, &[self, other], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.scale(-T::one()))]
        }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, "mul", |x, y| x * y)?;
        Ok(self.tape.record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, "mul", |g, y| g * y).expect("shape")),
                need[1].then(|| g.zip_map(&a, "mul", |g, x| g * x).expect("shape")),
            ]
        }))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().scale(c);
        self.tape
            .record(out, &[self], move |g, _| vec![Some(g.scale(c))])
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x + c);
        self.tape.record(out, &[self], |g, _| vec![Some(g.clone())])
    }

    // ----- elementwise unary --------------------------------------------

    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let out = (*y).clone();
        self.tape.record(out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("shape"))]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu_fwd, |x, _| gelu_deriv(x))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(|x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| T::lit(2.0) * x)
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(self, floor: T) -> Var<'t, T> {
        self.unary(
            move |x| x.max(floor),
            move |x, _| if x > floor { T::one() } else { T::zero() },
        )
    }

    // ----- linear algebra -----------------------------------------------

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        Ok(self.tape.record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.matmul(&b.transpose().expect("2d")).expect("shape")),
                need[1].then(|| a.transpose().expect("2d").matmul(g).expect("shape")),
            ]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose()?;
        Ok(self
            .tape
            .record(out, &[self], |g, _| vec![Some(g.transpose().expect("2d"))]))
    }

    /// `x[C×T] + b[C]`, bias broadcast along columns.
    pub fn add_col_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let b = bias.value();
        let (r, c) = x.dims2()?;
        if b.shape() != [r] {
            return Err(shape_err("add_col_bias", x.shape(), b.shape()));
        }
        let mut out = (*x).clone();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let bi = b.data()[i];
            row.iter_mut().for_each(|v| *v += bi);
        }
        Ok(self.tape.record(out, &[self, bias], move |g, need| {
            let gb = need[1].then(|| {
                Tensor::from_vec(g.data().chunks(c).map(|row| row.iter().copied().sum()).collect())
            });
            vec![need[0].then(|| g.clone()), gb]
        }))
    }

    /// `weight · x + bias` with `weight[out×in]`, `x[in×T]`, `bias[out]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = weight.matmul(self)?;
        match bias {
            Some(b) => y.add_col_bias(b),
            None => Ok(y),
        }
    }

    // ----- shape ---------------------------------------------------------

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(old.clone()).expect("shape"))]
        }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                let chunk = len * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape.clone(), data)?;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape.record(out, parts, move |g, need| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let row = total * inner;
            for o in 0..outer {
                let mut offset = o * row;
                for (gi, &len) in grads.iter_mut().zip(&lens) {
                    let chunk = len * inner;
                    gi.extend_from_slice(&g.data()[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .zip(need)
                .map(|((d, s), &n)| n.then(|| Tensor::new(s.clone(), d).expect("shape")))
                .collect()
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        if len == 0 || start + len > n {
            return Err(shape_err("narrow", &shape, &[axis, start, len]));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            let gd = gx.data_mut();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                let src = o * len * inner;
                gd[base..base + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        Ok(self
            .tape
            .record(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))]))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = T::from_usize_lossy(self.value().numel());
        Ok(self.sum()?.scale(T::one() / n))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let inv = T::one() / T::from_usize_lossy(n);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += x.data()[(o * n + i) * inner + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(reduced_shape(&shape, axis), out)?;
        Ok(self.tape.record(out, &[self], move |g, _| {
            let gx = Tensor::from_fn(&shape, |idx| {
                let j = idx % inner;
                let o = idx / (n * inner);
                g.data()[o * inner + j] * inv
            });
            vec![Some(gx)]
        }))
    }

    /// Population variance along `axis`; the axis is removed from the shape.
    pub fn var_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let nf = T::from_usize_lossy(n);
        let mut mean = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    mean[o * inner + j] += x.data()[(o * n + i) * inner + j];
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    let d = x.data()[(o * n + i) * inner + j] - mean[o * inner + j];
                    var[o * inner + j] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let out = Tensor::new(reduced_shape(&shape, axis), var)?;
        Ok(self.tape.record(out, &[self], move |g, _| {
            let two_over_n = T::lit(2.0) / nf;
            let gx = Tensor::from_fn(&shape, |idx| {
                let j = idx % inner;
                let o = idx / (n * inner);
                let k = o * inner + j;
                g.data()[k] * two_over_n * (x.data()[idx] - mean[k])
            });
            vec![Some(gx)]
        }))
    }

    // ----- softmax family ------------------------------------------------

    /// Max-shifted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let mut y = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| x.data()[at(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..n {
                    let e = (x.data()[at(i)] - max).exp();
                    y[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    y[at(i)] /= total;
                }
            }
        }
        let y = Rc::new(Tensor::new(shape.clone(), y)?);
        let out = (*y).clone();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); y.numel()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + j;
                    let dot: T = (0..n).map(|i| g.data()[at(i)] * y.data()[at(i)]).sum();
                    for i in 0..n {
                        gx[at(i)] = y.data()[at(i)] * (g.data()[at(i)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
        }))
    }

    /// Mean cross-entropy of `logits[classes × batch]` against one label per
    /// column.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, b) = x.dims2()?;
        if labels.len() != b {
            return Err(shape_err("cross_entropy labels", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let mut probs = vec![T::zero(); c * b];
        let mut loss = T::zero();
        for (col, &label) in labels.iter().enumerate() {
            let max = (0..c).map(|r| x.at(r, col)).fold(T::neg_infinity(), T::max);
            let total: T = (0..c).map(|r| (x.at(r, col) - max).exp()).sum();
            for r in 0..c {
                probs[r * b + col] = (x.at(r, col) - max).exp() / total;
            }
            loss += total.ln() + max - x.at(label, col);
        }
        let bf = T::from_usize_lossy(b);
        let out = Tensor::scalar(loss / bf);
        let labels = labels.to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let scale = g.item() / bf;
            let mut gx = probs.clone();
            for (col, &label) in labels.iter().enumerate() {
                gx[label * b + col] -= T::one();
            }
            gx.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::new(vec![c, b], gx).expect("shape"))]
        }))
    }

    /// Additive angular margin logits from cosines `[classes × batch]`.
    ///
    /// Target entries become `scale·cos(θ + margin)`, others `scale·cos θ`.
    /// When `θ + margin` would pass π the target uses `cos θ − margin·sin(margin)`
    /// instead, which keeps the logit monotone in θ.
    pub fn aam_logits(self, labels: &[usize], margin: T, scale: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, b) = x.dims2()?;
        if labels.len() != b {
            return Err(shape_err("aam_logits labels", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let (cos_m, sin_m) = (margin.cos(), margin.sin());
        let threshold = (T::lit(std::f64::consts::PI) - margin).cos();
        let fallback_shift = margin.sin() * margin;
        let mut out = x.scale(scale);
        // d(logit)/d(cos) for the target entries.
        let mut target_slope = vec![T::zero(); b];
        for (col, &label) in labels.iter().enumerate() {
            let cos = x.at(label, col).min(T::one()).max(-T::one());
            let (phi, slope) = if cos > threshold {
                let sin = (T::one() - cos * cos).max(T::zero()).sqrt();
                let dsin = if sin > T::lit(1e-12) {
                    cos / sin * sin_m
                } else {
                    T::zero()
                };
                (cos * cos_m - sin * sin_m, cos_m + dsin)
            } else {
                (cos - fallback_shift, T::one())
            };
            out.data_mut()[label * b + col] = scale * phi;
            target_slope[col] = slope;
        }
        let labels = labels.to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut gx = g.scale(scale);
            for (col, &label) in labels.iter().enumerate() {
                let k = label * b + col;
                gx.data_mut()[k] = g.data()[k] * scale * target_slope[col];
            }
            vec![Some(gx)]
        }))
    }

    /// Divides each slice along `axis` by its L2 norm (floored at 1e-12).
    pub fn l2_normalize(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let floor = T::lit(1e-12);
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let sq: T = (0..n)
                    .map(|i| {
                        let v = x.data()[(o * n + i) * inner + j];
                        v * v
                    })
                    .sum();
                norms[o * inner + j] = sq.sqrt().max(floor);
            }
        }
        let y = Rc::new(Tensor::from_fn(&shape, |idx| {
            let j = idx % inner;
            let o = idx / (n * inner);
            x.data()[idx] / norms[o * inner + j]
        }));
        let out = (*y).clone();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); y.numel()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + j;
                    let norm = norms[o * inner + j];
                    let dot: T = (0..n).map(|i| g.data()[at(i)] * y.data()[at(i)]).sum();
                    for i in 0..n {
                        gx[at(i)] = (g.data()[at(i)] - y.data()[at(i)] * dot) / norm;
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
        }))
    }

    // ----- normalization -------------------------------------------------

    /// Normalizes each column of `x[C×T]` over its `C` channels, then applies
    /// `gamma[C]`, `beta[C]`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        Ok(normalize_affine(self, gamma, beta, eps, 0)?.0)
    }

    /// Training-mode batch norm over `x[C×N]`: each channel row is normalized
    /// with the statistics of its `N` columns. Also returns those statistics.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, NormStats<T>)> {
        normalize_affine(self, gamma, beta, eps, 1)
    }

    /// Evaluation-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, n) = x.dims2()?;
        for t in [&*gamma.value(), &*beta.value(), running_mean, running_var] {
            if t.shape() != [c] {
                return Err(shape_err("batch_norm_eval", x.shape(), t.shape()));
            }
        }
        let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.data().to_vec();
        let xhat = Rc::new(Tensor::from_fn(&[c, n], |idx| {
            let r = idx / n;
            (x.data()[idx] - mean[r]) * inv_std[r]
        }));
        let gam = gamma.value();
        let bet = beta.value();
        let out = Tensor::from_fn(&[c, n], |idx| {
            let r = idx / n;
            gam.data()[r] * xhat.data()[idx] + bet.data()[r]
        });
        Ok(self.tape.record(out, &[self, gamma, beta], move |g, need| {
            let gx = need[0].then(|| {
                Tensor::from_fn(&[c, n], |idx| {
                    let r = idx / n;
                    g.data()[idx] * gam.data()[r] * inv_std[r]
                })
            });
            let gg = need[1].then(|| {
                Tensor::from_fn(&[c], |r| (0..n).map(|j| g.data()[r * n + j] * xhat.data()[r * n + j]).sum())
            });
            let gb = need[2].then(|| Tensor::from_fn(&[c], |r| (0..n).map(|j| g.data()[r * n + j]).sum()));
            vec![gx, gg, gb]
        }))
    }

    // ----- convolution ---------------------------------------------------

    /// 1-D convolution. `x[Cin×T]`, `weight[Cout×Cin×K]`, `bias[Cout]`;
    /// output length `(T + 2·padding − K) / stride + 1` with zero padding.
    pub fn conv1d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let (cin, t_in) = x.dims2()?;
        let (cout, wcin, k) = match w.shape()[..] {
            [a, b, c] => (a, b, c),
            _ => return Err(shape_err("conv1d weight", x.shape(), w.shape())),
        };
        if wcin != cin {
            return Err(shape_err("conv1d", x.shape(), w.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        if t_in + 2 * padding < k {
            return Err(Error::InputLength {
                len: t_in,
                min: k.saturating_sub(2 * padding),
            });
        }
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        let bias_val = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [cout] {
                    return Err(shape_err("conv1d bias", w.shape(), bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        // Input index for output position `t` and tap `kk`, if inside.
        let src = move |t: usize, kk: usize| -> Option<usize> {
            let pos = (t * stride + kk) as isize - padding as isize;
            (pos >= 0 && (pos as usize) < t_in).then_some(pos as usize)
        };
        let mut out = vec![T::zero(); cout * t_out];
        for o in 0..cout {
            let b0 = bias_val.as_ref().map_or(T::zero(), |b| b.data()[o]);
            let row = &mut out[o * t_out..(o + 1) * t_out];
            row.iter_mut().for_each(|v| *v = b0);
            for c in 0..cin {
                let xr = &x.data()[c * t_in..(c + 1) * t_in];
                for kk in 0..k {
                    let wv = w.data()[(o * cin + c) * k + kk];
                    for (t, acc) in row.iter_mut().enumerate() {
                        if let Some(p) = src(t, kk) {
                            *acc += wv * xr[p];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, t_out], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.record(out, &parents, move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); cin * t_in];
                for o in 0..cout {
                    for c in 0..cin {
                        for kk in 0..k {
                            let wv = w.data()[(o * cin + c) * k + kk];
                            for t in 0..t_out {
                                if let Some(p) = src(t, kk) {
                                    gx[c * t_in + p] += wv * gd[o * t_out + t];
                                }
                            }
                        }
                    }
                }
                Tensor::new(vec![cin, t_in], gx).expect("shape")
            });
            let gw = need[1].then(|| {
                let mut gw = vec![T::zero(); cout * cin * k];
                for o in 0..cout {
                    for c in 0..cin {
                        for kk in 0..k {
                            let mut acc = T::zero();
                            for t in 0..t_out {
                                if let Some(p) = src(t, kk) {
                                    acc += gd[o * t_out + t] * x.data()[c * t_in + p];
                                }
                            }
                            gw[(o * cin + c) * k + kk] = acc;
                        }
                    }
                }
                Tensor::new(vec![cout, cin, k], gw).expect("shape")
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need[2].then(|| {
                    Tensor::from_fn(&[cout], |o| gd[o * t_out..(o + 1) * t_out].iter().copied().sum())
                }));
            }
            grads
        }))
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &e)| e)
        .collect()
}

/// Shared body of layer norm (`reduce_axis = 0`, one group per column) and
/// training-mode batch norm (`reduce_axis = 1`, one group per row). The affine
/// parameters are always indexed by row.
fn normalize_affine<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: T,
    reduce_axis: usize,
) -> Result<(Var<'t, T>, NormStats<T>)> {
    if !(eps > T::zero()) {
        return Err(Error::Config("normalization eps must be positive".into()));
    }
    let xv = x.value();
    let (r, c) = xv.dims2()?;
    let gam = gamma.value();
    let bet = beta.value();
    if gam.shape() != [r] || bet.shape() != [r] {
        return Err(shape_err("normalize affine", xv.shape(), gam.shape()));
    }
    // `group` indexes the statistic, `member` the reduced elements.
    let (groups, members) = if reduce_axis == 0 { (c, r) } else { (r, c) };
    let idx = move |group: usize, member: usize| {
        if reduce_axis == 0 {
            member * c + group
        } else {
            group * c + member
        }
    };
    let mf = T::from_usize_lossy(members);
    let mut mean = vec![T::zero(); groups];
    let mut var = vec![T::zero(); groups];
    for gi in 0..groups {
        let m: T = (0..members).map(|mi| xv.data()[idx(gi, mi)]).sum::<T>() / mf;
        let v: T = (0..members)
            .map(|mi| {
                let d = xv.data()[idx(gi, mi)] - m;
                d * d
            })
            .sum::<T>()
            / mf;
        mean[gi] = m;
        var[gi] = v;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); r * c];
    for gi in 0..groups {
        for mi in 0..members {
            let k = idx(gi, mi);
            xhat[k] = (xv.data()[k] - mean[gi]) * inv_std[gi];
        }
    }
    let out = Tensor::from_fn(&[r, c], |k| gam.data()[k / c] * xhat[k] + bet.data()[k / c]);
    let stats = NormStats {
        mean: mean.clone(),
        var: var.clone(),
    };
    let y = x.tape.record(out, &[x, gamma, beta], move |g, need| {
        let gd = g.data();
        let gx = need[0].then(|| {
            let mut gx = vec![T::zero(); r * c];
            for gi in 0..groups {
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for mi in 0..members {
                    let k = idx(gi, mi);
                    let gh = gd[k] * gam.data()[k / c];
                    m1 += gh;
                    m2 += gh * xhat[k];
                }
                m1 /= mf;
                m2 /= mf;
                for mi in 0..members {
                    let k = idx(gi, mi);
                    let gh = gd[k] * gam.data()[k / c];
                    gx[k] = inv_std[gi] * (gh - m1 - xhat[k] * m2);
                }
            }
            Tensor::new(vec![r, c], gx).expect("shape")
        });
        let gg = need[1].then(|| {
            Tensor::from_fn(&[r], |row| (0..c).map(|j| gd[row * c + j] * xhat[row * c + j]).sum())
        });
        let gb = need[2].then(|| Tensor::from_fn(&[r], |row| (0..c).map(|j| gd[row * c + j]).sum()));
        vec![gx, gg, gb]
    });
    Ok((y, stats))
}
