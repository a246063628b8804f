//! Fused CPU kernels with hand-written backward passes.
//!
//! Kernels run in the storage dtype (f32 or f64). Gradients are only
//! produced for tracked inputs.

use candle_core::backend::BackendStorage;
use candle_core::cpu::erf::{erf_f32, erf_f64};
use candle_core::{bail, CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

use crate::error::Result;

type CResult<T> = candle_core::Result<T>;

trait Real: Float + WithDType {
    fn erf(self) -> Self;
}

impl Real for f32 {
    fn erf(self) -> Self {
        erf_f32(self)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        erf_f64(self)
    }
}

/// Runs a generic kernel on the matching float type.
macro_rules! dispatch {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            other => bail!("fused kernels support f32 and f64 only, got {other:?}"),
        }
    };
}

fn c<T: Real>(v: f64) -> T {
    T::from_f64(v)
}

fn slice<'a, T: Real>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let Some((start, end)) = l.contiguous_offsets() else {
        bail!("fused kernels expect contiguous inputs")
    };
    Ok(&s.as_slice::<T>()?[start..end])
}

fn values<T: Real>(t: &Tensor) -> CResult<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn tensor_like<T: Real>(v: Vec<T>, like: &Tensor) -> CResult<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())
}

/// Applies `f` elementwise to a contiguous storage.
fn map_storage<T: Real>(s: &CpuStorage, l: &Layout, f: impl Fn(T) -> T) -> CResult<(CpuStorage, Shape)> {
    let y: Vec<T> = slice::<T>(s, l)?.iter().map(|&x| f(x)).collect();
    Ok((T::to_cpu_storage_owned(y), l.shape().clone()))
}

/// `g * f(a)` elementwise, shaped like `a`.
fn map_grad<T: Real>(a: &Tensor, grad: &Tensor, f: impl Fn(T) -> T) -> CResult<Tensor> {
    let mut g = values::<T>(grad)?;
    g.iter_mut().zip(values::<T>(a)?).for_each(|(g, a)| *g = *g * f(a));
    tensor_like(g, a)
}

fn sigmoid_of<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_cdf<T: Real>(x: T) -> T {
    c::<T>(0.5) * (T::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    gelu_cdf(x) + x * c(0.398_942_280_401_432_7) * (c::<T>(-0.5) * x * x).exp()
}

struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "fused-sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
            map_storage(s, l, sigmoid_of::<T>)
        }
        dispatch!(s.dtype(), run(s, l))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        fn run<T: Real>(res: &Tensor, grad: &Tensor) -> CResult<Tensor> {
            map_grad(res, grad, |y: T| y * (T::one() - y))
        }
        Ok(Some(dispatch!(res.dtype(), run(res, grad))?))
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Sigmoid)?)
}

struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu-erf"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
            map_storage(s, l, |x: T| x * gelu_cdf(x))
        }
        dispatch!(s.dtype(), run(s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        fn run<T: Real>(arg: &Tensor, grad: &Tensor) -> CResult<Tensor> {
            map_grad(arg, grad, gelu_grad::<T>)
        }
        Ok(Some(dispatch!(arg.dtype(), run(arg, grad))?))
    }
}

/// Exact (erf) GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

struct SoftmaxLast;

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
            let mut v = slice::<T>(s, l)?.to_vec();
            let n = l.dims().last().copied().unwrap_or(1).max(1);
            for row in v.chunks_mut(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), Float::max);
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum = sum + *x;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|x| *x = *x * inv);
            }
            Ok((T::to_cpu_storage_owned(v), l.shape().clone()))
        }
        dispatch!(s.dtype(), run(s, l))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        fn run<T: Real>(res: &Tensor, grad: &Tensor) -> CResult<Tensor> {
            let n = res.dims().last().copied().unwrap_or(1).max(1);
            let y = values::<T>(res)?;
            let mut g = values::<T>(grad)?;
            for (gr, yr) in g.chunks_mut(n).zip(y.chunks(n)) {
                let dot = gr.iter().zip(yr).fold(T::zero(), |acc, (&g, &y)| acc + g * y);
                gr.iter_mut().zip(yr).for_each(|(g, &y)| *g = y * (*g - dot));
            }
            tensor_like(g, res)
        }
        Ok(Some(dispatch!(res.dtype(), run(res, grad))?))
    }
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

/// Normalization over the middle axis of an `(outer, d, inner)` view with a
/// per-channel affine transform.
struct Norm {
    outer: usize,
    d: usize,
    inner: usize,
    eps: f64,
}

impl Norm {
    /// Per-position mean and reciprocal standard deviation of one
    /// `(d, inner)` block.
    fn stats<T: Real>(&self, block: &[T]) -> (Vec<T>, Vec<T>) {
        let inner = self.inner;
        let d = c::<T>(self.d as f64);
        let mut mean = vec![T::zero(); inner];
        for row in block.chunks_exact(inner) {
            mean.iter_mut().zip(row).for_each(|(m, &x)| *m = *m + x);
        }
        mean.iter_mut().for_each(|m| *m = *m / d);
        let mut var = vec![T::zero(); inner];
        for row in block.chunks_exact(inner) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v = *v + (x - m) * (x - m);
            }
        }
        let eps = c::<T>(self.eps);
        let rstd = var.into_iter().map(|v| T::one() / (v / d + eps).sqrt()).collect();
        (mean, rstd)
    }

    fn forward<T: Real>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let block = self.d * self.inner;
        let mut y = vec![T::zero(); x.len()];
        for (xb, yb) in x.chunks_exact(block).zip(y.chunks_exact_mut(block)) {
            let (mean, rstd) = self.stats(xb);
            for ((xr, yr), (&w, &b)) in xb.chunks_exact(self.inner).zip(yb.chunks_exact_mut(self.inner)).zip(w.iter().zip(b)) {
                for (((y, &x), &m), &r) in yr.iter_mut().zip(xr).zip(&mean).zip(&rstd) {
                    *y = (x - m) * r * w + b;
                }
            }
        }
        y
    }

    fn backward<T: Real>(&self, x: &[T], w: &[T], g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (d, inner) = (self.d, self.inner);
        let block = d * inner;
        let inv_d = T::one() / c::<T>(d as f64);
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); d];
        let mut db = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); block];
        for ((xb, gb), dxb) in x.chunks_exact(block).zip(g.chunks_exact(block)).zip(dx.chunks_exact_mut(block)) {
            let (mean, rstd) = self.stats(xb);
            let mut sum_g = vec![T::zero(); inner];
            let mut sum_gx = vec![T::zero(); inner];
            for (k, ((xr, gr), hr)) in xb.chunks_exact(inner).zip(gb.chunks_exact(inner)).zip(xhat.chunks_exact_mut(inner)).enumerate() {
                let (mut acc_w, mut acc_b) = (T::zero(), T::zero());
                for (i, ((&x, &g), h)) in xr.iter().zip(gr).zip(hr.iter_mut()).enumerate() {
                    *h = (x - mean[i]) * rstd[i];
                    let gw = g * w[k];
                    sum_g[i] = sum_g[i] + gw;
                    sum_gx[i] = sum_gx[i] + gw * *h;
                    acc_w = acc_w + g * *h;
                    acc_b = acc_b + g;
                }
                dw[k] = dw[k] + acc_w;
                db[k] = db[k] + acc_b;
            }
            for (k, ((gr, hr), dr)) in gb.chunks_exact(inner).zip(xhat.chunks_exact(inner)).zip(dxb.chunks_exact_mut(inner)).enumerate() {
                for (i, ((&g, &h), dx)) in gr.iter().zip(hr).zip(dr.iter_mut()).enumerate() {
                    *dx = rstd[i] * (g * w[k] - (sum_g[i] + h * sum_gx[i]) * inv_d);
                }
            }
        }
        (dx, dw, db)
    }
}

impl CustomOp3 for Norm {
    fn name(&self) -> &'static str {
        "fused-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(n: &Norm, s: [(&CpuStorage, &Layout); 3]) -> CResult<(CpuStorage, Shape)> {
            let y = n.forward(slice::<T>(s[0].0, s[0].1)?, slice::<T>(s[1].0, s[1].1)?, slice::<T>(s[2].0, s[2].1)?);
            Ok((T::to_cpu_storage_owned(y), s[0].1.shape().clone()))
        }
        dispatch!(s1.dtype(), run(self, [(s1, l1), (s2, l2), (s3, l3)]))
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        arg3: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        type Grads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);
        fn run<T: Real>(n: &Norm, args: [&Tensor; 3], grad: &Tensor) -> CResult<Grads> {
            let (dx, dw, db) = n.backward(&values::<T>(args[0])?, &values::<T>(args[1])?, &values::<T>(grad)?);
            let keep = |v: Vec<T>, a: &Tensor| -> CResult<Option<Tensor>> {
                if a.track_op() {
                    Ok(Some(tensor_like(v, a)?))
                } else {
                    Ok(None)
                }
            };
            Ok((keep(dx, args[0])?, keep(dw, args[1])?, keep(db, args[2])?))
        }
        dispatch!(arg1.dtype(), run(self, [arg1, arg2, arg3], grad))
    }
}

/// Normalizes `x` over axis `axis` and applies `weight * x̂ + bias`, both of
/// length `x.dims()[axis]`.
pub fn norm(x: &Tensor, axis: usize, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let dims = x.dims();
    let d = dims[axis];
    let op = Norm {
        outer: dims[..axis].iter().product(),
        d,
        inner: dims[axis + 1..].iter().product(),
        eps,
    };
    debug_assert_eq!(op.outer * op.d * op.inner, x.elem_count());
    Ok(x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, op)?)
}

/// `x^gamma`, exact repeated multiplication for small whole exponents.
fn pow<T: Real>(x: T, gamma: f64) -> T {
    if gamma.fract() == 0.0 && gamma.abs() <= 16.0 {
        x.powi(gamma as i32)
    } else {
        x.powf(c(gamma))
    }
}

/// Elementwise focal loss of probabilities against fixed targets. The
/// probability is clamped to `[eps, 1 - eps]`; the gradient is zero outside
/// that range and halved on its boundary.
struct Focal {
    target: Vec<f64>,
    gamma: f64,
    alpha: f64,
    eps: f64,
}

impl Focal {
    fn forward<T: Real>(&self, p: &[T]) -> Vec<T> {
        let (alpha, eps) = (c::<T>(self.alpha), c::<T>(self.eps));
        p.iter()
            .zip(&self.target)
            .map(|(&p, &y)| {
                let y = c::<T>(y);
                let p = Float::min(Float::max(p, eps), T::one() - eps);
                let q = T::one() - p;
                -(y * pow(q, self.gamma) * p.ln() + alpha * (T::one() - y) * pow(p, self.gamma) * q.ln())
            })
            .collect()
    }

    fn backward<T: Real>(&self, p: &[T], g: &mut [T]) {
        let (gamma, alpha) = (c::<T>(self.gamma), c::<T>(self.alpha));
        let (lo, hi) = (c::<T>(self.eps), T::one() - c::<T>(self.eps));
        for ((g, &p), &y) in g.iter_mut().zip(p).zip(&self.target) {
            let pass = if p > lo && p < hi {
                T::one()
            } else if p == lo || p == hi {
                c(0.5)
            } else {
                *g = T::zero();
                continue;
            };
            let y = c::<T>(y);
            let q = T::one() - p;
            let (qm, pm) = (pow(q, self.gamma - 1.0), pow(p, self.gamma - 1.0));
            let fg = -y * (qm * q / p - gamma * qm * p.ln());
            let bg = -alpha * (T::one() - y) * (gamma * pm * q.ln() - pm * p / q);
            *g = pass * *g * (fg + bg);
        }
    }
}

impl CustomOp1 for Focal {
    fn name(&self) -> &'static str {
        "fused-focal"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(f: &Focal, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
            let p = slice::<T>(s, l)?;
            if p.len() != f.target.len() {
                bail!("focal target has {} elements, prediction {}", f.target.len(), p.len());
            }
            Ok((T::to_cpu_storage_owned(f.forward(p)), l.shape().clone()))
        }
        dispatch!(s.dtype(), run(self, s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        fn run<T: Real>(f: &Focal, arg: &Tensor, grad: &Tensor) -> CResult<Tensor> {
            let mut g = values::<T>(grad)?;
            f.backward(&values::<T>(arg)?, &mut g);
            tensor_like(g, arg)
        }
        Ok(Some(dispatch!(arg.dtype(), run(self, arg, grad))?))
    }
}

pub fn focal(pred_prob: &Tensor, target: &Tensor, gamma: f64, alpha: f64, eps: f64) -> Result<Tensor> {
    let op = Focal {
        target: target.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?,
        gamma,
        alpha,
        eps,
    };
    Ok(pred_prob.contiguous()?.apply_op1(op)?)
}
