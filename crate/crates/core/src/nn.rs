//! Small differentiable building blocks on top of `candle_core`.
//!
//! Every parameter lives in a plain `Tensor` field. Modules expose their
//! parameters through [`Params::collect_params`], which is the single source
//! of names for checkpoints, freezing and the optimizer.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::fused;

pub type NamedParamsMut<'a> = Vec<(String, &'a mut Tensor)>;

pub trait Params {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>);

    fn named_params(&mut self) -> NamedParamsMut<'_> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded parameter initializer. Candle's CPU RNG is not seedable, so all
/// random initial values are drawn here.
pub struct Init {
    rng: ChaCha8Rng,
    pub device: Device,
    pub dtype: DType,
}

impl Init {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
            dtype,
        }
    }

    fn from_values(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.from_values(values, shape)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.from_values(values, shape)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &self.device)?)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(shape, self.dtype, &self.device)?)
    }
}

/// Low-rank update `scale * B A` added in parallel to a frozen projection.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: init.uniform(&[out_dim, in_dim], bound)?,
            bias: init.uniform(&[out_dim], bound)?,
            lora: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Attach a rank-`rank` adapter: A ~ N(0, 1/rank), B = 0.
    pub fn attach_lora(&mut self, init: &mut Init, rank: usize, alpha: f64) -> Result<()> {
        let a = init.normal(&[rank, self.in_dim()], 1.0 / rank as f64)?;
        let b = init.zeros(&[self.out_dim(), rank])?;
        self.lora = Some(LoraAdapter {
            a,
            b,
            scale: alpha / rank as f64,
        });
        Ok(())
    }

    /// Applies to the last dimension; leading dimensions are flattened into
    /// a single matrix product.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let in_dim = dims[dims.len() - 1];
        let rows = x.elem_count() / in_dim.max(1);
        let x2 = x.reshape((rows, in_dim))?;
        let mut y = if self.weight.track_op() || self.bias.track_op() {
            x2.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?
        } else {
            let (w, b) = (self.weight.clone(), self.bias.clone());
            let w_adj = self.weight.clone();
            constant_affine(
                &x2,
                move |x| x.matmul(&w.t()?)?.broadcast_add(&b),
                move |g| g.matmul(&w_adj),
            )?
        };
        if let Some(l) = &self.lora {
            let delta = x2.matmul(&l.a.t()?)?.matmul(&l.b.t()?)?.affine(l.scale, 0.0)?;
            y = (y + delta)?;
        }
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().expect("non-scalar input") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

impl Params for Linear {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
        if let Some(l) = &mut self.lora {
            out.push((join(prefix, "lora_a"), &mut l.a));
            out.push((join(prefix, "lora_b"), &mut l.b));
        }
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &Init, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.ones(&[dim])?,
            bias: init.zeros(&[dim])?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        fused::norm(x, x.rank() - 1, &self.weight, &self.bias, self.eps)
    }
}

impl Params for LayerNorm {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Layer normalization over the channel axis of a `(B, C, H, W)` map.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(init: &Init, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: init.ones(&[channels])?,
            bias: init.zeros(&[channels])?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        fused::norm(x, 1, &self.weight, &self.bias, self.eps)
    }
}

impl Params for LayerNorm2d {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Stack of linear layers with GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(init: &mut Init, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(init, w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = fused::gelu(&h)?;
            }
        }
        Ok(h)
    }
}

impl Params for Mlp {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.collect_params(&join(prefix, &format!("layers.{i}")), out);
        }
    }
}

pub use fused::{sigmoid, softmax_last_dim};

/// Multi-head attention with an optional internal downsampling of the
/// embedding dimension, as used by two-way token/image transformers.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    num_heads: usize,
}

impl Attention {
    pub fn new(
        init: &mut Init,
        dim: usize,
        num_heads: usize,
        downsample_rate: usize,
    ) -> Result<Self> {
        let internal = dim / downsample_rate;
        assert!(
            internal % num_heads == 0,
            "num_heads must divide the internal dimension"
        );
        Ok(Self {
            q_proj: Linear::new(init, dim, internal)?,
            k_proj: Linear::new(init, dim, internal)?,
            v_proj: Linear::new(init, dim, internal)?,
            out_proj: Linear::new(init, internal, dim)?,
            num_heads,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.num_heads, c / self.num_heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Attention probabilities `(B, heads, Nq, Nk)`.
    pub fn weights(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let q = self.split_heads(&self.q_proj.forward(q)?)?;
        let k = self.split_heads(&self.k_proj.forward(k)?)?;
        let head_dim = q.dims()[3];
        let logits = q
            .matmul(&k.t()?.contiguous()?)?
            .affine(1.0 / (head_dim as f64).sqrt(), 0.0)?;
        softmax_last_dim(&logits)
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let attn = self.weights(q, k)?;
        let v = self.split_heads(&self.v_proj.forward(v)?)?;
        let out = attn.matmul(&v)?;
        let (b, h, n, d) = out.dims4()?;
        let out = out.transpose(1, 2)?.reshape((b, n, h * d))?;
        self.out_proj.forward(&out)
    }
}

impl Params for Attention {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.q_proj.collect_params(&join(prefix, "q_proj"), out);
        self.k_proj.collect_params(&join(prefix, "k_proj"), out);
        self.v_proj.collect_params(&join(prefix, "v_proj"), out);
        self.out_proj.collect_params(&join(prefix, "out_proj"), out);
    }
}

/// `(B, C, H, W)` → `(B, (H/p)(W/p), C·p·p)` non-overlapping patches.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (gh, gw) = (h / p, w / p);
    Ok(x.reshape(&[b, c, gh, p, gw, p][..])?
        .permute(&[0, 2, 4, 1, 3, 5][..])?
        .contiguous()?
        .reshape((b, gh * gw, c * p * p))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(x: &Tensor, channels: usize, gh: usize, gw: usize, p: usize) -> Result<Tensor> {
    let b = x.dims()[0];
    Ok(x.reshape(&[b, gh, gw, channels, p, p][..])?
        .permute(&[0, 3, 1, 4, 2, 5][..])?
        .contiguous()?
        .reshape((b, channels, gh * p, gw * p))?)
}

/// Convolution whose kernel size equals its stride.
#[derive(Clone, Debug)]
pub struct PatchConv {
    pub proj: Linear,
    patch: usize,
}

impl PatchConv {
    pub fn new(init: &mut Init, in_ch: usize, out_ch: usize, patch: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(init, in_ch * patch * patch, out_ch)?,
            patch,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let (gh, gw) = (h / self.patch, w / self.patch);
        let y = self.proj.forward(&patchify(x, self.patch)?)?;
        let c = y.dims()[2];
        Ok(y.reshape((b, gh, gw, c))?.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

impl Params for PatchConv {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.proj.collect_params(prefix, out);
    }
}

/// Transposed convolution whose kernel size equals its stride.
#[derive(Clone, Debug)]
pub struct PatchConvTranspose {
    pub proj: Linear,
    out_ch: usize,
    patch: usize,
}

impl PatchConvTranspose {
    pub fn new(init: &mut Init, in_ch: usize, out_ch: usize, patch: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(init, in_ch, out_ch * patch * patch)?,
            out_ch,
            patch,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.reshape((b, c, h * w))?.transpose(1, 2)?;
        let y = self.proj.forward(&tokens)?;
        unpatchify(&y, self.out_ch, h, w, self.patch)
    }
}

impl Params for PatchConvTranspose {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.proj.collect_params(prefix, out);
    }
}

/// Row-stochastic bilinear interpolation matrix (`out × in`), half-pixel
/// aligned like the usual `align_corners = false` convention.
pub fn interp_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - frac;
        m[i * in_len + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of `(B, C, H, W)` to `(B, C, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(interp_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(interp_matrix(out_w, w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let (ry_adj, rx_adj) = (ry.clone(), rx.clone());
    constant_affine(
        x,
        move |x| ry.broadcast_matmul(&x.broadcast_matmul(&rx.t()?)?),
        move |g| ry_adj.t()?.broadcast_matmul(&g.broadcast_matmul(&rx_adj)?),
    )
}

type TensorMap = Box<dyn Fn(&Tensor) -> candle_core::Result<Tensor> + Send + Sync>;

/// Affine map of a single input whose other operands are constants. Only the
/// input receives a gradient, computed by the given adjoint.
struct ConstantAffine {
    forward: TensorMap,
    adjoint: TensorMap,
}

fn constant_affine(
    x: &Tensor,
    forward: impl Fn(&Tensor) -> candle_core::Result<Tensor> + Send + Sync + 'static,
    adjoint: impl Fn(&Tensor) -> candle_core::Result<Tensor> + Send + Sync + 'static,
) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(ConstantAffine {
        forward: Box::new(forward),
        adjoint: Box::new(adjoint),
    })?)
}

impl CustomOp1 for ConstantAffine {
    fn name(&self) -> &'static str {
        "constant-affine"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("constant-affine expects a contiguous input");
        };
        let x = match storage {
            CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], layout.shape(), &Device::Cpu)?,
            CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], layout.shape(), &Device::Cpu)?,
            _ => candle_core::bail!("constant-affine supports f32 and f64 only"),
        };
        let y = (self.forward)(&x)?;
        let shape = y.shape().clone();
        let flat = y.flatten_all()?;
        let out = match flat.dtype() {
            DType::F32 => CpuStorage::F32(flat.to_vec1()?),
            DType::F64 => CpuStorage::F64(flat.to_vec1()?),
            dt => candle_core::bail!("constant-affine does not support {dt:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some((self.adjoint)(grad)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_round_trip() {
        let x = Tensor::arange(0f32, 2.0 * 3.0 * 8.0 * 8.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 8, 8))
            .unwrap();
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.dims(), &[2, 4, 48]);
        let back = unpatchify(&p, 3, 2, 2, 4).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn patch_conv_matches_strided_conv() {
        let mut init = Init::new(3, DType::F64);
        let conv = PatchConv::new(&mut init, 2, 5, 2).unwrap();
        let x = init.normal(&[1, 2, 6, 6], 1.0).unwrap();
        let ours = conv.forward(&x).unwrap();
        let kernel = conv.proj.weight.reshape((5, 2, 2, 2)).unwrap();
        let reference = x
            .conv2d(&kernel, 0, 2, 1, 1)
            .unwrap()
            .broadcast_add(&conv.proj.bias.reshape((1, 5, 1, 1)).unwrap())
            .unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn interp_rows_sum_to_one() {
        let m = interp_matrix(256, 64);
        for row in m.chunks(64) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut init = Init::new(0, DType::F64);
        let x = init.normal(&[3, 7], 4.0).unwrap();
        let s = softmax_last_dim(&x).unwrap().sum(1).unwrap();
        for v in s.to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_delta_is_zero_at_init() {
        let mut init = Init::new(1, DType::F32);
        let mut lin = Linear::new(&mut init, 8, 8).unwrap();
        let x = init.normal(&[2, 3, 8], 1.0).unwrap();
        let before = lin.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        lin.attach_lora(&mut init, 4, 8.0).unwrap();
        let after = lin.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let same = before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }
}
