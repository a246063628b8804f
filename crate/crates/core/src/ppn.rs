//! Prompt predictor network.
//!
//! Per-class learnable tokens cross-attend with the positional-encoded image
//! embedding. The first two updated tokens regress a box, the remaining
//! `N - 2` become dense prompt tokens, and the updated image tokens are
//! upsampled 4× into a mask prompt.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BoxCoords, GeometryPreset, ImageEmbedding};
use crate::error::{Error, Result};
use crate::fused::gelu;
use crate::nn::{
    join, sigmoid, Attention, Init, LayerNorm, LayerNorm2d, Linear, Mlp, NamedParamsMut, Params,
    PatchConvTranspose,
};

pub const PPN_HEADS: usize = 4;
/// Lower bound on the squashed box width/height.
pub const MIN_BOX_SIDE: f64 = 2e-4;
/// Guaranteed minimum extent of a predicted box after clamping.
pub const MIN_BOX_EXTENT: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpnConfig {
    pub num_classes: usize,
    pub tokens_per_class: usize,
}

impl Default for PpnConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            tokens_per_class: 8,
        }
    }
}

impl PpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_class < 3 {
            return Err(Error::Config(format!(
                "tokens_per_class must be >= 3 (2 box tokens + at least 1 dense token), got {}",
                self.tokens_per_class
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fixed 2-D sinusoidal encoding `(L, C)`: the first half of the channels
/// encodes the row, the second half the column.
pub fn sinusoidal_grid(grid: usize, channels: usize) -> Vec<f64> {
    let half = channels / 2;
    let freqs = half / 2;
    let mut out = vec![0.0; grid * grid * channels];
    for row in 0..grid {
        for col in 0..grid {
            let base = (row * grid + col) * channels;
            for k in 0..freqs {
                let inv = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
                out[base + 2 * k] = (row as f64 * inv).sin();
                out[base + 2 * k + 1] = (row as f64 * inv).cos();
                out[base + half + 2 * k] = (col as f64 * inv).sin();
                out[base + half + 2 * k + 1] = (col as f64 * inv).cos();
            }
        }
    }
    out
}

/// Learned prompts for a batch, all tensors differentiable.
#[derive(Clone, Debug)]
pub struct PromptBundle {
    /// `(B, 4)` as `(x1, y1, x2, y2)` normalized.
    pub boxes: Tensor,
    /// `(B, N-2, C)`
    pub dense_tokens: Tensor,
    /// `(B, 1, 4g, 4g)` logits.
    pub mask_prompt: Tensor,
}

impl PromptBundle {
    pub fn box_coords(&self, index: usize) -> Result<BoxCoords> {
        let v: Vec<f64> = self.boxes.get(index)?.to_dtype(DType::F64)?.to_vec1()?;
        Ok(BoxCoords::new(v[0], v[1], v[2], v[3]))
    }
}

#[derive(Clone, Debug)]
pub struct PromptPredictor {
    pub config: PpnConfig,
    pub class_tokens: Vec<Tensor>,
    token_to_image: Attention,
    token_norm1: LayerNorm,
    token_mlp: Mlp,
    token_norm2: LayerNorm,
    image_to_token: Attention,
    image_norm1: LayerNorm,
    image_mlp: Mlp,
    image_norm2: LayerNorm,
    box_head: Mlp,
    mask_up1: PatchConvTranspose,
    mask_norm: LayerNorm2d,
    mask_up2: PatchConvTranspose,
    mask_out: Linear,
    positional: Tensor,
    channels: usize,
    grid: usize,
}

impl PromptPredictor {
    pub fn new(config: PpnConfig, geometry: &GeometryPreset, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed, dtype);
        let c = geometry.embed_channels;
        let g = geometry.embed_grid;
        let class_tokens = (0..config.num_classes)
            .map(|_| init.normal(&[config.tokens_per_class, c], 1.0))
            .collect::<Result<Vec<_>>>()?;
        let positional = Tensor::from_vec(sinusoidal_grid(g, c), (1, g * g, c), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self {
            class_tokens,
            token_to_image: Attention::new(&mut init, c, PPN_HEADS, 1)?,
            token_norm1: LayerNorm::new(&init, c)?,
            token_mlp: Mlp::new(&mut init, &[c, 2 * c, c])?,
            token_norm2: LayerNorm::new(&init, c)?,
            image_to_token: Attention::new(&mut init, c, PPN_HEADS, 1)?,
            image_norm1: LayerNorm::new(&init, c)?,
            image_mlp: Mlp::new(&mut init, &[c, 2 * c, c])?,
            image_norm2: LayerNorm::new(&init, c)?,
            box_head: Mlp::new(&mut init, &[2 * c, c, 4])?,
            mask_up1: PatchConvTranspose::new(&mut init, c, c / 4, 2)?,
            mask_norm: LayerNorm2d::new(&init, c / 4)?,
            mask_up2: PatchConvTranspose::new(&mut init, c / 4, c / 8, 2)?,
            mask_out: Linear::new(&mut init, c / 8, 1)?,
            positional,
            channels: c,
            grid: g,
            config,
        })
    }

    pub fn dtype(&self) -> DType {
        self.positional.dtype()
    }

    pub fn to_dtype(&mut self, dtype: DType) -> Result<()> {
        self.positional = self.positional.to_dtype(dtype)?;
        Ok(())
    }

    /// `(B, C, g, g)` → flattened `(B, L, C)` tokens with the fixed
    /// positional encoding added.
    pub fn add_positional_encoding(&self, embeddings: &Tensor) -> Result<Tensor> {
        let (b, c, g, w) = embeddings.dims4()?;
        if c != self.channels || g != self.grid || w != self.grid {
            return Err(Error::Input(format!(
                "embedding {:?} does not match ({}, {}, {})",
                embeddings.dims(),
                self.channels,
                self.grid,
                self.grid
            )));
        }
        let tokens = embeddings.reshape((b, c, g * w))?.transpose(1, 2)?;
        Ok(tokens.broadcast_add(&self.positional)?)
    }

    /// Single-image variant returning the `(C, g, g)` layout.
    pub fn add_positional_encoding_single(&self, embedding: &ImageEmbedding) -> Result<ImageEmbedding> {
        let t = self.add_positional_encoding(&embedding.0.unsqueeze(0)?)?;
        let g = self.grid;
        Ok(ImageEmbedding(t.squeeze(0)?.t()?.reshape((self.channels, g, g))?))
    }

    /// Cross attention tokens→image then image→tokens, each followed by a
    /// residual layer norm and a residual MLP.
    pub fn two_way_attention(&self, tokens: &Tensor, image_tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, tc) = tokens.dims3()?;
        let (_, l, ic) = image_tokens.dims3()?;
        if tc != self.channels || ic != self.channels || l != self.grid * self.grid {
            return Err(Error::Input(format!(
                "two-way attention expects (B, N, {c}) and (B, {}, {c}), got {:?} and {:?}",
                self.grid * self.grid,
                tokens.dims(),
                image_tokens.dims(),
                c = self.channels
            )));
        }
        let attn = self.token_to_image.forward(tokens, image_tokens, image_tokens)?;
        let t = self.token_norm1.forward(&(tokens + attn)?)?;
        let t = self.token_norm2.forward(&(&t + self.token_mlp.forward(&t)?)?)?;

        let attn = self.image_to_token.forward(image_tokens, &t, &t)?;
        let e = self.image_norm1.forward(&(image_tokens + attn)?)?;
        let e = self.image_norm2.forward(&(&e + self.image_mlp.forward(&e)?)?)?;
        Ok((t, e))
    }

    /// Token→image attention probabilities, exposed for inspection.
    pub fn token_attention_weights(&self, tokens: &Tensor, image_tokens: &Tensor) -> Result<Tensor> {
        self.token_to_image.weights(tokens, image_tokens)
    }

    /// Maps raw `(B, 4)` head outputs to valid boxes: `(cx, cy, w, h)` are
    /// squashed into (0, 1), corners are clamped to `[0, 1]`. Every box keeps
    /// an extent of at least [`MIN_BOX_EXTENT`] on both axes.
    pub fn boxes_from_raw(raw: &Tensor) -> Result<Tensor> {
        let s = sigmoid(raw)?;
        let cx = s.narrow(1, 0, 1)?;
        let cy = s.narrow(1, 1, 1)?;
        let w = s.narrow(1, 2, 1)?.maximum(MIN_BOX_SIDE)?;
        let h = s.narrow(1, 3, 1)?.maximum(MIN_BOX_SIDE)?;
        let x1 = (&cx - w.affine(0.5, 0.0)?)?.clamp(0.0, 1.0 - MIN_BOX_EXTENT)?;
        let y1 = (&cy - h.affine(0.5, 0.0)?)?.clamp(0.0, 1.0 - MIN_BOX_EXTENT)?;
        let x2 = (&cx + w.affine(0.5, 0.0)?)?.clamp(MIN_BOX_EXTENT, 1.0)?;
        let y2 = (&cy + h.affine(0.5, 0.0)?)?.clamp(MIN_BOX_EXTENT, 1.0)?;
        Ok(Tensor::cat(&[x1, y1, x2, y2], 1)?)
    }

    /// `(B, 2, C)` box tokens → `(B, 4)` boxes.
    pub fn box_head(&self, box_tokens: &Tensor) -> Result<Tensor> {
        let (b, n, c) = box_tokens.dims3()?;
        if n != 2 {
            return Err(Error::Input(format!("box head takes exactly 2 tokens, got {n}")));
        }
        let raw = self.box_head.forward(&box_tokens.reshape((b, 2 * c))?)?;
        Self::boxes_from_raw(&raw)
    }

    /// `(B, L, C)` image tokens → `(B, 1, 4g, 4g)` mask prompt logits.
    pub fn mask_prompt_head(&self, image_tokens: &Tensor) -> Result<Tensor> {
        let (b, l, c) = image_tokens.dims3()?;
        if l != self.grid * self.grid {
            return Err(Error::Input(format!("mask head expects {} tokens, got {l}", self.grid * self.grid)));
        }
        let grid = image_tokens.transpose(1, 2)?.reshape((b, c, self.grid, self.grid))?;
        let x = gelu(&self.mask_norm.forward(&self.mask_up1.forward(&grid)?)?)?;
        let x = gelu(&self.mask_up2.forward(&x)?)?;
        let (_, ch, h, w) = x.dims4()?;
        let tokens = x.reshape((b, ch, h * w))?.transpose(1, 2)?;
        Ok(self.mask_out.forward(&tokens)?.reshape((b, 1, h, w))?)
    }

    /// Stacked class tokens `(B, N, C)` for the queried classes.
    pub fn query_tokens(&self, class_ids: &[usize]) -> Result<Tensor> {
        let rows = class_ids
            .iter()
            .map(|&k| {
                self.class_tokens.get(k).cloned().ok_or_else(|| {
                    Error::Input(format!(
                        "unknown class id {k} (model has {} classes)",
                        self.config.num_classes
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }

    /// Runs the predictor without positional encoding; used to show the
    /// encoding is load-bearing.
    pub fn predict_without_positional(&self, embeddings: &Tensor, class_ids: &[usize]) -> Result<PromptBundle> {
        let (b, c, g, w) = embeddings.dims4()?;
        let tokens = embeddings.reshape((b, c, g * w))?.transpose(1, 2)?.contiguous()?;
        self.predict_from_tokens(&tokens, class_ids)
    }

    pub fn predict(&self, embeddings: &Tensor, class_ids: &[usize]) -> Result<PromptBundle> {
        if embeddings.dims()[0] != class_ids.len() {
            return Err(Error::Input(format!(
                "{} class ids for a batch of {}",
                class_ids.len(),
                embeddings.dims()[0]
            )));
        }
        let image_tokens = self.add_positional_encoding(embeddings)?;
        self.predict_from_tokens(&image_tokens, class_ids)
    }

    fn predict_from_tokens(&self, image_tokens: &Tensor, class_ids: &[usize]) -> Result<PromptBundle> {
        let queries = self.query_tokens(class_ids)?;
        let (tokens, image_tokens) = self.two_way_attention(&queries, image_tokens)?;
        let n = self.config.tokens_per_class;
        let boxes = self.box_head(&tokens.narrow(1, 0, 2)?)?;
        let dense_tokens = tokens.narrow(1, 2, n - 2)?;
        let mask_prompt = self.mask_prompt_head(&image_tokens)?;
        Ok(PromptBundle {
            boxes,
            dense_tokens,
            mask_prompt,
        })
    }

    pub fn predict_prompts(&self, embedding: &ImageEmbedding, class_id: usize) -> Result<PromptBundle> {
        self.predict(&embedding.0.unsqueeze(0)?, &[class_id])
    }
}

impl Params for PromptPredictor {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        for (k, t) in self.class_tokens.iter_mut().enumerate() {
            out.push((join(prefix, &format!("class_tokens.{k}")), t));
        }
        self.token_to_image.collect_params(&join(prefix, "token_to_image"), out);
        self.token_norm1.collect_params(&join(prefix, "token_norm1"), out);
        self.token_mlp.collect_params(&join(prefix, "token_mlp"), out);
        self.token_norm2.collect_params(&join(prefix, "token_norm2"), out);
        self.image_to_token.collect_params(&join(prefix, "image_to_token"), out);
        self.image_norm1.collect_params(&join(prefix, "image_norm1"), out);
        self.image_mlp.collect_params(&join(prefix, "image_mlp"), out);
        self.image_norm2.collect_params(&join(prefix, "image_norm2"), out);
        self.box_head.collect_params(&join(prefix, "box_head"), out);
        self.mask_up1.collect_params(&join(prefix, "mask_up1"), out);
        self.mask_norm.collect_params(&join(prefix, "mask_norm"), out);
        self.mask_up2.collect_params(&join(prefix, "mask_up2"), out);
        self.mask_out.collect_params(&join(prefix, "mask_out"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desk_ppn(n: usize, classes: usize) -> PromptPredictor {
        let cfg = PpnConfig {
            num_classes: classes,
            tokens_per_class: n,
        };
        PromptPredictor::new(cfg, &GeometryPreset::desk(), 5, DType::F32).unwrap()
    }

    fn random_embedding(seed: u64) -> Tensor {
        let mut init = Init::new(seed, DType::F32);
        init.normal(&[1, 128, 16, 16], 1.0).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn positional_encoding_is_additive_and_input_independent() {
        let ppn = desk_ppn(8, 1);
        let zero = Tensor::zeros((1, 128, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let p = values(&ppn.add_positional_encoding(&zero).unwrap());
        assert_eq!(p, values(&ppn.positional));
        let e = random_embedding(1);
        let shifted = ppn.add_positional_encoding(&e).unwrap();
        let flat = e.reshape((1, 128, 256)).unwrap().transpose(1, 2).unwrap();
        let added = values(&(shifted - flat).unwrap());
        for (a, b) in added.iter().zip(&p) {
            assert!((a - b).abs() < 1e-6);
        }
        // cells (0,0) and (0,1) differ
        assert_ne!(p[..128], p[128..256]);
        let single = ppn.add_positional_encoding_single(&ImageEmbedding(zero.squeeze(0).unwrap())).unwrap();
        assert_eq!(single.dims(), &[128, 16, 16]);
    }

    #[test]
    fn two_way_attention_shapes_and_softmax() {
        let ppn = desk_ppn(8, 1);
        let image = ppn.add_positional_encoding(&random_embedding(2)).unwrap();
        let tokens = ppn.query_tokens(&[0]).unwrap();
        let (t, e) = ppn.two_way_attention(&tokens, &image).unwrap();
        assert_eq!(t.dims(), &[1, 8, 128]);
        assert_eq!(e.dims(), &[1, 256, 128]);
        let w = ppn.token_attention_weights(&tokens, &image).unwrap();
        assert_eq!(w.dims(), &[1, PPN_HEADS, 8, 256]);
        for s in values(&w.sum(3).unwrap()) {
            assert!((s - 1.0).abs() < 1e-6);
        }
        let bad = Tensor::zeros((1, 8, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(ppn.two_way_attention(&bad, &image), Err(Error::Input(_))));
    }

    #[test]
    fn zero_raw_box_is_centered_half_box() {
        let raw = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
        let b: Vec<f64> = PromptPredictor::boxes_from_raw(&raw).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(b, vec![0.25, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn degenerate_widths_keep_minimum_extent() {
        // w → 0⁺ everywhere on the unit interval, including the borders.
        let mut rows = Vec::new();
        for &cx in &[-30.0, -8.0, 0.0, 8.0, 30.0] {
            rows.extend_from_slice(&[cx, cx, -60.0, -60.0]);
        }
        let raw = Tensor::from_vec(rows, (5, 4), &Device::Cpu).unwrap();
        let boxes: Vec<Vec<f64>> = PromptPredictor::boxes_from_raw(&raw).unwrap().to_vec2().unwrap();
        for b in boxes {
            assert!(b[2] - b[0] >= MIN_BOX_EXTENT - 1e-15, "{b:?}");
            assert!(b[3] - b[1] >= MIN_BOX_EXTENT - 1e-15, "{b:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn predicted_boxes_are_valid(raw in proptest::array::uniform4(-50.0f64..50.0)) {
            let t = Tensor::from_slice(&raw, (1, 4), &Device::Cpu).unwrap();
            let b: Vec<f64> = PromptPredictor::boxes_from_raw(&t).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            prop_assert!(0.0 <= b[0] && b[0] < b[2] && b[2] <= 1.0);
            prop_assert!(0.0 <= b[1] && b[1] < b[3] && b[3] <= 1.0);
        }
    }

    #[test]
    fn bundle_shapes_for_desk() {
        for n in [3usize, 8, 16] {
            let ppn = desk_ppn(n, 2);
            let bundle = ppn.predict(&random_embedding(3), &[1]).unwrap();
            assert_eq!(bundle.boxes.dims(), &[1, 4]);
            assert_eq!(bundle.dense_tokens.dims(), &[1, n - 2, 128]);
            assert_eq!(bundle.mask_prompt.dims(), &[1, 1, 64, 64]);
            assert!(values(&bundle.mask_prompt).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn unknown_class_and_small_n_are_rejected() {
        let ppn = desk_ppn(8, 2);
        assert!(matches!(ppn.predict(&random_embedding(4), &[2]), Err(Error::Input(_))));
        let cfg = PpnConfig { num_classes: 1, tokens_per_class: 2 };
        assert!(PromptPredictor::new(cfg, &GeometryPreset::desk(), 0, DType::F32).is_err());
    }

    #[test]
    fn classes_have_independent_tokens() {
        let ppn = desk_ppn(8, 2);
        let e = random_embedding(5);
        let a = ppn.predict(&e, &[0]).unwrap();
        let b = ppn.predict(&e, &[1]).unwrap();
        assert_ne!(values(&a.dense_tokens), values(&b.dense_tokens));
        assert_ne!(values(&a.mask_prompt), values(&b.mask_prompt));
    }

    #[test]
    fn positional_encoding_is_load_bearing() {
        let ppn = desk_ppn(8, 1);
        let e = random_embedding(6);
        let with = ppn.predict(&e, &[0]).unwrap();
        let without = ppn.predict_without_positional(&e, &[0]).unwrap();
        assert_ne!(values(&with.mask_prompt), values(&without.mask_prompt));
        assert_ne!(values(&with.boxes), values(&without.boxes));
    }
}
