use candle_core::{IndexOp, Tensor};

use super::types::GeometryPreset;
use crate::error::{Error, Result};
use crate::fused::gelu;
use crate::nn::{
    join, resize_bilinear, Attention, Init, LayerNorm, LayerNorm2d, Mlp, NamedParamsMut, Params,
    PatchConvTranspose,
};

pub const DECODER_DEPTH: usize = 2;
pub const DECODER_HEADS: usize = 4;
/// Output tokens prepended by the decoder: objectness, then mask.
pub const NUM_OUTPUT_TOKENS: usize = 2;

#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    norm1: LayerNorm,
    pub cross_token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    norm4: LayerNorm,
    pub cross_image_to_token: Attention,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(init: &mut Init, dim: usize, skip_first_pe: bool) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(init, dim, DECODER_HEADS, 1)?,
            norm1: LayerNorm::new(init, dim)?,
            cross_token_to_image: Attention::new(init, dim, DECODER_HEADS, 2)?,
            norm2: LayerNorm::new(init, dim)?,
            mlp: Mlp::new(init, &[dim, 4 * dim, dim])?,
            norm3: LayerNorm::new(init, dim)?,
            norm4: LayerNorm::new(init, dim)?,
            cross_image_to_token: Attention::new(init, dim, DECODER_HEADS, 2)?,
            skip_first_pe,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let attn = self.cross_token_to_image.forward(&q, &k, keys)?;
        let queries = self.norm2.forward(&(queries + attn)?)?;

        let mlp = self.mlp.forward(&queries)?;
        let queries = self.norm3.forward(&(queries + mlp)?)?;

        let q = (&queries + query_pe)?;
        let attn = self.cross_image_to_token.forward(&k, &q, &queries)?;
        let keys = self.norm4.forward(&(keys + attn)?)?;
        Ok((queries, keys))
    }

    pub fn attentions_mut(&mut self) -> [&mut Attention; 3] {
        [
            &mut self.self_attn,
            &mut self.cross_token_to_image,
            &mut self.cross_image_to_token,
        ]
    }
}

impl Params for TwoWayBlock {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.self_attn.collect_params(&join(prefix, "self_attn"), out);
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.cross_token_to_image
            .collect_params(&join(prefix, "cross_token_to_image"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.mlp.collect_params(&join(prefix, "mlp"), out);
        self.norm3.collect_params(&join(prefix, "norm3"), out);
        self.norm4.collect_params(&join(prefix, "norm4"), out);
        self.cross_image_to_token
            .collect_params(&join(prefix, "cross_image_to_token"), out);
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `(B, 1, 4g, 4g)`
    pub low_res_logits: Tensor,
    /// `(B, S, S)` at model input resolution.
    pub mask_logits: Tensor,
    /// `(B,)`
    pub objectness: Tensor,
}

/// Two-way transformer decoder with an upscaling head, a mask hypernetwork
/// and a fully connected objectness head read from a dedicated output token.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    objectness_token: Tensor,
    mask_token: Tensor,
    pub layers: Vec<TwoWayBlock>,
    pub final_attn: Attention,
    norm_final: LayerNorm,
    upscale1: PatchConvTranspose,
    upscale_norm: LayerNorm2d,
    upscale2: PatchConvTranspose,
    hyper_mlp: Mlp,
    objectness_head: Mlp,
    channels: usize,
    input_size: usize,
}

impl MaskDecoder {
    pub fn new(init: &mut Init, geometry: &GeometryPreset) -> Result<Self> {
        let c = geometry.embed_channels;
        let layers = (0..DECODER_DEPTH)
            .map(|i| TwoWayBlock::new(init, c, i == 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            objectness_token: init.normal(&[1, c], 1.0)?,
            mask_token: init.normal(&[1, c], 1.0)?,
            layers,
            final_attn: Attention::new(init, c, DECODER_HEADS, 2)?,
            norm_final: LayerNorm::new(init, c)?,
            upscale1: PatchConvTranspose::new(init, c, c / 4, 2)?,
            upscale_norm: LayerNorm2d::new(init, c / 4)?,
            upscale2: PatchConvTranspose::new(init, c / 4, c / 8, 2)?,
            hyper_mlp: Mlp::new(init, &[c, c, c, c / 8])?,
            objectness_head: Mlp::new(init, &[c, c, c, 1])?,
            channels: c,
            input_size: geometry.input_size,
        })
    }

    pub fn forward(
        &self,
        image_embedding: &Tensor,
        image_pe: &Tensor,
        sparse: &Tensor,
        dense: &Tensor,
    ) -> Result<DecoderOutput> {
        let (b, c, g, _) = image_embedding.dims4()?;
        let (sb, _, sc) = sparse.dims3()?;
        if sc != self.channels {
            return Err(Error::Input(format!(
                "prompt token dimension {sc} does not match embedding channels {}",
                self.channels
            )));
        }
        if sb != b || dense.dims() != image_embedding.dims() {
            return Err(Error::Input(format!(
                "batch/shape mismatch: embedding {:?}, sparse {:?}, dense {:?}",
                image_embedding.dims(),
                sparse.dims(),
                dense.dims()
            )));
        }

        let output_tokens = Tensor::cat(&[&self.objectness_token, &self.mask_token], 0)?
            .unsqueeze(0)?
            .broadcast_as((b, NUM_OUTPUT_TOKENS, c))?
            .contiguous()?;
        let tokens = Tensor::cat(&[&output_tokens, sparse], 1)?;

        let src = (image_embedding + dense)?
            .reshape((b, c, g * g))?
            .transpose(1, 2)?
            .contiguous()?;
        let pos = image_pe.reshape((1, c, g * g))?.transpose(1, 2)?.contiguous()?;

        let mut queries = tokens.clone();
        let mut keys = src;
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, &tokens, &pos)?;
        }
        let q = (&queries + &tokens)?;
        let k = keys.broadcast_add(&pos)?;
        let attn = self.final_attn.forward(&q, &k, &keys)?;
        let queries = self.norm_final.forward(&(queries + attn)?)?;

        let objectness_out = queries.i((.., 0, ..))?;
        let mask_out = queries.i((.., 1, ..))?;

        let grid = keys.transpose(1, 2)?.reshape((b, c, g, g))?;
        let up = self.upscale1.forward(&grid)?;
        let up = gelu(&self.upscale_norm.forward(&up)?)?;
        let up = gelu(&self.upscale2.forward(&up)?)?;
        let (_, uc, uh, uw) = up.dims4()?;

        let hyper = self.hyper_mlp.forward(&mask_out)?.unsqueeze(1)?;
        let low_res = hyper
            .matmul(&up.reshape((b, uc, uh * uw))?)?
            .reshape((b, 1, uh, uw))?;
        let mask_logits = resize_bilinear(&low_res, self.input_size, self.input_size)?
            .reshape((b, self.input_size, self.input_size))?;
        let objectness = self.objectness_head.forward(&objectness_out)?.reshape(b)?;
        Ok(DecoderOutput {
            low_res_logits: low_res,
            mask_logits,
            objectness,
        })
    }
}

impl Params for MaskDecoder {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        out.push((join(prefix, "objectness_token"), &mut self.objectness_token));
        out.push((join(prefix, "mask_token"), &mut self.mask_token));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.collect_params(&join(prefix, &format!("layers.{i}")), out);
        }
        self.final_attn.collect_params(&join(prefix, "final_attn"), out);
        self.norm_final.collect_params(&join(prefix, "norm_final"), out);
        self.upscale1.collect_params(&join(prefix, "upscale1"), out);
        self.upscale_norm.collect_params(&join(prefix, "upscale_norm"), out);
        self.upscale2.collect_params(&join(prefix, "upscale2"), out);
        self.hyper_mlp.collect_params(&join(prefix, "hyper_mlp"), out);
        self.objectness_head.collect_params(&join(prefix, "objectness_head"), out);
    }
}
