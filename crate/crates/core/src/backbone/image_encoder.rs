use candle_core::Tensor;

use super::types::{GeometryPreset, PATCH_SIZE};
use crate::error::Result;
use crate::nn::{join, Attention, Init, LayerNorm, Linear, Mlp, NamedParamsMut, Params, PatchConv};

pub const ENCODER_DEPTH: usize = 2;
pub const ENCODER_HEADS: usize = 4;

#[derive(Clone, Debug)]
struct EncoderBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(init, dim)?,
            attn: Attention::new(init, dim, ENCODER_HEADS, 1)?,
            norm2: LayerNorm::new(init, dim)?,
            mlp: Mlp::new(init, &[dim, 2 * dim, dim])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

impl Params for EncoderBlock {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.attn.collect_params(&join(prefix, "attn"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.mlp.collect_params(&join(prefix, "mlp"), out);
    }
}

/// ViT-style encoder: 16×16 patch embedding, learned absolute positions,
/// pre-norm transformer blocks and a linear neck.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    patch_embed: PatchConv,
    pos_embed: Tensor,
    blocks: Vec<EncoderBlock>,
    neck: Linear,
    neck_norm: LayerNorm,
    grid: usize,
}

impl ImageEncoder {
    pub fn new(init: &mut Init, geometry: &GeometryPreset) -> Result<Self> {
        let c = geometry.embed_channels;
        let blocks = (0..ENCODER_DEPTH)
            .map(|_| EncoderBlock::new(init, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: PatchConv::new(init, 3, c, PATCH_SIZE)?,
            pos_embed: init.normal(&[1, geometry.num_patches(), c], 0.02)?,
            blocks,
            neck: Linear::new(init, c, c)?,
            neck_norm: LayerNorm::new(init, c)?,
            grid: geometry.embed_grid,
        })
    }

    /// `(B, 3, S, S)` → `(B, C, S/16, S/16)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let patches = self.patch_embed.forward(images)?;
        let (b, c, _, _) = patches.dims4()?;
        let mut x = patches
            .reshape((b, c, self.grid * self.grid))?
            .transpose(1, 2)?
            .broadcast_add(&self.pos_embed)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.neck_norm.forward(&self.neck.forward(&x)?)?;
        Ok(x.transpose(1, 2)?.reshape((b, c, self.grid, self.grid))?)
    }
}

impl Params for ImageEncoder {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.patch_embed.collect_params(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "pos_embed"), &mut self.pos_embed));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.collect_params(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.neck.collect_params(&join(prefix, "neck"), out);
        self.neck_norm.collect_params(&join(prefix, "neck_norm"), out);
    }
}
