use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use super::types::{GeometryPreset, ManualPrompts, PointLabel};
use crate::error::{Error, Result};
use crate::fused::gelu;
use crate::nn::{join, Init, LayerNorm2d, Linear, NamedParamsMut, Params, PatchConv};

/// Logit magnitude a binary brush mask is mapped to before entering the
/// dense pathway (foreground `+`, background `-`).
pub const BRUSH_LOGIT: f64 = 6.0;

const MASK_HIDDEN: [usize; 2] = [4, 16];

/// Label rows in `point_embeddings`.
const BG: usize = 0;
const FG: usize = 1;
const BOX_TOP_LEFT: usize = 2;
const BOX_BOTTOM_RIGHT: usize = 3;

/// Encodes points and boxes as sparse tokens (random Fourier positional
/// features plus a learned per-kind embedding) and mask prompts as a dense
/// map through a 4× downsampling block.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pe_gaussian: Tensor,
    point_embeddings: Tensor,
    no_mask_embed: Tensor,
    mask_down1: PatchConv,
    mask_norm1: LayerNorm2d,
    mask_down2: PatchConv,
    mask_norm2: LayerNorm2d,
    mask_proj: Linear,
    channels: usize,
    grid: usize,
    mask_size: usize,
}

impl PromptEncoder {
    pub fn new(init: &mut Init, geometry: &GeometryPreset) -> Result<Self> {
        let c = geometry.embed_channels;
        Ok(Self {
            pe_gaussian: init.normal(&[2, c / 2], 1.0)?,
            point_embeddings: init.normal(&[4, c], 1.0)?,
            no_mask_embed: init.normal(&[c], 1.0)?,
            mask_down1: PatchConv::new(init, 1, MASK_HIDDEN[0], 2)?,
            mask_norm1: LayerNorm2d::new(init, MASK_HIDDEN[0])?,
            mask_down2: PatchConv::new(init, MASK_HIDDEN[0], MASK_HIDDEN[1], 2)?,
            mask_norm2: LayerNorm2d::new(init, MASK_HIDDEN[1])?,
            mask_proj: Linear::new(init, MASK_HIDDEN[1], c)?,
            channels: c,
            grid: geometry.embed_grid,
            mask_size: geometry.mask_prompt_size,
        })
    }

    pub fn dtype(&self) -> DType {
        self.pe_gaussian.dtype()
    }

    /// Fourier features of normalized `(…, 2)` coordinates → `(…, C)`.
    pub fn positional(&self, coords: &Tensor) -> Result<Tensor> {
        let centered = coords.affine(2.0, -1.0)?;
        let proj = centered
            .broadcast_matmul(&self.pe_gaussian)?
            .affine(2.0 * PI, 0.0)?;
        let last = proj.rank() - 1;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], last)?)
    }

    /// Dense positional map `(1, C, g, g)` sampled at patch centres.
    pub fn dense_positional(&self) -> Result<Tensor> {
        let g = self.grid;
        let mut coords = Vec::with_capacity(g * g * 2);
        for y in 0..g {
            for x in 0..g {
                coords.push((x as f64 + 0.5) / g as f64);
                coords.push((y as f64 + 0.5) / g as f64);
            }
        }
        let coords = Tensor::from_vec(coords, (g * g, 2), &Device::Cpu)?.to_dtype(self.dtype())?;
        let pe = self.positional(&coords)?;
        Ok(pe.t()?.reshape((1, self.channels, g, g))?)
    }

    fn embedding_row(&self, row: usize) -> Result<Tensor> {
        Ok(self.point_embeddings.get(row)?)
    }

    /// Differentiable box encoding: `(B, 4)` → `(B, 2, C)`.
    pub fn encode_boxes(&self, boxes: &Tensor) -> Result<Tensor> {
        let b = boxes.dims()[0];
        let corners = boxes.reshape((b, 2, 2))?;
        let pe = self.positional(&corners)?;
        let kinds = Tensor::stack(
            &[self.embedding_row(BOX_TOP_LEFT)?, self.embedding_row(BOX_BOTTOM_RIGHT)?],
            0,
        )?;
        Ok(pe.broadcast_add(&kinds)?)
    }

    /// Points `(B, K, 2)` with labels → `(B, K, C)`.
    pub fn encode_points(&self, coords: &Tensor, labels: &[PointLabel]) -> Result<Tensor> {
        let pe = self.positional(coords)?;
        let rows = labels
            .iter()
            .map(|l| {
                self.embedding_row(match l {
                    PointLabel::Background => BG,
                    PointLabel::Foreground => FG,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let kinds = Tensor::stack(&rows, 0)?;
        Ok(pe.broadcast_add(&kinds)?)
    }

    /// Mask logits `(B, 1, 4g, 4g)` → dense embedding `(B, C, g, g)`.
    pub fn encode_mask(&self, mask_logits: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = mask_logits.dims4()?;
        if c != 1 || h != self.mask_size || w != self.mask_size {
            return Err(Error::Input(format!(
                "mask prompt must be 1x{s}x{s}, got {c}x{h}x{w}",
                s = self.mask_size
            )));
        }
        let x = gelu(&self.mask_norm1.forward(&self.mask_down1.forward(mask_logits)?)?)?;
        let x = gelu(&self.mask_norm2.forward(&self.mask_down2.forward(&x)?)?)?;
        let (b, ch, g, _) = x.dims4()?;
        let tokens = x.reshape((b, ch, g * g))?.transpose(1, 2)?;
        let out = self.mask_proj.forward(&tokens)?;
        Ok(out.transpose(1, 2)?.reshape((b, self.channels, g, g))?)
    }

    /// Learned "no mask" dense embedding broadcast to `(B, C, g, g)`.
    pub fn no_mask_dense(&self, batch: usize) -> Result<Tensor> {
        let g = self.grid;
        Ok(self
            .no_mask_embed
            .reshape((1, self.channels, 1, 1))?
            .broadcast_as((batch, self.channels, g, g))?
            .contiguous()?)
    }

    /// Brush mask (binary, `4g × 4g`) as dense-pathway logits `(1, 1, 4g, 4g)`.
    pub fn brush_logits(&self, prompts: &ManualPrompts) -> Result<Option<Tensor>> {
        let Some(mask) = &prompts.brush_mask else {
            return Ok(None);
        };
        let s = self.mask_size;
        if mask.height != s || mask.width != s {
            return Err(Error::Input(format!(
                "brush mask is {}x{}, expected {s}x{s}",
                mask.height, mask.width
            )));
        }
        let values: Vec<f64> = mask
            .data
            .iter()
            .map(|&v| if v != 0 { BRUSH_LOGIT } else { -BRUSH_LOGIT })
            .collect();
        Ok(Some(
            Tensor::from_vec(values, (1, 1, s, s), &Device::Cpu)?.to_dtype(self.dtype())?,
        ))
    }

    /// Sparse tokens `(1, K, C)` for manual points and boxes, K = #points + 2·#boxes.
    pub fn encode_sparse(&self, prompts: &ManualPrompts) -> Result<Tensor> {
        let mut parts = Vec::new();
        if !prompts.points.is_empty() {
            let coords: Vec<f64> = prompts.points.iter().flat_map(|p| [p.x, p.y]).collect();
            let coords = Tensor::from_vec(coords, (1, prompts.points.len(), 2), &Device::Cpu)?
                .to_dtype(self.dtype())?;
            let labels: Vec<PointLabel> = prompts.points.iter().map(|p| p.label).collect();
            parts.push(self.encode_points(&coords, &labels)?);
        }
        for b in &prompts.boxes {
            let t = Tensor::from_vec(b.to_array().to_vec(), (1, 4), &Device::Cpu)?.to_dtype(self.dtype())?;
            parts.push(self.encode_boxes(&t)?);
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros((1, 0, self.channels), self.dtype(), &Device::Cpu)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// Full manual-prompt encoding: sparse tokens and dense embedding.
    pub fn encode_manual(&self, prompts: &ManualPrompts) -> Result<(Tensor, Tensor)> {
        let sparse = self.encode_sparse(prompts)?;
        let dense = match self.brush_logits(prompts)? {
            Some(logits) => self.encode_mask(&logits)?,
            None => self.no_mask_dense(1)?,
        };
        Ok((sparse, dense))
    }
}

impl Params for PromptEncoder {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        out.push((join(prefix, "pe_gaussian"), &mut self.pe_gaussian));
        out.push((join(prefix, "point_embeddings"), &mut self.point_embeddings));
        out.push((join(prefix, "no_mask_embed"), &mut self.no_mask_embed));
        self.mask_down1.collect_params(&join(prefix, "mask_down1"), out);
        self.mask_norm1.collect_params(&join(prefix, "mask_norm1"), out);
        self.mask_down2.collect_params(&join(prefix, "mask_down2"), out);
        self.mask_norm2.collect_params(&join(prefix, "mask_norm2"), out);
        self.mask_proj.collect_params(&join(prefix, "mask_proj"), out);
    }
}
