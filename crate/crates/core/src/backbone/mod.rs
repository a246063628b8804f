//! Promptable segmentation backbone: image encoder, prompt encoder and mask
//! decoder behind the token interface the prompt predictor relies on.

pub mod checkpoint;
pub mod image_encoder;
pub mod mask_decoder;
pub mod prompt_encoder;
pub mod types;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

pub use self::image_encoder::ImageEncoder;
pub use self::mask_decoder::{DecoderOutput, MaskDecoder, NUM_OUTPUT_TOKENS};
pub use self::prompt_encoder::PromptEncoder;
pub use self::types::*;
use crate::error::{Error, Result};
use crate::nn::{join, Init, NamedParamsMut, Params};

/// Encoder output `(C, g, g)` for one image.
#[derive(Clone, Debug)]
pub struct ImageEmbedding(pub Tensor);

impl ImageEmbedding {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> &[usize] {
        self.0.dims()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub geometry: GeometryPreset,
    pub image_encoder: ImageEncoder,
    pub prompt_encoder: PromptEncoder,
    pub mask_decoder: MaskDecoder,
}

impl Backbone {
    pub fn new(geometry: GeometryPreset, seed: u64, dtype: DType) -> Result<Self> {
        let mut init = Init::new(seed, dtype);
        Ok(Self {
            image_encoder: ImageEncoder::new(&mut init, &geometry)?,
            prompt_encoder: PromptEncoder::new(&mut init, &geometry)?,
            mask_decoder: MaskDecoder::new(&mut init, &geometry)?,
            geometry,
        })
    }

    pub fn dtype(&self) -> DType {
        self.prompt_encoder.dtype()
    }

    /// Stacks model-space images into a `(B, 3, S, S)` tensor.
    pub fn images_to_tensor(&self, images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
        let s = self.geometry.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.height != s || img.width != s {
                return Err(Error::Config(format!(
                    "image is {}x{}, expected {s}x{s} for geometry `{}`",
                    img.height, img.width, self.geometry.name
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, s, s), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let s = self.geometry.input_size;
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::Config(format!(
                "image batch has shape {dims:?}, expected (B, 3, {s}, {s})"
            )));
        }
        self.image_encoder.forward(images)
    }

    pub fn encode_image(&self, image: &ImageTensor) -> Result<ImageEmbedding> {
        let batch = self.images_to_tensor(&[image], self.dtype())?;
        Ok(ImageEmbedding(self.encode_batch(&batch)?.squeeze(0)?))
    }

    /// Sparse tokens `(K, C)` and dense embedding `(C, g, g)`.
    pub fn encode_manual_prompts(&self, prompts: &ManualPrompts) -> Result<(Tensor, Tensor)> {
        prompts.validate(&self.geometry)?;
        let (sparse, dense) = self.prompt_encoder.encode_manual(prompts)?;
        Ok((sparse.squeeze(0)?, dense.squeeze(0)?))
    }

    pub fn decode_batch(&self, embeddings: &Tensor, sparse: &Tensor, dense: &Tensor) -> Result<DecoderOutput> {
        let pe = self.prompt_encoder.dense_positional()?;
        self.mask_decoder.forward(embeddings, &pe, sparse, dense)
    }

    pub fn decode_mask(
        &self,
        embedding: &ImageEmbedding,
        sparse_tokens: &Tensor,
        dense_embedding: &Tensor,
    ) -> Result<SegmentationResult> {
        let c = self.geometry.embed_channels;
        let g = self.geometry.embed_grid;
        if embedding.dims() != [c, g, g] || dense_embedding.dims() != [c, g, g] {
            return Err(Error::Input(format!(
                "embedding {:?} / dense {:?} do not match ({c}, {g}, {g})",
                embedding.dims(),
                dense_embedding.dims()
            )));
        }
        let (k, dim) = sparse_tokens.dims2()?;
        if dim != c {
            return Err(Error::Input(format!(
                "prompt token dimension {dim} does not match embedding channels {c}"
            )));
        }
        let out = self.decode_batch(
            &embedding.0.unsqueeze(0)?,
            &sparse_tokens.unsqueeze(0)?,
            &dense_embedding.unsqueeze(0)?,
        )?;
        result_from_output(&out, 0, k)
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("geometry".into(), self.geometry.name.clone());
        m.insert("input_size".into(), self.geometry.input_size.to_string());
        m
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let meta = self.metadata();
        let tensors: Vec<(String, Tensor)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        checkpoint::save_archive(path, &tensors, &meta)
    }

    /// Loads backbone tensors from a named-tensor archive, inferring the
    /// geometry from the stored shapes. Returns the archive entries that did
    /// not map onto a backbone parameter.
    pub fn load_external_weights(path: &Path) -> Result<(Self, Vec<String>)> {
        let archive = checkpoint::read_archive(path)?;
        Self::from_archive(&archive.tensors)
    }

    pub fn from_archive(tensors: &BTreeMap<String, Tensor>) -> Result<(Self, Vec<String>)> {
        let pos_name = "image_encoder.pos_embed";
        let pos = tensors.get(pos_name).ok_or_else(|| {
            Error::Load(vec![format!(
                "missing tensor `{pos_name}` (required to infer the geometry preset)"
            )])
        })?;
        let (_, patches, channels) = pos.dims3()?;
        let grid = (patches as f64).sqrt().round() as usize;
        if grid * grid != patches {
            return Err(Error::Load(vec![format!(
                "`{pos_name}` has {patches} positions, which is not a square grid"
            )]));
        }
        let geometry = GeometryPreset::infer(channels, grid);
        let mut backbone = Self::new(geometry, 0, pos.dtype())?;
        let assignment = checkpoint::assign(backbone.named_params(), tensors, None)?;
        Ok((backbone, assignment.unmapped))
    }
}

pub(crate) fn result_from_output(out: &DecoderOutput, index: usize, sparse_count: usize) -> Result<SegmentationResult> {
    let size = out.mask_logits.dims()[1];
    let logits: Vec<f32> = out
        .mask_logits
        .get(index)?
        .flatten_all()?
        .to_dtype(DType::F32)?
        .to_vec1()?;
    let objectness = out.objectness.get(index)?.to_dtype(DType::F32)?.to_scalar::<f32>()?;
    Ok(SegmentationResult::from_logits(size, logits, objectness, sparse_count))
}

impl Params for Backbone {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.image_encoder.collect_params(&join(prefix, "image_encoder"), out);
        self.prompt_encoder.collect_params(&join(prefix, "prompt_encoder"), out);
        self.mask_decoder.collect_params(&join(prefix, "mask_decoder"), out);
    }
}
