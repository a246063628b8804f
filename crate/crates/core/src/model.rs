use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::backbone::{
    checkpoint, result_from_output, Backbone, BoxCoords, DecoderOutput, GeometryPreset, ImageEmbedding,
    ImageTensor, ManualPrompts, SegmentationResult,
};
use crate::error::{Error, Result};
use crate::nn::{NamedParamsMut, Params};
use crate::peft;
use crate::ppn::{PpnConfig, PromptBundle, PromptPredictor};

const PPN_SEED_OFFSET: u64 = 0x5eed_0001;

/// Backbone plus prompt predictor.
#[derive(Clone, Debug)]
pub struct PromptSegmenter {
    pub backbone: Backbone,
    pub ppn: PromptPredictor,
    pub lora: Option<(usize, f64)>,
}

/// Output of one learned-prompt pass over a batch.
pub struct LearnedForward {
    pub bundle: PromptBundle,
    pub decoded: DecoderOutput,
    pub sparse_count: usize,
}

impl PromptSegmenter {
    pub fn new(geometry: GeometryPreset, ppn: PpnConfig, seed: u64, dtype: DType) -> Result<Self> {
        let backbone = Backbone::new(geometry, seed, dtype)?;
        Self::with_backbone(backbone, ppn, seed)
    }

    pub fn with_backbone(backbone: Backbone, ppn: PpnConfig, seed: u64) -> Result<Self> {
        let ppn = PromptPredictor::new(ppn, &backbone.geometry, seed.wrapping_add(PPN_SEED_OFFSET), backbone.dtype())?;
        Ok(Self {
            backbone,
            ppn,
            lora: None,
        })
    }

    pub fn geometry(&self) -> &GeometryPreset {
        &self.backbone.geometry
    }

    pub fn dtype(&self) -> DType {
        self.backbone.dtype()
    }

    pub fn to_dtype(&mut self, dtype: DType) -> Result<()> {
        for (_, t) in self.named_params() {
            *t = t.to_dtype(dtype)?.detach();
        }
        self.ppn.to_dtype(dtype)
    }

    /// Learned prompts → decoder for a batch of embeddings `(B, C, g, g)`.
    /// Manual prompts (batch of one only) are appended after the learned
    /// tokens; a manual brush mask replaces the learned mask prompt.
    pub fn forward_learned(
        &self,
        embeddings: &Tensor,
        class_ids: &[usize],
        manual: Option<&ManualPrompts>,
    ) -> Result<LearnedForward> {
        let bundle = self.ppn.predict(embeddings, class_ids)?;
        let pe = &self.backbone.prompt_encoder;
        let box_tokens = pe.encode_boxes(&bundle.boxes)?;
        let mut sparse = Tensor::cat(&[&box_tokens, &bundle.dense_tokens], 1)?;
        let mut mask_input = bundle.mask_prompt.clone();
        if let Some(manual) = manual {
            if class_ids.len() != 1 {
                return Err(Error::Input("manual prompts are only supported for a single image".into()));
            }
            manual.validate(self.geometry())?;
            let extra = pe.encode_sparse(manual)?;
            sparse = Tensor::cat(&[&sparse, &extra], 1)?;
            if let Some(brush) = pe.brush_logits(manual)? {
                mask_input = brush;
            }
        }
        let dense = pe.encode_mask(&mask_input)?;
        let sparse_count = sparse.dims()[1];
        let decoded = self.backbone.decode_batch(embeddings, &sparse, &dense)?;
        Ok(LearnedForward {
            bundle,
            decoded,
            sparse_count,
        })
    }

    pub fn segment_embedding_learned(
        &self,
        embedding: &ImageEmbedding,
        class_id: usize,
        manual: Option<&ManualPrompts>,
    ) -> Result<(SegmentationResult, BoxCoords)> {
        let out = self.forward_learned(&embedding.0.unsqueeze(0)?, &[class_id], manual)?;
        let result = result_from_output(&out.decoded, 0, out.sparse_count)?;
        Ok((result, out.bundle.box_coords(0)?))
    }

    pub fn segment_with_learned_prompts(
        &self,
        image: &ImageTensor,
        class_id: usize,
        manual: Option<&ManualPrompts>,
    ) -> Result<SegmentationResult> {
        let embedding = self.backbone.encode_image(image)?;
        Ok(self.segment_embedding_learned(&embedding, class_id, manual)?.0)
    }

    /// Manual prompts only; the predictor is bypassed.
    pub fn segment_manual(&self, embedding: &ImageEmbedding, prompts: &ManualPrompts) -> Result<SegmentationResult> {
        let (sparse, dense) = self.backbone.encode_manual_prompts(prompts)?;
        self.backbone.decode_mask(embedding, &sparse, &dense)
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = self.backbone.metadata();
        m.insert("num_classes".into(), self.ppn.config.num_classes.to_string());
        m.insert("tokens_per_class".into(), self.ppn.config.tokens_per_class.to_string());
        if let Some((rank, alpha)) = self.lora {
            m.insert("lora_rank".into(), rank.to_string());
            m.insert("lora_alpha".into(), alpha.to_string());
        }
        m
    }

    pub fn named_tensors(&mut self) -> Vec<(String, Tensor)> {
        self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let meta = self.metadata();
        checkpoint::save_archive(path, &self.named_tensors(), &meta)
    }

    /// Rebuilds a model from archive tensors and metadata. Extra entries
    /// under `ignore_prefix` (e.g. optimizer state) are permitted.
    pub fn from_archive(archive: &checkpoint::Archive, ignore_prefix: &str) -> Result<Self> {
        let meta = &archive.metadata;
        let parse = |key: &str| -> Result<usize> {
            meta.get(key)
                .ok_or_else(|| Error::Load(vec![format!("checkpoint metadata lacks `{key}`")]))?
                .parse()
                .map_err(|_| Error::Load(vec![format!("checkpoint metadata `{key}` is not an integer")]))
        };
        let ppn_config = PpnConfig {
            num_classes: parse("num_classes")?,
            tokens_per_class: parse("tokens_per_class")?,
        };
        let backbone_tensors: BTreeMap<String, Tensor> = archive
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("ppn.") && !k.contains("lora_") && !k.starts_with(ignore_prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let (backbone, unmapped) = Backbone::from_archive(&backbone_tensors)?;
        if !unmapped.is_empty() {
            return Err(Error::Load(unmapped.into_iter().map(|n| format!("unexpected tensor `{n}`")).collect()));
        }
        let mut model = Self::with_backbone(backbone, ppn_config, 0)?;
        if let Some(rank) = meta.get("lora_rank") {
            let rank: usize = rank.parse().map_err(|_| Error::Load(vec!["bad lora_rank".into()]))?;
            let alpha: f64 = meta
                .get("lora_alpha")
                .and_then(|a| a.parse().ok())
                .ok_or_else(|| Error::Load(vec!["missing or bad lora_alpha".into()]))?;
            peft::attach_lora(&mut model, rank, alpha, 0)?;
        }
        let assignment = checkpoint::assign(model.named_params(), &archive.tensors, None)?;
        let unexpected: Vec<String> = assignment
            .unmapped
            .into_iter()
            .filter(|n| !n.starts_with(ignore_prefix))
            .map(|n| format!("unexpected tensor `{n}`"))
            .collect();
        if !unexpected.is_empty() {
            return Err(Error::Load(unexpected));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = checkpoint::read_archive(path)?;
        Self::from_archive(&archive, "optim.")
    }
}

impl Params for PromptSegmenter {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.backbone.collect_params(prefix, out);
        self.ppn.collect_params(&crate::nn::join(prefix, "ppn"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{PointLabel, PointPrompt};

    fn image() -> ImageTensor {
        let gray: Vec<f32> = (0..256 * 256).map(|i| ((i % 256) as f32 / 255.0) * 0.5).collect();
        ImageTensor::from_gray(256, 256, &gray)
    }

    fn model() -> PromptSegmenter {
        PromptSegmenter::new(GeometryPreset::desk(), PpnConfig::default(), 3, DType::F32).unwrap()
    }

    #[test]
    fn learned_token_arithmetic() {
        let m = model();
        let r = m.segment_with_learned_prompts(&image(), 0, None).unwrap();
        assert_eq!(r.sparse_token_count, 2 + 6);
        assert_eq!(r.mask_logits.len(), 256 * 256);
        let mut manual = ManualPrompts::default();
        manual.boxes.push(BoxCoords::new(0.2, 0.2, 0.5, 0.6));
        let r = m.segment_with_learned_prompts(&image(), 0, Some(&manual)).unwrap();
        assert_eq!(r.sparse_token_count, 2 + 6 + 2);
        manual.points.push(PointPrompt { x: 0.3, y: 0.3, label: PointLabel::Background });
        let r = m.segment_with_learned_prompts(&image(), 0, Some(&manual)).unwrap();
        assert_eq!(r.sparse_token_count, 2 + 6 + 3);
    }

    #[test]
    fn negative_objectness_means_absent() {
        let m = model();
        let r = m.segment_with_learned_prompts(&image(), 0, None).unwrap();
        assert_eq!(r.object_present, r.objectness_logit >= 0.0);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = model();
        m.save(&path).unwrap();
        let loaded = PromptSegmenter::load(&path).unwrap();
        let img = image();
        assert_eq!(
            m.segment_with_learned_prompts(&img, 0, None).unwrap(),
            loaded.segment_with_learned_prompts(&img, 0, None).unwrap()
        );
    }
}
