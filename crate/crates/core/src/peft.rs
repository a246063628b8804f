//! Freeze policies and low-rank adaptation of the mask decoder.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PromptSegmenter;
use crate::nn::{Init, Params};

const LORA_SEED_OFFSET: u64 = 0x10_5a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    PpnOnly,
    PpnPlusLoraDecoder,
    FullDecoder,
}

impl FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppn_only" => Ok(Self::PpnOnly),
            "ppn_plus_lora_decoder" => Ok(Self::PpnPlusLoraDecoder),
            "full_decoder" => Ok(Self::FullDecoder),
            other => Err(Error::Config(format!(
                "unknown freeze mode `{other}` (expected ppn_only, ppn_plus_lora_decoder or full_decoder)"
            ))),
        }
    }
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PpnOnly => "ppn_only",
            Self::PpnPlusLoraDecoder => "ppn_plus_lora_decoder",
            Self::FullDecoder => "full_decoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezePolicy {
    pub mode: FreezeMode,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            mode: FreezeMode::PpnOnly,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }
}

impl FreezePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.mode == FreezeMode::PpnPlusLoraDecoder && self.lora_rank == 0 {
            return Err(Error::Config("freeze.lora_rank must be at least 1".into()));
        }
        if !self.lora_alpha.is_finite() {
            return Err(Error::Config("freeze.lora_alpha must be finite".into()));
        }
        Ok(())
    }
}

/// Optimizer group of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Ppn,
    Decoder,
}

/// Which group, if any, trains parameter `name` under `mode`.
pub fn param_group(name: &str, mode: FreezeMode) -> Option<ParamGroup> {
    if name.starts_with("ppn.") {
        return Some(ParamGroup::Ppn);
    }
    if !name.starts_with("mask_decoder.") {
        return None;
    }
    match mode {
        FreezeMode::PpnOnly => None,
        FreezeMode::PpnPlusLoraDecoder => name.contains(".lora_").then_some(ParamGroup::Decoder),
        FreezeMode::FullDecoder => Some(ParamGroup::Decoder),
    }
}

/// Scalar parameter counts after applying a policy.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Census {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub ppn: usize,
    pub decoder: usize,
    pub lora: usize,
}

/// Adds LoRA adapters to the query and value projections of every decoder
/// attention.
pub fn attach_lora(model: &mut PromptSegmenter, rank: usize, alpha: f64, seed: u64) -> Result<()> {
    let mut init = Init::new(seed.wrapping_add(LORA_SEED_OFFSET), model.dtype());
    let decoder = &mut model.backbone.mask_decoder;
    for layer in &mut decoder.layers {
        for attn in layer.attentions_mut() {
            attn.q_proj.attach_lora(&mut init, rank, alpha)?;
            attn.v_proj.attach_lora(&mut init, rank, alpha)?;
        }
    }
    decoder.final_attn.q_proj.attach_lora(&mut init, rank, alpha)?;
    decoder.final_attn.v_proj.attach_lora(&mut init, rank, alpha)?;
    model.lora = Some((rank, alpha));
    Ok(())
}

pub fn census(model: &mut PromptSegmenter, mode: FreezeMode) -> Census {
    let mut c = Census::default();
    for (name, t) in model.named_params() {
        let n = t.elem_count();
        c.total += n;
        if name.contains(".lora_") {
            c.lora += n;
        }
        match param_group(&name, mode) {
            Some(ParamGroup::Ppn) => {
                c.trainable += n;
                c.ppn += n;
            }
            Some(ParamGroup::Decoder) => {
                c.trainable += n;
                c.decoder += n;
            }
            None => c.frozen += n,
        }
    }
    c
}

/// Attaches adapters when the policy asks for them (once) and returns the
/// resulting census.
pub fn apply_policy(model: &mut PromptSegmenter, policy: &FreezePolicy, seed: u64) -> Result<Census> {
    policy.validate()?;
    if policy.mode == FreezeMode::PpnPlusLoraDecoder && model.lora.is_none() {
        attach_lora(model, policy.lora_rank, policy.lora_alpha, seed)?;
    }
    Ok(census(model, policy.mode))
}

fn tensor_bits(t: &Tensor) -> Result<Vec<u64>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.into_iter().map(f64::to_bits).collect(),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.to_bits() as u64)
            .collect(),
    })
}

/// Bit patterns of every frozen tensor, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct FrozenSnapshot {
    tensors: BTreeMap<String, (Vec<usize>, Vec<u64>)>,
}

impl FrozenSnapshot {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

pub fn snapshot_frozen(model: &mut PromptSegmenter, mode: FreezeMode) -> Result<FrozenSnapshot> {
    let mut tensors = BTreeMap::new();
    for (name, t) in model.named_params() {
        if param_group(&name, mode).is_none() {
            tensors.insert(name, (t.dims().to_vec(), tensor_bits(t)?));
        }
    }
    Ok(FrozenSnapshot { tensors })
}

/// True iff every tensor in the snapshot still exists with identical bits.
pub fn frozen_integrity_check(model: &mut PromptSegmenter, snapshot: &FrozenSnapshot) -> Result<bool> {
    let mut current: BTreeMap<String, &mut Tensor> = model.named_params().into_iter().collect();
    for (name, (dims, bits)) in &snapshot.tensors {
        let Some(t) = current.remove(name) else {
            return Ok(false);
        };
        if t.dims() != dims.as_slice() || &tensor_bits(t)? != bits {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{GeometryPreset, ImageTensor};
    use crate::ppn::PpnConfig;

    fn model() -> PromptSegmenter {
        PromptSegmenter::new(GeometryPreset::desk(), PpnConfig::default(), 11, DType::F32).unwrap()
    }

    #[test]
    fn unknown_mode_is_config_error() {
        let err = "lora_everything".parse::<FreezeMode>().unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn census_adds_up_under_every_mode() {
        for mode in [FreezeMode::PpnOnly, FreezeMode::PpnPlusLoraDecoder, FreezeMode::FullDecoder] {
            let mut m = model();
            let policy = FreezePolicy { mode, ..Default::default() };
            let c = apply_policy(&mut m, &policy, 0).unwrap();
            assert_eq!(c.trainable + c.frozen, c.total);
            assert_eq!(c.trainable, c.ppn + c.decoder);
        }
    }

    #[test]
    fn ppn_only_trains_exactly_the_predictor() {
        let mut m = model();
        let c = apply_policy(&mut m, &FreezePolicy::default(), 0).unwrap();
        let expected: usize = m.ppn.named_params().iter().map(|(_, t)| t.elem_count()).sum();
        assert_eq!(c.trainable, expected);
        assert_eq!(c.decoder, 0);
    }

    #[test]
    fn lora_adds_two_d_r_per_matrix() {
        let mut plain = model();
        let before = census(&mut plain, FreezeMode::PpnOnly).total;
        let mut m = model();
        let rank = 4;
        let c = apply_policy(
            &mut m,
            &FreezePolicy {
                mode: FreezeMode::PpnPlusLoraDecoder,
                lora_rank: rank,
                lora_alpha: 8.0,
            },
            0,
        )
        .unwrap();
        let mut expected = 0;
        let dec = &m.backbone.mask_decoder;
        let attns = dec
            .layers
            .iter()
            .flat_map(|l| [&l.self_attn, &l.cross_token_to_image, &l.cross_image_to_token])
            .chain(std::iter::once(&dec.final_attn));
        for a in attns {
            for p in [&a.q_proj, &a.v_proj] {
                expected += rank * (p.in_dim() + p.out_dim());
            }
        }
        assert_eq!(c.lora, expected);
        assert_eq!(c.total, before + expected);
        assert_eq!(c.decoder, expected);
        // square self-attention projection: exactly 2·d·r
        let d = GeometryPreset::desk().embed_channels;
        let q = &m.backbone.mask_decoder.layers[0].self_attn.q_proj;
        let l = q.lora.as_ref().unwrap();
        assert_eq!(l.a.elem_count() + l.b.elem_count(), 2 * d * rank);
    }

    #[test]
    fn fresh_lora_is_bitwise_identity() {
        let plain = model();
        let mut adapted = model();
        attach_lora(&mut adapted, 4, 8.0, 5).unwrap();
        for seed in 0..3u32 {
            let gray: Vec<f32> = (0..256 * 256u32)
                .map(|i| ((i.wrapping_mul(2654435761).wrapping_add(seed * 977)) % 1000) as f32 / 1000.0)
                .collect();
            let img = ImageTensor::from_gray(256, 256, &gray);
            assert_eq!(
                plain.segment_with_learned_prompts(&img, 0, None).unwrap(),
                adapted.segment_with_learned_prompts(&img, 0, None).unwrap()
            );
        }
    }

    #[test]
    fn snapshot_detects_changes() {
        let mut m = model();
        let snap = snapshot_frozen(&mut m, FreezeMode::PpnOnly).unwrap();
        assert!(frozen_integrity_check(&mut m, &snap).unwrap());
        // touching a trainable tensor is fine
        m.ppn.class_tokens[0] = m.ppn.class_tokens[0].affine(1.0, 0.5).unwrap();
        assert!(frozen_integrity_check(&mut m, &snap).unwrap());
        let w = &mut m.backbone.mask_decoder.final_attn.q_proj.weight;
        *w = w.affine(1.0, 1e-3).unwrap();
        assert!(!frozen_integrity_check(&mut m, &snap).unwrap());
        assert!(frozen_integrity_check(&mut m, &FrozenSnapshot::default()).unwrap());
    }
}
