//! Optimization loop: AdamW over two parameter groups, deterministic batch
//! schedule, checkpoint/resume, few-shot protocol and the synthetic
//! pretraining used to stand in for a pretrained backbone.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{checkpoint, Backbone, BinaryMask, GeometryPreset, ImageTensor, PointLabel};
use crate::data::{augment, resize_pad, synth_generate, AugmentationPolicy, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossTargets, LossWeights, Predictions};
use crate::model::PromptSegmenter;
use crate::nn::{sigmoid, Params};
use crate::peft::{self, Census, FreezePolicy, ParamGroup};
use crate::ppn::PpnConfig;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const OPTIM_PREFIX: &str = "optim.";
const ENCODE_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Self::F32 => DType::F32,
            Self::F64 => DType::F64,
        }
    }
}

/// Where the frozen backbone comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Archive with backbone (or full model) tensors.
    pub checkpoint: Option<PathBuf>,
    /// Steps of manual-prompt training on a separate synthetic set before
    /// the backbone is frozen. Ignored when `checkpoint` is set.
    pub pretrain_steps: usize,
    pub pretrain_count: usize,
    pub pretrain_lr: f64,
    pub pretrain_seed: u64,
    pub pretrain_batch_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            pretrain_steps: 0,
            pretrain_count: 200,
            pretrain_lr: 1e-3,
            pretrain_seed: 1000,
            pretrain_batch_size: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Optional text file of stems restricting the training set.
    pub train_split: Option<PathBuf>,
    pub test_split: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub geometry: String,
    pub precision: Precision,
    pub num_classes: usize,
    pub tokens_per_class: usize,
    pub lr_ppn: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Write a checkpoint every this many steps (0 disables intermediates).
    pub checkpoint_every: usize,
    pub output_dir: Option<PathBuf>,
    pub freeze: FreezePolicy,
    pub loss: LossWeights,
    pub augment: AugmentationPolicy,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: "desk".into(),
            precision: Precision::F32,
            num_classes: 1,
            tokens_per_class: 8,
            lr_ppn: 1e-4,
            lr_decoder: 1e-5,
            weight_decay: 0.1,
            batch_size: 4,
            max_steps: 1000,
            checkpoint_every: 500,
            output_dir: None,
            freeze: FreezePolicy::default(),
            loss: LossWeights::default(),
            augment: AugmentationPolicy::default(),
            backbone: BackboneConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn geometry(&self) -> Result<GeometryPreset> {
        GeometryPreset::by_name(&self.geometry)
    }

    pub fn ppn_config(&self) -> PpnConfig {
        PpnConfig {
            num_classes: self.num_classes,
            tokens_per_class: self.tokens_per_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        self.ppn_config().validate()?;
        self.freeze.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, v) in [
            ("lr_ppn", self.lr_ppn),
            ("lr_decoder", self.lr_decoder),
            ("weight_decay", self.weight_decay),
            ("backbone.pretrain_lr", self.backbone.pretrain_lr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

struct OptParam {
    name: String,
    var: Var,
    group: ParamGroup,
    m: Tensor,
    v: Tensor,
}

/// Decoupled-weight-decay Adam over named parameter groups.
pub struct AdamW {
    params: Vec<OptParam>,
    lrs: BTreeMap<ParamGroup, f64>,
    weight_decay: f64,
    step: usize,
}

impl AdamW {
    /// Turns every parameter that `group_of` assigns to a group into a
    /// variable and detaches all others, so frozen tensors never receive
    /// gradients.
    pub fn attach<P: Params + ?Sized>(
        model: &mut P,
        group_of: impl Fn(&str) -> Option<ParamGroup>,
        lrs: BTreeMap<ParamGroup, f64>,
        weight_decay: f64,
    ) -> Result<Self> {
        let mut params = Vec::new();
        for (name, t) in model.named_params() {
            match group_of(&name) {
                Some(group) => {
                    let var = Var::from_tensor(&t.detach())?;
                    *t = var.as_tensor().clone();
                    let m = t.zeros_like()?;
                    let v = t.zeros_like()?;
                    params.push(OptParam { name, var, group, m, v });
                }
                None => *t = t.detach(),
            }
        }
        Ok(Self {
            params,
            lrs,
            weight_decay,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// `(name, group)` of every optimized parameter.
    pub fn groups(&self) -> Vec<(String, ParamGroup)> {
        self.params.iter().map(|p| (p.name.clone(), p.group)).collect()
    }

    pub fn lr(&self, group: ParamGroup) -> Option<f64> {
        self.lrs.get(&group).copied()
    }

    pub fn set_lr(&mut self, group: ParamGroup, lr: f64) {
        self.lrs.insert(group, lr);
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for p in &mut self.params {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let lr = self.lrs.get(&p.group).copied().unwrap_or(0.0);
            p.m = (p.m.affine(ADAM_BETA1, 0.0)? + g.affine(1.0 - ADAM_BETA1, 0.0)?)?;
            p.v = (p.v.affine(ADAM_BETA2, 0.0)? + g.sqr()?.affine(1.0 - ADAM_BETA2, 0.0)?)?;
            let m_hat = p.m.affine(1.0 / bias1, 0.0)?;
            let v_hat = p.v.affine(1.0 / bias2, 0.0)?;
            let update = (m_hat / (v_hat.sqrt()? + ADAM_EPS)?)?;
            let theta = p.var.as_tensor().detach();
            let next = (theta.affine(1.0 - lr * self.weight_decay, 0.0)? - update.affine(lr, 0.0)?)?;
            p.var.set(&next)?;
        }
        Ok(())
    }

    /// Moment tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.params.len());
        for p in &self.params {
            out.push((format!("{OPTIM_PREFIX}m.{}", p.name), p.m.clone()));
            out.push((format!("{OPTIM_PREFIX}v.{}", p.name), p.v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        let mut problems = Vec::new();
        for p in &mut self.params {
            for (kind, slot) in [("m", &mut p.m), ("v", &mut p.v)] {
                let key = format!("{OPTIM_PREFIX}{kind}.{}", p.name);
                match tensors.get(&key) {
                    Some(t) if t.dims() == slot.dims() => *slot = t.to_dtype(slot.dtype())?,
                    Some(t) => problems.push(format!("optimizer state `{key}` has shape {:?}", t.dims())),
                    None => problems.push(format!("missing optimizer state `{key}`")),
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Load(problems));
        }
        self.step = step;
        Ok(())
    }
}

/// Detaches every parameter so the model no longer aliases optimizer
/// variables.
pub fn release_vars<P: Params + ?Sized>(model: &mut P) {
    for (_, t) in model.named_params() {
        *t = t.detach();
    }
}

/// Resize/pad every sample to the model square when needed.
pub fn prepare_samples(samples: &[Sample], geometry: &GeometryPreset) -> Result<Vec<Sample>> {
    let s = geometry.input_size;
    samples
        .iter()
        .map(|x| {
            if x.image.height == s && x.image.width == s {
                Ok(x.clone())
            } else {
                resize_pad(x, s)
            }
        })
        .collect()
}

fn check_samples(samples: &[Sample], geometry: &GeometryPreset, num_classes: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let s = geometry.input_size;
    for x in samples {
        if x.image.height != s || x.image.width != s {
            return Err(Error::Config(format!(
                "sample `{}` is {}x{}, expected {s}x{s} (apply resize_pad first)",
                x.id, x.image.height, x.image.width
            )));
        }
        if x.num_classes() != num_classes {
            return Err(Error::Config(format!(
                "sample `{}` has {} class masks, config expects {num_classes}",
                x.id,
                x.num_classes()
            )));
        }
    }
    Ok(())
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^ (x >> 29)
}

/// Items `(sample, class)` visited at `step`; each epoch is a fresh seeded
/// permutation, so the schedule depends only on `(seed, step)`.
fn batch_items(seed: u64, step: usize, batch: usize, n_items: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for slot in 0..batch {
        let pos = step * batch + slot;
        let epoch = pos / n_items;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n_items).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 1)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("permutation").1[pos % n_items]);
    }
    out
}

fn encode_all(backbone: &Backbone, samples: &[Sample], dtype: DType) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ENCODE_CHUNK) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let emb = backbone.encode_batch(&backbone.images_to_tensor(&images, dtype)?)?.detach();
        for i in 0..chunk.len() {
            out.push(emb.get(i)?);
        }
    }
    Ok(out)
}

/// Everything a run produced.
pub struct TrainOutcome {
    pub model: PromptSegmenter,
    pub log: Vec<StepRecord>,
    pub census: Census,
    pub groups: Vec<(String, ParamGroup)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Optional side outputs and resume state.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub metrics: Option<&'a mut dyn Write>,
    pub resume_from: Option<&'a Path>,
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
}

/// Builds the initial model for a config: backbone from a checkpoint, from
/// synthetic pretraining, or freshly initialized.
pub fn build_model(config: &TrainConfig) -> Result<PromptSegmenter> {
    config.validate()?;
    let geometry = config.geometry()?;
    let dtype = config.precision.dtype();
    let backbone = match &config.backbone.checkpoint {
        Some(path) => {
            let archive = checkpoint::read_archive(path)?;
            let tensors: BTreeMap<String, Tensor> = archive
                .tensors
                .into_iter()
                .filter(|(k, _)| {
                    ["image_encoder.", "prompt_encoder.", "mask_decoder."]
                        .iter()
                        .any(|p| k.starts_with(p))
                        && !k.contains(".lora_")
                })
                .collect();
            let (b, _) = Backbone::from_archive(&tensors)?;
            if b.geometry.embed_grid != geometry.embed_grid || b.geometry.embed_channels != geometry.embed_channels {
                return Err(Error::Config(format!(
                    "backbone checkpoint has geometry `{}`, config asks for `{}`",
                    b.geometry.name, geometry.name
                )));
            }
            b
        }
        None => {
            let b = Backbone::new(geometry.clone(), config.seed, dtype)?;
            if config.backbone.pretrain_steps > 0 {
                pretrain_backbone(b, &config.backbone, config.num_classes, &mut |_| {})?.0
            } else {
                b
            }
        }
    };
    let mut model = PromptSegmenter::with_backbone(backbone, config.ppn_config(), config.seed)?;
    model.to_dtype(dtype)?;
    Ok(model)
}

/// Trains `model` on model-space `samples` per `config`.
pub fn train(
    mut model: PromptSegmenter,
    samples: &[Sample],
    config: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let geometry = model.geometry().clone();
    check_samples(samples, &geometry, config.num_classes)?;
    if model.ppn.config != config.ppn_config() {
        return Err(Error::Config("model predictor shape does not match the config".into()));
    }
    let dtype = config.precision.dtype();
    model.to_dtype(dtype)?;
    let census = peft::apply_policy(&mut model, &config.freeze, config.seed)?;
    log::info!(
        "training {} steps under {}: {} of {} parameters trainable",
        config.max_steps,
        config.freeze.mode,
        census.trainable,
        census.total
    );
    let mode = config.freeze.mode;

    let mut start = 0;
    let resume_archive = match hooks.resume_from {
        Some(path) => {
            let archive = checkpoint::read_archive(path)?;
            let restored = PromptSegmenter::from_archive(&archive, OPTIM_PREFIX)?;
            if restored.ppn.config != model.ppn.config || restored.lora != model.lora {
                return Err(Error::Config("resume checkpoint does not match the config".into()));
            }
            model = restored;
            model.to_dtype(dtype)?;
            start = archive
                .metadata
                .get("step")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Load(vec!["resume checkpoint lacks a `step` entry".into()]))?;
            Some(archive)
        }
        None => None,
    };

    let snapshot = peft::snapshot_frozen(&mut model, mode)?;
    let lrs = BTreeMap::from([(ParamGroup::Ppn, config.lr_ppn), (ParamGroup::Decoder, config.lr_decoder)]);
    let mut opt = AdamW::attach(&mut model, |n| peft::param_group(n, mode), lrs, config.weight_decay)?;
    if let Some(archive) = &resume_archive {
        opt.load_state(&archive.tensors, start)?;
    }
    let groups = opt.groups();

    let items: Vec<(usize, usize)> = (0..samples.len())
        .flat_map(|s| (0..config.num_classes).map(move |k| (s, k)))
        .collect();
    let augmenting = !config.augment.is_identity();
    let cached = if augmenting {
        None
    } else {
        Some(encode_all(&model.backbone, samples, dtype)?)
    };

    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for step in start..config.max_steps {
        let picks = batch_items(config.seed, step, config.batch_size, items.len());
        let mut embeddings = Vec::with_capacity(picks.len());
        let mut masks = Vec::with_capacity(picks.len());
        let mut class_ids = Vec::with_capacity(picks.len());
        let mut augmented = Vec::new();
        for (slot, &i) in picks.iter().enumerate() {
            let (s, k) = items[i];
            class_ids.push(k);
            if augmenting {
                augmented.push(augment(&samples[s], &config.augment, mix(config.seed, step as u64, slot as u64 + 2)));
            } else {
                embeddings.push(cached.as_ref().expect("cached embeddings")[s].clone());
            }
        }
        if augmenting {
            let images: Vec<&ImageTensor> = augmented.iter().map(|s| &s.image).collect();
            let emb = model
                .backbone
                .encode_batch(&model.backbone.images_to_tensor(&images, dtype)?)?
                .detach();
            embeddings = (0..images.len()).map(|i| emb.get(i)).collect::<candle_core::Result<_>>()?;
            for (a, &k) in augmented.iter().zip(&class_ids) {
                masks.push(&a.masks[k]);
            }
        } else {
            for (&i, &k) in picks.iter().zip(&class_ids) {
                masks.push(&samples[items[i].0].masks[k]);
            }
        }
        let emb = Tensor::stack(&embeddings, 0)?;
        let out = model.forward_learned(&emb, &class_ids, None)?;
        let targets = LossTargets::from_masks(&masks, geometry.mask_prompt_size, dtype)?;
        let terms = losses::total_loss(
            &Predictions {
                mask_prompt_logits: &out.bundle.mask_prompt,
                mask_logits: &out.decoded.mask_logits,
                boxes: &out.bundle.boxes,
                objectness: &out.decoded.objectness,
            },
            &targets,
            &config.loss,
        )?;
        let report = losses::report_from_terms(&terms, &config.loss)?;
        let record = StepRecord { step, loss: report };
        if !report.is_finite() {
            release_vars(&mut model);
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: serde_json::to_string(&report).unwrap_or_default(),
            });
        }
        let grads = terms.total.backward()?;
        opt.step(&grads)?;
        if let Some(w) = hooks.metrics.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&record).expect("serializable record"))
                .map_err(|e| Error::io(Path::new("<metrics>"), e))?;
        }
        if let Some(f) = hooks.on_step.as_deref_mut() {
            f(&record);
        }
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.5}", report.total);
        }
        log.push(record);
        let done = step + 1;
        if let Some(dir) = &config.output_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.max_steps {
                let path = dir.join(format!("step_{done:06}.ckpt"));
                save_training_checkpoint(&mut model, &opt, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = &config.output_dir {
        let path = dir.join("final.ckpt");
        save_training_checkpoint(&mut model, &opt, &path)?;
        checkpoints.push(path);
    }
    drop(opt);
    release_vars(&mut model);
    if !peft::frozen_integrity_check(&mut model, &snapshot)? {
        return Err(Error::Integrity("a frozen parameter changed during training".into()));
    }
    Ok(TrainOutcome {
        model,
        log,
        census,
        groups,
        checkpoints,
    })
}

/// Model tensors plus optimizer moments and step.
pub fn save_training_checkpoint(model: &mut PromptSegmenter, opt: &AdamW, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut meta = model.metadata();
    meta.insert("step".into(), opt.step_count().to_string());
    let mut tensors = model.named_tensors();
    tensors.extend(opt.state_tensors());
    checkpoint::save_archive(path, &tensors, &meta)
}

/// Trains on the first `k` samples of a seeded shuffle.
pub fn few_shot_train(
    model: PromptSegmenter,
    samples: &[Sample],
    k: usize,
    config: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let subset = few_shot_subset(samples, k, config.seed)?;
    train(model, &subset, config, hooks)
}

pub fn few_shot_subset(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<Sample>> {
    if k == 0 || k > samples.len() {
        return Err(Error::Input(format!("few-shot k = {k} but the dataset has {} samples", samples.len())));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0xF3, 0)));
    Ok(order[..k].iter().map(|&i| samples[i].clone()).collect())
}

/// Opens a metrics file for newline-delimited step records.
pub fn metrics_writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Clone, Copy, Debug)]
enum PromptKind {
    Box,
    BoxAndPoint,
    Points,
    Brush,
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let w = rng.random_range(0.1..0.8);
    let h = rng.random_range(0.05..0.4);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    [x, y, x + w, y + h]
}

fn jittered_box(mask: &BinaryMask, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let Some(b) = mask.normalized_bbox() else {
        return random_box(rng);
    };
    let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
    let j = |v: f64, s: f64, rng: &mut ChaCha8Rng| v + rng.random_range(-0.05..0.05) * s;
    let x1 = j(b.x1, w, rng).clamp(0.0, 1.0 - 1e-3);
    let y1 = j(b.y1, h, rng).clamp(0.0, 1.0 - 1e-3);
    let x2 = j(b.x2, w, rng).clamp(x1 + 1e-3, 1.0);
    let y2 = j(b.y2, h, rng).clamp(y1 + 1e-3, 1.0);
    [x1, y1, x2, y2]
}

fn random_pixel(mask: &BinaryMask, want: bool, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let hits: Vec<usize> = (0..mask.data.len()).filter(|&i| (mask.data[i] != 0) == want).collect();
    let i = if hits.is_empty() {
        rng.random_range(0..mask.data.len())
    } else {
        hits[rng.random_range(0..hits.len())]
    };
    let (y, x) = (i / mask.width, i % mask.width);
    ((x as f64 + 0.5) / mask.width as f64, (y as f64 + 0.5) / mask.height as f64)
}

/// Linear warmup over the first steps, then cosine decay to zero.
fn pretrain_lr_at(base: f64, step: usize, total: usize) -> f64 {
    let warmup = (total / 20).max(1);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Manual-prompt training of the whole backbone on a dedicated synthetic
/// set. Returns the trained backbone and the per-step total loss.
pub fn pretrain_backbone(
    backbone: Backbone,
    config: &BackboneConfig,
    num_classes: usize,
    on_step: &mut dyn FnMut(usize),
) -> Result<(Backbone, Vec<f64>)> {
    let geometry = backbone.geometry.clone();
    let dtype = backbone.dtype();
    let synth = SynthConfig {
        seed: config.pretrain_seed,
        count: config.pretrain_count,
        height: geometry.input_size,
        width: geometry.input_size,
        num_classes,
        ..SynthConfig::default()
    };
    let samples = synth_generate(&synth)?;
    let mut model = backbone;
    let lrs = BTreeMap::from([(ParamGroup::Decoder, config.pretrain_lr)]);
    let mut opt = AdamW::attach(&mut model, |_| Some(ParamGroup::Decoder), lrs, 0.0)?;
    let policy = AugmentationPolicy::default();
    let weights = LossWeights::default();
    let n_items = samples.len() * num_classes;
    let m = geometry.mask_prompt_size;
    let dev = Device::Cpu;
    let mut losses_out = Vec::with_capacity(config.pretrain_steps);
    for step in 0..config.pretrain_steps {
        opt.set_lr(ParamGroup::Decoder, pretrain_lr_at(config.pretrain_lr, step, config.pretrain_steps));
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.pretrain_seed, step as u64, 7));
        let kind = [PromptKind::Box, PromptKind::BoxAndPoint, PromptKind::Points, PromptKind::Brush]
            [rng.random_range(0..4)];
        let picks = batch_items(config.pretrain_seed, step, config.pretrain_batch_size, n_items);
        let batch: Vec<(Sample, usize)> = picks
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let s = &samples[i / num_classes];
                (augment(s, &policy, mix(config.pretrain_seed, step as u64, slot as u64 + 11)), i % num_classes)
            })
            .collect();
        let b = batch.len();
        let images: Vec<&ImageTensor> = batch.iter().map(|(s, _)| &s.image).collect();
        let emb = model.encode_batch(&model.images_to_tensor(&images, dtype)?)?;
        let masks: Vec<&BinaryMask> = batch.iter().map(|(s, k)| &s.masks[*k]).collect();
        let pe = &model.prompt_encoder;
        let to_t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, &dev)?.to_dtype(dtype)?)
        };
        let boxes = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let v: Vec<f64> = masks.iter().flat_map(|mk| jittered_box(mk, rng)).collect();
            pe.encode_boxes(&to_t(v, &[b, 4])?)
        };
        let (sparse, dense) = match kind {
            PromptKind::Box => (boxes(&mut rng)?, pe.no_mask_dense(b)?),
            PromptKind::BoxAndPoint => {
                let bx = boxes(&mut rng)?;
                let pts: Vec<f64> = masks
                    .iter()
                    .flat_map(|mk| {
                        let (x, y) = random_pixel(mk, true, &mut rng);
                        [x, y]
                    })
                    .collect();
                let p = pe.encode_points(&to_t(pts, &[b, 1, 2])?, &[PointLabel::Foreground])?;
                (Tensor::cat(&[&bx, &p], 1)?, pe.no_mask_dense(b)?)
            }
            PromptKind::Points => {
                let pts: Vec<f64> = masks
                    .iter()
                    .flat_map(|mk| {
                        let (x1, y1) = random_pixel(mk, true, &mut rng);
                        let (x2, y2) = random_pixel(mk, false, &mut rng);
                        [x1, y1, x2, y2]
                    })
                    .collect();
                let p = pe.encode_points(&to_t(pts, &[b, 2, 2])?, &[PointLabel::Foreground, PointLabel::Background])?;
                (p, pe.no_mask_dense(b)?)
            }
            PromptKind::Brush => {
                let mut v = Vec::with_capacity(b * m * m);
                for mk in &masks {
                    let small = mk.resize_nearest(m, m);
                    for &p in &small.data {
                        let keep = rng.random::<f64>() < 0.9;
                        let on = (p != 0) == keep;
                        v.push(if on { crate::backbone::prompt_encoder::BRUSH_LOGIT } else { -crate::backbone::prompt_encoder::BRUSH_LOGIT });
                    }
                }
                let sparse = Tensor::zeros((b, 0, geometry.embed_channels), dtype, &dev)?;
                (sparse, pe.encode_mask(&to_t(v, &[b, 1, m, m])?)?)
            }
        };
        let out = model.decode_batch(&emb, &sparse, &dense)?;
        let targets = LossTargets::from_masks(&masks, m, dtype)?;
        let focal = losses::focal_loss_per_sample(&sigmoid(&out.mask_logits)?, &targets.mask, weights.gamma, weights.alpha)?;
        let mask_term = (focal * &targets.present)?.mean_all()?;
        let obj = losses::objectness_loss_tensor(&out.objectness, &targets.present)?.mean_all()?;
        let total = (mask_term.affine(weights.lambda1, 0.0)? + obj.affine(weights.lambda3, 0.0)?)?;
        let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            release_vars(&mut model);
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: format!("backbone pretraining total {value}"),
            });
        }
        opt.step(&total.backward()?)?;
        if step % 100 == 0 {
            log::info!("backbone pretraining step {step}: loss {value:.5}");
        }
        losses_out.push(value);
        on_step(step);
    }
    drop(opt);
    release_vars(&mut model);
    Ok((model, losses_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretrain_lr_warms_up_then_decays() {
        let lrs: Vec<f64> = (0..400).map(|s| pretrain_lr_at(1e-3, s, 400)).collect();
        assert!((lrs[19] - 1e-3).abs() < 1e-15);
        assert!(lrs[..20].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[20..].windows(2).all(|w| w[0] >= w[1]));
        assert!(lrs[399] < 1e-7);
        assert_eq!(pretrain_lr_at(1e-3, 0, 1), 1e-3);
    }

    #[test]
    fn batch_schedule_covers_each_epoch() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_items(3, s, 2, n)).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_items(3, 7, 4, n), batch_items(3, 7, 4, n));
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        struct One(Tensor);
        impl Params for One {
            fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut crate::nn::NamedParamsMut<'a>) {
                out.push((crate::nn::join(prefix, "w"), &mut self.0));
            }
        }
        let mut p = One(Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap());
        let (lr, wd) = (0.1, 0.01);
        let mut opt = AdamW::attach(&mut p, |_| Some(ParamGroup::Ppn), BTreeMap::from([(ParamGroup::Ppn, lr)]), wd).unwrap();
        let mut reference = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for t in 1..=3 {
            let loss = p.0.sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
            for i in 0..2 {
                let g = 2.0 * reference[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                reference[i] = reference[i] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = p.0.to_vec1::<f64>().unwrap();
        for i in 0..2 {
            assert!((got[i] - reference[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let config = TrainConfig::default();
        let model = PromptSegmenter::new(GeometryPreset::desk(), PpnConfig::default(), 0, DType::F32).unwrap();
        let err = train(model, &[], &config, TrainHooks::default()).err().unwrap();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn few_shot_rejects_large_k() {
        let samples = synth_generate(&SynthConfig {
            height: 32,
            width: 32,
            ..SynthConfig::new(0, 3)
        })
        .unwrap();
        assert_eq!(few_shot_subset(&samples, 4, 0).unwrap_err().kind(), "input");
        assert_eq!(few_shot_subset(&samples, 3, 0).unwrap().len(), 3);
    }
}
