//! Dice/IoU metrics, the prompt-mode evaluation harness and the
//! cosine-similarity prompting baseline.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BinaryMask, BoxCoords, ImageEmbedding, ImageTensor, ManualPrompts, PointLabel, PointPrompt};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::PromptSegmenter;

const ENCODE_CHUNK: usize = 8;
/// Patches at or above this fraction of the best similarity form the box.
pub const COSINE_BOX_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    GtBox,
    Learned,
    LearnedPlusBox,
    CosineBaseline,
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt_box" => Ok(Self::GtBox),
            "learned" => Ok(Self::Learned),
            "learned_plus_box" => Ok(Self::LearnedPlusBox),
            "cosine_baseline" => Ok(Self::CosineBaseline),
            other => Err(Error::Config(format!(
                "unknown prompt mode `{other}` (expected gt_box, learned, learned_plus_box or cosine_baseline)"
            ))),
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GtBox => "gt_box",
            Self::Learned => "learned",
            Self::LearnedPlusBox => "learned_plus_box",
            Self::CosineBaseline => "cosine_baseline",
        })
    }
}

/// `(dice, iou)`; both empty scores `(1, 1)`, exactly one empty `(0, 0)`.
pub fn dice_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Input(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    if p == 0 && g == 0 {
        return Ok((1.0, 1.0));
    }
    if p == 0 || g == 0 {
        return Ok((0.0, 0.0));
    }
    let union = p + g - inter;
    Ok((2.0 * inter as f64 / (p + g) as f64, inter as f64 / union as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub sample_id: String,
    pub class_id: usize,
    pub gt_present: bool,
    pub object_present: bool,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub model: String,
    pub dataset: String,
    pub prompt_mode: PromptMode,
    pub dice: f64,
    pub iou: f64,
    pub n_images: usize,
}

impl MetricRow {
    pub const TSV_HEADER: &'static str = "model\tdataset\tprompt_mode\tdice\tiou\tn_images";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{}",
            self.model, self.dataset, self.prompt_mode, self.dice, self.iou, self.n_images
        )
    }

    /// Percentages in the `model, dataset → dice/iou` style.
    pub fn report(&self) -> String {
        format!("{}, {} → {:.1}/{:.1}", self.model, self.dataset, 100.0 * self.dice, 100.0 * self.iou)
    }
}

pub fn format_table(rows: &[MetricRow]) -> String {
    let mut out = String::from(MetricRow::TSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.tsv());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub row: MetricRow,
    pub per_image: Vec<ImageScore>,
}

/// Labels attached to a metric row.
#[derive(Clone, Debug)]
pub struct Tags<'a> {
    pub model: &'a str,
    pub dataset: &'a str,
}

fn encode_samples(model: &PromptSegmenter, samples: &[Sample]) -> Result<Vec<ImageEmbedding>> {
    let dtype = model.dtype();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ENCODE_CHUNK) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let emb = model.backbone.encode_batch(&model.backbone.images_to_tensor(&images, dtype)?)?;
        for i in 0..chunk.len() {
            out.push(ImageEmbedding(emb.get(i)?));
        }
    }
    Ok(out)
}

/// Scores every `(image, class)` pair of model-space `samples`. Pairs whose
/// ground truth is empty are scored by the objectness decision alone.
/// `reference` is required for the cosine baseline.
pub fn evaluate(
    model: &PromptSegmenter,
    samples: &[Sample],
    mode: PromptMode,
    tags: Tags<'_>,
    reference: Option<&Sample>,
) -> Result<Evaluation> {
    let size = model.geometry().input_size;
    for s in samples {
        if s.image.height != size || s.image.width != size {
            return Err(Error::Input(format!(
                "sample `{}` is {}x{}, expected {size}x{size}",
                s.id, s.image.height, s.image.width
            )));
        }
    }
    let reference_prompts = match mode {
        PromptMode::CosineBaseline => {
            let r = reference.ok_or_else(|| Error::Input("cosine baseline needs a reference sample".into()))?;
            let emb = model.backbone.encode_image(&r.image)?;
            Some((0..r.num_classes()).map(|k| reference_vector(&emb, &r.masks[k])).collect::<Vec<_>>())
        }
        _ => None,
    };
    let embeddings = encode_samples(model, samples)?;
    let mut per_image = Vec::new();
    for (sample, emb) in samples.iter().zip(&embeddings) {
        for (k, gt) in sample.masks.iter().enumerate() {
            let gt_present = !gt.is_empty();
            let result = match mode {
                PromptMode::Learned => model.segment_embedding_learned(emb, k, None)?.0,
                PromptMode::LearnedPlusBox => {
                    let manual = gt_box_prompts(gt);
                    model.segment_embedding_learned(emb, k, Some(&manual))?.0
                }
                PromptMode::GtBox => model.segment_manual(emb, &gt_box_prompts(gt))?,
                PromptMode::CosineBaseline => {
                    let refs = reference_prompts.as_ref().expect("reference vectors");
                    let r = refs
                        .get(k)
                        .ok_or_else(|| Error::Input(format!("reference has no class {k}")))?
                        .as_ref()
                        .map_err(|e| Error::Input(e.to_string()))?;
                    model.segment_manual(emb, &cosine_prompts_from_vector(r, emb)?)?
                }
            };
            let gated = matches!(mode, PromptMode::Learned | PromptMode::LearnedPlusBox);
            let (dice, iou) = if !gt_present {
                if result.object_present {
                    (0.0, 0.0)
                } else {
                    (1.0, 1.0)
                }
            } else {
                let pred = if gated { result.gated_mask() } else { result.mask.clone() };
                dice_iou(&pred, gt)?
            };
            per_image.push(ImageScore {
                sample_id: sample.id.clone(),
                class_id: k,
                gt_present,
                object_present: result.object_present,
                dice,
                iou,
            });
        }
    }
    let n = per_image.len();
    let mean = |f: fn(&ImageScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_image.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(Evaluation {
        row: MetricRow {
            model: tags.model.to_string(),
            dataset: tags.dataset.to_string(),
            prompt_mode: mode,
            dice: mean(|s| s.dice),
            iou: mean(|s| s.iou),
            n_images: n,
        },
        per_image,
    })
}

/// Tight box of the ground truth as a manual prompt (none when empty).
pub fn gt_box_prompts(gt: &BinaryMask) -> ManualPrompts {
    ManualPrompts {
        boxes: gt.normalized_bbox().into_iter().collect(),
        ..Default::default()
    }
}

/// Mask-pooled mean embedding `(C,)` of the reference foreground, weighting
/// each patch by the fraction of its pixels inside the mask.
fn reference_vector(embedding: &ImageEmbedding, mask: &BinaryMask) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(Error::Input("cosine baseline reference mask is empty".into()));
    }
    let (c, g) = (embedding.dims()[0], embedding.dims()[1]);
    let weights = patch_coverage(mask, g);
    let e = embedding_rows(embedding)?;
    let total: f64 = weights.iter().sum();
    let mut v = vec![0.0; c];
    for (p, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            for (acc, x) in v.iter_mut().zip(&e[p * c..(p + 1) * c]) {
                *acc += w * x;
            }
        }
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(v)
}

fn patch_coverage(mask: &BinaryMask, grid: usize) -> Vec<f64> {
    let mut cov = vec![0.0; grid * grid];
    let (ph, pw) = (mask.height as f64 / grid as f64, mask.width as f64 / grid as f64);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                let gy = ((y as f64 / ph) as usize).min(grid - 1);
                let gx = ((x as f64 / pw) as usize).min(grid - 1);
                cov[gy * grid + gx] += 1.0;
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= ph * pw);
    cov
}

/// Patch-major `(g·g, C)` embedding values.
fn embedding_rows(embedding: &ImageEmbedding) -> Result<Vec<f64>> {
    let (c, g) = (embedding.dims()[0], embedding.dims()[1]);
    Ok(embedding
        .0
        .reshape((c, g * g))?
        .t()?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?)
}

fn cosine_prompts_from_vector(reference: &[f64], test: &ImageEmbedding) -> Result<ManualPrompts> {
    let (c, g) = (test.dims()[0], test.dims()[1]);
    let rows = embedding_rows(test)?;
    let rn = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sims: Vec<f64> = (0..g * g)
        .map(|p| {
            let row = &rows[p * c..(p + 1) * c];
            let dot: f64 = row.iter().zip(reference).map(|(a, b)| a * b).sum();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt() * rn;
            if n > 0.0 {
                dot / n
            } else {
                0.0
            }
        })
        .collect();
    let mut best = 0;
    for (p, &s) in sims.iter().enumerate() {
        if s > sims[best] {
            best = p;
        }
    }
    let max = sims[best];
    let threshold = if max > 0.0 { COSINE_BOX_FRACTION * max } else { max };
    let (mut x1, mut y1, mut x2, mut y2) = (g, g, 0, 0);
    for (p, &s) in sims.iter().enumerate() {
        if s >= threshold {
            let (py, px) = (p / g, p % g);
            x1 = x1.min(px);
            y1 = y1.min(py);
            x2 = x2.max(px + 1);
            y2 = y2.max(py + 1);
        }
    }
    let gf = g as f64;
    Ok(ManualPrompts {
        points: vec![PointPrompt {
            x: ((best % g) as f64 + 0.5) / gf,
            y: ((best / g) as f64 + 0.5) / gf,
            label: PointLabel::Foreground,
        }],
        boxes: vec![BoxCoords::new(x1 as f64 / gf, y1 as f64 / gf, x2 as f64 / gf, y2 as f64 / gf)],
        brush_mask: None,
    })
}

/// Top-1 similar patch as a foreground point plus the box of all patches
/// within [`COSINE_BOX_FRACTION`] of the best similarity. Ties resolve to
/// the lowest patch index.
pub fn cosine_baseline_prompts(
    reference: &ImageEmbedding,
    reference_mask: &BinaryMask,
    test: &ImageEmbedding,
) -> Result<ManualPrompts> {
    let v = reference_vector(reference, reference_mask)?;
    cosine_prompts_from_vector(&v, test)
}

/// Embedding-space similarity map `(g·g)` used by the baseline, exposed for
/// inspection.
pub fn cosine_similarity_map(reference: &ImageEmbedding, reference_mask: &BinaryMask, test: &ImageEmbedding) -> Result<Tensor> {
    let v = reference_vector(reference, reference_mask)?;
    let (c, g) = (test.dims()[0], test.dims()[1]);
    let rows = embedding_rows(test)?;
    let rn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sims: Vec<f64> = (0..g * g)
        .map(|p| {
            let row = &rows[p * c..(p + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt() * rn;
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            if n > 0.0 {
                dot / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_vec(sims, g * g, &candle_core::Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn block(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| rows.contains(&y) && cols.contains(&x))
    }

    #[test]
    fn hand_counted_overlap() {
        let gt = block(20, 20, 0..10, 0..10);
        let pred = block(20, 20, 0..10, 5..15);
        let (d, i) = dice_iou(&pred, &gt).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        assert!((i - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identity_disjoint_and_empty_conventions() {
        let a = block(8, 8, 1..4, 1..4);
        assert_eq!(dice_iou(&a, &a).unwrap(), (1.0, 1.0));
        assert_eq!(dice_iou(&a, &block(8, 8, 5..7, 5..7)).unwrap(), (0.0, 0.0));
        let e = BinaryMask::zeros(8, 8);
        assert_eq!(dice_iou(&e, &e).unwrap(), (1.0, 1.0));
        assert_eq!(dice_iou(&a, &e).unwrap(), (0.0, 0.0));
        assert_eq!(dice_iou(&a, &BinaryMask::zeros(4, 4)).unwrap_err().kind(), "input");
    }

    #[test]
    fn erosion_strictly_degrades() {
        let gt = block(32, 32, 4..20, 6..26);
        let eroded = block(32, 32, 5..19, 7..25);
        let (d, i) = dice_iou(&eroded, &gt).unwrap();
        assert!(d < 1.0 && i < 1.0);
    }

    proptest! {
        #[test]
        fn dice_iou_identity_and_symmetry(a in proptest::collection::vec(0u8..2, 64), b in proptest::collection::vec(0u8..2, 64)) {
            let ma = BinaryMask { height: 8, width: 8, data: a };
            let mb = BinaryMask { height: 8, width: 8, data: b };
            let (d, i) = dice_iou(&ma, &mb).unwrap();
            prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-9);
            prop_assert_eq!(dice_iou(&mb, &ma).unwrap(), (d, i));
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [PromptMode::GtBox, PromptMode::Learned, PromptMode::LearnedPlusBox, PromptMode::CosineBaseline] {
            assert_eq!(m.to_string().parse::<PromptMode>().unwrap(), m);
        }
        assert_eq!("oracle".parse::<PromptMode>().unwrap_err().kind(), "config");
    }

    #[test]
    fn report_format() {
        let row = MetricRow {
            model: "SAM2 (Hiera-Base+)".into(),
            dataset: "Hip".into(),
            prompt_mode: PromptMode::GtBox,
            dice: 0.782,
            iou: 0.652,
            n_images: 10,
        };
        assert_eq!(row.report(), "SAM2 (Hiera-Base+), Hip → 78.2/65.2");
        assert!(format_table(&[row]).starts_with(MetricRow::TSV_HEADER));
    }

    fn emb_from(values: Vec<f64>, c: usize, g: usize) -> ImageEmbedding {
        ImageEmbedding(Tensor::from_vec(values, (c, g, g), &Device::Cpu).unwrap())
    }

    #[test]
    fn uniform_embedding_ties_break_to_first_patch() {
        let e = emb_from(vec![1.0; 4 * 16], 4, 4);
        let mask = block(64, 64, 20..40, 20..40);
        let p = cosine_baseline_prompts(&e, &mask, &e).unwrap();
        assert_eq!((p.points[0].x, p.points[0].y), (0.125, 0.125));
        assert_eq!(p.boxes[0], BoxCoords::new(0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn self_similarity_finds_the_object() {
        let (c, g) = (3, 4);
        let mut v = vec![0.0; c * g * g];
        for p in 0..g * g {
            let inside = p == 5 || p == 6;
            v[p] = if inside { 1.0 } else { 0.1 };
            v[g * g + p] = if inside { 0.0 } else { 1.0 };
            v[2 * g * g + p] = 0.2 + 0.01 * p as f64;
        }
        let e = emb_from(v, c, g);
        let mask = block(64, 64, 16..32, 16..48);
        let p = cosine_baseline_prompts(&e, &mask, &e).unwrap();
        let (px, py) = ((p.points[0].x * 64.0) as usize, (p.points[0].y * 64.0) as usize);
        assert!(mask.get(py, px));
        assert_eq!(cosine_baseline_prompts(&e, &BinaryMask::zeros(64, 64), &e).unwrap_err().kind(), "input");
    }
}
