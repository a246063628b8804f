//! Training objective: focal mask loss (mask prompt and final mask), L1 +
//! GIoU box loss and BCE objectness loss, combined with weights λ1..λ3.
//!
//! The focal term is used in the form
//! `-y (1-p)^γ log p - α (1-y) p^γ log(1-p)`: α scales only the background
//! term, unlike the α-balanced variant that also scales the foreground
//! term by `1-α`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{BinaryMask, BoxCoords};
use crate::error::{Error, Result};
use crate::fused;
use crate::nn::sigmoid;

pub const PROB_EPS: f64 = 1e-7;

/// Placeholder regression target for samples without an object; its box
/// terms are always masked out.
const ABSENT_BOX: [f64; 4] = [0.0, 0.0, 1.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 1.0,
            gamma: 3.0,
            alpha: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda1, self.lambda2, self.lambda3, self.gamma]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && (0.0..=1.0).contains(&self.alpha);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mask_prompt_focal: f64,
    pub final_mask_focal: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub objectness_bce: f64,
}

impl LossReport {
    pub fn compose(&self, w: &LossWeights) -> f64 {
        w.lambda1 * (self.mask_prompt_focal + self.final_mask_focal)
            + w.lambda2 * (self.box_l1 + self.box_giou)
            + w.lambda3 * self.objectness_bce
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.mask_prompt_focal,
            self.final_mask_focal,
            self.box_l1,
            self.box_giou,
            self.objectness_bce,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Input(format!(
            "shape mismatch: prediction {:?} vs target {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn focal_elementwise(pred_prob: &Tensor, target: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    fused::focal(pred_prob, target, gamma, alpha, PROB_EPS)
}

/// Mean focal loss over all elements.
pub fn focal_loss(pred_prob: &Tensor, target: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    check_same_shape(pred_prob, target)?;
    Ok(focal_elementwise(pred_prob, target, gamma, alpha)?.mean_all()?)
}

/// Focal loss averaged per sample over all non-batch axes: `(B, …)` → `(B,)`.
pub fn focal_loss_per_sample(pred_prob: &Tensor, target: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    check_same_shape(pred_prob, target)?;
    let b = pred_prob.dims()[0];
    Ok(focal_elementwise(pred_prob, target, gamma, alpha)?
        .reshape((b, ()))?
        .mean(D::Minus1)?)
}

fn box_columns(boxes: &Tensor) -> Result<[Tensor; 4]> {
    Ok([
        boxes.narrow(1, 0, 1)?.squeeze(1)?,
        boxes.narrow(1, 1, 1)?.squeeze(1)?,
        boxes.narrow(1, 2, 1)?.squeeze(1)?,
        boxes.narrow(1, 3, 1)?.squeeze(1)?,
    ])
}

fn check_boxes(boxes: &Tensor) -> Result<()> {
    let rows = boxes.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    for r in rows {
        if !(r[0] < r[2] && r[1] < r[3]) {
            return Err(Error::Input(format!("degenerate box {r:?} has zero area")));
        }
    }
    Ok(())
}

/// Generalized IoU per row of two `(B, 4)` box tensors → `(B,)`.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    check_boxes(a)?;
    check_boxes(b)?;
    let [ax1, ay1, ax2, ay2] = box_columns(a)?;
    let [bx1, by1, bx2, by2] = box_columns(b)?;
    let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
    let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?;
    let iou = inter.div(&union)?;
    let ew = (ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?;
    let eh = (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?;
    let enclosing = (ew * eh)?;
    let penalty = ((&enclosing - &union)? / &enclosing)?;
    Ok((iou - penalty)?)
}

fn boxes_tensor(boxes: &[BoxCoords]) -> Result<Tensor> {
    let data: Vec<f64> = boxes.iter().flat_map(|b| b.to_array()).collect();
    Ok(Tensor::from_vec(data, (boxes.len(), 4), &Device::Cpu)?)
}

/// Scalar GIoU of two boxes.
pub fn giou(a: BoxCoords, b: BoxCoords) -> Result<f64> {
    let g = giou_tensor(&boxes_tensor(&[a])?, &boxes_tensor(&[b])?)?;
    Ok(g.get(0)?.to_scalar::<f64>()?)
}

/// `(l1, 1 - GIoU)` per sample, L1 averaged over the 4 coordinates.
pub fn box_loss_tensor(pred: &Tensor, gt: &Tensor) -> Result<(Tensor, Tensor)> {
    check_same_shape(pred, gt)?;
    let l1 = (pred - gt)?.abs()?.mean(D::Minus1)?;
    let giou_loss = giou_tensor(pred, gt)?.affine(-1.0, 1.0)?;
    Ok((l1, giou_loss))
}

pub fn box_loss(pred: BoxCoords, gt: BoxCoords) -> Result<(f64, f64)> {
    let (l1, g) = box_loss_tensor(&boxes_tensor(&[pred])?, &boxes_tensor(&[gt])?)?;
    Ok((l1.get(0)?.to_scalar::<f64>()?, g.get(0)?.to_scalar::<f64>()?))
}

/// Numerically stable binary cross-entropy with logits, elementwise.
pub fn objectness_loss_tensor(logits: &Tensor, present: &Tensor) -> Result<Tensor> {
    check_same_shape(logits, present)?;
    let softplus_neg_abs = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * present)?)? + softplus_neg_abs)?)
}

pub fn objectness_loss(logit: f64, present: bool) -> Result<f64> {
    let l = Tensor::new(&[logit], &Device::Cpu)?;
    let y = Tensor::new(&[if present { 1.0f64 } else { 0.0 }], &Device::Cpu)?;
    Ok(objectness_loss_tensor(&l, &y)?.get(0)?.to_scalar::<f64>()?)
}

/// Batched regression targets derived from ground-truth masks.
#[derive(Clone, Debug)]
pub struct LossTargets {
    /// `(B, S, S)` in {0, 1}
    pub mask: Tensor,
    /// `(B, 1, m, m)`: nearest-neighbour copy at mask-prompt resolution.
    pub mask_small: Tensor,
    /// `(B, 4)` normalized tight boxes.
    pub boxes: Tensor,
    /// `(B,)` in {0, 1}
    pub present: Tensor,
}

impl LossTargets {
    pub fn from_masks(masks: &[&BinaryMask], mask_prompt_size: usize, dtype: DType) -> Result<Self> {
        let b = masks.len();
        let s = masks.first().map(|m| m.height).unwrap_or(0);
        let m = mask_prompt_size;
        let mut full = Vec::with_capacity(b * s * s);
        let mut small = Vec::with_capacity(b * m * m);
        let mut boxes = Vec::with_capacity(4 * b);
        let mut present = Vec::with_capacity(b);
        for mask in masks {
            if mask.height != s || mask.width != s {
                return Err(Error::Input(format!(
                    "ground-truth masks must all be {s}x{s}, got {}x{}",
                    mask.height, mask.width
                )));
            }
            full.extend(mask.to_f32());
            small.extend(mask.resize_nearest(m, m).to_f32());
            match mask.normalized_bbox() {
                Some(bb) => {
                    boxes.extend(bb.to_array().map(|v| v as f32));
                    present.push(1.0f32);
                }
                None => {
                    boxes.extend(ABSENT_BOX.map(|v| v as f32));
                    present.push(0.0);
                }
            }
        }
        let dev = Device::Cpu;
        Ok(Self {
            mask: Tensor::from_vec(full, (b, s, s), &dev)?.to_dtype(dtype)?,
            mask_small: Tensor::from_vec(small, (b, 1, m, m), &dev)?.to_dtype(dtype)?,
            boxes: Tensor::from_vec(boxes, (b, 4), &dev)?.to_dtype(dtype)?,
            present: Tensor::from_vec(present, b, &dev)?.to_dtype(dtype)?,
        })
    }

    /// Replaces the mask-derived boxes with explicit ones for present rows.
    pub fn with_boxes(mut self, boxes: &Tensor) -> Result<Self> {
        let present = self.present.unsqueeze(1)?;
        let absent = present.affine(-1.0, 1.0)?;
        let placeholder = self.boxes.broadcast_mul(&absent)?;
        self.boxes = (boxes.broadcast_mul(&present)? + placeholder)?;
        Ok(self)
    }
}

/// Model outputs entering the objective.
pub struct Predictions<'a> {
    /// `(B, 1, m, m)`
    pub mask_prompt_logits: &'a Tensor,
    /// `(B, S, S)`
    pub mask_logits: &'a Tensor,
    /// `(B, 4)`
    pub boxes: &'a Tensor,
    /// `(B,)`
    pub objectness: &'a Tensor,
}

/// Differentiable per-term losses, each averaged over the batch. Mask and
/// box terms of samples without an object are zeroed.
pub struct LossTerms {
    pub total: Tensor,
    pub mask_prompt_focal: Tensor,
    pub final_mask_focal: Tensor,
    pub box_l1: Tensor,
    pub box_giou: Tensor,
    pub objectness_bce: Tensor,
}

impl LossTerms {
    pub fn report(&self) -> Result<LossReport> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossReport {
            total: v(&self.total)?,
            mask_prompt_focal: v(&self.mask_prompt_focal)?,
            final_mask_focal: v(&self.final_mask_focal)?,
            box_l1: v(&self.box_l1)?,
            box_giou: v(&self.box_giou)?,
            objectness_bce: v(&self.objectness_bce)?,
        })
    }
}

pub fn total_loss(pred: &Predictions<'_>, targets: &LossTargets, w: &LossWeights) -> Result<LossTerms> {
    let present = &targets.present;
    let prompt_prob = sigmoid(pred.mask_prompt_logits)?;
    let final_prob = sigmoid(pred.mask_logits)?;
    let mask_prompt_focal = (focal_loss_per_sample(&prompt_prob, &targets.mask_small, w.gamma, w.alpha)? * present)?.mean_all()?;
    let final_mask_focal = (focal_loss_per_sample(&final_prob, &targets.mask, w.gamma, w.alpha)? * present)?.mean_all()?;
    let (l1, giou_loss) = box_loss_tensor(pred.boxes, &targets.boxes)?;
    let box_l1 = (l1 * present)?.mean_all()?;
    let box_giou = (giou_loss * present)?.mean_all()?;
    let objectness_bce = objectness_loss_tensor(pred.objectness, present)?.mean_all()?;

    let total = ((mask_prompt_focal.clone() + &final_mask_focal)?.affine(w.lambda1, 0.0)?
        + (box_l1.clone() + &box_giou)?.affine(w.lambda2, 0.0)?)?
        .add(&objectness_bce.affine(w.lambda3, 0.0)?)?;
    Ok(LossTerms {
        total,
        mask_prompt_focal,
        final_mask_focal,
        box_l1,
        box_giou,
        objectness_bce,
    })
}

/// Reports the terms with `total` recomposed in f64 from the components, so
/// the weighted-sum identity holds exactly.
pub fn report_from_terms(terms: &LossTerms, w: &LossWeights) -> Result<LossReport> {
    let mut r = terms.report()?;
    r.total = r.compose(w);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    // Independent scalar oracles.
    fn focal_oracle(p: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        -y * (1.0 - p).powf(gamma) * p.ln() - alpha * (1.0 - y) * p.powf(gamma) * (1.0 - p).ln()
    }

    fn giou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
        let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
        let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let inter = iw * ih;
        let union = area(a) + area(b) - inter;
        let enc = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
        inter / union - (enc - union) / enc
    }

    fn bce_oracle(x: f64, y: f64) -> f64 {
        let p = 1.0 / (1.0 + (-x).exp());
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    #[test]
    fn focal_scalar_examples() {
        let one = focal_loss(&t1(&[0.5]), &t1(&[1.0]), 3.0, 0.7).unwrap();
        assert_abs_diff_eq!(scalar(&one), 0.125 * std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(scalar(&one), 0.08664, epsilon = 1e-4);
        let zero = focal_loss(&t1(&[0.5]), &t1(&[0.0]), 3.0, 0.7).unwrap();
        assert_abs_diff_eq!(scalar(&zero), 0.06065, epsilon = 1e-4);
        let perfect = focal_loss(&t1(&[1.0 - PROB_EPS; 16]), &t1(&[1.0; 16]), 3.0, 0.7).unwrap();
        assert!(scalar(&perfect) < 1e-5);
    }

    #[test]
    fn focal_shape_mismatch_is_input_error() {
        let r = focal_loss(&t1(&[0.5, 0.5]), &t1(&[1.0]), 3.0, 0.7);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn focal_reduces_to_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..1000).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<f64> = (0..1000).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
        let focal = scalar(&focal_loss(&t1(&p), &t1(&y), 0.0, 1.0).unwrap());
        let bce: f64 = p.iter().zip(&y).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / 1000.0;
        assert!((focal - bce).abs() < 1e-9);
    }

    #[test]
    fn focal_monotone_for_positive_pixels() {
        let ps: Vec<f64> = (1..200).map(|i| i as f64 / 200.0).collect();
        let losses: Vec<f64> = ps
            .iter()
            .map(|&p| scalar(&focal_loss(&t1(&[p]), &t1(&[1.0]), 3.0, 0.7).unwrap()))
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn giou_examples() {
        let a = BoxCoords::new(0.1, 0.2, 0.6, 0.9);
        assert_abs_diff_eq!(giou(a, a).unwrap(), 1.0, epsilon = 1e-12);
        // Two disjoint 0.33-sided boxes in opposite corners: union 2·0.33², enclosing 1.
        let g = giou(BoxCoords::new(0.0, 0.0, 0.33, 0.33), BoxCoords::new(0.67, 0.67, 1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(g, -(1.0 - 2.0 * 0.33 * 0.33), epsilon = 1e-12);
        assert_abs_diff_eq!(g, -0.7822, epsilon = 1e-4);
        let g = giou(BoxCoords::new(0.0, 0.0, 0.33, 0.33), BoxCoords::new(0.66, 0.66, 1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(g, -(1.0 - (0.33 * 0.33 + 0.34 * 0.34)), epsilon = 1e-12);
        let degenerate = BoxCoords::new(0.2, 0.2, 0.2, 0.5);
        assert!(matches!(giou(degenerate, a), Err(Error::Input(_))));
    }

    #[test]
    fn box_loss_examples() {
        let gt = BoxCoords::new(0.0, 0.0, 1.0, 1.0);
        let (l1, g) = box_loss(BoxCoords::new(0.0, 0.0, 0.5, 0.5), gt).unwrap();
        assert_abs_diff_eq!(l1, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(g, 0.75, epsilon = 1e-12);
        let b = BoxCoords::new(0.1, 0.1, 0.4, 0.5);
        assert_eq!(box_loss(b, b).unwrap(), (0.0, 0.0));
        let shifted = BoxCoords::new(0.2, 0.2, 0.5, 0.6);
        let (l1, _) = box_loss(shifted, b).unwrap();
        assert_abs_diff_eq!(l1, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn bce_examples() {
        assert_abs_diff_eq!(objectness_loss(0.0, true).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(objectness_loss(0.0, false).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(objectness_loss(20.0, true).unwrap() < 1e-8);
        assert_abs_diff_eq!(objectness_loss(-2.0, true).unwrap(), (1.0 + 2f64.exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(objectness_loss(-2.0, true).unwrap(), 2.1269, epsilon = 1e-4);
        assert_abs_diff_eq!(objectness_loss(-800.0, true).unwrap(), 800.0, epsilon = 1e-9);
    }

    fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
        let x1 = rng.random_range(0.0..0.7);
        let y1 = rng.random_range(0.0..0.7);
        [x1, y1, x1 + rng.random_range(0.05..0.3), y1 + rng.random_range(0.05..0.3)]
    }

    #[test]
    fn giou_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let gab = giou(BoxCoords::from_array(a), BoxCoords::from_array(b)).unwrap();
            let gba = giou(BoxCoords::from_array(b), BoxCoords::from_array(a)).unwrap();
            assert_eq!(gab.to_bits(), gba.to_bits());
            assert!(gab > -1.0 && gab <= 1.0);
            assert_abs_diff_eq!(gab, giou_oracle(a, b), epsilon = 1e-12);
            let s = rng.random_range(0.1..3.0);
            let scaled = giou_tensor(
                &Tensor::from_slice(&a.map(|v| v * s), (1, 4), &Device::Cpu).unwrap(),
                &Tensor::from_slice(&b.map(|v| v * s), (1, 4), &Device::Cpu).unwrap(),
            )
            .unwrap()
            .get(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
            assert!((scaled - gab).abs() < 1e-9);
        }
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += h;
        minus[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(21);

        // focal w.r.t. probabilities
        let p: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..0.95)).collect();
        let y: Vec<f64> = (0..12).map(|i| f64::from((i % 3 == 0) as u8)).collect();
        let var = candle_core::Var::from_slice(&p, 12, &Device::Cpu).unwrap();
        let loss = focal_loss(var.as_tensor(), &t1(&y), 3.0, 0.7).unwrap();
        let grad: Vec<f64> = loss.backward().unwrap().get(&var).unwrap().to_vec1().unwrap();
        let f = |x: &[f64]| x.iter().zip(&y).map(|(p, y)| focal_oracle(*p, *y, 3.0, 0.7)).sum::<f64>() / 12.0;
        for i in 0..12 {
            assert!(rel_err(grad[i], central_difference(f, &p, i, h)) < 1e-4);
        }

        // GIoU and L1 w.r.t. predicted box
        for _ in 0..20 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let var = candle_core::Var::from_slice(&a, (1, 4), &Device::Cpu).unwrap();
            let gt = Tensor::from_slice(&b, (1, 4), &Device::Cpu).unwrap();
            let (l1, gl) = box_loss_tensor(var.as_tensor(), &gt).unwrap();
            let g_giou: Vec<f64> = gl.sum_all().unwrap().backward().unwrap().get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let g_l1: Vec<f64> = l1.sum_all().unwrap().backward().unwrap().get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let fg = |x: &[f64]| 1.0 - giou_oracle([x[0], x[1], x[2], x[3]], b);
            let fl = |x: &[f64]| x.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!(rel_err(g_giou[i], central_difference(fg, &a, i, h)) < 1e-4, "giou coord {i}");
                assert!(rel_err(g_l1[i], central_difference(fl, &a, i, h)) < 1e-4, "l1 coord {i}");
            }
        }

        // BCE w.r.t. logit
        for &(x, y) in &[(-3.0, 1.0), (0.7, 0.0), (2.5, 1.0), (-0.2, 0.0)] {
            let var = candle_core::Var::from_slice(&[x], 1, &Device::Cpu).unwrap();
            let l = objectness_loss_tensor(var.as_tensor(), &t1(&[y])).unwrap().sum_all().unwrap();
            let g: Vec<f64> = l.backward().unwrap().get(&var).unwrap().to_vec1().unwrap();
            let fd = central_difference(|v| bce_oracle(v[0], y), &[x], 0, h);
            assert!(rel_err(g[0], fd) < 1e-4);
        }
    }

    fn random_targets(rng: &mut ChaCha8Rng, present: bool) -> (BinaryMask, LossTargets) {
        let (y0, x0) = (rng.random_range(0..8), rng.random_range(0..8));
        let mask = BinaryMask::from_fn(16, 16, |y, x| present && (y0..y0 + 6).contains(&y) && (x0..x0 + 5).contains(&x));
        let targets = LossTargets::from_masks(&[&mask], 8, DType::F64).unwrap();
        (mask, targets)
    }

    #[test]
    fn total_loss_composes_independent_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let w = LossWeights::default();
        let (mask, targets) = random_targets(&mut rng, true);
        let prompt: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fin: Vec<f64> = (0..256).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pbox = [0.2, 0.1, 0.7, 0.6];
        let obj = 0.4;
        let pt = Tensor::from_slice(&prompt, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let ft = Tensor::from_slice(&fin, (1, 16, 16), &Device::Cpu).unwrap();
        let bt = Tensor::from_slice(&pbox, (1, 4), &Device::Cpu).unwrap();
        let ot = Tensor::from_slice(&[obj], 1, &Device::Cpu).unwrap();
        let terms = total_loss(
            &Predictions { mask_prompt_logits: &pt, mask_logits: &ft, boxes: &bt, objectness: &ot },
            &targets,
            &w,
        )
        .unwrap();
        let report = report_from_terms(&terms, &w).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let small = mask.resize_nearest(8, 8);
        let prompt_focal = prompt.iter().zip(&small.data).map(|(l, y)| focal_oracle(sig(*l), f64::from(*y), 3.0, 0.7)).sum::<f64>() / 64.0;
        let final_focal = fin.iter().zip(&mask.data).map(|(l, y)| focal_oracle(sig(*l), f64::from(*y), 3.0, 0.7)).sum::<f64>() / 256.0;
        let gt = mask.normalized_bbox().unwrap().to_array();
        let l1 = pbox.iter().zip(&gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;
        let gl = 1.0 - giou_oracle(pbox, gt);
        let bce = bce_oracle(obj, 1.0);
        let expected = 10.0 * (prompt_focal + final_focal) + (l1 + gl) + bce;
        assert_abs_diff_eq!(report.mask_prompt_focal, prompt_focal, epsilon = 1e-10);
        assert_abs_diff_eq!(report.final_mask_focal, final_focal, epsilon = 1e-10);
        assert_abs_diff_eq!(report.box_l1, l1, epsilon = 1e-12);
        assert_abs_diff_eq!(report.box_giou, gl, epsilon = 1e-12);
        assert_abs_diff_eq!(report.objectness_bce, bce, epsilon = 1e-12);
        assert_abs_diff_eq!(report.total, expected, epsilon = 1e-9);
        assert_abs_diff_eq!(scalar(&terms.total), expected, epsilon = 1e-9);
        assert_eq!(report.total, report.compose(&w));
    }

    #[test]
    fn absent_object_keeps_only_objectness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = LossWeights::default();
        let (_, targets) = random_targets(&mut rng, false);
        let pt = Tensor::ones((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let ft = Tensor::ones((1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let bt = Tensor::from_slice(&[0.1, 0.1, 0.3, 0.3], (1, 4), &Device::Cpu).unwrap();
        let ot = Tensor::from_slice(&[1.5], 1, &Device::Cpu).unwrap();
        let terms = total_loss(
            &Predictions { mask_prompt_logits: &pt, mask_logits: &ft, boxes: &bt, objectness: &ot },
            &targets,
            &w,
        )
        .unwrap();
        let r = report_from_terms(&terms, &w).unwrap();
        assert_eq!(r.total, w.lambda3 * r.objectness_bce);
        assert_eq!(scalar(&terms.total), w.lambda3 * objectness_loss(1.5, false).unwrap());
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = LossWeights::default();
        let (mask, targets) = random_targets(&mut rng, true);
        let to_logits = |m: &BinaryMask| m.data.iter().map(|&v| if v != 0 { 40.0 } else { -40.0 }).collect::<Vec<f64>>();
        let pt = Tensor::from_vec(to_logits(&mask.resize_nearest(8, 8)), (1, 1, 8, 8), &Device::Cpu).unwrap();
        let ft = Tensor::from_vec(to_logits(&mask), (1, 16, 16), &Device::Cpu).unwrap();
        let ot = Tensor::from_slice(&[40.0], 1, &Device::Cpu).unwrap();
        let terms = total_loss(
            &Predictions { mask_prompt_logits: &pt, mask_logits: &ft, boxes: &targets.boxes, objectness: &ot },
            &targets,
            &w,
        )
        .unwrap();
        assert!(report_from_terms(&terms, &w).unwrap().total < 1e-4);
    }
}
