//! Random geometric augmentation. All transforms compose into one affine map
//! that is applied to the image and every mask with nearest-neighbour
//! sampling, so image and mask pixels always move together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::backbone::{BinaryMask, ImageTensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    pub p_translate: f64,
    pub p_rotate: f64,
    pub p_crop: f64,
    pub translate_frac: f64,
    pub rotate_range: [f64; 2],
    pub crop_scale: [f64; 2],
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            p_translate: 0.5,
            p_rotate: 0.5,
            p_crop: 0.5,
            translate_frac: 0.2,
            rotate_range: [-90.0, 90.0],
            crop_scale: [0.8, 1.0],
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            p_flip_h: 0.0,
            p_flip_v: 0.0,
            p_translate: 0.0,
            p_rotate: 0.0,
            p_crop: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_flip_h", self.p_flip_h),
            ("p_flip_v", self.p_flip_v),
            ("p_translate", self.p_translate),
            ("p_rotate", self.p_rotate),
            ("p_crop", self.p_crop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} is not a probability")));
            }
        }
        if !(self.crop_scale[0] > 0.0 && self.crop_scale[0] <= self.crop_scale[1] && self.crop_scale[1] <= 1.0) {
            return Err(Error::Config(format!("augment.crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale)));
        }
        if self.rotate_range[0] > self.rotate_range[1] {
            return Err(Error::Config("augment.rotate_range must be ordered".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        [self.p_flip_h, self.p_flip_v, self.p_translate, self.p_rotate, self.p_crop]
            .iter()
            .all(|&p| p == 0.0)
    }
}

/// Row-major 2×3 affine map on centred continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine([f64; 6]);

impl Affine {
    const IDENTITY: Self = Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    /// `other ∘ self`
    fn then(self, other: Self) -> Self {
        let [a, b, c, d, e, f] = self.0;
        let [p, q, r, s, t, u] = other.0;
        Self([
            p * a + q * d,
            p * b + q * e,
            p * c + q * f + r,
            s * a + t * d,
            s * b + t * e,
            s * c + t * f + u,
        ])
    }

    fn inverse(self) -> Self {
        let [a, b, c, d, e, f] = self.0;
        let det = a * e - b * d;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Self([ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)])
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, c, d, e, f] = self.0;
        (a * x + b * y + c, d * x + e * y + f)
    }
}

fn draw_transform(policy: &AugmentationPolicy, rng: &mut ChaCha8Rng, h: f64, w: f64) -> Option<Affine> {
    let mut m = Affine::IDENTITY;
    let mut any = false;
    let mut chosen = |p: f64, rng: &mut ChaCha8Rng| {
        let hit = p > 0.0 && rng.random::<f64>() < p;
        any |= hit;
        hit
    };
    if chosen(policy.p_flip_h, rng) {
        m = m.then(Affine([-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
    }
    if chosen(policy.p_flip_v, rng) {
        m = m.then(Affine([1.0, 0.0, 0.0, 0.0, -1.0, 0.0]));
    }
    if chosen(policy.p_translate, rng) {
        let f = policy.translate_frac;
        let tx = rng.random_range(-f..=f) * w;
        let ty = rng.random_range(-f..=f) * h;
        m = m.then(Affine([1.0, 0.0, tx, 0.0, 1.0, ty]));
    }
    if chosen(policy.p_rotate, rng) {
        let [lo, hi] = policy.rotate_range;
        let theta = rng.random_range(lo..=hi).to_radians();
        let (s, c) = theta.sin_cos();
        m = m.then(Affine([c, -s, 0.0, s, c, 0.0]));
    }
    if chosen(policy.p_crop, rng) {
        let [lo, hi] = policy.crop_scale;
        let side = rng.random_range(lo..=hi).sqrt();
        let cx = rng.random_range(-0.5..=0.5) * (1.0 - side) * w;
        let cy = rng.random_range(-0.5..=0.5) * (1.0 - side) * h;
        m = m.then(Affine([1.0 / side, 0.0, -cx / side, 0.0, 1.0 / side, -cy / side]));
    }
    any.then_some(m)
}

/// For each output pixel, the source pixel index (or `None` when outside).
fn source_map(m: &Affine, h: usize, w: usize) -> Vec<Option<usize>> {
    let inv = m.inverse();
    let (hh, hw) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = inv.apply(x as f64 + 0.5 - hw, y as f64 + 0.5 - hh);
            let (sx, sy) = ((u + hw).floor(), (v + hh).floor());
            out.push(
                (sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64)
                    .then(|| sy as usize * w + sx as usize),
            );
        }
    }
    out
}

/// Applies a random draw of `policy` seeded by `seed`.
pub fn augment(sample: &Sample, policy: &AugmentationPolicy, seed: u64) -> Sample {
    let (h, w) = (sample.image.height, sample.image.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Some(m) = draw_transform(policy, &mut rng, h as f64, w as f64) else {
        return sample.clone();
    };
    let map = source_map(&m, h, w);
    let plane = h * w;
    let mut image = ImageTensor::zeros(h, w);
    for c in 0..3 {
        let src = &sample.image.data[c * plane..(c + 1) * plane];
        for (dst, s) in image.data[c * plane..(c + 1) * plane].iter_mut().zip(&map) {
            *dst = s.map_or(0.0, |i| src[i]);
        }
    }
    let masks = sample
        .masks
        .iter()
        .map(|mask| BinaryMask {
            height: h,
            width: w,
            data: map.iter().map(|s| s.map_or(0, |i| mask.data[i])).collect(),
        })
        .collect();
    let mut out = Sample {
        id: sample.id.clone(),
        image,
        masks,
        present: Vec::new(),
        pad: sample.pad,
    };
    out.recompute_present();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn marker_sample(h: usize, w: usize, markers: &[(usize, usize)]) -> Sample {
        let mut gray = vec![0.25f32; h * w];
        let mut mask = BinaryMask::zeros(h, w);
        for &(y, x) in markers {
            gray[y * w + x] = 1.0;
            mask.set(y, x, true);
        }
        Sample::new("m", ImageTensor::from_gray(h, w, &gray), vec![mask])
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let s = marker_sample(32, 32, &[(3, 4), (10, 20)]);
        for seed in 0..20 {
            assert_eq!(augment(&s, &AugmentationPolicy::none(), seed), s);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let s = marker_sample(48, 48, &[(5, 6), (30, 40)]);
        let p = AugmentationPolicy::default();
        assert_eq!(augment(&s, &p, 9), augment(&s, &p, 9));
    }

    #[test]
    fn horizontal_flip_mirrors_columns() {
        let s = marker_sample(16, 24, &[(3, 5), (9, 0)]);
        let p = AugmentationPolicy {
            p_flip_h: 1.0,
            ..AugmentationPolicy::none()
        };
        let out = augment(&s, &p, 0);
        for y in 0..16 {
            for x in 0..24 {
                assert_eq!(out.masks[0].get(y, x), s.masks[0].get(y, 23 - x));
                assert_eq!(out.image.at(0, y, x), s.image.at(0, y, 23 - x));
            }
        }
    }

    #[test]
    fn vertical_flip_mirrors_rows() {
        let s = marker_sample(10, 10, &[(2, 7)]);
        let p = AugmentationPolicy {
            p_flip_v: 1.0,
            ..AugmentationPolicy::none()
        };
        assert!(augment(&s, &p, 0).masks[0].get(7, 7));
    }

    proptest! {
        #[test]
        fn markers_move_together(seed in any::<u64>(), ys in proptest::collection::vec((0usize..40, 0usize..40), 1..6)) {
            let s = marker_sample(40, 40, &ys);
            let out = augment(&s, &AugmentationPolicy::default(), seed);
            for i in 0..40 * 40 {
                prop_assert_eq!(out.image.data[i] == 1.0, out.masks[0].data[i] != 0);
            }
            prop_assert_eq!(out.present[0], !out.masks[0].is_empty());
        }
    }
}
