//! Synthetic ultrasound-like images: dark speckled tissue with a bright
//! curved band per class (bone surface) casting an acoustic shadow.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::backbone::{BinaryMask, ImageTensor};
use crate::error::{Error, Result};

const SPECKLE_SHAPE: f64 = 4.0;
const SHADOW_GAIN: f32 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub empty_fraction: f64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 50,
            empty_fraction: 0.2,
            height: 256,
            width: 256,
            num_classes: 1,
        }
    }
}

impl SynthConfig {
    pub fn new(seed: u64, count: usize) -> Self {
        Self {
            seed,
            count,
            ..Self::default()
        }
    }

    pub fn empty_count(&self) -> usize {
        (self.count as f64 * self.empty_fraction).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic dataset count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return Err(Error::Config(format!("empty_fraction {} outside [0, 1]", self.empty_fraction)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config("synthetic images must be at least 32x32".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Quadratic arc `y = y0 + a (x - xc)^2` on `[xs, xe]` with vertical thickness.
struct Arc {
    xs: f64,
    xe: f64,
    xc: f64,
    y0: f64,
    a: f64,
    half_thickness: f64,
    brightness: f32,
}

impl Arc {
    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64, zone: (f64, f64)) -> Self {
        let len = rng.random_range(0.4..0.9) * w;
        let margin = 0.05 * w;
        let xs = rng.random_range(margin..(w - len - margin).max(margin + 1.0));
        let xe = xs + len;
        let xc = rng.random_range(xs + 0.25 * len..xe - 0.25 * len);
        let half_span = (xe - xc).max(xc - xs);
        let sag = rng.random_range(-1.0..1.0) * 0.1 * h;
        let a = sag / (half_span * half_span);
        let y0_lo = zone.0 * h - sag.min(0.0);
        let y0_hi = (zone.1 * h - sag.max(0.0)).max(y0_lo + 1.0);
        Self {
            xs,
            xe,
            xc,
            y0: rng.random_range(y0_lo..y0_hi),
            a,
            half_thickness: 0.5 * rng.random_range(8.0..20.0) * h / 256.0,
            brightness: rng.random_range(0.7..0.9),
        }
    }

    fn centre(&self, x: f64) -> Option<f64> {
        (x >= self.xs && x <= self.xe).then(|| self.y0 + self.a * (x - self.xc).powi(2))
    }
}

/// Generates one sample; `present[k]` chooses whether class `k` has a band.
fn generate_one(config: &SynthConfig, index: usize, empty: bool) -> Sample {
    let (h, w) = (config.height, config.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = rng_for(config.seed, index as u64);
    let k = config.num_classes;

    let mut gray = vec![0f32; h * w];
    let base = rng.random_range(0.06..0.12);
    let blobs: Vec<(f64, f64, f64, f32)> = (0..rng.random_range(2..6))
        .map(|_| {
            (
                rng.random_range(0.0..wf),
                rng.random_range(0.0..hf),
                rng.random_range(0.05..0.2) * wf,
                rng.random_range(0.04..0.14),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut v = base + 0.05 * (y as f32 / h as f32);
            for &(bx, by, r, amp) in &blobs {
                let d2 = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (r * r);
                v += amp * (-d2).exp() as f32;
            }
            gray[y * w + x] = v;
        }
    }

    let mut masks = vec![BinaryMask::zeros(h, w); k];
    if !empty {
        for (class, mask) in masks.iter_mut().enumerate() {
            let lo = 0.25 + 0.5 * class as f64 / k as f64;
            let hi = 0.25 + 0.5 * (class as f64 + 1.0) / k as f64;
            let arc = Arc::random(&mut rng, hf, wf, (lo, hi));
            for x in 0..w {
                let Some(c) = arc.centre(x as f64 + 0.5) else {
                    continue;
                };
                for y in 0..h {
                    let d = (y as f64 + 0.5 - c) / arc.half_thickness;
                    if d.abs() <= 1.0 {
                        mask.set(y, x, true);
                        gray[y * w + x] = arc.brightness * (1.0 - 0.25 * (d * d) as f32);
                    } else if d > 1.0 {
                        let fade = (-(d - 1.0) * arc.half_thickness / (0.6 * hf)).exp() as f32;
                        gray[y * w + x] *= 1.0 - (1.0 - SHADOW_GAIN) * fade;
                    }
                }
            }
        }
    }

    let speckle = Gamma::new(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE).expect("valid gamma parameters");
    for v in &mut gray {
        *v = (*v * speckle.sample(&mut rng) as f32).clamp(0.0, 1.0);
    }
    Sample::new(format!("synth_{index:05}"), ImageTensor::from_gray(h, w, &gray), masks)
}

/// Deterministic synthetic dataset; exactly `round(count · empty_fraction)`
/// samples contain no object.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut order: Vec<usize> = (0..config.count).collect();
    order.shuffle(&mut rng_for(config.seed, u64::MAX));
    let mut empty = vec![false; config.count];
    for &i in &order[..config.empty_count()] {
        empty[i] = true;
    }
    Ok((0..config.count).map(|i| generate_one(config, i, empty[i])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_empty_count_and_determinism() {
        let cfg = SynthConfig::new(7, 50);
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a.iter().filter(|s| !s.present[0]).count(), 10);
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.image.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn zero_count_is_rejected() {
        assert_eq!(synth_generate(&SynthConfig::new(1, 0)).unwrap_err().kind(), "config");
    }

    #[test]
    fn foreground_fraction_bounds_over_many_seeds() {
        let cfg = SynthConfig {
            empty_fraction: 0.0,
            ..SynthConfig::new(0, 1)
        };
        for seed in 0..1000u64 {
            let s = generate_one(&SynthConfig { seed, ..cfg.clone() }, 0, false);
            let frac = s.masks[0].count() as f64 / (256.0 * 256.0);
            assert!((0.01..=0.40).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn band_is_brighter_than_background() {
        let s = generate_one(&SynthConfig::new(3, 1), 0, false);
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
        for (i, &m) in s.masks[0].data.iter().enumerate() {
            if m != 0 {
                fg += s.image.data[i];
                nf += 1;
            } else {
                bg += s.image.data[i];
                nb += 1;
            }
        }
        assert!(fg / nf as f32 > 3.0 * bg / nb as f32);
    }

    #[test]
    fn classes_sit_at_separate_depths() {
        let cfg = SynthConfig {
            num_classes: 2,
            ..SynthConfig::new(5, 1)
        };
        let s = generate_one(&cfg, 0, false);
        let centroid = |m: &BinaryMask| {
            let ys: Vec<usize> = (0..m.data.len()).filter(|&i| m.data[i] != 0).map(|i| i / m.width).collect();
            ys.iter().sum::<usize>() as f64 / ys.len() as f64
        };
        assert!(centroid(&s.masks[0]) < centroid(&s.masks[1]));
    }
}
