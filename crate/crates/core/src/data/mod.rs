//! Samples, resize/pad geometry, augmentation, dataset I/O and the synthetic
//! ultrasound-like generator.

pub mod augment;
pub mod io;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::backbone::{BinaryMask, BoxCoords, ImageTensor};
use crate::error::{Error, Result};

pub use self::augment::{augment, AugmentationPolicy};
pub use self::io::{load_dataset, read_image, read_stem_list, save_dataset, select_stems};
pub use self::synth::{synth_generate, SynthConfig};

/// Mapping between original pixel coordinates and the padded model square.
/// Continuous coordinates scale as `padded = original * scale`; padding sits
/// at the bottom/right so no offset is involved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadRecord {
    pub original_height: usize,
    pub original_width: usize,
    pub scale: f64,
    pub size: usize,
}

impl PadRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            original_height: height,
            original_width: width,
            scale: 1.0,
            size: height.max(width),
        }
    }

    pub fn for_size(height: usize, width: usize, size: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input(format!("image is {height}x{width}; both sides must be nonzero")));
        }
        Ok(Self {
            original_height: height,
            original_width: width,
            scale: size as f64 / height.max(width) as f64,
            size,
        })
    }

    /// Height and width of the scaled content region inside the square.
    pub fn content_size(&self) -> (usize, usize) {
        let h = ((self.original_height as f64 * self.scale).round() as usize).clamp(1, self.size);
        let w = ((self.original_width as f64 * self.scale).round() as usize).clamp(1, self.size);
        (h, w)
    }

    pub fn to_padded(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale, y * self.scale)
    }

    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale, y / self.scale)
    }

    /// Original-space pixel point → normalized model coordinates.
    pub fn normalize_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (px, py) = self.to_padded(x, y);
        (px / self.size as f64, py / self.size as f64)
    }

    pub fn denormalize_point(&self, x: f64, y: f64) -> (f64, f64) {
        self.to_original(x * self.size as f64, y * self.size as f64)
    }

    /// Original-space pixel box → normalized model box.
    pub fn normalize_box(&self, b: [f64; 4]) -> BoxCoords {
        let (x1, y1) = self.normalize_point(b[0], b[1]);
        let (x2, y2) = self.normalize_point(b[2], b[3]);
        BoxCoords::new(x1, y1, x2, y2)
    }

    pub fn denormalize_box(&self, b: BoxCoords) -> [f64; 4] {
        let (x1, y1) = self.denormalize_point(b.x1, b.y1);
        let (x2, y2) = self.denormalize_point(b.x2, b.y2);
        [x1, y1, x2, y2]
    }

    /// Crops a model-space mask back to the content region and resamples it
    /// to the original size.
    pub fn mask_to_original(&self, mask: &BinaryMask) -> BinaryMask {
        let (ch, cw) = self.content_size();
        let fy = mask.height as f64 / self.size as f64;
        let fx = mask.width as f64 / self.size as f64;
        let sy = ch as f64 / self.original_height as f64;
        let sx = cw as f64 / self.original_width as f64;
        BinaryMask::from_fn(self.original_height, self.original_width, |y, x| {
            let my = (((y as f64 + 0.5) * sy * fy) as usize).min(mask.height - 1);
            let mx = (((x as f64 + 0.5) * sx * fx) as usize).min(mask.width - 1);
            mask.get(my, mx)
        })
    }
}

/// One image with a binary mask per class. Class `k` is stored at index
/// `k` and corresponds to mask pixel value `k + 1` on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub masks: Vec<BinaryMask>,
    pub present: Vec<bool>,
    pub pad: PadRecord,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: ImageTensor, masks: Vec<BinaryMask>) -> Self {
        let present = masks.iter().map(|m| !m.is_empty()).collect();
        let pad = PadRecord::identity(image.height, image.width);
        Self {
            id: id.into(),
            image,
            masks,
            present,
            pad,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.masks.len()
    }

    pub fn recompute_present(&mut self) {
        self.present = self.masks.iter().map(|m| !m.is_empty()).collect();
    }
}

/// Bilinear resample of every channel (pixel-centre aligned).
pub fn resize_image(image: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    if (height, width) == (image.height, image.width) {
        return image.clone();
    }
    let sy = image.height as f64 / height as f64;
    let sx = image.width as f64 / width as f64;
    let taps = |out: usize, scale: f64, len: usize| {
        let src = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..width).map(|x| taps(x, sx, image.width)).collect();
    let mut out = ImageTensor::zeros(height, width);
    for c in 0..3 {
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, image.height);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = image.at(c, y0, x0) * (1.0 - fx) + image.at(c, y0, x1) * fx;
                let bottom = image.at(c, y1, x0) * (1.0 - fx) + image.at(c, y1, x1) * fx;
                *out.at_mut(c, y, x) = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Scales the long side to `size`, zero-pads bottom/right to a square and
/// records the mapping.
pub fn resize_pad(sample: &Sample, size: usize) -> Result<Sample> {
    let (h, w) = (sample.image.height, sample.image.width);
    let pad = PadRecord::for_size(h, w, size)?;
    let (ch, cw) = pad.content_size();
    let content = resize_image(&sample.image, ch, cw);
    let mut image = ImageTensor::zeros(size, size);
    for c in 0..3 {
        for y in 0..ch {
            for x in 0..cw {
                *image.at_mut(c, y, x) = content.at(c, y, x);
            }
        }
    }
    let masks = sample
        .masks
        .iter()
        .map(|m| {
            let scaled = m.resize_nearest(ch, cw);
            BinaryMask::from_fn(size, size, |y, x| y < ch && x < cw && scaled.get(y, x))
        })
        .collect();
    let mut out = Sample {
        id: sample.id.clone(),
        image,
        masks,
        present: Vec::new(),
        pad,
    };
    out.recompute_present();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(h: usize, w: usize) -> Sample {
        let gray: Vec<f32> = (0..h * w).map(|i| (i % 7) as f32 / 7.0).collect();
        let mask = BinaryMask::from_fn(h, w, |y, x| y >= h / 4 && y < h / 2 && x >= w / 3 && x < w / 2);
        Sample::new("s", ImageTensor::from_gray(h, w, &gray), vec![mask])
    }

    #[test]
    fn long_side_scaled_and_short_side_padded() {
        let s = resize_pad(&sample(500, 1000), 1024).unwrap();
        assert_eq!((s.image.height, s.image.width), (1024, 1024));
        assert_eq!(s.pad.content_size(), (512, 1024));
        for x in [0, 500, 1023] {
            assert_eq!(s.image.at(0, 600, x), 0.0);
            assert!(!s.masks[0].get(600, x));
        }
    }

    #[test]
    fn square_image_has_no_padding() {
        let s = resize_pad(&sample(64, 64), 256).unwrap();
        assert_eq!(s.pad.content_size(), (256, 256));
        assert_eq!(s.pad.scale, 4.0);
    }

    #[test]
    fn zero_sized_image_is_rejected() {
        let s = Sample::new("z", ImageTensor::zeros(0, 10), vec![]);
        assert_eq!(resize_pad(&s, 256).unwrap_err().kind(), "input");
    }

    #[test]
    fn mask_returns_to_original_size() {
        let s = sample(300, 200);
        let p = resize_pad(&s, 256).unwrap();
        let back = p.pad.mask_to_original(&p.masks[0]);
        assert_eq!((back.height, back.width), (300, 200));
        let inter = back.data.iter().zip(&s.masks[0].data).filter(|(a, b)| **a != 0 && **b != 0).count();
        assert!(inter as f64 >= 0.9 * s.masks[0].count() as f64);
    }

    #[test]
    fn inverse_maps_random_boxes_within_half_pixel() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pad = PadRecord::for_size(500, 1000, 1024).unwrap();
        for _ in 0..100 {
            let x1 = rng.random_range(0.0..900.0);
            let y1 = rng.random_range(0.0..400.0);
            let b = [x1, y1, x1 + rng.random_range(1.0..100.0), y1 + rng.random_range(1.0..100.0)];
            let back = pad.denormalize_box(pad.normalize_box(b));
            for i in 0..4 {
                assert!((back[i] - b[i]).abs() <= 0.5);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn inverse_maps_points_within_half_pixel(
            h in 1usize..2000, w in 1usize..2000, fx in 0.0f64..1.0, fy in 0.0f64..1.0,
        ) {
            let pad = PadRecord::for_size(h, w, 256).unwrap();
            let (px, py) = (fx * pad.size as f64, fy * pad.size as f64);
            let (ox, oy) = pad.to_original(px, py);
            let (rx, ry) = pad.to_padded(ox, oy);
            prop_assert!((rx - px).abs() / pad.scale <= 0.5);
            prop_assert!((ry - py).abs() / pad.scale <= 0.5);
        }
    }
}
