//! Dataset directory I/O: `images/<stem>.png` with `masks/<stem>.png`, where
//! mask value `v` marks class `v - 1` and 0 is background.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, Luma};

use super::Sample;
use crate::backbone::{BinaryMask, ImageTensor};
use crate::error::{Error, Result};

fn to_tensor(img: DynamicImage) -> ImageTensor {
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = ImageTensor::zeros(h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            *out.at_mut(c, y as usize, x as usize) = p.0[c].clamp(0.0, 1.0);
        }
    }
    out
}

/// Decodes an encoded image (PNG or any enabled format) into `[0, 1]` RGB.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    Ok(to_tensor(image::load_from_memory(bytes)?))
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// First channel quantized to 8 bits.
pub fn encode_gray_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let img = GrayImage::from_fn(image.width as u32, image.height as u32, |x, y| {
        Luma([(image.at(0, y as usize, x as usize) * 255.0).round() as u8])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Binary mask as an 8-bit PNG with foreground 255.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Loads every paired image/mask. `num_classes` bounds the mask values; when
/// `None` it is the largest value found (at least 1). All problems are
/// reported together.
pub fn load_dataset(root: &Path, num_classes: Option<usize>) -> Result<Vec<Sample>> {
    let images = stems(&root.join("images"))?;
    let masks = stems(&root.join("masks"))?;
    let mut problems = Vec::new();
    for stem in images.keys().filter(|s| !masks.contains_key(*s)) {
        problems.push(format!("image `{stem}` has no mask"));
    }
    for stem in masks.keys().filter(|s| !images.contains_key(*s)) {
        problems.push(format!("mask `{stem}` has no image"));
    }
    let mut raw = Vec::new();
    for (stem, image_path) in &images {
        let Some(mask_path) = masks.get(stem) else { continue };
        let image = match read_image(image_path) {
            Ok(i) => i,
            Err(e) => {
                problems.push(format!("image `{stem}`: {e}"));
                continue;
            }
        };
        let labels = match image::open(mask_path) {
            Ok(m) => m.to_luma8(),
            Err(e) => {
                problems.push(format!("mask `{stem}`: {e}"));
                continue;
            }
        };
        if (labels.width() as usize, labels.height() as usize) != (image.width, image.height) {
            problems.push(format!(
                "mask `{stem}` is {}x{}, image is {}x{}",
                labels.height(),
                labels.width(),
                image.height,
                image.width
            ));
            continue;
        }
        raw.push((stem.clone(), image, labels));
    }
    let found_max = raw
        .iter()
        .flat_map(|(_, _, l)| l.as_raw().iter().copied())
        .max()
        .unwrap_or(0) as usize;
    let k = num_classes.unwrap_or(found_max.max(1));
    for (stem, _, labels) in &raw {
        let max = labels.as_raw().iter().copied().max().unwrap_or(0) as usize;
        if max > k {
            problems.push(format!("mask `{stem}` has value {max}, but the max class is {k}"));
        }
    }
    if images.is_empty() && masks.is_empty() {
        problems.push(format!("no PNG files under {}", root.display()));
    }
    if !problems.is_empty() {
        return Err(Error::Load(problems));
    }
    Ok(raw
        .into_iter()
        .map(|(stem, image, labels)| {
            let (h, w) = (image.height, image.width);
            let masks = (1..=k)
                .map(|v| BinaryMask {
                    height: h,
                    width: w,
                    data: labels.as_raw().iter().map(|&p| u8::from(p as usize == v)).collect(),
                })
                .collect();
            Sample::new(stem, image, masks)
        })
        .collect())
}

/// Writes samples in the layout `load_dataset` reads.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        let image_path = root.join("images").join(format!("{}.png", s.id));
        std::fs::write(&image_path, encode_gray_png(&s.image)?).map_err(|e| Error::io(&image_path, e))?;
        let labels = GrayImage::from_fn(s.image.width as u32, s.image.height as u32, |x, y| {
            let v = s
                .masks
                .iter()
                .position(|m| m.get(y as usize, x as usize))
                .map_or(0, |k| k + 1);
            Luma([v as u8])
        });
        let mask_path = root.join("masks").join(format!("{}.png", s.id));
        labels.save_with_format(&mask_path, ImageFormat::Png)?;
    }
    Ok(())
}

/// Split lists are plain text files with one stem per line.
pub fn read_stem_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn select_stems(samples: &[Sample], stems: &[String]) -> Result<Vec<Sample>> {
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let missing: Vec<String> = stems
        .iter()
        .filter(|s| !by_id.contains_key(s.as_str()))
        .map(|s| format!("split lists unknown stem `{s}`"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Load(missing));
    }
    Ok(stems.iter().map(|s| by_id[s.as_str()].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            height: 40,
            width: 48,
            ..SynthConfig::new(2, 3)
        };
        let samples = synth_generate(&cfg).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path(), Some(1)).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.masks, b.masks);
            assert!(a.image.data.iter().zip(&b.image.data).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }

    #[test]
    fn unpaired_and_out_of_range_files_are_enumerated() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate(&SynthConfig {
            height: 32,
            width: 32,
            empty_fraction: 0.0,
            ..SynthConfig::new(1, 2)
        })
        .unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        std::fs::remove_file(dir.path().join("masks").join(format!("{}.png", samples[0].id))).unwrap();
        let err = load_dataset(dir.path(), Some(1)).unwrap_err();
        let Error::Load(items) = &err else { panic!("{err}") };
        assert!(items.iter().any(|m| m.contains(&samples[0].id)));

        let bad = GrayImage::from_pixel(32, 32, Luma([2]));
        bad.save(dir.path().join("masks").join(format!("{}.png", samples[0].id))).unwrap();
        let Error::Load(items) = load_dataset(dir.path(), Some(1)).unwrap_err() else { panic!() };
        assert_eq!(items.len(), 1);
        assert!(items[0].contains("max class is 1"));
    }

    #[test]
    fn stem_selection() {
        let samples = synth_generate(&SynthConfig {
            height: 32,
            width: 32,
            ..SynthConfig::new(1, 3)
        })
        .unwrap();
        let picked = select_stems(&samples, &[samples[2].id.clone()]).unwrap();
        assert_eq!(picked[0].id, samples[2].id);
        assert!(select_stems(&samples, &["nope".into()]).is_err());
    }
}
