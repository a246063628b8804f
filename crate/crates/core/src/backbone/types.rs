use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Consistent set of input, embedding and mask-prompt sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryPreset {
    pub name: String,
    pub input_size: usize,
    pub embed_channels: usize,
    pub embed_grid: usize,
    pub mask_prompt_size: usize,
}

pub const PATCH_SIZE: usize = 16;

impl GeometryPreset {
    fn from_grid(name: &str, embed_channels: usize, embed_grid: usize) -> Self {
        Self {
            name: name.to_string(),
            input_size: PATCH_SIZE * embed_grid,
            embed_channels,
            embed_grid,
            mask_prompt_size: 4 * embed_grid,
        }
    }

    /// Published SAM shapes: 1024 input, 256×64×64 embedding, 256² mask prompt.
    pub fn paper() -> Self {
        Self::from_grid("paper", 256, 64)
    }

    /// Half-width, quarter-grid configuration for laptop CPUs.
    pub fn desk() -> Self {
        Self::from_grid("desk", 128, 16)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown geometry preset `{other}` (expected \"paper\" or \"desk\")"
            ))),
        }
    }

    /// Infers a preset from the channel count and grid side of stored tensors.
    pub fn infer(embed_channels: usize, embed_grid: usize) -> Self {
        for preset in [Self::paper(), Self::desk()] {
            if preset.embed_channels == embed_channels && preset.embed_grid == embed_grid {
                return preset;
            }
        }
        Self::from_grid("custom", embed_channels, embed_grid)
    }

    pub fn num_patches(&self) -> usize {
        self.embed_grid * self.embed_grid
    }

    pub fn token_dim(&self) -> usize {
        self.embed_channels
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Tight pixel bounding box `(x1, y1, x2, y2)` with exclusive upper edges.
    pub fn bbox(&self) -> Option<[usize; 4]> {
        let mut bb: Option<[usize; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => [x, y, x + 1, y + 1],
                        Some([x1, y1, x2, y2]) => [x1.min(x), y1.min(y), x2.max(x + 1), y2.max(y + 1)],
                    });
                }
            }
        }
        bb
    }

    /// Bounding box normalized by the mask size.
    pub fn normalized_bbox(&self) -> Option<BoxCoords> {
        self.bbox().map(|[x1, y1, x2, y2]| BoxCoords {
            x1: x1 as f64 / self.width as f64,
            y1: y1 as f64 / self.height as f64,
            x2: x2 as f64 / self.width as f64,
            y2: y2 as f64 / self.height as f64,
        })
    }

    /// Nearest-neighbour resampling, sampling at pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, |y, x| {
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            self.get(src_y, src_x)
        })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| f32::from(v)).collect()
    }
}

/// Axis-aligned box with coordinates normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCoords {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCoords {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| (0.0..=1.0).contains(v));
        if !in_unit {
            return Err(Error::Input(format!("box {self:?} has coordinates outside [0, 1]")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::Input(format!("box {self:?} must satisfy x1 < x2 and y1 < y2")));
        }
        Ok(())
    }
}

/// RGB image in CHW layout with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    /// Replicates a single-channel intensity image into three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f32]) -> Self {
        let mut data = Vec::with_capacity(3 * gray.len());
        for _ in 0..3 {
            data.extend_from_slice(gray);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Background,
    Foreground,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

/// User-supplied prompts in normalized model-space coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManualPrompts {
    #[serde(default)]
    pub points: Vec<PointPrompt>,
    #[serde(default)]
    pub boxes: Vec<BoxCoords>,
    #[serde(default)]
    pub brush_mask: Option<BinaryMask>,
}

impl ManualPrompts {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.boxes.is_empty() && self.brush_mask.is_none()
    }

    pub fn sparse_token_count(&self) -> usize {
        self.points.len() + 2 * self.boxes.len()
    }

    pub fn validate(&self, preset: &GeometryPreset) -> Result<()> {
        for p in &self.points {
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return Err(Error::Input(format!("point ({}, {}) outside [0, 1]", p.x, p.y)));
            }
        }
        for b in &self.boxes {
            b.validate()?;
        }
        if let Some(m) = &self.brush_mask {
            let s = preset.mask_prompt_size;
            if m.height != s || m.width != s || m.data.len() != s * s {
                return Err(Error::Input(format!(
                    "brush mask is {}x{}, expected {s}x{s}",
                    m.height, m.width
                )));
            }
        }
        Ok(())
    }

    /// Concatenates prompts, keeping `self` first; a later brush mask wins.
    pub fn merged(&self, later: &ManualPrompts) -> ManualPrompts {
        let mut out = self.clone();
        out.points.extend_from_slice(&later.points);
        out.boxes.extend_from_slice(&later.boxes);
        if later.brush_mask.is_some() {
            out.brush_mask = later.brush_mask.clone();
        }
        out
    }
}

/// Decoder output for a single image in model space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub size: usize,
    pub mask_logits: Vec<f32>,
    pub mask: BinaryMask,
    pub objectness_logit: f32,
    pub object_present: bool,
    /// Prompt tokens the decoder saw, excluding its own output tokens.
    pub sparse_token_count: usize,
}

impl SegmentationResult {
    pub fn from_logits(size: usize, mask_logits: Vec<f32>, objectness_logit: f32, sparse_token_count: usize) -> Self {
        // sigmoid(l) > 0.5 <=> l > 0
        let data = mask_logits.iter().map(|&l| u8::from(l > 0.0)).collect();
        Self {
            size,
            mask: BinaryMask {
                height: size,
                width: size,
                data,
            },
            mask_logits,
            objectness_logit,
            object_present: objectness_logit >= 0.0,
            sparse_token_count,
        }
    }

    /// Mask after the objectness gate: empty when the object is judged absent.
    pub fn gated_mask(&self) -> BinaryMask {
        if self.object_present {
            self.mask.clone()
        } else {
            BinaryMask::zeros(self.size, self.size)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_satisfy_geometry_invariants() {
        for p in [GeometryPreset::paper(), GeometryPreset::desk()] {
            assert_eq!(p.input_size, PATCH_SIZE * p.embed_grid);
            assert_eq!(p.mask_prompt_size, 4 * p.embed_grid);
        }
        let paper = GeometryPreset::paper();
        assert_eq!((paper.input_size, paper.embed_channels, paper.embed_grid, paper.mask_prompt_size), (1024, 256, 64, 256));
        let desk = GeometryPreset::desk();
        assert_eq!((desk.input_size, desk.embed_channels, desk.embed_grid, desk.mask_prompt_size), (256, 128, 16, 64));
        assert!(GeometryPreset::by_name("huge").is_err());
        assert_eq!(GeometryPreset::infer(128, 16), desk);
    }

    #[test]
    fn manual_prompt_validation() {
        let desk = GeometryPreset::desk();
        let mut p = ManualPrompts::default();
        assert!(p.validate(&desk).is_ok());
        p.boxes.push(BoxCoords::new(0.5, 0.1, 0.4, 0.9));
        assert!(p.validate(&desk).is_err());
        let mut p = ManualPrompts::default();
        p.brush_mask = Some(BinaryMask::zeros(256, 256));
        assert!(matches!(p.validate(&desk), Err(Error::Input(_))));
        let mut p = ManualPrompts::default();
        p.points.push(PointPrompt { x: 1.2, y: 0.0, label: PointLabel::Foreground });
        assert!(p.validate(&desk).is_err());
    }

    #[test]
    fn bbox_and_nearest_resize() {
        let m = BinaryMask::from_fn(8, 8, |y, x| (2..4).contains(&y) && (3..7).contains(&x));
        assert_eq!(m.bbox(), Some([3, 2, 7, 4]));
        let small = m.resize_nearest(4, 4);
        assert_eq!(small.count(), 2);
        assert!(BinaryMask::zeros(3, 3).bbox().is_none());
    }

    #[test]
    fn result_mask_follows_logit_sign() {
        let r = SegmentationResult::from_logits(2, vec![-1.0, 0.0, 0.5, 3.0], -0.1, 0);
        assert_eq!(r.mask.data, vec![0, 0, 1, 1]);
        assert!(!r.object_present);
        assert!(r.gated_mask().is_empty());
    }
}
