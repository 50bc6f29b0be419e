//! Synthetic "scene + glyph" images.
//!
//! A 16x16 single-channel image holds a parameterized background (the scene)
//! and, inside a fixed 8x8 anchor box at the center, a glyph (the identity).
//! Inside the box the glyph sits on a plane least-squares fitted to the one
//! pixel ring surrounding the box, so the local background of any image,
//! rendered or generated, is recoverable from its exterior alone. That makes
//! [`glyph_swap`] and [`fit_identity`] work on arbitrary images.

mod dataset;
mod glyph;
mod pgm;
mod scene;

pub use dataset::{
    base_dataset, control_ring, personalized_dataset, personalized_render_code, random_control_mask, ControlPattern,
    DatasetRecord, Sample, CONTROL_GAIN, PERSONALIZED_FAMILY, PERSONALIZED_TRUE_SCENE_RATE,
};
pub use glyph::{
    background_diversity, fit_identity, glyph_mask, glyph_swap, identity_error, render, GlyphKind, IdentityFit,
    IdentityParams, IDENTITY_COUNT, INTENSITY_LEVELS, MIN_CONTRAST, NO_GLYPH_RESIDUAL, OFFSET_LEVELS, RADIUS_LEVELS,
};
pub use pgm::{grid_to_pgm_bytes, parse_pgm, read_pgm, to_pgm_bytes, write_pgm};
pub use scene::{render_background, SceneFamily, SceneParams, SCENE_CODES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;
pub const BOX_ORIGIN: usize = 4;
pub const BOX_SIDE: usize = 8;
pub const BOX_PIXELS: usize = BOX_SIDE * BOX_SIDE;
/// Continuous coordinate of the image (and anchor box) center.
pub const CENTER: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Base,
    Swapped,
    Enhanced,
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pixels: Vec<f32>,
    pub tag: Provenance,
}

impl RenderedImage {
    /// Clamps into `[-1, 1]`.
    pub fn new(pixels: Vec<f32>, tag: Provenance) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![SIDE, SIDE],
                rhs: vec![pixels.len()],
            });
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image".into()));
        }
        Ok(RenderedImage {
            pixels: pixels.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            tag,
        })
    }

    pub fn from_tensor(t: &Tensor, tag: Provenance) -> Result<Self> {
        RenderedImage::new(t.data().to_vec(), tag)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts_unchecked(vec![1, PIXELS], self.pixels.clone())
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * SIDE + col]
    }

    pub fn with_tag(mut self, tag: Provenance) -> Self {
        self.tag = tag;
        self
    }

    pub fn max_abs_diff(&self, other: &RenderedImage) -> f32 {
        crate::tensor::kernels::max_abs_diff(&self.pixels, &other.pixels)
    }

    pub fn mse(&self, other: &RenderedImage) -> f32 {
        crate::tensor::kernels::mse(&self.pixels, &other.pixels)
    }

    /// MSE restricted to pixels inside the anchor box.
    pub fn box_mse(&self, other: &RenderedImage) -> f32 {
        region_mse(&self.pixels, &other.pixels, true)
    }

    /// MSE restricted to pixels outside the anchor box.
    pub fn exterior_mse(&self, other: &RenderedImage) -> f32 {
        region_mse(&self.pixels, &other.pixels, false)
    }
}

pub fn in_box(row: usize, col: usize) -> bool {
    (BOX_ORIGIN..BOX_ORIGIN + BOX_SIDE).contains(&row) && (BOX_ORIGIN..BOX_ORIGIN + BOX_SIDE).contains(&col)
}

/// Row-major indices of the anchor box pixels.
pub fn box_indices() -> impl Iterator<Item = usize> {
    (BOX_ORIGIN..BOX_ORIGIN + BOX_SIDE).flat_map(|r| (BOX_ORIGIN..BOX_ORIGIN + BOX_SIDE).map(move |c| r * SIDE + c))
}

pub fn exterior_indices() -> impl Iterator<Item = usize> {
    (0..PIXELS).filter(|&i| !in_box(i / SIDE, i % SIDE))
}

fn region_mse(a: &[f32], b: &[f32], inside: bool) -> f32 {
    let (mut s, mut n) = (0.0f64, 0usize);
    for i in 0..PIXELS {
        if in_box(i / SIDE, i % SIDE) == inside {
            let d = (a[i] - b[i]) as f64;
            s += d * d;
            n += 1;
        }
    }
    (s / n as f64) as f32
}
