use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Provenance, RenderedImage, CENTER, PIXELS, SIDE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneFamily {
    Gradient,
    Stripes,
    Blobs,
}

impl SceneFamily {
    pub const ALL: [SceneFamily; 3] = [SceneFamily::Gradient, SceneFamily::Stripes, SceneFamily::Blobs];
}

/// Background description.
///
/// Ranges: `orientation` in `[0, pi)`, `frequency` in `[0.5, 3]`,
/// `base` in `[-0.75, -0.35]`. Every family keeps its values at or below
/// about 0.1 so glyphs (intensity >= 0.25) stay distinguishable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub family: SceneFamily,
    pub orientation: f32,
    pub frequency: f32,
    pub base: f32,
}

const ORIENTATIONS: [f32; 4] = [
    0.0,
    std::f32::consts::FRAC_PI_4,
    std::f32::consts::FRAC_PI_2,
    3.0 * std::f32::consts::FRAC_PI_4,
];
const FREQUENCIES: [f32; 2] = [1.0, 2.0];
const BASES: [f32; 2] = [-0.65, -0.45];

/// Number of discrete scene prompts.
pub const SCENE_CODES: usize = 3 * 4 * 2 * 2;

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..std::f32::consts::PI).contains(&self.orientation)
            && (0.5..=3.0).contains(&self.frequency)
            && (-0.75..=-0.35).contains(&self.base);
        if !ok {
            return Err(Error::invalid(format!("scene parameters out of range: {self:?}")));
        }
        Ok(())
    }

    /// The scene a discrete scene prompt stands for.
    pub fn from_code(code: usize) -> Result<Self> {
        if code >= SCENE_CODES {
            return Err(Error::invalid(format!("scene code {code} >= {SCENE_CODES}")));
        }
        let base = BASES[code % 2];
        let frequency = FREQUENCIES[(code / 2) % 2];
        let orientation = ORIENTATIONS[(code / 4) % 4];
        let family = SceneFamily::ALL[code / 16];
        Ok(SceneParams {
            family,
            orientation,
            frequency,
            base,
        })
    }

    pub fn value_at(&self, row: usize, col: usize) -> f64 {
        let (x, y) = (col as f64 + 0.5 - CENTER, row as f64 + 0.5 - CENTER);
        let th = self.orientation as f64;
        let f = self.frequency as f64;
        let base = self.base as f64;
        let along = x * th.cos() + y * th.sin();
        match self.family {
            SceneFamily::Gradient => base + 0.1 * f * along / CENTER,
            SceneFamily::Stripes => base + 0.25 * (2.0 * PI * f * along / SIDE as f64).sin(),
            SceneFamily::Blobs => {
                let sigma = 1.2 + 1.5 / f;
                let bump: f64 = (0..3)
                    .map(|k| {
                        let a = th + 2.0 * PI * k as f64 / 3.0;
                        let (cx, cy) = (5.5 * a.cos(), 5.5 * a.sin());
                        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                        (-d2 / (2.0 * sigma * sigma)).exp()
                    })
                    .sum();
                base + 0.45 * bump
            }
        }
    }
}

/// The scene alone, with no anchor-box treatment.
pub fn render_background(scene: &SceneParams) -> Result<RenderedImage> {
    scene.validate()?;
    let mut pixels = vec![0.0f32; PIXELS];
    for (i, p) in pixels.iter_mut().enumerate() {
        *p = scene.value_at(i / SIDE, i % SIDE) as f32;
    }
    RenderedImage::new(pixels, Provenance::Reference)
}
