use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::glyph::{place_glyph, IdentityParams, IDENTITY_COUNT};
use super::scene::{render_background, SceneFamily, SceneParams, SCENE_CODES};
use super::{Provenance, RenderedImage, BOX_ORIGIN, BOX_SIDE, CENTER, PIXELS, SIDE};
use crate::error::{Error, Result};

/// Brightness added to background pixels under a control mask.
pub const CONTROL_GAIN: f32 = 0.6;

/// The scene family personalized training data mostly draws. Every scene
/// prompt appears, but only a [`PERSONALIZED_TRUE_SCENE_RATE`] fraction of
/// samples render the prompted scene; the rest render the gradient with the
/// same orientation, frequency and base. The personalized model therefore
/// still knows every scene but its prior is much narrower than the base
/// model's, the way identity-tuned models tend to lose scene variety.
pub const PERSONALIZED_FAMILY: SceneFamily = SceneFamily::Gradient;
pub const PERSONALIZED_TRUE_SCENE_RATE: f64 = 0.25;

/// Spatial control patterns. Every pattern stays off the anchor box and the
/// one-pixel ring around it, so it never disturbs glyph placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlPattern {
    Ring,
    TopBar,
    BottomBar,
    LeftBar,
    RightBar,
    Diagonal,
    AntiDiagonal,
}

impl ControlPattern {
    pub const ALL: [ControlPattern; 7] = [
        ControlPattern::Ring,
        ControlPattern::TopBar,
        ControlPattern::BottomBar,
        ControlPattern::LeftBar,
        ControlPattern::RightBar,
        ControlPattern::Diagonal,
        ControlPattern::AntiDiagonal,
    ];

    fn covers(self, row: usize, col: usize) -> bool {
        let (x, y) = (col as f64 + 0.5 - CENTER, row as f64 + 0.5 - CENTER);
        match self {
            ControlPattern::Ring => (6.0..=7.5).contains(&(x * x + y * y).sqrt()),
            ControlPattern::TopBar => row < 2,
            ControlPattern::BottomBar => row >= SIDE - 2,
            ControlPattern::LeftBar => col < 2,
            ControlPattern::RightBar => col >= SIDE - 2,
            ControlPattern::Diagonal => row.abs_diff(col) <= 1,
            ControlPattern::AntiDiagonal => (row + col).abs_diff(SIDE - 1) <= 1,
        }
    }

    /// Flattened 0/1 mask.
    pub fn mask(self) -> Vec<f32> {
        let (lo, hi) = (BOX_ORIGIN - 1, BOX_ORIGIN + BOX_SIDE);
        (0..PIXELS)
            .map(|i| {
                let (r, c) = (i / SIDE, i % SIDE);
                let near_box = (lo..=hi).contains(&r) && (lo..=hi).contains(&c);
                if !near_box && self.covers(r, c) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub fn control_ring() -> Vec<f32> {
    ControlPattern::Ring.mask()
}

pub fn random_control_mask(rng: &mut impl Rng) -> ControlPattern {
    ControlPattern::ALL[rng.random_range(0..ControlPattern::ALL.len())]
}

/// Parameters of one training image; a dataset manifest is a JSON array of
/// these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// The scene prompt the model is conditioned on.
    pub scene_code: usize,
    pub identity: IdentityParams,
    pub control: Option<ControlPattern>,
    /// Scene actually drawn, when it differs from the prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendered_scene: Option<usize>,
}

impl DatasetRecord {
    pub fn render(&self) -> Result<RenderedImage> {
        let scene = SceneParams::from_code(self.rendered_scene.unwrap_or(self.scene_code))?;
        let mut pixels = render_background(&scene)?.pixels().to_vec();
        if let Some(pattern) = self.control {
            for (p, m) in pixels.iter_mut().zip(pattern.mask()) {
                *p += CONTROL_GAIN * m;
            }
        }
        place_glyph(&mut pixels, &self.identity)?;
        RenderedImage::new(pixels, Provenance::Reference)
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub record: DatasetRecord,
    pub image: RenderedImage,
}

fn build(records: Vec<DatasetRecord>) -> Result<Vec<Sample>> {
    records
        .into_iter()
        .map(|record| {
            Ok(Sample {
                image: record.render()?,
                record,
            })
        })
        .collect()
}

/// Independent uniform scenes and identities; half the samples carry a
/// random control pattern.
pub fn base_dataset(n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let scene_code = rng.random_range(0..SCENE_CODES);
            let identity = IdentityParams::from_index(rng.random_range(0..IDENTITY_COUNT))?;
            let control = rng.random_bool(0.5).then(|| random_control_mask(&mut rng));
            Ok(DatasetRecord {
                scene_code,
                identity,
                control,
                rendered_scene: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    build(records)
}

/// The gradient scene the personalized data draws for prompt `code`.
pub fn personalized_render_code(code: usize) -> Result<usize> {
    if code >= SCENE_CODES {
        return Err(Error::invalid(format!("scene code {code} >= {SCENE_CODES}")));
    }
    let per_family = SCENE_CODES / SceneFamily::ALL.len();
    let family = SceneFamily::ALL
        .iter()
        .position(|&f| f == PERSONALIZED_FAMILY)
        .expect("family is listed");
    Ok(family * per_family + code % per_family)
}

/// Uniform prompts and identities, most prompts drawn as a gradient, no
/// control.
pub fn personalized_dataset(n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let scene_code = rng.random_range(0..SCENE_CODES);
            let identity = IdentityParams::from_index(rng.random_range(0..IDENTITY_COUNT))?;
            let drawn = personalized_render_code(scene_code)?;
            let rendered_scene =
                (drawn != scene_code && !rng.random_bool(PERSONALIZED_TRUE_SCENE_RATE)).then_some(drawn);
            Ok(DatasetRecord {
                scene_code,
                identity,
                control: None,
                rendered_scene,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    build(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{exterior_indices, fit_identity};

    #[test]
    fn masks_avoid_the_box_neighbourhood() {
        for p in ControlPattern::ALL {
            let m = p.mask();
            assert!(m.iter().sum::<f32>() >= 8.0, "{p:?}");
            for r in BOX_ORIGIN - 1..=BOX_ORIGIN + BOX_SIDE {
                for c in BOX_ORIGIN - 1..=BOX_ORIGIN + BOX_SIDE {
                    assert_eq!(m[r * SIDE + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn datasets_are_seeded() {
        let a = base_dataset(32, 4).unwrap();
        let b = base_dataset(32, 4).unwrap();
        let c = base_dataset(32, 5).unwrap();
        assert!(a
            .iter()
            .zip(&b)
            .all(|(x, y)| x.record == y.record && x.image == y.image));
        assert!(a.iter().zip(&c).any(|(x, y)| x.record != y.record));
        assert!(base_dataset(0, 1).is_err());
    }

    #[test]
    fn control_brightens_only_the_mask() {
        let rec = DatasetRecord {
            scene_code: 3,
            identity: IdentityParams::from_index(40).unwrap(),
            control: None,
            rendered_scene: None,
        };
        let plain = rec.render().unwrap();
        let lit = DatasetRecord {
            control: Some(ControlPattern::Ring),
            ..rec
        }
        .render()
        .unwrap();
        let mask = control_ring();
        for i in exterior_indices() {
            let d = lit.pixels()[i] - plain.pixels()[i];
            if mask[i] > 0.0 {
                assert!(d > 0.0);
            } else {
                assert_eq!(d, 0.0);
            }
        }
        assert_eq!(fit_identity(&lit).params, rec.identity);
    }

    #[test]
    fn personalized_scenes_are_mostly_gradients() {
        let data = personalized_dataset(2000, 1).unwrap();
        let true_scenes = data
            .iter()
            .filter(|s| s.record.scene_code >= 16 && s.record.rendered_scene.is_none())
            .count() as f64;
        let non_gradient = data.iter().filter(|s| s.record.scene_code >= 16).count() as f64;
        assert!((true_scenes / non_gradient - PERSONALIZED_TRUE_SCENE_RATE).abs() < 0.05);
        for s in data {
            let drawn = s.record.rendered_scene.unwrap_or(s.record.scene_code);
            if s.record.rendered_scene.is_none() {
                continue;
            }
            let scene = SceneParams::from_code(drawn).unwrap();
            let prompt = SceneParams::from_code(s.record.scene_code).unwrap();
            assert_eq!(scene.family, PERSONALIZED_FAMILY);
            assert_eq!(
                (scene.orientation, scene.frequency, scene.base),
                (prompt.orientation, prompt.frequency, prompt.base)
            );
            assert!(s.record.control.is_none());
        }
        let prompts: std::collections::HashSet<_> = personalized_dataset(2000, 2)
            .unwrap()
            .iter()
            .map(|s| s.record.scene_code)
            .collect();
        assert_eq!(prompts.len(), SCENE_CODES);
        assert!(personalized_render_code(SCENE_CODES).is_err());
    }

    #[test]
    fn records_serialize_as_json_array() {
        let recs: Vec<_> = base_dataset(3, 2).unwrap().into_iter().map(|s| s.record).collect();
        let json = serde_json::to_string(&recs).unwrap();
        assert!(json.starts_with('['));
        let back: Vec<DatasetRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, recs);
    }
}
