use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::scene::{render_background, SceneParams};
use super::{box_indices, exterior_indices, Provenance, RenderedImage, BOX_ORIGIN, BOX_PIXELS, BOX_SIDE, CENTER, SIDE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlyphKind {
    Disk,
    Cross,
    Triangle,
    Ring,
}

impl GlyphKind {
    pub const ALL: [GlyphKind; 4] = [GlyphKind::Disk, GlyphKind::Cross, GlyphKind::Triangle, GlyphKind::Ring];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const INTENSITY_LEVELS: usize = 8;
pub const RADIUS_LEVELS: usize = 4;
pub const OFFSET_LEVELS: usize = 9;
pub const IDENTITY_COUNT: usize = 4 * INTENSITY_LEVELS * RADIUS_LEVELS * OFFSET_LEVELS;

/// Smallest allowed gap between glyph intensity and the local background
/// under the glyph.
pub const MIN_CONTRAST: f64 = 0.15;

/// [`fit_identity`] residual above which an image is treated as carrying no
/// glyph. The smallest best-fit residual over 100 random glyph-free
/// backgrounds is about 0.002 (see the `no_glyph_threshold` test).
pub const NO_GLYPH_RESIDUAL: f32 = 0.001;

const SUPERSAMPLE: usize = 4;

/// A point in the discretized identity space. Levels are indices; physical
/// values come from the accessors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IdentityParams {
    pub kind: GlyphKind,
    pub intensity: u8,
    pub radius: u8,
    pub offset: u8,
}

impl IdentityParams {
    pub fn validate(&self) -> Result<()> {
        if self.intensity as usize >= INTENSITY_LEVELS
            || self.radius as usize >= RADIUS_LEVELS
            || self.offset as usize >= OFFSET_LEVELS
        {
            return Err(Error::invalid(format!("identity out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn intensity_value(&self) -> f64 {
        0.25 + 0.1 * self.intensity as f64
    }

    pub fn radius_value(&self) -> f64 {
        1.0 + 0.5 * self.radius as f64
    }

    /// Sub-pixel displacement of the glyph center, each axis in {-0.5, 0, 0.5}.
    pub fn offset_value(&self) -> (f64, f64) {
        let o = self.offset as i32;
        (0.5 * (o % 3 - 1) as f64, 0.5 * (o / 3 - 1) as f64)
    }

    /// Dense index in lexicographic `(kind, intensity, radius, offset)` order.
    pub fn index(&self) -> usize {
        ((self.kind.index() * INTENSITY_LEVELS + self.intensity as usize) * RADIUS_LEVELS + self.radius as usize)
            * OFFSET_LEVELS
            + self.offset as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= IDENTITY_COUNT {
            return Err(Error::invalid(format!("identity index {i} >= {IDENTITY_COUNT}")));
        }
        Ok(IdentityParams {
            offset: (i % OFFSET_LEVELS) as u8,
            radius: ((i / OFFSET_LEVELS) % RADIUS_LEVELS) as u8,
            intensity: ((i / (OFFSET_LEVELS * RADIUS_LEVELS)) % INTENSITY_LEVELS) as u8,
            kind: GlyphKind::ALL[i / (OFFSET_LEVELS * RADIUS_LEVELS * INTENSITY_LEVELS)],
        })
    }

    pub fn all() -> impl Iterator<Item = IdentityParams> {
        (0..IDENTITY_COUNT).map(|i| IdentityParams::from_index(i).expect("in range"))
    }
}

fn inside(kind: GlyphKind, dx: f64, dy: f64, r: f64) -> bool {
    match kind {
        GlyphKind::Disk => dx * dx + dy * dy <= r * r,
        GlyphKind::Ring => {
            let d2 = dx * dx + dy * dy;
            let inner = 0.5 * r;
            d2 <= r * r && d2 >= inner * inner
        }
        GlyphKind::Cross => {
            let h = (0.3 * r).max(0.4);
            (dx.abs() <= h && dy.abs() <= r) || (dy.abs() <= h && dx.abs() <= r)
        }
        // apex up (rows grow downward), circumradius r
        GlyphKind::Triangle => dy <= 0.5 * r && dx.abs() <= (dy + r) / 3f64.sqrt(),
    }
}

fn compute_mask(kind: GlyphKind, radius: u8, offset: u8) -> [f32; BOX_PIXELS] {
    let id = IdentityParams {
        kind,
        intensity: 0,
        radius,
        offset,
    };
    let r = id.radius_value();
    let (ox, oy) = id.offset_value();
    let (cx, cy) = (CENTER + ox, CENTER + oy);
    let mut mask = [0.0f32; BOX_PIXELS];
    for br in 0..BOX_SIDE {
        for bc in 0..BOX_SIDE {
            let (row, col) = (BOX_ORIGIN + br, BOX_ORIGIN + bc);
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = col as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = row as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    if inside(kind, px - cx, py - cy, r) {
                        hits += 1;
                    }
                }
            }
            mask[br * BOX_SIDE + bc] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        }
    }
    mask
}

/// Anti-aliased coverage of a glyph over the anchor box (row-major, 8x8).
pub fn glyph_mask(id: &IdentityParams) -> &'static [f32; BOX_PIXELS] {
    static MASKS: OnceLock<Vec<[f32; BOX_PIXELS]>> = OnceLock::new();
    let masks = MASKS.get_or_init(|| {
        let mut v = Vec::with_capacity(4 * RADIUS_LEVELS * OFFSET_LEVELS);
        for kind in GlyphKind::ALL {
            for r in 0..RADIUS_LEVELS as u8 {
                for o in 0..OFFSET_LEVELS as u8 {
                    v.push(compute_mask(kind, r, o));
                }
            }
        }
        v
    });
    &masks[(id.kind.index() * RADIUS_LEVELS + id.radius as usize) * OFFSET_LEVELS + id.offset as usize]
}

/// Least-squares plane over the one-pixel ring around the anchor box,
/// evaluated at every box pixel. The ring is symmetric about the center, so
/// the normal equations decouple.
fn local_plane(pixels: &[f32]) -> [f64; BOX_PIXELS] {
    let lo = BOX_ORIGIN - 1;
    let hi = BOX_ORIGIN + BOX_SIDE;
    let (mut s, mut sx, mut sy, mut sxx, mut syy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for row in lo..=hi {
        for col in lo..=hi {
            if row != lo && row != hi && col != lo && col != hi {
                continue;
            }
            let v = pixels[row * SIDE + col] as f64;
            let (x, y) = (col as f64 + 0.5 - CENTER, row as f64 + 0.5 - CENTER);
            s += v;
            sx += x * v;
            sy += y * v;
            sxx += x * x;
            syy += y * y;
            n += 1.0;
        }
    }
    let (p0, px, py) = (s / n, sx / sxx, sy / syy);
    let mut plane = [0.0; BOX_PIXELS];
    for br in 0..BOX_SIDE {
        for bc in 0..BOX_SIDE {
            let x = (BOX_ORIGIN + bc) as f64 + 0.5 - CENTER;
            let y = (BOX_ORIGIN + br) as f64 + 0.5 - CENTER;
            plane[br * BOX_SIDE + bc] = p0 + px * x + py * y;
        }
    }
    plane
}

fn composite(plane: &[f64; BOX_PIXELS], mask: &[f32; BOX_PIXELS], intensity: f64) -> [f32; BOX_PIXELS] {
    let mut out = [0.0f32; BOX_PIXELS];
    for i in 0..BOX_PIXELS {
        let a = mask[i] as f64;
        out[i] = ((1.0 - a) * plane[i] + a * intensity).clamp(-1.0, 1.0) as f32;
    }
    out
}

fn write_box(pixels: &mut [f32], values: &[f32; BOX_PIXELS]) {
    for (k, idx) in box_indices().enumerate() {
        pixels[idx] = values[k];
    }
}

fn check_contrast(plane: &[f64; BOX_PIXELS], id: &IdentityParams) -> Result<()> {
    let mask = glyph_mask(id);
    let c = id.intensity_value();
    for i in 0..BOX_PIXELS {
        if mask[i] > 0.0 && (c - plane[i]).abs() < MIN_CONTRAST {
            return Err(Error::invalid(format!(
                "glyph intensity {c:.2} within {MIN_CONTRAST} of local background {:.2}",
                plane[i]
            )));
        }
    }
    Ok(())
}

/// Scene background with the identity glyph composited into the anchor box.
pub fn render(scene: &SceneParams, identity: &IdentityParams) -> Result<RenderedImage> {
    let mut pixels = render_background(scene)?.pixels().to_vec();
    place_glyph(&mut pixels, identity)?;
    RenderedImage::new(pixels, Provenance::Reference)
}

/// Composites `identity` into the anchor box of a full-size pixel buffer,
/// checking the contrast margin against the buffer's own local plane.
pub(crate) fn place_glyph(pixels: &mut [f32], identity: &IdentityParams) -> Result<()> {
    identity.validate()?;
    let plane = local_plane(pixels);
    check_contrast(&plane, identity)?;
    write_box(
        pixels,
        &composite(&plane, glyph_mask(identity), identity.intensity_value()),
    );
    Ok(())
}

/// Re-renders the anchor box with `target` over the image's own local
/// background. With `blur_edges`, the box's outermost pixel band is replaced
/// by a 3x3 box blur, imitating the seams a real face swap leaves.
pub fn glyph_swap(image: &RenderedImage, target: &IdentityParams, blur_edges: bool) -> Result<RenderedImage> {
    target.validate()?;
    let mut pixels = image.pixels().to_vec();
    let plane = local_plane(&pixels);
    write_box(
        &mut pixels,
        &composite(&plane, glyph_mask(target), target.intensity_value()),
    );
    if blur_edges {
        let src = pixels.clone();
        for idx in box_indices() {
            let (row, col) = (idx / SIDE, idx % SIDE);
            let band = row == BOX_ORIGIN
                || row == BOX_ORIGIN + BOX_SIDE - 1
                || col == BOX_ORIGIN
                || col == BOX_ORIGIN + BOX_SIDE - 1;
            if !band {
                continue;
            }
            let mut s = 0.0f64;
            for r in row - 1..=row + 1 {
                for c in col - 1..=col + 1 {
                    s += src[r * SIDE + c] as f64;
                }
            }
            pixels[idx] = (s / 9.0) as f32;
        }
    }
    RenderedImage::new(pixels, Provenance::Swapped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityFit {
    pub params: IdentityParams,
    /// Anchor-box MSE of the best candidate.
    pub residual: f32,
}

impl IdentityFit {
    pub fn has_glyph(&self) -> bool {
        self.residual <= NO_GLYPH_RESIDUAL
    }
}

/// Exhaustive search over the discretized identity space. Ties go to the
/// lexicographically smallest `(kind, intensity, radius, offset)`.
pub fn fit_identity(image: &RenderedImage) -> IdentityFit {
    let plane = local_plane(image.pixels());
    let observed: Vec<f32> = box_indices().map(|i| image.pixels()[i]).collect();
    let mut best: Option<IdentityFit> = None;
    for id in IdentityParams::all() {
        let pred = composite(&plane, glyph_mask(&id), id.intensity_value());
        let sse: f64 = pred
            .iter()
            .zip(&observed)
            .map(|(p, o)| {
                let d = (*p - *o) as f64;
                d * d
            })
            .sum();
        let residual = (sse / BOX_PIXELS as f64) as f32;
        if best.is_none_or(|b| residual < b.residual) {
            best = Some(IdentityFit { params: id, residual });
        }
    }
    best.expect("identity space is non-empty")
}

/// Distance between a fitted identity and the target, in level units:
/// kind mismatch counts 1, each other factor contributes its level gap
/// normalized to [0, 1] (offset per axis, averaged). Range `[0, 4]`.
pub fn identity_error(fitted: &IdentityParams, target: &IdentityParams) -> f32 {
    let kind = if fitted.kind == target.kind { 0.0 } else { 1.0 };
    let inten = (fitted.intensity as f32 - target.intensity as f32).abs() / (INTENSITY_LEVELS - 1) as f32;
    let rad = (fitted.radius as f32 - target.radius as f32).abs() / (RADIUS_LEVELS - 1) as f32;
    let (fo, to) = (fitted.offset as i32, target.offset as i32);
    let off = ((fo % 3 - to % 3).abs() + (fo / 3 - to / 3).abs()) as f32 / 4.0;
    kind + inten + rad + off
}

/// Mean pairwise MSE over pixels outside the anchor box.
pub fn background_diversity(images: &[RenderedImage]) -> Result<f32> {
    if images.len() < 2 {
        return Err(Error::invalid("background diversity needs at least two images"));
    }
    let ext: Vec<usize> = exterior_indices().collect();
    let (mut total, mut pairs) = (0.0f64, 0usize);
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let (a, b) = (images[i].pixels(), images[j].pixels());
            let s: f64 = ext
                .iter()
                .map(|&k| {
                    let d = (a[k] - b[k]) as f64;
                    d * d
                })
                .sum();
            total += s / ext.len() as f64;
            pairs += 1;
        }
    }
    Ok((total / pairs as f64) as f32)
}

const _: () = assert!(BOX_ORIGIN >= 1 && BOX_ORIGIN + BOX_SIDE < SIDE);
