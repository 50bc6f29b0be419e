//! Scene generation, glyph swap and triple-flow enhancement, end to end.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bimd::{bimd_sample, flow_ablation, BimdConfig, Flow, FlowBundle};
use crate::data::{
    background_diversity, fit_identity, glyph_swap, identity_error, write_pgm, ControlPattern, IdentityFit,
    IdentityParams, Provenance, RenderedImage,
};
use crate::denoiser::{Conditioning, DenoiserParams, ModelKind};
use crate::error::{Error, Result};
use crate::inversion::sample_ddim;
use crate::schedule::Latent;
use crate::tensor::Tensor;

/// Guidance scale used for identity conditioning unless a request says
/// otherwise.
pub const DEFAULT_GUIDANCE: f32 = 1.0;

fn default_guidance() -> f32 {
    DEFAULT_GUIDANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhanceRequest {
    pub scene_code: usize,
    pub target: IdentityParams,
    #[serde(default)]
    pub control: Option<ControlPattern>,
    pub bimd: BimdConfig,
    /// Seeds the base model's starting latent.
    pub seed: u64,
    #[serde(default = "default_guidance")]
    pub guidance: f32,
}

impl EnhanceRequest {
    pub fn new(scene_code: usize, target: IdentityParams, steps: usize, seed: u64) -> Self {
        EnhanceRequest {
            scene_code,
            target,
            control: None,
            bimd: BimdConfig::for_steps(steps),
            seed,
            guidance: DEFAULT_GUIDANCE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::invalid(format!(
                "guidance {} must be finite and >= 0",
                self.guidance
            )));
        }
        Ok(())
    }

    /// Conditioning of the personalized model's forward flow.
    pub fn identity_cond(&self) -> Conditioning {
        Conditioning::scene(self.scene_code)
            .with_identity(self.target)
            .with_guidance(self.guidance)
    }
}

/// Identity fit of one stage image against the request's target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageFit {
    pub fit: IdentityFit,
    pub error: f32,
}

impl StageFit {
    pub fn measure(image: &RenderedImage, target: &IdentityParams) -> Self {
        let fit = fit_identity(image);
        StageFit {
            fit,
            error: identity_error(&fit.params, target),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLatency {
    pub base_s: f64,
    pub swap_s: f64,
    pub invert_s: f64,
    pub bimd_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceResult {
    pub base: RenderedImage,
    pub swapped: RenderedImage,
    pub enhanced: RenderedImage,
    pub bundle: FlowBundle,
    pub fits: [StageFit; 3],
    pub latency: StageLatency,
}

#[derive(Serialize)]
struct Metrics<'a> {
    base: &'a StageFit,
    swapped: &'a StageFit,
    enhanced: &'a StageFit,
    latency: &'a StageLatency,
    exterior_mse_to_swap: f32,
    residual_norms: Vec<f32>,
}

impl EnhanceResult {
    /// Writes `base.pgm`, `swap.pgm`, `enhanced.pgm`, `metrics.json` and
    /// `manifest.json` into `dir`.
    pub fn write_dir(&self, dir: &Path, manifest: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pgm(&dir.join("base.pgm"), &self.base)?;
        write_pgm(&dir.join("swap.pgm"), &self.swapped)?;
        write_pgm(&dir.join("enhanced.pgm"), &self.enhanced)?;
        let metrics = Metrics {
            base: &self.fits[0],
            swapped: &self.fits[1],
            enhanced: &self.fits[2],
            latency: &self.latency,
            exterior_mse_to_swap: self.enhanced.exterior_mse(&self.swapped),
            residual_norms: self.bundle.residuals.norms(),
        };
        write_json(&dir.join("metrics.json"), &metrics)?;
        write_json(&dir.join("manifest.json"), manifest)
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Standard normal latent at `t = T` drawn from `seed`.
pub fn seed_latent(model: &DenoiserParams, seed: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.config.data_dim;
    let values = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Latent::new(
        Tensor::from_parts_unchecked(vec![1, n], values),
        model.schedule().steps(),
    )
}

fn expect_kind(model: &DenoiserParams, kind: ModelKind, what: &str) -> Result<()> {
    if model.config.kind != kind {
        return Err(Error::invalid(format!("{what} must be a {kind:?} model")));
    }
    Ok(())
}

/// DDIM sample from the base model under scene (and optional control)
/// conditioning.
pub fn generate_base(
    base: &DenoiserParams,
    scene_code: usize,
    control: Option<ControlPattern>,
    seed: u64,
) -> Result<RenderedImage> {
    expect_kind(base, ModelKind::Base, "scene generator")?;
    let mut cond = Conditioning::scene(scene_code);
    if let Some(p) = control {
        cond = cond.with_control(p.mask());
    }
    let z = sample_ddim(base, &seed_latent(base, seed), &cond)?;
    RenderedImage::from_tensor(&z.values, Provenance::Base)
}

/// The comparison baseline: the personalized model alone, sampled under
/// identity conditioning from the same seed latent as the base image.
pub fn personalized_only(personalized: &DenoiserParams, request: &EnhanceRequest) -> Result<RenderedImage> {
    let z = sample_ddim(
        personalized,
        &seed_latent(personalized, request.seed),
        &request.identity_cond(),
    )?;
    RenderedImage::from_tensor(&z.values, Provenance::Reference)
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

pub fn enhance(
    request: &EnhanceRequest,
    base: &DenoiserParams,
    personalized: &DenoiserParams,
) -> Result<EnhanceResult> {
    request.validate()?;
    expect_kind(personalized, ModelKind::Personalized, "identity model")?;
    if base.config.data_dim != personalized.config.data_dim || base.schedule().hash() != personalized.schedule().hash()
    {
        return Err(Error::invalid(
            "base and personalized models disagree on shape or schedule",
        ));
    }
    let (base_img, base_s) = timed(|| generate_base(base, request.scene_code, request.control, request.seed))
        .map_err(Error::in_stage("base"))?;
    let (swapped, swap_s) = timed(|| glyph_swap(&base_img, &request.target, true)).map_err(Error::in_stage("swap"))?;
    let (bundle, invert_s) = timed(|| FlowBundle::invert(personalized, &swapped, request.identity_cond()))
        .map_err(Error::in_stage("invert"))?;
    let (enhanced, bimd_s) =
        timed(|| bimd_sample(personalized, &bundle, &request.bimd)).map_err(Error::in_stage("bimd"))?;
    let fits = [&base_img, &swapped, &enhanced].map(|img| StageFit::measure(img, &request.target));
    Ok(EnhanceResult {
        base: base_img,
        swapped,
        enhanced,
        bundle,
        fits,
        latency: StageLatency {
            base_s,
            swap_s,
            invert_s,
            bimd_s,
        },
    })
}

/// One row of the ablation table, averaged over requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub stage: String,
    pub identity_error: f32,
    pub diversity: f32,
    pub latency_s: f64,
    /// Per-request identity errors, in request order.
    pub errors: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_STAGES: [&str; 5] = ["final", "after-swap", "after-base", "ab-fwd", "ab-bkwd"];

impl AblationReport {
    pub fn row(&self, stage: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| stage | identity error | diversity | latency (s) |\n|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} |\n",
                r.stage, r.identity_error, r.diversity, r.latency_s
            ));
        }
        out
    }
}

/// Runs every request through the pipeline and both flow ablations.
pub fn run_ablation_suite(
    base: &DenoiserParams,
    personalized: &DenoiserParams,
    requests: &[EnhanceRequest],
) -> Result<AblationReport> {
    if requests.len() < 2 {
        return Err(Error::invalid("the ablation suite needs at least two requests"));
    }
    let mut images: [Vec<RenderedImage>; 5] = Default::default();
    let mut errors: [Vec<f32>; 5] = Default::default();
    let mut latency = [0.0f64; 5];
    for req in requests {
        let r = enhance(req, base, personalized)?;
        // flow ablations span every step, so removing the forward flow
        // leaves an exact reconstruction of the swapped image
        let full = BimdConfig {
            mss: personalized.schedule().steps(),
            ..req.bimd
        };
        let (fwd, fwd_s) =
            timed(|| flow_ablation(personalized, &r.bundle, Flow::Fwd, &full)).map_err(Error::in_stage("ab-fwd"))?;
        let (bkwd, bkwd_s) =
            timed(|| flow_ablation(personalized, &r.bundle, Flow::Bkwd, &full)).map_err(Error::in_stage("ab-bkwd"))?;
        let l = &r.latency;
        let stage_latency = [
            l.base_s + l.swap_s + l.invert_s + l.bimd_s,
            l.base_s + l.swap_s,
            l.base_s,
            l.base_s + l.swap_s + l.invert_s + fwd_s,
            l.base_s + l.swap_s + l.invert_s + bkwd_s,
        ];
        let stage_images = [r.enhanced, r.swapped, r.base, fwd, bkwd];
        for (i, img) in stage_images.into_iter().enumerate() {
            errors[i].push(StageFit::measure(&img, &req.target).error);
            images[i].push(img);
            latency[i] += stage_latency[i];
        }
    }
    let n = requests.len();
    let rows = ABLATION_STAGES
        .iter()
        .enumerate()
        .map(|(i, stage)| {
            Ok(AblationRow {
                stage: stage.to_string(),
                identity_error: errors[i].iter().sum::<f32>() / n as f32,
                diversity: background_diversity(&images[i])?,
                latency_s: latency[i] / n as f64,
                errors: errors[i].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}
