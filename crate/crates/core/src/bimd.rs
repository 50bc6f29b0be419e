//! Triple-flow sampling.
//!
//! Starting from the pivot latent `Z_T*`, the first `mss` denoising steps
//! combine three noises: the customization-free prediction (pivot flow),
//! the recorded residual at that step (backward flow) and the identity
//! conditioned prediction (forward flow). Remaining steps use the identity
//! conditioned prediction alone.

use serde::{Deserialize, Serialize};

use crate::data::{Provenance, RenderedImage};
use crate::denoiser::{Conditioning, DenoiserParams};
use crate::error::{Error, Result};
use crate::inversion::{ddim_invert, res_invert, DdimTrajectory, ResidualTrack};
use crate::schedule::{Latent, StepForm};
use crate::tensor::Tensor;

/// How the forward flow enters the combined noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    /// `eps_free + lb * eps_r - lf * eps_cus`, the printed sign.
    Verbatim,
    /// `eps_free + lb * eps_r + lf * (eps_cus - eps_free)`.
    #[default]
    Guidance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BimdConfig {
    /// Leading steps, counted from `t = T`, that get the manipulation terms.
    pub mss: usize,
    pub lambda_bkwd: f32,
    pub lambda_fwd: f32,
    #[serde(default)]
    pub sign_mode: SignMode,
    #[serde(default)]
    pub step_form: StepForm,
}

impl BimdConfig {
    /// Unit scales, guidance sign, DDIM steps and `mss = T / 2`.
    pub fn for_steps(steps: usize) -> Self {
        BimdConfig {
            mss: steps / 2,
            lambda_bkwd: 1.0,
            lambda_fwd: 1.0,
            sign_mode: SignMode::Guidance,
            step_form: StepForm::Ddim,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.mss > steps {
            return Err(Error::invalid(format!("mss {} exceeds T = {steps}", self.mss)));
        }
        if !self.lambda_bkwd.is_finite() || !self.lambda_fwd.is_finite() {
            return Err(Error::invalid("manipulation scales must be finite"));
        }
        Ok(())
    }
}

/// Everything the sampler needs about one inverted image.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBundle {
    pub pivot: DdimTrajectory,
    pub residuals: ResidualTrack,
    /// Customization-space conditioning for the forward flow.
    pub identity: Conditioning,
}

impl FlowBundle {
    pub fn new(pivot: DdimTrajectory, residuals: ResidualTrack, identity: Conditioning) -> Result<Self> {
        if pivot.steps() != residuals.steps() {
            return Err(Error::invalid(format!(
                "pivot has {} steps but the residual track {}",
                pivot.steps(),
                residuals.steps()
            )));
        }
        if residuals.cond_free != identity.customization_free() {
            return Err(Error::invalid(
                "residuals were not recorded under the customization-free form of the identity conditioning",
            ));
        }
        Ok(FlowBundle {
            pivot,
            residuals,
            identity,
        })
    }

    /// Inverts `image` into the customization-free space of `model` and pairs
    /// the result with `identity`.
    pub fn invert(model: &DenoiserParams, image: &RenderedImage, identity: Conditioning) -> Result<Self> {
        let free = identity.customization_free();
        let pivot = ddim_invert(model, image, &free)?;
        let residuals = res_invert(model, &pivot, &free)?;
        FlowBundle::new(pivot, residuals, identity)
    }

    pub fn cond_free(&self) -> &Conditioning {
        &self.residuals.cond_free
    }

    fn check(&self, model: &DenoiserParams) -> Result<()> {
        let s = model.schedule();
        if self.pivot.steps() != s.steps() || self.pivot.schedule_hash != s.hash() {
            return Err(Error::invalid("flow bundle was built under a different schedule"));
        }
        Ok(())
    }
}

fn combine(free: &Tensor, res: &Tensor, cus: Option<&Tensor>, config: &BimdConfig) -> Result<Tensor> {
    let lb = config.lambda_bkwd;
    let lf = config.lambda_fwd;
    let base = free.zip_map(res, "bimd", |f, r| f + lb * r)?;
    match (cus, config.sign_mode) {
        (None, _) => Ok(base),
        (Some(c), SignMode::Verbatim) => base.zip_map(c, "bimd", |b, c| b - lf * c),
        (Some(c), SignMode::Guidance) => {
            let diff = c.sub(free)?;
            base.zip_map(&diff, "bimd", |b, d| b + lf * d)
        }
    }
}

/// Runs the sampler and returns the final latent.
pub fn bimd_latent(model: &DenoiserParams, bundle: &FlowBundle, config: &BimdConfig) -> Result<Latent> {
    bundle.check(model)?;
    let steps = bundle.pivot.steps();
    config.validate(steps)?;
    let schedule = model.schedule();
    let mut z = bundle.pivot.start();
    for k in 1..=steps {
        let t = steps + 1 - k;
        let eps = if k <= config.mss {
            if config.lambda_fwd == 0.0 {
                let free = model.predict_eps(&z, bundle.cond_free())?;
                combine(&free, bundle.residuals.residual(t), None, config)?
            } else {
                let (free, cus) = model.predict_free_and_custom(&z, &bundle.identity)?;
                combine(&free, bundle.residuals.residual(t), Some(&cus), config)?
            }
        } else {
            model.predict_eps(&z, &bundle.identity)?
        };
        z = schedule.step(config.step_form, &z, &eps, t)?;
        if z.values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLatent(t - 1));
        }
    }
    Ok(z)
}

pub fn bimd_sample(model: &DenoiserParams, bundle: &FlowBundle, config: &BimdConfig) -> Result<RenderedImage> {
    RenderedImage::from_tensor(&bimd_latent(model, bundle, config)?.values, Provenance::Enhanced)
}

/// Which flow to switch off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flow {
    Fwd,
    Bkwd,
}

pub fn flow_ablation(
    model: &DenoiserParams,
    bundle: &FlowBundle,
    which: Flow,
    config: &BimdConfig,
) -> Result<RenderedImage> {
    let mut cfg = *config;
    match which {
        Flow::Fwd => cfg.lambda_fwd = 0.0,
        Flow::Bkwd => cfg.lambda_bkwd = 0.0,
    }
    bimd_sample(model, bundle, &cfg)
}

/// Inverts `image_a` once, then samples with `identity_b` as the forward
/// flow at every `mss` in the sweep.
pub fn identity_fusion(
    model: &DenoiserParams,
    image_a: &RenderedImage,
    identity_b: &Conditioning,
    mss_sweep: &[usize],
    config: &BimdConfig,
) -> Result<Vec<RenderedImage>> {
    if config.lambda_fwd != config.lambda_bkwd {
        return Err(Error::invalid(format!(
            "fusion needs equal scales, got forward {} and backward {}",
            config.lambda_fwd, config.lambda_bkwd
        )));
    }
    let bundle = FlowBundle::invert(model, image_a, identity_b.clone())?;
    mss_sweep
        .iter()
        .map(|&mss| bimd_sample(model, &bundle, &BimdConfig { mss, ..*config }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{personalized_dataset, GlyphKind, IdentityParams};
    use crate::denoiser::DenoiserConfig;
    use crate::inversion::{reconstruct_res, sample_ddim};
    use crate::schedule::NoiseSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> DenoiserParams {
        let mut cfg = DenoiserConfig::personalized(NoiseSchedule::linear(10, 1e-3, 0.2).unwrap());
        cfg.hidden = 32;
        cfg.blocks = 1;
        let mut m = DenoiserParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // make the identity matter
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for t in &mut m.tensors_mut()[2..6] {
            *t = Tensor::new(
                t.shape().to_vec(),
                (0..t.numel())
                    .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                    .collect(),
            )
            .unwrap();
        }
        m
    }

    fn bundle(m: &DenoiserParams, seed: u64) -> (RenderedImage, FlowBundle) {
        let s = personalized_dataset(1, seed).unwrap().remove(0);
        let target = IdentityParams {
            kind: GlyphKind::Cross,
            intensity: 3,
            radius: 2,
            offset: 4,
        };
        let id = Conditioning::scene(s.record.scene_code)
            .with_identity(target)
            .with_guidance(3.0);
        let b = FlowBundle::invert(m, &s.image, id).unwrap();
        (s.image, b)
    }

    fn cfg(mss: usize, lb: f32, lf: f32) -> BimdConfig {
        BimdConfig {
            mss,
            lambda_bkwd: lb,
            lambda_fwd: lf,
            sign_mode: SignMode::Guidance,
            step_form: StepForm::Ddim,
        }
    }

    #[test]
    fn degenerations() {
        for seed in 0..10 {
            let m = model(seed);
            let (img, b) = bundle(&m, 50 + seed);
            let start = b.pivot.start();

            let plain = bimd_latent(&m, &b, &cfg(10, 0.0, 0.0)).unwrap();
            let ddim = sample_ddim(&m, &start, b.cond_free()).unwrap();
            assert!(plain.values.max_abs_diff(&ddim.values).unwrap() <= 1e-6);

            for mode in [SignMode::Verbatim, SignMode::Guidance] {
                let c = BimdConfig {
                    sign_mode: mode,
                    ..cfg(10, 1.0, 0.0)
                };
                let rec = bimd_sample(&m, &b, &c).unwrap();
                let res = reconstruct_res(&m, &b.residuals, &start, b.cond_free()).unwrap();
                assert!(rec.max_abs_diff(&res) <= 1e-5);
                assert!(rec.max_abs_diff(&img) <= 1e-4);
            }

            let none = bimd_latent(&m, &b, &cfg(0, 1.0, 1.0)).unwrap();
            let pers = sample_ddim(&m, &start, &b.identity).unwrap();
            assert!(none.values.max_abs_diff(&pers.values).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn forward_ablation_reconstructs() {
        let m = model(3);
        let (img, b) = bundle(&m, 7);
        let out = flow_ablation(&m, &b, Flow::Fwd, &cfg(10, 1.0, 1.0)).unwrap();
        assert!(out.max_abs_diff(&img) <= 1e-4);
        let bk = flow_ablation(&m, &b, Flow::Bkwd, &cfg(10, 1.0, 1.0)).unwrap();
        assert!(bk.pixels().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sign_modes_differ_and_forward_flow_acts() {
        let m = model(4);
        let (_, b) = bundle(&m, 8);
        let g = bimd_sample(&m, &b, &cfg(10, 1.0, 1.0)).unwrap();
        let v = bimd_sample(
            &m,
            &b,
            &BimdConfig {
                sign_mode: SignMode::Verbatim,
                ..cfg(10, 1.0, 1.0)
            },
        )
        .unwrap();
        let r = bimd_sample(&m, &b, &cfg(10, 1.0, 0.0)).unwrap();
        assert!(g.max_abs_diff(&v) > 1e-3);
        assert!(g.max_abs_diff(&r) > 1e-3);
        assert_eq!(g, bimd_sample(&m, &b, &cfg(10, 1.0, 1.0)).unwrap());
    }

    #[test]
    fn ddpm_mean_form_runs() {
        let m = model(5);
        let (_, b) = bundle(&m, 9);
        let c = BimdConfig {
            step_form: StepForm::DdpmMean,
            ..cfg(5, 1.0, 1.0)
        };
        assert!(bimd_sample(&m, &b, &c).is_ok());
    }

    #[test]
    fn fusion_endpoints_and_preconditions() {
        let m = model(6);
        let (img, b) = bundle(&m, 10);
        let frames = identity_fusion(&m, &img, &b.identity, &[0, 5, 10], &cfg(0, 1.0, 1.0)).unwrap();
        assert_eq!(frames.len(), 3);
        let pers = sample_ddim(&m, &b.pivot.start(), &b.identity).unwrap();
        assert!(
            frames[0].max_abs_diff(&RenderedImage::from_tensor(&pers.values, Provenance::Enhanced).unwrap()) <= 1e-6
        );
        let rec = identity_fusion(&m, &img, &b.identity, &[10], &cfg(0, 1.0, 0.0));
        assert!(rec.is_err());
    }

    #[test]
    fn invalid_configs() {
        let m = model(0);
        let (_, b) = bundle(&m, 1);
        assert!(bimd_sample(&m, &b, &cfg(11, 1.0, 1.0)).is_err());
        assert!(bimd_sample(&m, &b, &cfg(5, f32::NAN, 1.0)).is_err());
        let other = b.identity.clone().with_guidance(2.0);
        assert!(FlowBundle::new(b.pivot.clone(), b.residuals.clone(), other).is_err());
        let json = serde_json::to_string(&BimdConfig::for_steps(50)).unwrap();
        assert!(json.contains("\"guidance\"") && json.contains("\"mss\":25"));
    }
}
