//! Inverting an image into a diffusion trajectory and replaying it.
//!
//! Three engines share one anchor, the DDIM-inverted trajectory
//! `Z_0* .. Z_T*`:
//!
//! * plain DDIM sampling from `Z_T*` (the uncorrected baseline),
//! * null-embedding optimization, which tunes the unconditional embedding
//!   at every step so guided sampling retraces the anchor,
//! * residual recording, which evaluates the customization-free prediction
//!   at each anchor latent and stores its difference from the noise the
//!   anchor transition implies. Adding the residual back during sampling
//!   reproduces the anchor exactly, with no optimization.
//!
//! Residuals are indexed by the step `t = 1..=T` that consumes them.

mod bench;
mod container;

pub use bench::{
    bench_inversions, invert_and_reconstruct, reports_to_csv, InversionMethod, InversionReport, NtiSettings,
};
pub use container::{decode_tensors, encode_tensors, TRACK_VERSION};

use crate::data::{Provenance, RenderedImage};
use crate::denoiser::{Conditioning, DenoiserParams, IdentityCode, NULL_SCENE};
use crate::error::{Error, Result};
use crate::schedule::{cfg_combine, Latent};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

/// Anchor latents `Z_0* .. Z_T*`, indexed by timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimTrajectory {
    latents: Vec<Tensor>,
    pub cond: Conditioning,
    pub schedule_hash: [u8; 32],
}

impl DdimTrajectory {
    pub fn new(latents: Vec<Tensor>, cond: Conditioning, schedule_hash: [u8; 32]) -> Result<Self> {
        if latents.len() < 2 {
            return Err(Error::invalid("a trajectory needs at least Z_0 and Z_1"));
        }
        Ok(DdimTrajectory {
            latents,
            cond,
            schedule_hash,
        })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn latents(&self) -> &[Tensor] {
        &self.latents
    }

    pub fn latent(&self, t: usize) -> Latent {
        Latent::new(self.latents[t].clone(), t)
    }

    /// `Z_T*`, where every sampler starts.
    pub fn start(&self) -> Latent {
        self.latent(self.steps())
    }

    fn check(&self, model: &DenoiserParams) -> Result<()> {
        if self.steps() != model.schedule().steps() || self.schedule_hash != model.schedule().hash() {
            return Err(Error::invalid("trajectory was built under a different schedule"));
        }
        Ok(())
    }
}

/// Residual noises `eps_r,t` for `t = 1..=T` (`residuals[t - 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrack {
    residuals: Vec<Tensor>,
    pub cond_free: Conditioning,
}

impl ResidualTrack {
    pub fn new(residuals: Vec<Tensor>, cond_free: Conditioning) -> Self {
        ResidualTrack { residuals, cond_free }
    }

    pub fn steps(&self) -> usize {
        self.residuals.len()
    }

    pub fn residual(&self, t: usize) -> &Tensor {
        &self.residuals[t - 1]
    }

    pub fn residuals(&self) -> &[Tensor] {
        &self.residuals
    }

    pub fn residual_mut(&mut self, t: usize) -> &mut Tensor {
        &mut self.residuals[t - 1]
    }

    /// L2 norm of each residual, `t = 1..=T`.
    pub fn norms(&self) -> Vec<f32> {
        self.residuals.iter().map(Tensor::l2_norm).collect()
    }
}

/// Optimized unconditional embeddings, `t = 1..=T` (`embeddings[t - 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct NullTrack {
    pub embeddings: Vec<Vec<f32>>,
    /// Adam updates taken at each step.
    pub iterations: Vec<usize>,
    pub loss_before: Vec<f32>,
    pub loss_after: Vec<f32>,
}

impl NullTrack {
    pub fn steps(&self) -> usize {
        self.embeddings.len()
    }
}

fn check_image(image: &RenderedImage, model: &DenoiserParams) -> Result<Tensor> {
    if image.pixels().len() != model.config.data_dim {
        return Err(Error::Shape {
            op: "invert",
            lhs: vec![model.config.data_dim],
            rhs: vec![image.pixels().len()],
        });
    }
    Ok(image.to_tensor())
}

fn ensure_latent(z: &Tensor, t: usize) -> Result<()> {
    if z.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLatent(t));
    }
    Ok(())
}

/// DDIM inversion: `Z_t* = inverse_step(Z_{t-1}*, eps(Z_{t-1}*, t), t)`.
pub fn ddim_invert(model: &DenoiserParams, image: &RenderedImage, cond: &Conditioning) -> Result<DdimTrajectory> {
    let schedule = model.schedule();
    let mut z = Latent::new(check_image(image, model)?, 0);
    let mut latents = Vec::with_capacity(schedule.steps() + 1);
    latents.push(z.values.clone());
    for t in 1..=schedule.steps() {
        let probe = Latent::new(z.values.clone(), t);
        let eps = model.predict_eps(&probe, cond).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLatent(t),
            other => other,
        })?;
        z = schedule.ddim_inverse_step(&z, &eps, t)?;
        ensure_latent(&z.values, t)?;
        latents.push(z.values.clone());
    }
    DdimTrajectory::new(latents, cond.clone(), schedule.hash())
}

/// Records `eps_r,t = implied_eps(Z_t*, Z_{t-1}*) - eps(Z_t*, cond_free)`.
pub fn res_invert(model: &DenoiserParams, traj: &DdimTrajectory, cond_free: &Conditioning) -> Result<ResidualTrack> {
    traj.check(model)?;
    if cond_free.identity != IdentityCode::Null {
        return Err(Error::invalid("residuals must be recorded with the NULL identity"));
    }
    let schedule = model.schedule();
    let mut residuals = vec![Tensor::zeros(&[1, 1]); traj.steps()];
    for t in (1..=traj.steps()).rev() {
        let (zt, zp) = (traj.latent(t), traj.latent(t - 1));
        let implied = schedule.implied_eps(&zt, &zp, t)?;
        let pre = model.predict_eps(&zt, cond_free)?;
        residuals[t - 1] = implied.sub(&pre)?;
    }
    Ok(ResidualTrack::new(residuals, cond_free.clone()))
}

fn finish(z: Latent, tag: Provenance) -> Result<RenderedImage> {
    RenderedImage::from_tensor(&z.values, tag)
}

/// Plain guided DDIM sampling from `start` down to `t = 0`, as a latent.
pub fn sample_ddim(model: &DenoiserParams, start: &Latent, cond: &Conditioning) -> Result<Latent> {
    let schedule = model.schedule();
    let mut z = start.clone();
    for t in (1..=start.t).rev() {
        let eps = model.predict_eps(&z, cond)?;
        z = schedule.ddim_step(&z, &eps, t)?;
        ensure_latent(&z.values, t - 1)?;
    }
    Ok(z)
}

pub fn reconstruct_ddim(model: &DenoiserParams, start: &Latent, cond: &Conditioning) -> Result<RenderedImage> {
    finish(sample_ddim(model, start, cond)?, Provenance::Reference)
}

pub fn reconstruct_res(
    model: &DenoiserParams,
    track: &ResidualTrack,
    start: &Latent,
    cond_free: &Conditioning,
) -> Result<RenderedImage> {
    if track.steps() != model.schedule().steps() || start.t != track.steps() {
        return Err(Error::invalid(format!(
            "residual track has {} steps, schedule {}, start latent at t={}",
            track.steps(),
            model.schedule().steps(),
            start.t
        )));
    }
    let schedule = model.schedule();
    let mut z = start.clone();
    for t in (1..=track.steps()).rev() {
        let eps = model.predict_eps(&z, cond_free)?.add(track.residual(t))?;
        z = schedule.ddim_step(&z, &eps, t)?;
        ensure_latent(&z.values, t - 1)?;
    }
    finish(z, Provenance::Reference)
}

/// Per-step optimization of the unconditional embedding.
///
/// At each `t` (from `T` down) the embedding starts from the previous
/// step's result (the NULL-token at `t = T`) and takes up to `inner_iters`
/// Adam steps on `mse(ddim_step(z_t, cfg(eps(null_t), eps(cond)), t), Z_{t-1}*)`,
/// where `eps(null_t)` is the unconditional branch with `null_t` in the
/// identity slot.
/// The best iterate seen, including the starting point, is kept, and the
/// running latent advances with it.
pub fn nti_invert(
    model: &DenoiserParams,
    traj: &DdimTrajectory,
    cond: &Conditioning,
    inner_iters: usize,
    lr: f32,
    early_stop_eps: f32,
) -> Result<NullTrack> {
    traj.check(model)?;
    if inner_iters == 0 {
        return Err(Error::invalid(
            "null-embedding optimization needs at least one inner iteration",
        ));
    }
    if cond.guidance.is_nan() || cond.guidance <= 1.0 {
        return Err(Error::invalid(format!(
            "null-embedding optimization needs guidance > 1, got {}",
            cond.guidance
        )));
    }
    let schedule = model.schedule();
    let steps = traj.steps();
    let w = cond.guidance;
    let dim = model.config.null_dim();

    let mut embeddings = vec![Vec::new(); steps];
    let mut iterations = vec![0; steps];
    let mut loss_before = vec![0.0; steps];
    let mut loss_after = vec![0.0; steps];
    let mut z = traj.start();
    let mut null = Tensor::new(vec![1, dim], model.null_token().to_vec())?;

    for t in (1..=steps).rev() {
        let target = traj.latent(t - 1);
        let batch = model.single_batch(&z, cond, vec![NULL_SCENE])?;
        let e_cond = model
            .predict_branches(&z, cond, std::slice::from_ref(&cond.identity))?
            .remove(0);
        let (_, c_eps) = schedule.ddim_coefficients(t);
        let n = target.values.numel() as f64;
        let mut adam = AdamState::new(std::slice::from_ref(&null), AdamConfig::default());

        let mut best: Option<(f32, Tensor, Latent)> = None;
        let mut taken = 0;
        for it in 0..=inner_iters {
            let mut tape = Tape::new();
            let pv = model.param_leaves(&mut tape);
            let emb = tape.leaf(null.clone());
            let out = model
                .forward(&mut tape, &pv, &batch, emb)
                .map_err(|_| Error::NtiDiverged { t, iteration: it })?;
            let e_u = tape.value(out).clone();
            let eps = cfg_combine(&e_u, &e_cond, w)?;
            let pred = schedule.ddim_step(&z, &eps, t)?;
            let loss = pred.values.mse(&target.values)?;
            if !loss.is_finite() {
                return Err(Error::NtiDiverged { t, iteration: it });
            }
            if it == 0 {
                loss_before[t - 1] = loss;
            }
            if best.as_ref().is_none_or(|b| loss < b.0) {
                best = Some((loss, null.clone(), pred.clone()));
            }
            if it == inner_iters || loss < early_stop_eps {
                break;
            }
            // d loss / d e_u, pushed back through the network by the tape
            let scale = (2.0 / n * c_eps * (1.0 - w as f64)) as f32;
            let upstream: Vec<f32> = pred
                .values
                .data()
                .iter()
                .zip(target.values.data())
                .map(|(p, q)| scale * (p - q))
                .collect();
            let g = tape.leaf(Tensor::new(e_u.shape().to_vec(), upstream)?);
            let dot = tape.mul(out, g)?;
            let s = tape.sum(dot)?;
            let grad = tape
                .backward(s, &[emb])
                .map_err(|_| Error::NtiDiverged { t, iteration: it })?;
            drop(tape);
            adam_step(std::slice::from_mut(&mut null), &grad, &mut adam, lr)
                .map_err(|_| Error::NtiDiverged { t, iteration: it })?;
            taken += 1;
        }
        let (loss, emb, next) = best.expect("at least one evaluation");
        loss_after[t - 1] = loss;
        iterations[t - 1] = taken;
        embeddings[t - 1] = emb.data().to_vec();
        null = emb;
        z = next;
    }
    Ok(NullTrack {
        embeddings,
        iterations,
        loss_before,
        loss_after,
    })
}

pub fn reconstruct_nti(
    model: &DenoiserParams,
    nulls: &NullTrack,
    start: &Latent,
    cond: &Conditioning,
) -> Result<RenderedImage> {
    if nulls.steps() != model.schedule().steps() || start.t != nulls.steps() {
        return Err(Error::invalid("null track does not match the schedule"));
    }
    let schedule = model.schedule();
    let mut z = start.clone();
    for t in (1..=nulls.steps()).rev() {
        let eps = model.predict_guided(&z, cond, IdentityCode::Embedding(nulls.embeddings[t - 1].clone()))?;
        z = schedule.ddim_step(&z, &eps, t)?;
        ensure_latent(&z.values, t - 1)?;
    }
    finish(z, Provenance::Reference)
}
