//! Noise schedules and deterministic (eta = 0) DDIM step arithmetic.
//!
//! Timesteps are 1-based: `t = 1..=T` index the schedule, and `t = 0` is the
//! clean-data boundary with `alpha_bar(0) = 1`. Per-element arithmetic runs in
//! `f64` and rounds once to `f32`, so forward/inverse pairs agree to a few
//! ulps.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleDoc", into = "ScheduleDoc")]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Serialized form: only `T` and the betas; everything else is derived.
#[derive(Clone, Serialize, Deserialize)]
struct ScheduleDoc {
    #[serde(rename = "T")]
    steps: usize,
    betas: Vec<f64>,
}

/// A latent `Z_t` together with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: Tensor,
    pub t: usize,
}

impl Latent {
    pub fn new(values: Tensor, t: usize) -> Self {
        Latent { values, t }
    }
}

/// Which update rule advances a latent by one denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepForm {
    /// Deterministic DDIM through the predicted clean sample.
    #[default]
    Ddim,
    /// `(z - (1 - a_t) / sqrt(1 - abar_t) * eps) / sqrt(a_t)` without noise injection.
    DdpmMean,
}

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-3;
pub const DEFAULT_BETA_END: f64 = 0.2;

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs T >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1).max(1) as f64)
            .collect();
        NoiseSchedule::from_betas(betas)
    }

    /// Linear betas over 50 steps spanning the range a 1000-step `1e-4..0.02`
    /// schedule covers, so `alpha_bar(T)` is near zero and Gaussian seeds are
    /// in distribution.
    pub fn default_linear() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("empty schedule"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        Ok(Self::derive(betas))
    }

    fn derive(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        NoiseSchedule {
            steps: betas.len(),
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            return Err(Error::Timestep { t, lo, hi: self.steps });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = self.to_json().expect("schedule serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    /// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Latent> {
        self.check_t(t, 0)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let values = zip2(x0, noise, "q_sample", |x, n| a * x + b * n)?;
        Ok(Latent::new(values, t))
    }

    /// One deterministic DDIM denoising step `t -> t-1`.
    pub fn ddim_step(&self, z: &Latent, eps: &Tensor, t: usize) -> Result<Latent> {
        self.check_t(t, 1)?;
        let (c_z, c_eps) = self.ddim_coefficients(t);
        let values = zip2(&z.values, eps, "ddim_step", |zv, e| c_z * zv + c_eps * e)?;
        Ok(Latent::new(values, t - 1))
    }

    /// Algebraic inverse of [`ddim_step`](Self::ddim_step): `t-1 -> t`.
    pub fn ddim_inverse_step(&self, z_prev: &Latent, eps: &Tensor, t: usize) -> Result<Latent> {
        self.check_t(t, 1)?;
        let (ab_t, ab_p) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        let values = zip2(&z_prev.values, eps, "ddim_inverse_step", |zp, e| {
            let x0 = (zp - (1.0 - ab_p).sqrt() * e) / ab_p.sqrt();
            ab_t.sqrt() * x0 + (1.0 - ab_t).sqrt() * e
        })?;
        Ok(Latent::new(values, t))
    }

    /// The noise a DDIM step from `z_t` must have used to land on `z_prev`.
    pub fn implied_eps(&self, z_t: &Latent, z_prev: &Latent, t: usize) -> Result<Tensor> {
        self.check_t(t, 1)?;
        let (c_z, c_eps) = self.ddim_coefficients(t);
        if c_eps.abs() < 1e-12 {
            return Err(Error::invalid(format!(
                "degenerate schedule at t={t}: eps coefficient vanishes"
            )));
        }
        zip2(&z_t.values, &z_prev.values, "implied_eps", |zt, zp| {
            (zp - c_z * zt) / c_eps
        })
    }

    /// `z_{t-1} = c_z * z_t + c_eps * eps` for the DDIM step.
    pub fn ddim_coefficients(&self, t: usize) -> (f64, f64) {
        let (ab_t, ab_p) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        let c_z = (ab_p / ab_t).sqrt();
        let c_eps = (1.0 - ab_p).sqrt() - (ab_p * (1.0 - ab_t) / ab_t).sqrt();
        (c_z, c_eps)
    }

    /// `z_{t-1} = c_z * z_t + c_eps * eps` for the noise-free DDPM mean.
    pub fn ddpm_mean_coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha(t);
        let c_z = 1.0 / a.sqrt();
        let c_eps = -(1.0 - a) / ((1.0 - self.alpha_bar(t)).sqrt() * a.sqrt());
        (c_z, c_eps)
    }

    pub fn step_coefficients(&self, form: StepForm, t: usize) -> (f64, f64) {
        match form {
            StepForm::Ddim => self.ddim_coefficients(t),
            StepForm::DdpmMean => self.ddpm_mean_coefficients(t),
        }
    }

    /// One denoising step with the selected update rule.
    pub fn step(&self, form: StepForm, z: &Latent, eps: &Tensor, t: usize) -> Result<Latent> {
        match form {
            StepForm::Ddim => self.ddim_step(z, eps, t),
            StepForm::DdpmMean => {
                self.check_t(t, 1)?;
                let (c_z, c_eps) = self.ddpm_mean_coefficients(t);
                let values = zip2(&z.values, eps, "ddpm_mean_step", |zv, e| c_z * zv + c_eps * e)?;
                Ok(Latent::new(values, t - 1))
            }
        }
    }
}

/// `eps_uncond + w * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, w: f32) -> Result<Tensor> {
    eps_uncond.zip_map(eps_cond, "cfg_combine", |u, c| u + w * (c - u))
}

impl TryFrom<ScheduleDoc> for NoiseSchedule {
    type Error = Error;

    fn try_from(doc: ScheduleDoc) -> Result<Self> {
        if doc.steps != doc.betas.len() {
            return Err(Error::Format(format!(
                "schedule declares T={} but lists {} betas",
                doc.steps,
                doc.betas.len()
            )));
        }
        NoiseSchedule::from_betas(doc.betas)
    }
}

impl From<NoiseSchedule> for ScheduleDoc {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleDoc {
            steps: s.steps,
            betas: s.betas,
        }
    }
}

fn zip2(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    a.zip_map(b, op, |x, y| f(x as f64, y as f64) as f32)
}

#[cfg(test)]
impl NoiseSchedule {
    /// Bypasses the `0 < beta` check so degenerate cases can be exercised.
    pub(crate) fn unchecked(betas: Vec<f64>) -> Self {
        Self::derive(betas)
    }
}
