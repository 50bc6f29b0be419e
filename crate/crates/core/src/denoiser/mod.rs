//! Conditional noise-prediction networks.
//!
//! The network is a residual multilayer perceptron over the flattened image.
//! A conditioning vector `c = [time, scene, identity]` is concatenated to the
//! input layer and to every residual block. The output is
//! `(F + s_t * z) / sqrt(1 - abar_t)`, where `F` is the network and `s_t` a
//! learned per-timestep, per-pixel gain: the hidden layer is too narrow to
//! carry white noise through, and the rescaling keeps both terms bounded
//! near the clean-data end of the schedule. The identity embedding is the
//! NULL-token plus a per-factor offset (glyph kind, intensity, radius,
//! offset); offsets start at zero and only move when identities are seen in
//! training, so a model trained with identity always dropped maps every
//! identity onto the NULL-token.

mod io;
mod train;

pub use io::{load_weights, save_weights, weights_from_bytes, weights_hash, weights_to_bytes, WEIGHTS_VERSION};
pub use train::{denoising_loss, train, TrainConfig, TrainJob, TrainReport};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{IdentityParams, INTENSITY_LEVELS, OFFSET_LEVELS, PIXELS, RADIUS_LEVELS, SCENE_CODES};
use crate::error::{Error, Result};
use crate::schedule::{cfg_combine, Latent, NoiseSchedule};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Scene and control conditioned, identity always dropped.
    Base,
    /// Scene and identity conditioned.
    Personalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub kind: ModelKind,
    pub data_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub scene_dim: usize,
    /// Width of each of the four identity factor embeddings.
    pub identity_dim: usize,
    /// Whether a spatial control mask is part of the input.
    pub control: bool,
    /// Probability of replacing the identity with the NULL-token in training.
    pub identity_dropout: f32,
    /// Probability of dropping scene and identity together in training,
    /// which teaches the unconditional branch used by guidance.
    pub cond_dropout: f32,
    pub schedule: NoiseSchedule,
}

impl DenoiserConfig {
    pub fn base(schedule: NoiseSchedule) -> Self {
        DenoiserConfig {
            kind: ModelKind::Base,
            data_dim: PIXELS,
            hidden: 256,
            blocks: 2,
            time_dim: 32,
            scene_dim: 16,
            identity_dim: 8,
            control: true,
            identity_dropout: 1.0,
            cond_dropout: 0.1,
            schedule,
        }
    }

    pub fn personalized(schedule: NoiseSchedule) -> Self {
        DenoiserConfig {
            kind: ModelKind::Personalized,
            control: false,
            identity_dropout: 0.1,
            ..DenoiserConfig::base(schedule)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0
            || self.hidden == 0
            || self.time_dim == 0
            || !self.time_dim.is_multiple_of(2)
            || self.scene_dim == 0
            || self.identity_dim == 0
        {
            return Err(Error::invalid(
                "denoiser sizes must be positive and the time embedding even",
            ));
        }
        for (name, p) in [("identity", self.identity_dropout), ("conditioning", self.cond_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} dropout {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn null_dim(&self) -> usize {
        4 * self.identity_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.time_dim + self.scene_dim + self.null_dim()
    }

    fn input_dim(&self) -> usize {
        self.data_dim * if self.control { 2 } else { 1 } + self.cond_dim()
    }

    /// Shapes of every parameter tensor, in declaration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let d = self.identity_dim;
        let mut shapes = vec![
            vec![SCENE_CODES + 1, self.scene_dim],
            vec![1, self.null_dim()],
            vec![4, d],
            vec![INTENSITY_LEVELS, d],
            vec![RADIUS_LEVELS, d],
            vec![OFFSET_LEVELS, d],
            vec![self.input_dim(), self.hidden],
            vec![1, self.hidden],
        ];
        for _ in 0..self.blocks {
            shapes.push(vec![self.hidden + self.cond_dim(), self.hidden]);
            shapes.push(vec![1, self.hidden]);
        }
        shapes.push(vec![self.hidden, self.data_dim]);
        shapes.push(vec![1, self.data_dim]);
        shapes.push(vec![self.schedule.steps() + 1, self.data_dim]);
        shapes
    }
}

/// What fills the identity slot of the conditioning vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdentityCode {
    /// The model's learned NULL-token: customization-free space.
    Null,
    Glyph(IdentityParams),
    /// A raw embedding vector, e.g. an optimized null embedding.
    Embedding(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub identity: IdentityCode,
    pub scene_code: usize,
    pub control: Option<Vec<f32>>,
    pub guidance: f32,
}

impl Conditioning {
    /// Scene only, NULL identity, guidance 1.
    pub fn scene(scene_code: usize) -> Self {
        Conditioning {
            identity: IdentityCode::Null,
            scene_code,
            control: None,
            guidance: 1.0,
        }
    }

    pub fn with_identity(mut self, identity: IdentityParams) -> Self {
        self.identity = IdentityCode::Glyph(identity);
        self
    }

    pub fn with_control(mut self, mask: Vec<f32>) -> Self {
        self.control = Some(mask);
        self
    }

    pub fn with_guidance(mut self, w: f32) -> Self {
        self.guidance = w;
        self
    }

    /// Same scene, control and guidance with the identity replaced by NULL.
    pub fn customization_free(&self) -> Self {
        Conditioning {
            identity: IdentityCode::Null,
            ..self.clone()
        }
    }
}

/// Scene slot of the unconditional branch.
pub const NULL_SCENE: usize = SCENE_CODES;

const SCENE: usize = 0;
const NULL: usize = 1;
const DELTA_KIND: usize = 2;
const W_IN: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    tensors: Vec<Tensor>,
}

/// Per-row inputs of one batched forward pass.
pub(crate) struct Batch {
    pub z: Tensor,
    pub t: Vec<usize>,
    pub scenes: Vec<usize>,
    pub control: Option<Tensor>,
}

impl DenoiserParams {
    /// Fresh weights: scaled Gaussian matrices, zero biases, zero identity
    /// offsets.
    pub fn init(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        let n_blocks = config.blocks;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let numel: usize = shape.iter().product();
            if i == shapes.len() - 1 {
                // starts at 1 - abar_t: the best linear guess for
                // unit-variance data
                let mut data = Vec::with_capacity(numel);
                for t in 0..shape[0] {
                    let g = (1.0 - config.schedule.alpha_bar(t)) as f32;
                    data.extend(std::iter::repeat_n(g, shape[1]));
                }
                tensors.push(Tensor::new(shape.clone(), data)?);
                continue;
            }
            let fan_in = shape[0] as f32;
            let std = match i {
                SCENE | NULL => 1.0,
                DELTA_KIND..=5 => 0.0,
                _ if shape[0] == 1 => 0.0,
                _ if i == shapes.len() - 3 => 0.5 / fan_in.sqrt(),
                _ if i > W_IN + 1 && i < W_IN + 2 + 2 * n_blocks => 0.7 / fan_in.sqrt(),
                _ => 1.4 / fan_in.sqrt(),
            };
            let data = (0..numel)
                .map(|_| {
                    if std == 0.0 {
                        0.0
                    } else {
                        std * rng.sample::<f32, _>(StandardNormal)
                    }
                })
                .collect();
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(DenoiserParams { config, tensors })
    }

    pub(crate) fn from_tensors(config: DenoiserConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Format(format!(
                "config declares {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (s, t) in shapes.iter().zip(&tensors) {
            if s.as_slice() != t.shape() {
                return Err(Error::Shape {
                    op: "denoiser params",
                    lhs: s.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(DenoiserParams { config, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.config.schedule
    }

    /// The learned NULL-token.
    pub fn null_token(&self) -> &[f32] {
        self.tensors[NULL].data()
    }

    pub fn identity_embedding(&self, code: &IdentityCode) -> Result<Vec<f32>> {
        let mut emb = self.null_token().to_vec();
        match code {
            IdentityCode::Null => {}
            IdentityCode::Glyph(id) => {
                id.validate()?;
                let d = self.config.identity_dim;
                let rows = [
                    id.kind.index(),
                    id.intensity as usize,
                    id.radius as usize,
                    id.offset as usize,
                ];
                for (f, &r) in rows.iter().enumerate() {
                    let table = self.tensors[DELTA_KIND + f].data();
                    for (e, v) in emb[f * d..(f + 1) * d].iter_mut().zip(&table[r * d..(r + 1) * d]) {
                        *e += v;
                    }
                }
            }
            IdentityCode::Embedding(v) => {
                if v.len() != emb.len() {
                    return Err(Error::Shape {
                        op: "identity embedding",
                        lhs: vec![emb.len()],
                        rhs: vec![v.len()],
                    });
                }
                emb.copy_from_slice(v);
            }
        }
        Ok(emb)
    }

    pub(crate) fn time_embedding(&self, ts: &[usize]) -> Tensor {
        let dim = self.config.time_dim;
        let half = dim / 2;
        let steps = self.config.schedule.steps() as f64;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            let x = t as f64 / steps * 1000.0;
            for k in 0..half {
                let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
                data.push((x * freq).sin() as f32);
            }
            for k in 0..half {
                let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
                data.push((x * freq).cos() as f32);
            }
        }
        Tensor::from_parts_unchecked(vec![ts.len(), dim], data)
    }

    pub(crate) fn param_leaves<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf_ref(t)).collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<usize> {
        let (rows, cols) = batch.z.dims2()?;
        if cols != self.config.data_dim {
            return Err(Error::Shape {
                op: "predict_eps",
                lhs: vec![rows, self.config.data_dim],
                rhs: batch.z.shape().to_vec(),
            });
        }
        if batch.t.len() != rows || batch.scenes.len() != rows {
            return Err(Error::invalid("batch metadata length differs from row count"));
        }
        for &t in &batch.t {
            self.config.schedule.check_t(t, 1)?;
        }
        if let Some(&s) = batch.scenes.iter().find(|&&s| s > NULL_SCENE) {
            return Err(Error::invalid(format!("scene code {s} >= {SCENE_CODES}")));
        }
        Ok(rows)
    }

    /// Records the network on `tape`. `identity` is a `[rows, null_dim]`
    /// node; `params` come from [`param_leaves`](Self::param_leaves).
    pub(crate) fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        params: &[Var],
        batch: &Batch,
        identity: Var,
    ) -> Result<Var> {
        let rows = self.check_batch(batch)?;
        let z = tape.leaf(batch.z.clone());
        let time = tape.leaf(self.time_embedding(&batch.t));
        let scene = tape.gather_rows(params[SCENE], &batch.scenes)?;
        let cond = tape.concat_cols(&[time, scene, identity])?;
        let x = if self.config.control {
            let mask = match &batch.control {
                Some(m) => m.clone(),
                None => Tensor::zeros(&[rows, self.config.data_dim]),
            };
            let mask = tape.leaf(mask);
            tape.concat_cols(&[z, mask, cond])?
        } else {
            tape.concat_cols(&[z, cond])?
        };
        let pre = tape.matmul(x, params[W_IN])?;
        let pre = tape.add_row(pre, params[W_IN + 1])?;
        let mut h = tape.silu(pre)?;
        for b in 0..self.config.blocks {
            let (w, bias) = (params[W_IN + 2 + 2 * b], params[W_IN + 3 + 2 * b]);
            let u = tape.concat_cols(&[h, cond])?;
            let pre = tape.matmul(u, w)?;
            let pre = tape.add_row(pre, bias)?;
            let act = tape.silu(pre)?;
            h = tape.add(h, act)?;
        }
        let n = params.len();
        let out = tape.matmul(h, params[n - 3])?;
        let out = tape.add_row(out, params[n - 2])?;
        let gain = tape.gather_rows(params[n - 1], &batch.t)?;
        let skip = tape.mul(z, gain)?;
        let sum = tape.add(out, skip)?;
        let mut inv = Vec::with_capacity(rows * self.config.data_dim);
        for &t in &batch.t {
            let c = (1.0 / (1.0 - self.config.schedule.alpha_bar(t)).sqrt()) as f32;
            inv.extend(std::iter::repeat_n(c, self.config.data_dim));
        }
        let inv = tape.leaf(Tensor::from_parts_unchecked(vec![rows, self.config.data_dim], inv));
        tape.mul(sum, inv)
    }

    /// One network evaluation per row, no guidance.
    pub(crate) fn eval_rows(&self, batch: &Batch, identities: &[IdentityCode]) -> Result<Tensor> {
        let mut emb = Vec::with_capacity(identities.len() * self.config.null_dim());
        for code in identities {
            emb.extend(self.identity_embedding(code)?);
        }
        let mut tape = Tape::new();
        let params = self.param_leaves(&mut tape);
        let id = tape.leaf(Tensor::new(vec![identities.len(), self.config.null_dim()], emb)?);
        let out = self.forward(&mut tape, &params, batch, id)?;
        let value = tape.value(out).clone();
        value.ensure_finite("predict_eps")?;
        Ok(value)
    }

    /// One latent repeated over rows with the given scene slots.
    pub(crate) fn single_batch(&self, z: &Latent, cond: &Conditioning, scenes: Vec<usize>) -> Result<Batch> {
        if cond.scene_code >= SCENE_CODES {
            return Err(Error::invalid(format!(
                "scene code {} >= {SCENE_CODES}",
                cond.scene_code
            )));
        }
        let rows = scenes.len();
        let (r, c) = z.values.dims2()?;
        if r != 1 || c != self.config.data_dim {
            return Err(Error::Shape {
                op: "predict_eps",
                lhs: vec![1, self.config.data_dim],
                rhs: z.values.shape().to_vec(),
            });
        }
        let control = match &cond.control {
            Some(m) if self.config.control => {
                if m.len() != self.config.data_dim {
                    return Err(Error::Shape {
                        op: "control channel",
                        lhs: vec![self.config.data_dim],
                        rhs: vec![m.len()],
                    });
                }
                let mut data = Vec::with_capacity(rows * m.len());
                for _ in 0..rows {
                    data.extend_from_slice(m);
                }
                Some(Tensor::new(vec![rows, m.len()], data)?)
            }
            _ => None,
        };
        let zs = if rows == 1 {
            z.values.clone()
        } else {
            Tensor::vstack(&vec![&z.values; rows])?
        };
        Ok(Batch {
            z: zs,
            t: vec![z.t; rows],
            scenes,
            control,
        })
    }

    fn eval_branches(&self, z: &Latent, cond: &Conditioning, rows: &[(usize, IdentityCode)]) -> Result<Vec<Tensor>> {
        let batch = self.single_batch(z, cond, rows.iter().map(|r| r.0).collect())?;
        let ids: Vec<IdentityCode> = rows.iter().map(|r| r.1.clone()).collect();
        let out = self.eval_rows(&batch, &ids)?;
        (0..rows.len()).map(|i| out.rows(i, i + 1)).collect()
    }

    /// Unguided prediction under the request's scene for each identity code
    /// at one latent, evaluated as a single batch.
    pub fn predict_branches(
        &self,
        z: &Latent,
        cond: &Conditioning,
        identities: &[IdentityCode],
    ) -> Result<Vec<Tensor>> {
        let rows: Vec<_> = identities.iter().map(|id| (cond.scene_code, id.clone())).collect();
        self.eval_branches(z, cond, &rows)
    }

    /// The unconditional branch: NULL scene with the given identity slot.
    pub fn predict_unconditional(&self, z: &Latent, cond: &Conditioning, uncond: IdentityCode) -> Result<Tensor> {
        Ok(self.eval_branches(z, cond, &[(NULL_SCENE, uncond)])?.remove(0))
    }

    fn check_guidance(cond: &Conditioning) -> Result<()> {
        if !cond.guidance.is_finite() || cond.guidance < 0.0 {
            return Err(Error::invalid(format!(
                "guidance scale {} must be finite and >= 0",
                cond.guidance
            )));
        }
        Ok(())
    }

    /// Noise prediction under classifier-free guidance. The unconditional
    /// branch drops scene and identity together (control, if any, stays).
    /// At guidance 1 the network runs once.
    pub fn predict_eps(&self, z: &Latent, cond: &Conditioning) -> Result<Tensor> {
        Self::check_guidance(cond)?;
        if cond.guidance == 1.0 {
            return Ok(self
                .predict_branches(z, cond, std::slice::from_ref(&cond.identity))?
                .remove(0));
        }
        self.predict_guided(z, cond, IdentityCode::Null)
    }

    /// Guided prediction with an arbitrary identity slot in the
    /// unconditional branch.
    pub fn predict_guided(&self, z: &Latent, cond: &Conditioning, uncond: IdentityCode) -> Result<Tensor> {
        Self::check_guidance(cond)?;
        let mut b = self.eval_branches(
            z,
            cond,
            &[(NULL_SCENE, uncond), (cond.scene_code, cond.identity.clone())],
        )?;
        let c = b.pop().expect("two branches");
        let u = b.pop().expect("two branches");
        let out = cfg_combine(&u, &c, cond.guidance)?;
        out.ensure_finite("predict_eps")?;
        Ok(out)
    }

    /// Guided predictions in customization-free space (identity NULL) and in
    /// customization space (`cond`'s identity), from one batched evaluation.
    /// Each equals the corresponding [`predict_eps`](Self::predict_eps).
    pub fn predict_free_and_custom(&self, z: &Latent, cond: &Conditioning) -> Result<(Tensor, Tensor)> {
        Self::check_guidance(cond)?;
        if cond.identity == IdentityCode::Null {
            let free = self.predict_eps(z, cond)?;
            return Ok((free.clone(), free));
        }
        let s = cond.scene_code;
        if cond.guidance == 1.0 {
            let mut b = self.eval_branches(z, cond, &[(s, IdentityCode::Null), (s, cond.identity.clone())])?;
            let cus = b.pop().expect("two branches");
            return Ok((b.pop().expect("two branches"), cus));
        }
        let b = self.eval_branches(
            z,
            cond,
            &[
                (NULL_SCENE, IdentityCode::Null),
                (s, IdentityCode::Null),
                (s, cond.identity.clone()),
            ],
        )?;
        let free = cfg_combine(&b[0], &b[1], cond.guidance)?;
        let cus = cfg_combine(&b[0], &b[2], cond.guidance)?;
        free.ensure_finite("predict_eps")?;
        cus.ensure_finite("predict_eps")?;
        Ok((free, cus))
    }
}
