use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Batch, DenoiserConfig, DenoiserParams, IdentityCode, ModelKind, DELTA_KIND, NULL, NULL_SCENE};
use crate::data::{base_dataset, personalized_dataset, DatasetRecord, Sample, PIXELS};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Learning rate reached at the end of the cosine decay.
    pub lr_final: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            lr: 2e-3,
            lr_final: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f32>,
    pub final_loss: f32,
    pub steps: usize,
}

/// Everything needed to train one model from scratch: dataset size and
/// seed, architecture and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub samples: usize,
    pub data_seed: u64,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
}

impl TrainJob {
    /// The stock recipe for each model kind on the default schedule.
    pub fn standard(kind: ModelKind) -> Self {
        let schedule = NoiseSchedule::default_linear();
        match kind {
            ModelKind::Base => TrainJob {
                samples: 8192,
                data_seed: 1,
                model: DenoiserConfig::base(schedule),
                train: TrainConfig::default(),
            },
            ModelKind::Personalized => TrainJob {
                samples: 8192,
                data_seed: 2,
                model: DenoiserConfig::personalized(schedule),
                train: TrainConfig {
                    epochs: 120,
                    ..TrainConfig::default()
                },
            },
        }
    }

    pub fn dataset(&self) -> Result<Vec<Sample>> {
        match self.model.kind {
            ModelKind::Base => base_dataset(self.samples, self.data_seed),
            ModelKind::Personalized => personalized_dataset(self.samples, self.data_seed),
        }
    }

    pub fn run(&self) -> Result<(DenoiserParams, TrainReport)> {
        train(&self.model, &self.dataset()?, &self.train)
    }
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f32 {
    let frac = step as f64 / total.max(1) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    (cfg.lr_final as f64 + (cfg.lr - cfg.lr_final) as f64 * cos) as f32
}

fn control_rows(config: &DenoiserConfig, records: &[&DatasetRecord]) -> Option<Tensor> {
    if !config.control {
        return None;
    }
    let mut data = Vec::with_capacity(records.len() * PIXELS);
    for r in records {
        match r.control {
            Some(p) => data.extend(p.mask()),
            None => data.extend(std::iter::repeat_n(0.0, PIXELS)),
        }
    }
    Some(Tensor::from_parts_unchecked(vec![records.len(), PIXELS], data))
}

/// Noised inputs for a batch of samples at the given timesteps.
fn noised_batch(
    params: &DenoiserParams,
    samples: &[&Sample],
    ts: &[usize],
    rng: &mut impl Rng,
) -> Result<(Batch, Tensor)> {
    let schedule = params.schedule();
    let mut z = Vec::with_capacity(samples.len() * PIXELS);
    let mut noise = Vec::with_capacity(samples.len() * PIXELS);
    for (s, &t) in samples.iter().zip(ts) {
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for &x in s.image.pixels() {
            let n: f32 = rng.sample(StandardNormal);
            noise.push(n);
            z.push((a * x as f64 + b * n as f64) as f32);
        }
    }
    let records: Vec<_> = samples.iter().map(|s| &s.record).collect();
    let batch = Batch {
        z: Tensor::from_parts_unchecked(vec![samples.len(), PIXELS], z),
        t: ts.to_vec(),
        scenes: samples.iter().map(|s| s.record.scene_code).collect(),
        control: control_rows(&params.config, &records),
    };
    Ok((batch, Tensor::from_parts_unchecked(vec![samples.len(), PIXELS], noise)))
}

/// Trains a denoiser with the standard epsilon-prediction objective.
/// Every epoch visits each sample once in shuffled order; timesteps are
/// stratified so each epoch covers `1..=T` evenly.
pub fn train(config: &DenoiserConfig, dataset: &[Sample], tc: &TrainConfig) -> Result<(DenoiserParams, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if tc.epochs == 0 || tc.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut params = DenoiserParams::init(config.clone(), &mut rng)?;
    let mut adam = AdamState::new(params.tensors(), AdamConfig::default());
    let steps_t = config.schedule.steps();
    let batches_per_epoch = dataset.len().div_ceil(tc.batch_size);
    let total = tc.epochs * batches_per_epoch;
    let d = config.identity_dim;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut ts: Vec<usize> = (0..dataset.len()).map(|i| i % steps_t + 1).collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        ts.shuffle(&mut rng);
        let mut sum = 0.0f64;
        for (chunk, t_chunk) in order.chunks(tc.batch_size).zip(ts.chunks(tc.batch_size)) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (mut batch, noise) = noised_batch(&params, &samples, t_chunk, &mut rng)?;
            let rows = samples.len();

            let mut factor_rows = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
            let mut keep = Vec::with_capacity(rows * 4 * d);
            for (i, s) in samples.iter().enumerate() {
                let id = s.record.identity;
                let unconditional = rng.random::<f32>() < config.cond_dropout;
                if unconditional {
                    batch.scenes[i] = NULL_SCENE;
                }
                let dropped = unconditional || rng.random::<f32>() < config.identity_dropout;
                for (f, r) in [
                    id.kind.index(),
                    id.intensity as usize,
                    id.radius as usize,
                    id.offset as usize,
                ]
                .into_iter()
                .enumerate()
                {
                    factor_rows[f].push(r);
                }
                keep.extend(std::iter::repeat_n(if dropped { 0.0 } else { 1.0 }, 4 * d));
            }

            let loss_value;
            let grads;
            {
                let mut tape = Tape::new();
                let pv = params.param_leaves(&mut tape);
                let gathered = factor_rows
                    .iter()
                    .enumerate()
                    .map(|(f, idx)| tape.gather_rows(pv[DELTA_KIND + f], idx))
                    .collect::<Result<Vec<_>>>()?;
                let offsets = tape.concat_cols(&gathered)?;
                let keep = tape.leaf(Tensor::from_parts_unchecked(vec![rows, 4 * d], keep));
                let offsets = tape.mul(offsets, keep)?;
                let identity = tape.add_row(offsets, pv[NULL])?;
                let out = params.forward(&mut tape, &pv, &batch, identity).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { step, loss: f32::NAN },
                    other => other,
                })?;
                let target = tape.leaf(noise);
                let loss = tape.mse(out, target)?;
                loss_value = tape.value(loss).item()?;
                if !loss_value.is_finite() {
                    return Err(Error::Diverged { step, loss: loss_value });
                }
                grads = tape.backward(loss, &pv)?;
            }
            let lr = lr_at(tc, step, total);
            adam_step(params.tensors_mut(), &grads, &mut adam, lr)
                .map_err(|_| Error::Diverged { step, loss: loss_value })?;
            sum += loss_value as f64 * rows as f64;
            step += 1;
        }
        let mean = (sum / dataset.len() as f64) as f32;
        log::debug!("epoch {} loss {mean:.5}", epoch_losses.len());
        epoch_losses.push(mean);
    }
    let final_loss = *epoch_losses.last().expect("at least one epoch");
    Ok((
        params,
        TrainReport {
            epoch_losses,
            final_loss,
            steps: step,
        },
    ))
}

/// Mean denoising loss over `draws` fixed noise draws per sample, with each
/// sample's own identity (no dropout). Deterministic in `seed`.
pub fn denoising_loss(params: &DenoiserParams, samples: &[Sample], draws: usize, seed: u64) -> Result<f32> {
    if samples.is_empty() || draws == 0 {
        return Err(Error::invalid("denoising loss needs samples and draws"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = params.schedule().steps();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for s in samples {
        for _ in 0..draws {
            let t = rng.random_range(1..=steps);
            let (batch, noise) = noised_batch(params, &[s], &[t], &mut rng)?;
            let out = params.eval_rows(&batch, &[IdentityCode::Glyph(s.record.identity)])?;
            sum += out.mse(&noise)? as f64;
            n += 1;
        }
    }
    Ok((sum / n as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{personalized_dataset, IdentityParams, Provenance, RenderedImage};
    use crate::denoiser::{Conditioning, ModelKind};
    use crate::schedule::{Latent, NoiseSchedule};

    fn tiny(kind: ModelKind) -> DenoiserConfig {
        let s = NoiseSchedule::default_linear();
        let mut c = match kind {
            ModelKind::Base => DenoiserConfig::base(s),
            ModelKind::Personalized => DenoiserConfig::personalized(s),
        };
        c.hidden = 64;
        c.blocks = 1;
        c
    }

    fn constant_sample() -> Sample {
        let record = DatasetRecord {
            scene_code: 0,
            identity: IdentityParams::from_index(0).unwrap(),
            control: None,
            rendered_scene: None,
        };
        Sample {
            record,
            image: RenderedImage::new(vec![0.3; PIXELS], Provenance::Reference).unwrap(),
        }
    }

    #[test]
    fn learns_a_constant_image() {
        let data = vec![constant_sample(); 64];
        let cfg = tiny(ModelKind::Personalized);
        let untrained = DenoiserParams::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = denoising_loss(&untrained, &data[..1], 200, 7).unwrap();
        let tc = TrainConfig {
            epochs: 600,
            batch_size: 32,
            lr: 3e-3,
            lr_final: 1e-4,
            seed: 0,
        };
        let (params, _) = train(&cfg, &data, &tc).unwrap();
        let after = denoising_loss(&params, &data[..1], 200, 7).unwrap();
        assert!(after < 0.1 * before, "{before} -> {after}");
    }

    #[test]
    fn seeded_training_is_bit_reproducible() {
        let data = personalized_dataset(48, 3).unwrap();
        let cfg = tiny(ModelKind::Personalized);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (a, ra) = train(&cfg, &data, &tc).unwrap();
        let (b, rb) = train(&cfg, &data, &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let (c, _) = train(&cfg, &data, &TrainConfig { seed: 1, ..tc }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn full_dropout_ignores_identity() {
        let data = personalized_dataset(64, 4).unwrap();
        let mut cfg = tiny(ModelKind::Personalized);
        cfg.identity_dropout = 1.0;
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (params, _) = train(&cfg, &data, &tc).unwrap();
        let z = Latent::new(Tensor::filled(&[1, PIXELS], 0.2), 17);
        let cond = Conditioning::scene(data[0].record.scene_code).with_identity(data[0].record.identity);
        let e_id = params.predict_eps(&z, &cond).unwrap();
        let e_null = params.predict_eps(&z, &cond.customization_free()).unwrap();
        assert!(e_id.max_abs_diff(&e_null).unwrap() <= 1e-6);
    }

    #[test]
    fn rejects_empty_input() {
        let cfg = tiny(ModelKind::Base);
        assert!(train(&cfg, &[], &TrainConfig::default()).is_err());
        let data = vec![constant_sample()];
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&cfg, &data, &bad).is_err());
    }

    #[test]
    fn diverging_rate_is_reported() {
        let data = vec![constant_sample(); 8];
        let cfg = tiny(ModelKind::Personalized);
        let tc = TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 1e30,
            lr_final: 1e30,
            seed: 0,
        };
        assert!(matches!(train(&cfg, &data, &tc), Err(Error::Diverged { .. })));
    }
}
