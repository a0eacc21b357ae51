//! Joint training of the kernel predictor and the denoiser.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::Codec;
use crate::diffusion::{add_noise, gaussian, NoiseSchedule, ScheduleConfig};
use crate::eac::{eac_forward, KernelField, LatentGrid};
use crate::error::{Error, Result};
use crate::model::{Ablation, DeblurModel, ModelConfig};
use crate::nn::ParamStore;
use crate::numerics::{adam_step, AdamConfig, AdamState, Real, Tape, Tensor, Var};
use crate::par::map_indexed;
use crate::rng::{stream, Purpose};

/// Multipliers of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub denoise: f64,
    pub latent: f64,
    pub pixel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            denoise: 1.0,
            latent: 1.0,
            pixel: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub codec: Codec,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Write a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 8,
            steps: 2000,
            seed: 0,
            codec: Codec::Identity,
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        self.schedule.build()?;
        DeblurModel::new(self.model.clone())?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn ablation(&self) -> Ablation {
        self.model.ablation
    }
}

/// Mean losses of one step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub denoise: f64,
    pub latent: f64,
    pub pixel: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,denoise,latent,pixel,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e}",
            self.step, self.denoise, self.latent, self.pixel, self.total
        )
    }
}

/// A training pair in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair<T> {
    pub sharp: LatentGrid<T>,
    pub blurry: LatentGrid<T>,
}

/// `(L_latent, L_pixel)` for a given kernel field, off the tape.
pub fn lkpn_loss<T: Real>(
    z0: &LatentGrid<T>,
    z_lq: &LatentGrid<T>,
    field: &KernelField<T>,
    codec: Codec,
) -> Result<(T, T)> {
    let zs = eac_forward(z_lq, field)?;
    let mse = |a: &Tensor<T>, b: &Tensor<T>| -> Result<T> {
        Ok(a.zip_map(b, "lkpn_loss", |x, y| (x - y) * (x - y))?.mean())
    };
    let latent = mse(z0.tensor(), zs.tensor())?;
    let pixel = mse(&codec.decode(z0)?, &codec.decode(&zs)?)?;
    Ok((latent, pixel))
}

/// Per-sample losses and parameter gradients of the weighted objective.
pub struct SampleGradients<T> {
    pub denoise: T,
    pub latent: T,
    pub pixel: T,
    pub total: T,
    pub grads: indexmap::IndexMap<String, Tensor<T>>,
}

/// Loss nodes of the weighted objective on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub denoise: Var,
    pub latent: Var,
    pub pixel: Var,
    pub total: Var,
}

/// Records the objective for one pair at a fixed `t` and `ε`. Parameters
/// must already be bound on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn objective_graph<T: Real>(
    tape: &mut Tape<T>,
    model: &DeblurModel,
    pair: &LatentPair<T>,
    t: usize,
    eps: &LatentGrid<T>,
    sched: &NoiseSchedule,
    codec: Codec,
    weights: &LossWeights,
) -> Result<ObjectiveVars> {
    sched.check(t)?;
    let z_t = add_noise(&pair.sharp, eps, t, sched)?;
    let zt = tape.constant(z_t.into_tensor());
    let zlq = tape.constant(pair.blurry.tensor().clone());
    let z0 = tape.constant(pair.sharp.tensor().clone());
    let noise = tape.constant(eps.tensor().clone());

    let g = model.guidance(tape, zt, zlq, t)?;
    let eps_pred = model.predict_noise(tape, zt, g.latent, zlq, t)?;
    let denoise = tape.mse(noise, eps_pred)?;
    let latent = tape.mse(z0, g.latent)?;
    let x0 = codec.decode_on(tape, z0)?;
    let xs = codec.decode_on(tape, g.latent)?;
    let pixel = tape.mse(x0, xs)?;

    let wd = tape.scale(denoise, T::from_f64_lossy(weights.denoise))?;
    let wl = tape.scale(latent, T::from_f64_lossy(weights.latent))?;
    let wp = tape.scale(pixel, T::from_f64_lossy(weights.pixel))?;
    let partial = tape.add(wd, wl)?;
    let total = tape.add(partial, wp)?;
    Ok(ObjectiveVars {
        denoise,
        latent,
        pixel,
        total,
    })
}

/// Objective and parameter gradients for one pair.
#[allow(clippy::too_many_arguments)]
pub fn sample_objective<T: Real>(
    model: &DeblurModel,
    params: &ParamStore<T>,
    pair: &LatentPair<T>,
    t: usize,
    eps: &LatentGrid<T>,
    sched: &NoiseSchedule,
    codec: Codec,
    weights: &LossWeights,
) -> Result<SampleGradients<T>> {
    let mut tape = Tape::new();
    params.bind(&mut tape);
    let v = objective_graph(&mut tape, model, pair, t, eps, sched, codec, weights)?;
    let grads = tape.backward(v.total)?.into_param_map();
    Ok(SampleGradients {
        denoise: tape.value(v.denoise).item()?,
        latent: tape.value(v.latent).item()?,
        pixel: tape.value(v.pixel).item()?,
        total: tape.value(v.total).item()?,
        grads,
    })
}

/// Draws `t` uniform in `[1, T]` and then `ε`, in that order.
pub fn draw_noise<T: Real>(
    rng: &mut impl Rng,
    steps: usize,
    shape: (usize, usize, usize),
) -> (usize, LatentGrid<T>) {
    let t = rng.random_range(1..=steps);
    (t, gaussian(shape.0, shape.1, shape.2, rng))
}

/// One optimizer step over `batch`. Gradients are averaged in batch order.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    model: &DeblurModel,
    params: &mut ParamStore<T>,
    opt: &mut AdamState<T>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    batch: &[&LatentPair<T>],
    step: u64,
    rng: &mut impl Rng,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = T::from_usize(batch.len()).unwrap();
    // Draws stay sequential so the stream does not depend on the thread count.
    let draws: Vec<(usize, LatentGrid<T>)> = batch
        .iter()
        .map(|pair| draw_noise(rng, sched.steps(), pair.sharp.dims()))
        .collect();
    let per_sample = |i: usize| {
        let (t, eps) = &draws[i];
        sample_objective(
            model,
            params,
            batch[i],
            *t,
            eps,
            sched,
            cfg.codec,
            &cfg.weights,
        )
    };
    let results = map_indexed(batch.len(), &per_sample);
    let mut acc: Option<indexmap::IndexMap<String, Tensor<T>>> = None;
    let (mut ld, mut ll, mut lp) = (0.0, 0.0, 0.0);
    for s in results {
        let s = s?;
        ld += s.denoise.as_f64();
        ll += s.latent.as_f64();
        lp += s.pixel.as_f64();
        match &mut acc {
            None => acc = Some(s.grads),
            Some(a) => {
                for (name, g) in s.grads {
                    a.get_mut(&name)
                        .expect("same parameter set")
                        .add_assign(&g)?;
                }
            }
        }
    }
    let mut grads = acc.expect("non-empty batch");
    for g in grads.values_mut() {
        *g = g.map(|v| v / n);
    }
    adam_step(params.map_mut(), &grads, opt, &cfg.adam())?;
    let k = batch.len() as f64;
    let (denoise, latent, pixel) = (ld / k, ll / k, lp / k);
    let w = &cfg.weights;
    Ok(LossReport {
        step,
        denoise,
        latent,
        pixel,
        total: w.denoise * denoise + w.latent * latent + w.pixel * pixel,
    })
}

/// Dataset indices used by optimizer step `step` (0-based). Each epoch is a
/// fresh permutation keyed by `(seed, epoch)`; batches run across epoch
/// boundaries.
pub fn batch_indices(seed: u64, len: usize, batch: usize, step: u64) -> Vec<usize> {
    let start = step as usize * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = start / len;
    let mut perm = epoch_permutation(seed, len, epoch);
    for pos in start..start + batch {
        if pos / len != epoch {
            epoch = pos / len;
            perm = epoch_permutation(seed, len, epoch);
        }
        out.push(perm[pos % len]);
    }
    out
}

fn epoch_permutation(seed: u64, len: usize, epoch: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut stream(seed, Purpose::Shuffle, epoch as u64));
    perm
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub opt: AdamState<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DeblurModel::new(config.model.clone())?;
        let params = model.init_params(config.seed);
        Ok(Self {
            config,
            params,
            opt: AdamState::new(),
            step: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            params: self.params.clone(),
            opt: self.opt.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            config: ck.config,
            params: ck.params,
            opt: ck.opt,
            step: ck.step,
        }
    }
}

/// Where the loop writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub loss_csv: Option<PathBuf>,
    /// Periodic checkpoints go to `dir/step_{n:06}.ckpt`, the final one to
    /// `dir/final.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Runs until `state.config.steps`. Step `s` draws its randomness from
/// `(seed, s)` alone, so resuming from a checkpoint reproduces the
/// uninterrupted run bit for bit.
pub fn train_loop(
    state: &mut TrainState,
    data: &[LatentPair<f32>],
    outputs: &TrainOutputs,
    mut progress: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let cfg = state.config.clone();
    cfg.validate()?;
    let model = DeblurModel::new(cfg.model.clone())?;
    let sched = cfg.schedule.build()?;
    let mut csv = match &outputs.loss_csv {
        Some(path) => {
            let fresh = state.step == 0 || !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)?;
            if fresh {
                writeln!(f, "{}", LossReport::CSV_HEADER)?;
            }
            Some(f)
        }
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut reports = Vec::new();
    while state.step < cfg.steps {
        let idx = batch_indices(cfg.seed, data.len(), cfg.batch, state.step);
        let batch: Vec<&LatentPair<f32>> = idx.iter().map(|&i| &data[i]).collect();
        let mut rng = stream(cfg.seed, Purpose::TrainStep, state.step);
        let report = train_step(
            &model,
            &mut state.params,
            &mut state.opt,
            &cfg,
            &sched,
            &batch,
            state.step,
            &mut rng,
        )?;
        state.step += 1;
        if let Some(f) = &mut csv {
            writeln!(f, "{}", report.csv_row())?;
        }
        progress(&report);
        reports.push(report);
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
                state
                    .checkpoint()
                    .save(&dir.join(format!("step_{:06}.ckpt", state.step)))?;
            }
        }
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        state.checkpoint().save(&dir.join("final.ckpt"))?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen = [0usize; 10];
        for step in 0..5 {
            for i in batch_indices(3, 10, 2, step) {
                seen[i] += 1;
            }
        }
        assert_eq!(seen, [1; 10]);
        assert_eq!(batch_indices(3, 10, 4, 3), batch_indices(3, 10, 4, 3));
        // step 2 with batch 4 straddles the first epoch boundary
        let straddle = batch_indices(3, 10, 4, 2);
        assert_eq!(&straddle[..2], &epoch_permutation(3, 10, 0)[8..]);
        assert_eq!(&straddle[2..], &epoch_permutation(3, 10, 1)[..2]);
    }

    #[test]
    fn csv_row_format() {
        let r = LossReport {
            step: 3,
            denoise: 0.5,
            latent: 0.25,
            pixel: 0.25,
            total: 1.0,
        };
        assert_eq!(r.csv_row(), "3,5e-1,2.5e-1,2.5e-1,1e0");
    }
}
