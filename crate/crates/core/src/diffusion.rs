//! DDPM schedule, forward noising, the controlled denoiser and the reverse
//! sampling loop in which the kernel predictor is re-run at every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::eac::{KernelField, LatentGrid};
use crate::error::{Error, Result};
use crate::lkpn::channel_mults;
use crate::model::DeblurModel;
use crate::nn::{Conv2d, Encoder, Init, ParamStore, UNet, UNetConfig};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Reverse-step noise scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// `σ_t = √β_t`.
    #[default]
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    Posterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma: SigmaKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma: SigmaKind::Beta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(schedule_linear(self.steps, self.beta_start, self.beta_end)?.with_sigma(self.sigma))
    }
}

/// Per-step coefficients for `t = 1..=T`, stored at index `t − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// `β_t` linear from `beta_start` to `beta_end` inclusive.
pub fn schedule_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs at least one step".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    /// Arbitrary `β_1..β_T`, each in `(0, 1)`, with `σ_t = √β_t`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn with_sigma(mut self, kind: SigmaKind) -> Self {
        self.sigma = (1..=self.steps())
            .map(|t| match kind {
                SigmaKind::Beta => self.beta(t).sqrt(),
                SigmaKind::Posterior => (self.beta(t) * (1.0 - self.alpha_bar(t - 1))
                    / (1.0 - self.alpha_bar(t)))
                .sqrt(),
            })
            .collect();
        self
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`. `t = 0` returns `z0`.
pub fn add_noise<T: Real>(
    z0: &LatentGrid<T>,
    eps: &LatentGrid<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid<T>> {
    if t > sched.steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            steps: sched.steps(),
        });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (
        T::from_f64_lossy(ab.sqrt()),
        T::from_f64_lossy((1.0 - ab).sqrt()),
    );
    LatentGrid::new(
        z0.tensor()
            .zip_map(eps.tensor(), "add_noise", |z, e| a * z + b * e)?,
    )
}

/// Standard-normal latent drawn from `rng`.
pub fn gaussian<T: Real>(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> LatentGrid<T> {
    let t = Tensor::from_fn(&[c, h, w], |_| {
        T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))
    });
    LatentGrid::new(t).expect("finite normal draws")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub attention_levels: Vec<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 1,
            base_channels: 32,
            levels: 3,
            blocks_per_level: 1,
            attention_levels: vec![2],
        }
    }
}

impl DenoiserConfig {
    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: self.latent_channels,
            out_channels: self.latent_channels,
            base_channels: self.base_channels,
            channel_mults: channel_mults(self.levels),
            blocks_per_level: self.blocks_per_level,
            attention_levels: self.attention_levels.clone(),
        }
    }
}

/// ε-predicting U-Net plus a control encoder whose per-level features enter
/// the base skips through zero-initialized 1×1 convolutions.
#[derive(Clone, Debug)]
pub struct ControlledDenoiser {
    pub config: DenoiserConfig,
    pub base: UNet,
    /// Reads `concat(z_t, cond)`: `3c` channels.
    pub control: Encoder,
    pub zero_convs: Vec<Conv2d>,
}

impl ControlledDenoiser {
    pub const PREFIX: &'static str = "denoiser";

    pub fn new(config: DenoiserConfig) -> Result<Self> {
        let unet_cfg = config.unet_config();
        let base = UNet::new(&format!("{}.base", Self::PREFIX), &unet_cfg)?;
        let control_cfg = UNetConfig {
            in_channels: 3 * config.latent_channels,
            ..unet_cfg.clone()
        };
        control_cfg.validate()?;
        let control = Encoder::new(&format!("{}.control", Self::PREFIX), &control_cfg);
        let zero_convs = (0..unet_cfg.levels())
            .map(|l| {
                let ch = unet_cfg.level_channels(l);
                Conv2d::pointwise(&format!("{}.zero{l}", Self::PREFIX), ch, ch)
            })
            .collect();
        Ok(Self {
            config,
            base,
            control,
            zero_convs,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.base.init(store, rng);
        self.control.init(store, rng);
        for z in &self.zero_convs {
            z.init(store, Init::Zero, rng);
        }
    }

    /// ε prediction. `cond` is `concat(z^s_t, z_lq)`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        z_t: Var,
        cond: Var,
        t: usize,
    ) -> Result<Var> {
        let (c, h, w) = tape.value(z_t).dims3("denoiser")?;
        let cond_shape = tape.value(cond).shape();
        if cond_shape != [2 * c, h, w] {
            return Err(Error::shape(
                "denoiser",
                format!("cond {cond_shape:?} does not match z_t ({c}, {h}, {w})"),
            ));
        }
        let base = self.base.encoder.forward(tape, z_t, t)?;
        let control_in = tape.concat_channels(z_t, cond)?;
        let control = self.control.forward(tape, control_in, t)?;
        let mut skips = Vec::with_capacity(base.skips.len());
        for ((&b, &f), zc) in base.skips.iter().zip(&control.skips).zip(&self.zero_convs) {
            let injected = zc.forward(tape, f)?;
            skips.push(tape.add(b, injected)?);
        }
        self.base.decoder.forward(tape, &skips, base.temb_act)
    }

    /// ε prediction for one input, evaluated on a fresh tape.
    pub fn predict<T: Real>(
        &self,
        params: &ParamStore<T>,
        z_t: &LatentGrid<T>,
        cond: &Tensor<T>,
        t: usize,
    ) -> Result<LatentGrid<T>> {
        let mut tape = Tape::new();
        params.bind(&mut tape);
        let zt = tape.constant(z_t.tensor().clone());
        let cv = tape.constant(cond.clone());
        let out = self.forward(&mut tape, zt, cv, t)?;
        LatentGrid::new(tape.value(out).clone())
    }
}

/// Mean squared error over all elements.
pub fn denoise_loss<T: Real>(eps: &LatentGrid<T>, eps_pred: &LatentGrid<T>) -> Result<T> {
    let sq = eps
        .tensor()
        .zip_map(eps_pred.tensor(), "denoise_loss", |a, b| (a - b) * (a - b))?;
    Ok(sq.mean())
}

/// `z_{t−1} = (z_t − (1−α_t)/√(1−ᾱ_t)·ε) / √α_t + σ_t·noise`.
pub fn ddpm_update<T: Real>(
    z_t: &Tensor<T>,
    eps: &Tensor<T>,
    noise: &Tensor<T>,
    alpha: f64,
    alpha_bar: f64,
    sigma: f64,
) -> Result<Tensor<T>> {
    z_t.expect_same_shape(eps, "ddpm_update")?;
    z_t.expect_same_shape(noise, "ddpm_update")?;
    let coef = T::from_f64_lossy((1.0 - alpha) / (1.0 - alpha_bar).sqrt());
    let sqrt_alpha = T::from_f64_lossy(alpha.sqrt());
    let sigma = T::from_f64_lossy(sigma);
    let data = z_t
        .data()
        .iter()
        .zip(eps.data())
        .zip(noise.data())
        .map(|((&z, &e), &n)| (z - coef * e) / sqrt_alpha + sigma * n)
        .collect();
    Tensor::new(z_t.shape().to_vec(), data)
}

/// Products of one reverse step.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub z_prev: LatentGrid<T>,
    pub guidance: LatentGrid<T>,
    /// Absent for the direct-output ablation.
    pub field: Option<KernelField<T>>,
}

/// One reverse step: kernel prediction from `z_t`, EAC guidance, ε
/// prediction and the ancestral update. `noise` should be zero at `t = 1`.
pub fn sample_step<T: Real>(
    model: &DeblurModel,
    params: &ParamStore<T>,
    z_t: &LatentGrid<T>,
    z_lq: &LatentGrid<T>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &LatentGrid<T>,
) -> Result<StepOutput<T>> {
    sched.check(t)?;
    let mut tape = Tape::new();
    params.bind(&mut tape);
    let zt = tape.constant(z_t.tensor().clone());
    let zlq = tape.constant(z_lq.tensor().clone());
    let g = model.guidance(&mut tape, zt, zlq, t)?;
    let eps = model.predict_noise(&mut tape, zt, g.latent, zlq, t)?;
    let z_prev = ddpm_update(
        z_t.tensor(),
        tape.value(eps),
        noise.tensor(),
        sched.alpha(t),
        sched.alpha_bar(t),
        sched.sigma(t),
    )?;
    let field = match g.field {
        Some(f) => Some(KernelField::new(
            tape.value(f).clone(),
            model.config.lkpn.k,
        )?),
        None => None,
    };
    Ok(StepOutput {
        z_prev: LatentGrid::new(z_prev)?,
        guidance: LatentGrid::new(tape.value(g.latent).clone())?,
        field,
    })
}

/// Final latent and the guidance latent of every step, `t = T` first.
#[derive(Clone, Debug)]
pub struct SampleOutput<T> {
    pub z0: LatentGrid<T>,
    pub trace: Vec<(usize, LatentGrid<T>)>,
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `t = 1`. The noise
/// stream is a pure function of `seed`.
pub fn sample<T: Real>(
    model: &DeblurModel,
    params: &ParamStore<T>,
    z_lq: &LatentGrid<T>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<SampleOutput<T>> {
    let (c, h, w) = z_lq.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = gaussian(c, h, w, &mut rng);
    let mut trace = Vec::with_capacity(sched.steps());
    for t in (1..=sched.steps()).rev() {
        let noise = if t > 1 {
            gaussian(c, h, w, &mut rng)
        } else {
            LatentGrid::zeros(c, h, w)
        };
        let step = sample_step(model, params, &z, z_lq, t, sched, &noise)?;
        trace.push((t, step.guidance));
        z = step.z_prev;
    }
    Ok(SampleOutput { z0: z, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = schedule_linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.check(0).is_err() && s.check(2).is_err() && s.check(1).is_ok());
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(schedule_linear(10, 0.0, 0.1).is_err());
        assert!(schedule_linear(10, 0.2, 0.1).is_err());
        assert!(schedule_linear(10, 0.1, 1.0).is_err());
        assert!(schedule_linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn endpoints_inclusive() {
        let s = schedule_linear(5, 0.1, 0.5).unwrap();
        assert_eq!(s.beta(1), 0.1);
        assert_eq!(s.beta(5), 0.5);
        assert_eq!(s.sigma(5), 0.5f64.sqrt());
    }

    #[test]
    fn posterior_sigma_vanishes_at_first_step() {
        let s = schedule_linear(10, 1e-3, 0.1)
            .unwrap()
            .with_sigma(SigmaKind::Posterior);
        assert_eq!(s.sigma(1), 0.0);
        assert!(s.sigma(10) < 0.1f64.sqrt());
    }

    #[test]
    fn add_noise_edge_cases() {
        let s = schedule_linear(10, 1e-3, 0.1).unwrap();
        let z0 = LatentGrid::new(Tensor::from_fn(&[1, 2, 2], |i| i as f64)).unwrap();
        let eps = LatentGrid::new(Tensor::from_fn(&[1, 2, 2], |i| 1.0 - i as f64)).unwrap();
        assert_eq!(add_noise(&z0, &eps, 0, &s).unwrap(), z0);
        let zero = LatentGrid::zeros(1, 2, 2);
        let got = add_noise(&zero, &eps, 4, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(4)).sqrt();
        for (g, e) in got.tensor().data().iter().zip(eps.tensor().data()) {
            assert_eq!(*g, scale * e);
        }
        assert!(add_noise(&z0, &eps, 11, &s).is_err());
    }

    #[test]
    fn denoise_loss_examples() {
        let a = LatentGrid::new(Tensor::<f64>::ones(&[1, 3, 3])).unwrap();
        assert_eq!(denoise_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(denoise_loss(&a, &LatentGrid::zeros(1, 3, 3)).unwrap(), 1.0);
        assert!(denoise_loss(&a, &LatentGrid::zeros(1, 3, 2)).is_err());
    }

    #[test]
    fn update_closed_forms() {
        let z = Tensor::scalar(1.0f64);
        let e = Tensor::scalar(0.2);
        let zero = Tensor::scalar(0.0);
        let got = ddpm_update(&z, &e, &zero, 0.99, 0.5, 0.3)
            .unwrap()
            .item()
            .unwrap();
        let want = (1.0 - 0.01 * 0.2 / 0.5f64.sqrt()) / 0.99f64.sqrt();
        assert!((got - want).abs() < 1e-12);
        let plain = ddpm_update(&z, &zero, &zero, 0.81, 0.5, 0.3)
            .unwrap()
            .item()
            .unwrap();
        assert_eq!(plain, 1.0 / 0.9);
    }
}
