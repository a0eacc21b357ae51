//! The kernel predictor and the controlled denoiser as one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ControlledDenoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::lkpn::{Guidance, HeadInit, Lkpn, LkpnConfig, LkpnOutput};
use crate::nn::ParamStore;
use crate::numerics::{Real, Tape, Var};

/// Model variants for the component study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// The predictor emits the guidance latent directly; no kernels, no EAC.
    NoEac,
    /// The predictor reads `(z_lq, z_lq, t)` and never sees the diffusion
    /// state.
    NoSdForLkpn,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lkpn: LkpnConfig,
    pub denoiser: DenoiserConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Predictor config after applying the ablation.
    pub fn effective_lkpn(&self) -> LkpnConfig {
        let mut cfg = self.lkpn.clone();
        if self.ablation == Ablation::NoEac {
            cfg.output = LkpnOutput::Direct;
            cfg.head_init = HeadInit::Zero;
        }
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct DeblurModel {
    pub config: ModelConfig,
    pub lkpn: Lkpn,
    pub denoiser: ControlledDenoiser,
}

impl DeblurModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.lkpn.latent_channels != config.denoiser.latent_channels {
            return Err(Error::InvalidArgument(format!(
                "lkpn reads {} latent channels, denoiser {}",
                config.lkpn.latent_channels, config.denoiser.latent_channels
            )));
        }
        let lkpn = Lkpn::new(config.effective_lkpn())?;
        let denoiser = ControlledDenoiser::new(config.denoiser.clone())?;
        Ok(Self {
            config,
            lkpn,
            denoiser,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.config.lkpn.latent_channels
    }

    /// Fresh parameters: predictor first, then denoiser, from one seeded
    /// stream.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.lkpn.init(&mut store, &mut rng);
        self.denoiser.init(&mut store, &mut rng);
        store
    }

    pub fn guidance<T: Real>(
        &self,
        tape: &mut Tape<T>,
        z_t: Var,
        z_lq: Var,
        t: usize,
    ) -> Result<Guidance> {
        let state = match self.config.ablation {
            Ablation::NoSdForLkpn => z_lq,
            Ablation::Full | Ablation::NoEac => z_t,
        };
        self.lkpn.guidance(tape, state, z_lq, t)
    }

    /// ε prediction conditioned on `concat(guidance, z_lq)`.
    pub fn predict_noise<T: Real>(
        &self,
        tape: &mut Tape<T>,
        z_t: Var,
        guidance: Var,
        z_lq: Var,
        t: usize,
    ) -> Result<Var> {
        let cond = tape.concat_channels(guidance, z_lq)?;
        self.denoiser.forward(tape, z_t, cond, t)
    }
}
