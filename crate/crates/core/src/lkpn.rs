//! Latent kernel prediction network.
//!
//! A time-conditioned U-Net over `concat(z_t, z_lq)` followed by a 1×1 head
//! that emits `c·k²` filter taps per position.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eac::{KernelField, LatentGrid};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore, TimeEmbedding, UNet, UNetConfig};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Starting point of the head layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// All-zero weights and bias: the first field is zero.
    #[default]
    Zero,
    /// Zero weights, bias set to the centre tap: the first field is the
    /// identity filter.
    Delta,
}

/// What the head emits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LkpnOutput {
    /// `c·k²` taps consumed by EAC.
    #[default]
    KernelField,
    /// `c` channels used directly as the guidance latent.
    Direct,
}

/// Channel multiplier of U-Net level `l`: 1, 1, 2, 4, 8, …
pub fn channel_mults(levels: usize) -> Vec<usize> {
    (0..levels)
        .map(|l| if l == 0 { 1 } else { 1 << (l - 1) })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LkpnConfig {
    pub latent_channels: usize,
    pub k: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub attention_levels: Vec<usize>,
    /// Width of the U-Net output feeding the head.
    pub trunk_channels: usize,
    pub head_init: HeadInit,
    pub output: LkpnOutput,
}

impl Default for LkpnConfig {
    fn default() -> Self {
        Self {
            latent_channels: 1,
            k: 5,
            base_channels: 32,
            levels: 3,
            blocks_per_level: 1,
            attention_levels: vec![2],
            trunk_channels: 32,
            head_init: HeadInit::Zero,
            output: LkpnOutput::KernelField,
        }
    }
}

impl LkpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "k must be odd, got {}",
                self.k
            )));
        }
        if self.latent_channels == 0 || self.trunk_channels == 0 || self.levels == 0 {
            return Err(Error::InvalidArgument(
                "lkpn extents must be positive".into(),
            ));
        }
        if self.output == LkpnOutput::Direct && self.head_init == HeadInit::Delta {
            return Err(Error::InvalidArgument(
                "delta head init needs kernel-field output".into(),
            ));
        }
        self.unet_config().validate()
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 2 * self.latent_channels,
            out_channels: self.trunk_channels,
            base_channels: self.base_channels,
            channel_mults: channel_mults(self.levels),
            blocks_per_level: self.blocks_per_level,
            attention_levels: self.attention_levels.clone(),
        }
    }

    pub fn head_channels(&self) -> usize {
        match self.output {
            LkpnOutput::KernelField => self.latent_channels * self.k * self.k,
            LkpnOutput::Direct => self.latent_channels,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lkpn {
    pub config: LkpnConfig,
    pub unet: UNet,
    pub head: Conv2d,
}

/// The guidance latent and, when EAC is used, the field that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Guidance {
    pub latent: Var,
    pub field: Option<Var>,
}

impl Lkpn {
    pub const PREFIX: &'static str = "lkpn";

    pub fn new(config: LkpnConfig) -> Result<Self> {
        config.validate()?;
        let unet = UNet::new(&format!("{}.unet", Self::PREFIX), &config.unet_config())?;
        let head = Conv2d::pointwise(
            &format!("{}.head", Self::PREFIX),
            config.trunk_channels,
            config.head_channels(),
        );
        Ok(Self { config, unet, head })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.unet.init(store, rng);
        self.head.init(store, Init::Zero, rng);
        if self.config.head_init == HeadInit::Delta {
            let k2 = self.config.k * self.config.k;
            let bias = store
                .get_mut(&self.head.bias)
                .expect("head bias just inserted");
            for c in 0..self.config.latent_channels {
                bias.data_mut()[c * k2 + k2 / 2] = T::one();
            }
        }
    }

    /// Raw head output: a `(c·k², h, w)` field, or `(c, h, w)` in direct mode.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        z_t: Var,
        z_lq: Var,
        t: usize,
    ) -> Result<Var> {
        let (a, b) = (tape.value(z_t).shape(), tape.value(z_lq).shape());
        if a != b {
            return Err(Error::shape("lkpn", format!("z_t {a:?} vs z_lq {b:?}")));
        }
        let x = tape.concat_channels(z_t, z_lq)?;
        let trunk = self.unet.forward(tape, x, t)?;
        self.head.forward(tape, trunk)
    }

    /// Guidance latent `z^s_t`: EAC of `z_lq` with the predicted field, or
    /// the head output itself in direct mode.
    pub fn guidance<T: Real>(
        &self,
        tape: &mut Tape<T>,
        z_t: Var,
        z_lq: Var,
        t: usize,
    ) -> Result<Guidance> {
        let out = self.forward(tape, z_t, z_lq, t)?;
        Ok(match self.config.output {
            LkpnOutput::KernelField => Guidance {
                latent: tape.eac(z_lq, out, self.config.k)?,
                field: Some(out),
            },
            LkpnOutput::Direct => Guidance {
                latent: out,
                field: None,
            },
        })
    }

    /// Kernel field for one input pair, evaluated on a fresh tape.
    pub fn predict<T: Real>(
        &self,
        params: &ParamStore<T>,
        z_t: &LatentGrid<T>,
        z_lq: &LatentGrid<T>,
        t: usize,
    ) -> Result<KernelField<T>> {
        if self.config.output != LkpnOutput::KernelField {
            return Err(Error::InvalidArgument(
                "direct-output lkpn has no kernel field".into(),
            ));
        }
        let mut tape = Tape::new();
        params.bind(&mut tape);
        let zt = tape.constant(z_t.tensor().clone());
        let zlq = tape.constant(z_lq.tensor().clone());
        let out = self.forward(&mut tape, zt, zlq, t)?;
        KernelField::new(tape.value(out).clone(), self.config.k)
    }
}

/// Learned time embedding of `t` under `params`.
pub fn time_embed<T: Real>(
    emb: &TimeEmbedding,
    params: &ParamStore<T>,
    t: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    params.bind(&mut tape);
    let v = emb.forward(&mut tape, t)?;
    Ok(tape.value(v).clone())
}
