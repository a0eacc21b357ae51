//! Layers and the U-Net skeleton shared by the kernel predictor and the
//! denoiser.
//!
//! Layers only hold parameter names and hyper-parameters. Values live in a
//! [`ParamStore`]; a forward pass binds the store onto a [`Tape`] and looks
//! parameters up by name.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn map(&self) -> &IndexMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn map_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.tensors
    }

    /// Appends every tensor of `other`.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Registers every parameter on `tape` in store order.
    pub fn bind(&self, tape: &mut Tape<T>) {
        for (name, value) in &self.tensors {
            tape.param(name, value.clone());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

fn bound<T: Real>(tape: &Tape<T>, name: &str) -> Result<Var> {
    tape.param_var(name)
        .ok_or_else(|| Error::UnknownTensor(name.to_string()))
}

fn uniform<T: Real>(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        T::from_f64_lossy(rng.random_range(-limit..=limit))
    })
}

/// Weight initialization mode for a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/√fan_in` for weights and biases.
    FanIn,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    /// 3×3, stride 1, padding 1.
    pub fn same3(name: &str, c_in: usize, c_out: usize) -> Self {
        Self::new(name, c_in, c_out, 3, 1, 1)
    }

    pub fn pointwise(name: &str, c_in: usize, c_out: usize) -> Self {
        Self::new(name, c_in, c_out, 1, 1, 0)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: Init, rng: &mut impl Rng) {
        let wshape = [self.c_out, self.c_in, self.kernel, self.kernel];
        match init {
            Init::FanIn => {
                let limit = 1.0 / ((self.c_in * self.kernel * self.kernel) as f64).sqrt();
                store.insert(&self.weight, uniform(&wshape, limit, rng));
                store.insert(&self.bias, uniform(&[self.c_out], limit, rng));
            }
            Init::Zero => {
                store.insert(&self.weight, Tensor::zeros(&wshape));
                store.insert(&self.bias, Tensor::zeros(&[self.c_out]));
            }
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = bound(tape, &self.weight)?;
        let b = bound(tape, &self.bias)?;
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            d_in,
            d_out,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: Init, rng: &mut impl Rng) {
        match init {
            Init::FanIn => {
                let limit = 1.0 / (self.d_in as f64).sqrt();
                store.insert(&self.weight, uniform(&[self.d_out, self.d_in], limit, rng));
                store.insert(&self.bias, uniform(&[self.d_out], limit, rng));
            }
            Init::Zero => {
                store.insert(&self.weight, Tensor::zeros(&[self.d_out, self.d_in]));
                store.insert(&self.bias, Tensor::zeros(&[self.d_out]));
            }
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = bound(tape, &self.weight)?;
        let b = bound(tape, &self.bias)?;
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    /// Uses `min(8, channels)` groups.
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            channels,
            groups: channels.min(8),
            eps: Self::EPS,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(&self.gamma, Tensor::ones(&[self.channels]));
        store.insert(&self.beta, Tensor::zeros(&[self.channels]));
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = bound(tape, &self.gamma)?;
        let b = bound(tape, &self.beta)?;
        tape.group_norm(x, self.groups, g, b, T::from_f64_lossy(self.eps))
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
    pub channels: usize,
}

impl SelfAttention {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            wq: format!("{name}.wq"),
            wk: format!("{name}.wk"),
            wv: format!("{name}.wv"),
            wo: format!("{name}.wo"),
            channels,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let limit = 1.0 / (self.channels as f64).sqrt();
        for name in [&self.wq, &self.wk, &self.wv, &self.wo] {
            store.insert(name, uniform(&[self.channels, self.channels], limit, rng));
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (q, k) = (bound(tape, &self.wq)?, bound(tape, &self.wk)?);
        let (v, o) = (bound(tape, &self.wv)?, bound(tape, &self.wo)?);
        tape.attention2d(x, q, k, v, o)
    }
}

/// Sinusoidal timestep features: `dim/2` sines followed by `dim/2` cosines
/// at geometric frequencies from 1 down to 1/10000.
pub fn sinusoidal_features<T: Real>(t: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "time embedding dim must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let angle = t as f64 * (-(10000f64.ln()) * exponent).exp();
        out[i] = T::from_f64_lossy(angle.sin());
        out[half + i] = T::from_f64_lossy(angle.cos());
    }
    Tensor::new(vec![dim], out)
}

/// Sinusoidal features followed by a learned linear map to the same width.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub proj: Linear,
}

impl TimeEmbedding {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            dim,
            proj: Linear::new(&format!("{name}.proj"), dim, dim),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.proj.init(store, Init::FanIn, rng);
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, t: usize) -> Result<Var> {
        let feats = tape.constant(sinusoidal_features(t, self.dim)?);
        self.proj.forward(tape, feats)
    }
}

/// `norm → silu → conv3×3 → + proj(silu(temb)) → norm → silu → conv3×3`,
/// added to the input (through a 1×1 conv when the width changes).
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub temb_proj: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, temb_dim: usize) -> Self {
        Self {
            norm1: GroupNorm::new(&format!("{name}.norm1"), c_in),
            conv1: Conv2d::same3(&format!("{name}.conv1"), c_in, c_out),
            temb_proj: Linear::new(&format!("{name}.temb"), temb_dim, c_out),
            norm2: GroupNorm::new(&format!("{name}.norm2"), c_out),
            conv2: Conv2d::same3(&format!("{name}.conv2"), c_out, c_out),
            skip: (c_in != c_out).then(|| Conv2d::pointwise(&format!("{name}.skip"), c_in, c_out)),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.norm1.init(store);
        self.conv1.init(store, Init::FanIn, rng);
        self.temb_proj.init(store, Init::FanIn, rng);
        self.norm2.init(store);
        self.conv2.init(store, Init::FanIn, rng);
        if let Some(s) = &self.skip {
            s.init(store, Init::FanIn, rng);
        }
    }

    /// `temb_act` is the already activated time embedding.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, temb_act: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let h = tape.silu(h)?;
        let h = self.conv1.forward(tape, h)?;
        let bias = self.temb_proj.forward(tape, temb_act)?;
        let h = tape.add_channel_bias(h, bias)?;
        let h = self.norm2.forward(tape, h)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, h)?;
        let residual = match &self.skip {
            Some(s) => s.forward(tape, x)?,
            None => x,
        };
        tape.add(residual, h)
    }
}

/// Shape of a U-Net. Level `l` runs at `1/2^l` resolution with
/// `base_channels · channel_mults[l]` channels.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub attention_levels: Vec<usize>,
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn temb_dim(&self) -> usize {
        self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.blocks_per_level == 0 {
            return Err(Error::InvalidArgument(
                "U-Net needs at least one level and one block per level".into(),
            ));
        }
        if self.base_channels == 0
            || !self.base_channels.is_multiple_of(2)
            || self.channel_mults.contains(&0)
        {
            return Err(Error::InvalidArgument(
                "base_channels must be even and multipliers positive".into(),
            ));
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return Err(Error::InvalidArgument(format!(
                "attention level {l} beyond {} levels",
                self.levels()
            )));
        }
        Ok(())
    }

    /// Spatial extents must halve cleanly at every downsampling.
    pub fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        let factor = 1usize << (self.levels() - 1);
        if !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
            return Err(Error::shape(
                "unet",
                format!(
                    "extents {h}×{w} not divisible by {factor} for {} levels",
                    self.levels()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<ResBlock>,
    attention: Option<SelfAttention>,
}

impl Stage {
    fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for b in &self.blocks {
            b.init(store, rng);
        }
        if let Some(a) = &self.attention {
            a.init(store, rng);
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, mut h: Var, temb_act: Var) -> Result<Var> {
        for b in &self.blocks {
            h = b.forward(tape, h, temb_act)?;
        }
        if let Some(a) = &self.attention {
            h = a.forward(tape, h)?;
        }
        Ok(h)
    }
}

/// Contracting half of the U-Net. Produces one feature map per level.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: UNetConfig,
    pub time: TimeEmbedding,
    pub conv_in: Conv2d,
    stages: Vec<Stage>,
    downs: Vec<Conv2d>,
}

/// Encoder outputs: the per-level skip features and the activated time
/// embedding consumed by every ResBlock.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub skips: Vec<Var>,
    pub temb_act: Var,
}

impl Encoder {
    pub fn new(name: &str, config: &UNetConfig) -> Self {
        let temb = config.temb_dim();
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        let mut prev = config.level_channels(0);
        for level in 0..config.levels() {
            let ch = config.level_channels(level);
            let blocks = (0..config.blocks_per_level)
                .map(|b| {
                    let c_in = if b == 0 { prev } else { ch };
                    ResBlock::new(&format!("{name}.l{level}.b{b}"), c_in, ch, temb)
                })
                .collect();
            stages.push(Stage {
                blocks,
                attention: config
                    .attention_levels
                    .contains(&level)
                    .then(|| SelfAttention::new(&format!("{name}.l{level}.attn"), ch)),
            });
            if level + 1 < config.levels() {
                // 4×4 / stride 2 / pad 1 halves even extents exactly.
                downs.push(Conv2d::new(
                    &format!("{name}.l{level}.down"),
                    ch,
                    ch,
                    4,
                    2,
                    1,
                ));
            }
            prev = ch;
        }
        Self {
            config: config.clone(),
            time: TimeEmbedding::new(&format!("{name}.time"), temb),
            conv_in: Conv2d::same3(
                &format!("{name}.conv_in"),
                config.in_channels,
                config.level_channels(0),
            ),
            stages,
            downs,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.time.init(store, rng);
        self.conv_in.init(store, Init::FanIn, rng);
        for (level, stage) in self.stages.iter().enumerate() {
            stage.init(store, rng);
            if let Some(d) = self.downs.get(level) {
                d.init(store, Init::FanIn, rng);
            }
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, t: usize) -> Result<EncoderOutput> {
        let (c, h, w) = tape.value(x).dims3("encoder")?;
        if c != self.config.in_channels {
            return Err(Error::shape(
                "encoder",
                format!(
                    "expected {} input channels, got {c}",
                    self.config.in_channels
                ),
            ));
        }
        self.config.check_extents(h, w)?;
        let temb = self.time.forward(tape, t)?;
        let temb_act = tape.silu(temb)?;
        let mut h = self.conv_in.forward(tape, x)?;
        let mut skips = Vec::with_capacity(self.stages.len());
        for (level, stage) in self.stages.iter().enumerate() {
            h = stage.forward(tape, h, temb_act)?;
            skips.push(h);
            if let Some(d) = self.downs.get(level) {
                h = d.forward(tape, h)?;
            }
        }
        Ok(EncoderOutput { skips, temb_act })
    }
}

/// Expanding half: starts from the deepest skip, concatenates the matching
/// skip at each level, upsamples by nearest neighbour + 3×3 conv.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: UNetConfig,
    stages: Vec<Stage>,
    ups: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    pub fn new(name: &str, config: &UNetConfig) -> Self {
        let temb = config.temb_dim();
        let mut stages = Vec::new();
        let mut ups = Vec::new();
        for level in (0..config.levels()).rev() {
            let ch = config.level_channels(level);
            let blocks = (0..config.blocks_per_level)
                .map(|b| {
                    let c_in = if b == 0 { 2 * ch } else { ch };
                    ResBlock::new(&format!("{name}.l{level}.b{b}"), c_in, ch, temb)
                })
                .collect();
            stages.push(Stage {
                blocks,
                attention: config
                    .attention_levels
                    .contains(&level)
                    .then(|| SelfAttention::new(&format!("{name}.l{level}.attn"), ch)),
            });
            if level > 0 {
                ups.push(Conv2d::same3(
                    &format!("{name}.l{level}.up"),
                    ch,
                    config.level_channels(level - 1),
                ));
            }
        }
        let c0 = config.level_channels(0);
        Self {
            config: config.clone(),
            stages,
            ups,
            norm_out: GroupNorm::new(&format!("{name}.norm_out"), c0),
            conv_out: Conv2d::same3(&format!("{name}.conv_out"), c0, config.out_channels),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for (i, stage) in self.stages.iter().enumerate() {
            stage.init(store, rng);
            if let Some(u) = self.ups.get(i) {
                u.init(store, Init::FanIn, rng);
            }
        }
        self.norm_out.init(store);
        self.conv_out.init(store, Init::FanIn, rng);
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        skips: &[Var],
        temb_act: Var,
    ) -> Result<Var> {
        let levels = self.config.levels();
        if skips.len() != levels {
            return Err(Error::shape(
                "decoder",
                format!("{} skips for {levels} levels", skips.len()),
            ));
        }
        let mut h = skips[levels - 1];
        for (i, stage) in self.stages.iter().enumerate() {
            let level = levels - 1 - i;
            h = tape.concat_channels(h, skips[level])?;
            h = stage.forward(tape, h, temb_act)?;
            if let Some(u) = self.ups.get(i) {
                h = tape.upsample_nearest2x(h)?;
                h = u.forward(tape, h)?;
            }
        }
        let h = self.norm_out.forward(tape, h)?;
        let h = tape.silu(h)?;
        self.conv_out.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl UNet {
    pub fn new(name: &str, config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new(&format!("{name}.enc"), config),
            decoder: Decoder::new(&format!("{name}.dec"), config),
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.encoder.init(store, rng);
        self.decoder.init(store, rng);
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, t: usize) -> Result<Var> {
        let enc = self.encoder.forward(tape, x, t)?;
        self.decoder.forward(tape, &enc.skips, enc.temb_act)
    }
}
