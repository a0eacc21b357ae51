//! Finite-difference checks of every differentiable building block, from
//! single ops up to the full training objective. All checks run in `f64`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::Codec;
use crate::diffusion::{gaussian, schedule_linear, DenoiserConfig};
use crate::eac::LatentGrid;
use crate::error::{Error, Result};
use crate::lkpn::LkpnConfig;
use crate::model::{DeblurModel, ModelConfig};
use crate::nn::{ParamStore, ResBlock};
use crate::numerics::gradcheck::{fd_coordinate, relative_error};
use crate::numerics::{Elementwise, Tape, Tensor, Var};
use crate::rng::{stream, Purpose};
use crate::training::{objective_graph, LatentPair, LossWeights};

/// Names accepted by [`check`], in the order `all` runs them.
pub const OPS: &[&str] = &[
    "conv2d",
    "elementwise",
    "group_norm",
    "attention2d",
    "linear",
    "reshape_ops",
    "eac_z",
    "eac_field",
    "resblock",
    "lkpn",
    "denoiser",
    "objective",
];

pub const FD_EPS: f64 = 1e-5;

/// Pass threshold on the max-norm relative error.
pub fn threshold(op: &str) -> f64 {
    if op == "objective" {
        1e-4
    } else {
        1e-6
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>) -> Result<Var>>;

struct Problem {
    inputs: ParamStore<f64>,
    build: Build,
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn var(tape: &Tape<f64>, name: &str) -> Result<Var> {
    tape.param_var(name)
        .ok_or_else(|| Error::UnknownTensor(name.into()))
}

/// Replaces all-zero tensors (zero-initialized heads and gates, norm
/// offsets) with small random values so no gradient path is trivially dead.
fn randomize_zeros(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for t in store.map_mut().values_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn tiny_lkpn() -> LkpnConfig {
    LkpnConfig {
        k: 3,
        base_channels: 4,
        levels: 2,
        attention_levels: vec![1],
        trunk_channels: 4,
        ..LkpnConfig::default()
    }
}

fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 4,
        levels: 2,
        attention_levels: vec![1],
        ..DenoiserConfig::default()
    }
}

fn problem(op: &str, seed: u64) -> Result<Problem> {
    let mut rng: ChaCha8Rng = stream(seed, Purpose::Init, 0x6772_6164);
    let mut inputs = ParamStore::new();
    let build: Build = match op {
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            let pad = (seed / 2 % 2) as usize;
            // 5 + 2·pad − 3 is even, so both strides give whole extents.
            inputs.insert("x", rand_tensor(&mut rng, &[2, 5, 5], 1.0));
            inputs.insert("w", rand_tensor(&mut rng, &[3, 2, 3, 3], 0.5));
            inputs.insert("b", rand_tensor(&mut rng, &[3], 0.5));
            Box::new(move |t| {
                let (x, w, b) = (var(t, "x")?, var(t, "w")?, var(t, "b")?);
                t.conv2d(x, w, Some(b), stride, pad)
            })
        }
        "elementwise" => {
            inputs.insert("a", rand_tensor(&mut rng, &[2, 3, 4], 2.0));
            inputs.insert("b", rand_tensor(&mut rng, &[2, 3, 4], 2.0));
            Box::new(|t| {
                let (a, b) = (var(t, "a")?, var(t, "b")?);
                let s = t.silu(a)?;
                let m = t.mul(s, b)?;
                let q = t.square(a)?;
                let sc = t.elementwise(Elementwise::Scale(0.7), b, None)?;
                let d = t.sub(q, sc)?;
                t.add(m, d)
            })
        }
        "group_norm" => {
            inputs.insert("x", rand_tensor(&mut rng, &[4, 3, 3], 1.0));
            inputs.insert("gamma", rand_tensor(&mut rng, &[4], 1.5));
            inputs.insert("beta", rand_tensor(&mut rng, &[4], 1.0));
            Box::new(|t| {
                let (x, g, b) = (var(t, "x")?, var(t, "gamma")?, var(t, "beta")?);
                t.group_norm(x, 2, g, b, 1e-5)
            })
        }
        "attention2d" => {
            inputs.insert("x", rand_tensor(&mut rng, &[3, 2, 3], 1.0));
            for w in ["wq", "wk", "wv", "wo"] {
                inputs.insert(w, rand_tensor(&mut rng, &[3, 3], 1.0));
            }
            Box::new(|t| {
                let x = var(t, "x")?;
                let (q, k, v, o) = (var(t, "wq")?, var(t, "wk")?, var(t, "wv")?, var(t, "wo")?);
                t.attention2d(x, q, k, v, o)
            })
        }
        "linear" => {
            inputs.insert("x", rand_tensor(&mut rng, &[5], 1.0));
            inputs.insert("w", rand_tensor(&mut rng, &[4, 5], 1.0));
            inputs.insert("b", rand_tensor(&mut rng, &[4], 1.0));
            Box::new(|t| {
                let (x, w, b) = (var(t, "x")?, var(t, "w")?, var(t, "b")?);
                t.linear(x, w, b)
            })
        }
        "reshape_ops" => {
            inputs.insert("x", rand_tensor(&mut rng, &[2, 2, 3], 1.0));
            inputs.insert("y", rand_tensor(&mut rng, &[1, 4, 6], 1.0));
            inputs.insert("v", rand_tensor(&mut rng, &[3], 1.0));
            Box::new(|t| {
                let (x, y, v) = (var(t, "x")?, var(t, "y")?, var(t, "v")?);
                let up = t.upsample_nearest2x(x)?;
                let cat = t.concat_channels(up, y)?;
                let biased = t.add_channel_bias(cat, v)?;
                let m = t.mean(biased)?;
                let s = t.scale(m, 3.0)?;
                let sq = t.square(biased)?;
                let total = t.sum(sq)?;
                t.add(s, total)
            })
        }
        "eac_z" | "eac_field" => {
            let k = [1, 3, 5][(seed % 3) as usize];
            inputs.insert("z", rand_tensor(&mut rng, &[2, 5, 5], 1.0));
            inputs.insert("f", rand_tensor(&mut rng, &[2 * k * k, 5, 5], 1.0));
            Box::new(move |t| {
                let (z, f) = (var(t, "z")?, var(t, "f")?);
                t.eac(z, f, k)
            })
        }
        "resblock" => {
            let c_out = if seed.is_multiple_of(2) { 4 } else { 6 };
            let block = ResBlock::new("r", 4, c_out, 4);
            block.init(&mut inputs, &mut rng);
            randomize_zeros(&mut inputs, &mut rng);
            inputs.insert("x", rand_tensor(&mut rng, &[4, 4, 4], 1.0));
            inputs.insert("temb", rand_tensor(&mut rng, &[4], 1.0));
            Box::new(move |t| {
                let (x, e) = (var(t, "x")?, var(t, "temb")?);
                block.forward(t, x, e)
            })
        }
        "lkpn" => {
            let model = DeblurModel::new(ModelConfig {
                lkpn: tiny_lkpn(),
                denoiser: tiny_denoiser(),
                ..ModelConfig::default()
            })?;
            model.lkpn.init(&mut inputs, &mut rng);
            randomize_zeros(&mut inputs, &mut rng);
            inputs.insert("z_t", rand_tensor(&mut rng, &[1, 8, 8], 1.0));
            inputs.insert("z_lq", rand_tensor(&mut rng, &[1, 8, 8], 1.0));
            let step = rng.random_range(1..=50);
            Box::new(move |t| {
                let (zt, zlq) = (var(t, "z_t")?, var(t, "z_lq")?);
                model.lkpn.forward(t, zt, zlq, step)
            })
        }
        "denoiser" => {
            let model = DeblurModel::new(ModelConfig {
                lkpn: tiny_lkpn(),
                denoiser: tiny_denoiser(),
                ..ModelConfig::default()
            })?;
            model.denoiser.init(&mut inputs, &mut rng);
            randomize_zeros(&mut inputs, &mut rng);
            inputs.insert("z_t", rand_tensor(&mut rng, &[1, 8, 8], 1.0));
            inputs.insert("cond", rand_tensor(&mut rng, &[2, 8, 8], 1.0));
            let step = rng.random_range(1..=50);
            Box::new(move |t| {
                let (zt, cond) = (var(t, "z_t")?, var(t, "cond")?);
                model.denoiser.forward(t, zt, cond, step)
            })
        }
        "objective" => {
            let model = DeblurModel::new(ModelConfig {
                lkpn: tiny_lkpn(),
                denoiser: tiny_denoiser(),
                ..ModelConfig::default()
            })?;
            inputs = model.init_params(seed);
            randomize_zeros(&mut inputs, &mut rng);
            let pair = LatentPair {
                sharp: LatentGrid::new(rand_tensor(&mut rng, &[1, 8, 8], 1.0))?,
                blurry: LatentGrid::new(rand_tensor(&mut rng, &[1, 8, 8], 1.0))?,
            };
            let sched = schedule_linear(10, 1e-3, 0.2)?;
            let step = rng.random_range(1..=10);
            let eps = gaussian(1, 8, 8, &mut rng);
            Box::new(move |t| {
                let v = objective_graph(
                    t,
                    &model,
                    &pair,
                    step,
                    &eps,
                    &sched,
                    Codec::Identity,
                    &LossWeights::default(),
                )?;
                Ok(v.total)
            })
        }
        other => return Err(Error::InvalidArgument(format!("unknown op `{other}`"))),
    };
    Ok(Problem { inputs, build })
}

/// Scalar loss `Σ out ⊙ R` for a fixed random `R` (or `out` itself when
/// it is already a scalar).
fn loss(tape: &mut Tape<f64>, build: &Build, proj: &Option<Tensor<f64>>) -> Result<Var> {
    let out = build(tape)?;
    match proj {
        None => Ok(out),
        Some(r) => {
            let r = tape.constant(r.clone());
            let m = tape.mul(out, r)?;
            tape.sum(m)
        }
    }
}

fn evaluate(p: &Problem, inputs: &ParamStore<f64>, proj: &Option<Tensor<f64>>) -> Result<f64> {
    let mut tape = Tape::new();
    inputs.bind(&mut tape);
    let l = loss(&mut tape, &p.build, proj)?;
    tape.value(l).item()
}

/// Runs one check. `perturb` scales the analytic gradient by `1 + 1e-3`
/// to confirm the harness notices a wrong gradient.
pub fn check(op: &str, seed: u64, perturb: bool) -> Result<CheckResult> {
    let p = problem(op, seed)?;
    let mut tape = Tape::new();
    p.inputs.bind(&mut tape);
    let out = (p.build)(&mut tape)?;
    let out_shape = tape.value(out).shape().to_vec();
    let proj = (out_shape.iter().product::<usize>() > 1).then(|| {
        let mut rng = stream(seed, Purpose::Init, 0x7072_6f6a);
        rand_tensor(&mut rng, &out_shape, 1.0)
    });
    let mut tape = Tape::new();
    p.inputs.bind(&mut tape);
    let l = loss(&mut tape, &p.build, &proj)?;
    let grads = tape.backward(l)?;

    // Only the argument under test counts for the two EAC variants.
    let wanted: Vec<String> = match op {
        "eac_z" => vec!["z".into()],
        "eac_field" => vec!["f".into()],
        _ => p.inputs.iter().map(|(n, _)| n.to_string()).collect(),
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut err = None;
    for name in &wanted {
        let g = grads
            .param(name)
            .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        let factor = if perturb { 1.0 + 1e-3 } else { 1.0 };
        analytic.extend(g.data().iter().map(|v| v * factor));
        let mut probe = p.inputs.get(name).expect("listed input").clone();
        for i in 0..probe.numel() {
            let mut f = |x: &Tensor<f64>| {
                let mut store = p.inputs.clone();
                *store.get_mut(name).expect("listed input") = x.clone();
                evaluate(&p, &store, &proj).unwrap_or_else(|e| {
                    err.get_or_insert(e);
                    f64::NAN
                })
            };
            numeric.push(fd_coordinate(&mut f, &mut probe, i, FD_EPS));
        }
    }
    if let Some(e) = err {
        return Err(e);
    }
    Ok(CheckResult {
        op: op.to_string(),
        seed,
        max_rel_error: relative_error(&analytic, &numeric),
        threshold: threshold(op),
    })
}
