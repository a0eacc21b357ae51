//! Glue between `[0, 1]` images on disk and the `[-1, 1]` latents the
//! networks see.

use std::path::Path;

use crate::blur_synth::load_pairs;
use crate::codec::Codec;
use crate::diffusion::{sample, NoiseSchedule};
use crate::eac::LatentGrid;
use crate::error::Result;
use crate::imageio::to_luma;
use crate::model::DeblurModel;
use crate::nn::ParamStore;
use crate::numerics::Tensor;
use crate::training::LatentPair;

/// Image in `[0, 1]` to latent in `[-1, 1]`. Color images are reduced to
/// luma when the model has one latent channel.
pub fn encode_image(
    img: &Tensor<f64>,
    codec: Codec,
    latent_channels: usize,
) -> Result<LatentGrid<f32>> {
    let img = if latent_channels == 1 {
        to_luma(img)?
    } else {
        img.clone()
    };
    let z = codec.encode(&img.map(|v| 2.0 * v - 1.0))?;
    LatentGrid::new(z.tensor().cast())
}

/// Latent back to an image in `[0, 1]`, clamped.
pub fn decode_latent(z: &LatentGrid<f32>, codec: Codec) -> Result<Tensor<f64>> {
    let x: Tensor<f64> = codec.decode(z)?.cast();
    Ok(x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)))
}

/// Dataset pairs in latent space, manifest order.
pub fn load_latent_pairs(
    dataset_dir: &Path,
    codec: Codec,
    latent_channels: usize,
) -> Result<Vec<LatentPair<f32>>> {
    load_pairs(dataset_dir)?
        .into_iter()
        .map(|(sharp, blurry)| {
            Ok(LatentPair {
                sharp: encode_image(&sharp, codec, latent_channels)?,
                blurry: encode_image(&blurry, codec, latent_channels)?,
            })
        })
        .collect()
}

/// A restored image plus the decoded guidance of every step, `t = T` first.
pub struct Restored {
    pub image: Tensor<f64>,
    pub trace: Vec<(usize, Tensor<f64>)>,
}

pub fn deblur(
    model: &DeblurModel,
    params: &ParamStore<f32>,
    blurry: &Tensor<f64>,
    codec: Codec,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Restored> {
    let z_lq = encode_image(blurry, codec, model.latent_channels())?;
    let out = sample(model, params, &z_lq, sched, seed)?;
    let trace = out
        .trace
        .iter()
        .map(|(t, z)| Ok((*t, decode_latent(z, codec)?)))
        .collect::<Result<_>>()?;
    Ok(Restored {
        image: decode_latent(&out.z0, codec)?,
        trace,
    })
}
