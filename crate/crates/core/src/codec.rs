//! Fixed latent codecs standing in for a pre-trained autoencoder.
//!
//! Both kinds are linear and have no parameters, so nothing downstream can
//! train them.

use serde::{Deserialize, Serialize};

use crate::eac::LatentGrid;
use crate::error::{Error, Result};
use crate::numerics::ops::upsample_nearest2x;
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    /// Latent space is image space.
    #[default]
    Identity,
    /// 2×2 average pooling down, nearest-neighbour up.
    FixedDownsample,
}

impl Codec {
    pub fn scale(self) -> usize {
        match self {
            Codec::Identity => 1,
            Codec::FixedDownsample => 2,
        }
    }

    pub fn encode<T: Real>(self, x: &Tensor<T>) -> Result<LatentGrid<T>> {
        let (c, h, w) = x.dims3("encode")?;
        let s = self.scale();
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(
                "encode",
                format!("{h}×{w} not divisible by {s}"),
            ));
        }
        match self {
            Codec::Identity => LatentGrid::new(x.clone()),
            Codec::FixedDownsample => {
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64_lossy(0.25);
                let d = x.data();
                let out = Tensor::from_fn(&[c, ho, wo], |i| {
                    let (ch, y, xx) = (i / (ho * wo), (i / wo) % ho, i % wo);
                    let at = |dy: usize, dx: usize| d[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                    (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter
                });
                LatentGrid::new(out)
            }
        }
    }

    pub fn decode<T: Real>(self, z: &LatentGrid<T>) -> Result<Tensor<T>> {
        match self {
            Codec::Identity => Ok(z.tensor().clone()),
            Codec::FixedDownsample => upsample_nearest2x(z.tensor()),
        }
    }

    /// Differentiable decode of a recorded latent.
    pub fn decode_on<T: Real>(self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        match self {
            Codec::Identity => Ok(z),
            Codec::FixedDownsample => tape.upsample_nearest2x(z),
        }
    }
}
