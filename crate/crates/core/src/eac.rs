//! Element-wise adaptive convolution.
//!
//! Every channel of every latent position gets its own `k×k` filter. The
//! filters arrive as a [`KernelField`] of shape `(c·k², h, w)` where tap
//! `(n, m)` of channel `c`, `n, m ∈ [-r, r]`, lives at channel offset
//! `c·k² + (n+r)·k + (m+r)`:
//!
//! ```text
//! out(c, y, x) = Σ_n Σ_m  f(c·k² + (n+r)·k + (m+r), y, x) · z(c, y-n, x-m)
//! ```
//!
//! Reads outside the grid are zero. No normalization is imposed on the
//! taps; sharpening kernels need negative weights.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// A `(c, h, w)` latent map.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T>(Tensor<T>);

impl<T: Real> LatentGrid<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        values.dims3("latent grid")?;
        if !values.is_finite() {
            return Err(Error::NonFinite("latent grid"));
        }
        Ok(Self(values))
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[c, h, w]))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0
            .dims3("latent grid")
            .expect("validated on construction")
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Per-position, per-channel filter bank of shape `(c·k², h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField<T> {
    values: Tensor<T>,
    k: usize,
}

impl<T: Real> KernelField<T> {
    pub fn new(values: Tensor<T>, k: usize) -> Result<Self> {
        check_k(k)?;
        let (ck2, _, _) = values.dims3("kernel field")?;
        if ck2 % (k * k) != 0 {
            return Err(Error::shape(
                "kernel field",
                format!("{ck2} channels is not a multiple of k² = {}", k * k),
            ));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("kernel field"));
        }
        Ok(Self { values, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Latent channel count `c`.
    pub fn channels(&self) -> usize {
        self.values.shape()[0] / (self.k * self.k)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }

    /// Taps of channel `c` at position `(y, x)`, row-major over `(n, m)`.
    pub fn taps(&self, c: usize, y: usize, x: usize) -> Vec<T> {
        let (_, h, w) = self.values.dims3("kernel field").unwrap();
        let k2 = self.k * self.k;
        (0..k2)
            .map(|i| self.values.data()[((c * k2 + i) * h + y) * w + x])
            .collect()
    }
}

fn check_k(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "kernel extent must be odd, got {k}"
        )));
    }
    Ok(())
}

/// Checks `z: (c,h,w)` against `f: (c·k²,h,w)` and returns `(c, h, w)`.
fn check_extents<T: Real>(z: &Tensor<T>, f: &Tensor<T>, k: usize) -> Result<(usize, usize, usize)> {
    check_k(k)?;
    let (c, h, w) = z.dims3("eac")?;
    let (fc, fh, fw) = f.dims3("eac")?;
    if fc != c * k * k || (fh, fw) != (h, w) {
        return Err(Error::shape(
            "eac",
            format!(
                "field {:?} does not match latent {:?} with k = {k}",
                f.shape(),
                z.shape()
            ),
        ));
    }
    Ok((c, h, w))
}

/// Visits every in-bounds `(output index, field index, input index)` triple,
/// taps in row-major `(n, m)` order for each output position.
#[inline]
fn for_each_tap(
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    mut visit: impl FnMut(usize, usize, usize),
) {
    let r = (k / 2) as isize;
    let k2 = k * k;
    let plane = h * w;
    for ch in 0..c {
        for n in -r..=r {
            for m in -r..=r {
                let tap = ((n + r) as usize) * k + (m + r) as usize;
                let fbase = (ch * k2 + tap) * plane;
                for y in 0..h {
                    let sy = y as isize - n;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = m.max(0) as usize;
                    let x_hi = (w as isize + m.min(0)).max(0) as usize;
                    let orow = ch * plane + y * w;
                    let irow = ch * plane + sy as usize * w;
                    for x in x_lo..x_hi {
                        visit(
                            orow + x,
                            fbase + y * w + x,
                            (irow as isize + x as isize - m) as usize,
                        );
                    }
                }
            }
        }
    }
}

/// Raw kernel on tensors; see the module docs for the indexing.
pub fn eac_apply<T: Real>(z: &Tensor<T>, f: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (c, h, w) = check_extents(z, f, k)?;
    let (zd, fd) = (z.data(), f.data());
    let mut out = vec![T::zero(); c * h * w];
    for_each_tap(c, h, w, k, |o, fi, zi| out[o] += fd[fi] * zd[zi]);
    Tensor::new(vec![c, h, w], out)
}

/// Raw gradients of [`eac_apply`]: `(d_z, d_f)`.
pub fn eac_apply_backward<T: Real>(
    z: &Tensor<T>,
    f: &Tensor<T>,
    k: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = check_extents(z, f, k)?;
    z.expect_same_shape(grad_out, "eac_backward")?;
    let (zd, fd, gd) = (z.data(), f.data(), grad_out.data());
    let mut dz = vec![T::zero(); z.numel()];
    let mut df = vec![T::zero(); f.numel()];
    for_each_tap(c, h, w, k, |o, fi, zi| {
        df[fi] = gd[o] * zd[zi];
        dz[zi] += gd[o] * fd[fi];
    });
    Ok((
        Tensor::new(z.shape().to_vec(), dz)?,
        Tensor::new(f.shape().to_vec(), df)?,
    ))
}

pub fn eac_forward<T: Real>(z: &LatentGrid<T>, f: &KernelField<T>) -> Result<LatentGrid<T>> {
    LatentGrid::new(eac_apply(z.tensor(), f.tensor(), f.k())?)
}

pub fn eac_backward<T: Real>(
    z: &LatentGrid<T>,
    f: &KernelField<T>,
    grad_out: &LatentGrid<T>,
) -> Result<(LatentGrid<T>, KernelField<T>)> {
    let (dz, df) = eac_apply_backward(z.tensor(), f.tensor(), f.k(), grad_out.tensor())?;
    Ok((LatentGrid::new(dz)?, KernelField::new(df, f.k())?))
}

/// Field with a single unit tap at the centre: its EAC is the identity.
pub fn delta_kernel_field<T: Real>(
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Result<KernelField<T>> {
    check_k(k)?;
    let k2 = k * k;
    let center = (k / 2) * k + k / 2;
    let mut values = Tensor::zeros(&[c * k2, h, w]);
    for ch in 0..c {
        let base = (ch * k2 + center) * h * w;
        values.data_mut()[base..base + h * w].fill(T::one());
    }
    KernelField::new(values, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Five nested loops straight from the defining sum.
    fn brute(z: &Tensor<f64>, f: &Tensor<f64>, k: usize) -> Tensor<f64> {
        let [c, h, w] = z.shape()[..] else { panic!() };
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for n in -r..=r {
                        for m in -r..=r {
                            let (sy, sx) = (y as isize - n, x as isize - m);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let idx = ch * k * k + ((n + r) as usize) * k + (m + r) as usize;
                            acc += f.data()[(idx * h + y) * w + x]
                                * z.data()[(ch * h + sy as usize) * w + sx as usize];
                        }
                    }
                    out.data_mut()[(ch * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn delta_field_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3, 5] {
            let z = LatentGrid::new(random(&[2, 5, 4], &mut rng)).unwrap();
            let d = delta_kernel_field(2, 5, 4, k).unwrap();
            assert_eq!(eac_forward(&z, &d).unwrap(), z);
            let twice = eac_forward(&eac_forward(&z, &d).unwrap(), &d).unwrap();
            assert_eq!(twice, z);
            for y in 0..5 {
                for x in 0..4 {
                    assert_eq!(d.taps(1, y, x).iter().sum::<f64>(), 1.0);
                }
            }
        }
    }

    #[test]
    fn box_field_on_constant() {
        let (k, h, w) = (3, 5, 6);
        let v = 0.7;
        let z = LatentGrid::new(Tensor::full(&[1, h, w], v)).unwrap();
        let f = KernelField::new(Tensor::full(&[9, h, w], 1.0 / 9.0), k).unwrap();
        let out = eac_forward(&z, &f).unwrap();
        for y in 0..h {
            for x in 0..w {
                let rows = 3 - usize::from(y == 0) - usize::from(y == h - 1);
                let cols = 3 - usize::from(x == 0) - usize::from(x == w - 1);
                let expect = v * (rows * cols) as f64 / 9.0;
                assert!((out.tensor().data()[y * w + x] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_brute_force_single_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random(&[1, 4, 4], &mut rng);
        let f = random(&[9, 4, 4], &mut rng);
        let fast = eac_apply(&z, &f, 3).unwrap();
        let slow = brute(&z, &f, 3);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn k1_is_per_position_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(&[2, 3, 3], &mut rng);
        let f = random(&[2, 3, 3], &mut rng);
        let out = eac_apply(&z, &f, 1).unwrap();
        for i in 0..18 {
            assert_eq!(out.data()[i], z.data()[i] * f.data()[i]);
        }
    }

    #[test]
    fn backward_identity_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = LatentGrid::new(random(&[2, 4, 4], &mut rng)).unwrap();
        let g = LatentGrid::new(random(&[2, 4, 4], &mut rng)).unwrap();
        let d = delta_kernel_field(2, 4, 4, 3).unwrap();
        let (gz, _) = eac_backward(&z, &d, &g).unwrap();
        assert_eq!(gz, g);
        let zero = LatentGrid::zeros(2, 4, 4);
        let f = KernelField::new(random(&[18, 4, 4], &mut rng), 3).unwrap();
        let (_, gf) = eac_backward(&zero, &f, &g).unwrap();
        assert!(gf.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_extents() {
        let z = Tensor::<f64>::zeros(&[2, 4, 4]);
        assert!(eac_apply(&z, &Tensor::zeros(&[9, 4, 4]), 3).is_err());
        assert!(eac_apply(&z, &Tensor::zeros(&[18, 4, 3]), 3).is_err());
        assert!(eac_apply(&z, &Tensor::zeros(&[8, 4, 4]), 2).is_err());
        assert!(delta_kernel_field::<f64>(1, 2, 2, 4).is_err());
    }
}
