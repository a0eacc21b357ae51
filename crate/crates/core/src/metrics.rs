//! PSNR and SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `10·log10(peak² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, peak: f64) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "peak must be positive, got {peak}"
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM over every position where the window fits, averaged
/// over channels.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, p: &SsimParams) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let (c, h, w) = a.dims3("ssim")?;
    if p.window.is_multiple_of(2) || p.window == 0 {
        return Err(Error::InvalidArgument(format!(
            "window must be odd, got {}",
            p.window
        )));
    }
    if h < p.window || w < p.window {
        return Err(Error::shape(
            "ssim",
            format!("{h}×{w} image smaller than window {}", p.window),
        ));
    }
    let g = gaussian_window(p.window, p.sigma);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let (oh, ow) = (h - p.window + 1, w - p.window + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..p.window {
                    for j in 0..p.window {
                        let wgt = g[i] * g[j];
                        let (va, vb) = (pa[(y + i) * w + x + j], pb[(y + i) * w + x + j]);
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub path: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub images: Vec<ImageScore>,
}

impl QualityReport {
    pub fn mean_psnr(&self) -> f64 {
        self.images.iter().map(|s| s.psnr_db).sum::<f64>() / self.images.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.images.iter().map(|s| s.ssim).sum::<f64>() / self.images.len() as f64
    }

    /// `path,psnr_db,ssim` rows; infinite PSNR is written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,psnr_db,ssim\n");
        for s in &self.images {
            out.push_str(&format!("{},{},{}\n", s.path, s.psnr_db, s.ssim));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::from_fn(&[1, 4, 4], |i| i as f64 / 16.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(&[1, 4, 3]), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = Tensor::from_fn(&[1, 16, 16], |i| ((i * 37) % 17) as f64 / 16.0 - 0.5);
        let p = SsimParams::default();
        assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
        // Checkerboard: zero local mean up to a small positive offset.
        let c = Tensor::from_fn(&[1, 16, 16], |i| {
            if (i / 16 + i % 16) % 2 == 0 {
                0.51
            } else {
                -0.49
            }
        });
        let b = c.map(|v| -v + 1.0);
        assert!(ssim(&c, &b, &p).unwrap() < 0.0);
        assert!(ssim(&Tensor::zeros(&[1, 8, 16]), &Tensor::zeros(&[1, 8, 16]), &p).is_err());
    }

    #[test]
    fn window_is_normalized() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }
}
