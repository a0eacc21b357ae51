//! Synthetic motion blur: random camera trajectories, their point spread
//! functions, uniform and region-wise blurring, procedural sharp scenes and
//! paired dataset emission.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_image, write_image, BitDepth};
use crate::numerics::Tensor;
use crate::rng::{stream, Purpose};

/// Shape of the random walk behind each trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkParams {
    /// Standard deviation of the heading change per step, radians.
    pub turn_sigma: f64,
    /// Mean step length in pixels.
    pub step: f64,
    /// Step lengths are uniform in `step · [1 − jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self {
            turn_sigma: 0.6,
            step: 1.0,
            jitter: 0.5,
        }
    }
}

/// Ordered `(x, y)` positions inside a `support × support` square.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTrajectory {
    pub points: Vec<(f64, f64)>,
}

impl MotionTrajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_support(support: usize) -> Result<()> {
    if support.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "PSF support must be odd, got {support}"
        )));
    }
    Ok(())
}

/// Inertial random walk of `1..=max_len` points, re-centred on its bounding
/// box and clamped into the support.
pub fn gen_trajectory(
    rng: &mut impl Rng,
    max_len: usize,
    support: usize,
    walk: &WalkParams,
) -> Result<MotionTrajectory> {
    check_support(support)?;
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let len = rng.random_range(1..=max_len);
    let turn = Normal::new(0.0, walk.turn_sigma)
        .map_err(|e| Error::InvalidArgument(format!("turn_sigma: {e}")))?;
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut p = (0.0f64, 0.0f64);
    let mut pts = vec![p];
    for _ in 1..len {
        heading += turn.sample(rng);
        let step = walk.step * rng.random_range(1.0 - walk.jitter..=1.0 + walk.jitter);
        p = (p.0 + step * heading.cos(), p.1 + step * heading.sin());
        pts.push(p);
    }
    let (min_x, max_x) = pts
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), q| (a.min(q.0), b.max(q.0)));
    let (min_y, max_y) = pts
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), q| (a.min(q.1), b.max(q.1)));
    let centre = (support - 1) as f64 / 2.0;
    let (dx, dy) = (
        centre - (min_x + max_x) / 2.0,
        centre - (min_y + max_y) / 2.0,
    );
    let hi = (support - 1) as f64;
    let points = pts
        .into_iter()
        .map(|(x, y)| ((x + dx).clamp(0.0, hi), (y + dy).clamp(0.0, hi)))
        .collect();
    Ok(MotionTrajectory { points })
}

/// Normalized, non-negative `s × s` blur kernel with odd `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Psf {
    support: usize,
    values: Vec<f64>,
}

impl Psf {
    pub fn new(support: usize, values: Vec<f64>) -> Result<Self> {
        check_support(support)?;
        if values.len() != support * support {
            return Err(Error::shape(
                "psf",
                format!("{} values for support {support}", values.len()),
            ));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "PSF values must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("PSF sums to {sum}, not 1")));
        }
        Ok(Self { support, values })
    }

    pub fn delta(support: usize) -> Result<Self> {
        check_support(support)?;
        let mut values = vec![0.0; support * support];
        values[support * support / 2] = 1.0;
        Self::new(support, values)
    }

    pub fn support(&self) -> usize {
        self.support
    }

    /// Row-major values, row index = y.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.support + x]
    }
}

/// Deposits unit mass per point, split bilinearly over the four
/// surrounding cells, then normalizes.
pub fn rasterize_psf(traj: &MotionTrajectory, support: usize) -> Result<Psf> {
    check_support(support)?;
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let mut k = vec![0.0; support * support];
    for &(x, y) in &traj.points {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (cx, cy) = (x0 as i64 + dx, y0 as i64 + dy);
                let w = wx * wy;
                if w > 0.0 && (0..support as i64).contains(&cx) && (0..support as i64).contains(&cy)
                {
                    k[cy as usize * support + cx as usize] += w;
                }
            }
        }
    }
    let total: f64 = k.iter().sum();
    Psf::new(support, k.into_iter().map(|v| v / total).collect())
}

/// True convolution per channel with replicate padding:
/// `out(y, x) = Σ_{i,j} psf(i, j) · img(y + r − i, x + r − j)`.
pub fn apply_uniform_blur(img: &Tensor<f64>, psf: &Psf) -> Result<Tensor<f64>> {
    let (c, h, w) = img.dims3("blur")?;
    let s = psf.support();
    if s > h || s > w {
        return Err(Error::shape(
            "blur",
            format!("PSF support {s} exceeds image {h}×{w}"),
        ));
    }
    let r = (s / 2) as isize;
    let d = img.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..s {
                    let sy = clamp(y as isize + r - i as isize, h);
                    for j in 0..s {
                        let k = psf.at(i, j);
                        if k != 0.0 {
                            acc += k * plane[sy * w + clamp(x as isize + r - j as isize, w)];
                        }
                    }
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// A binary region of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

/// `Σ_i mask_i ⊙ blur(img, psf_i)`. The masks must partition the image.
pub fn apply_regional_blur(
    img: &Tensor<f64>,
    masks: &[RegionMask],
    psfs: &[Psf],
) -> Result<Tensor<f64>> {
    let (c, h, w) = img.dims3("regional blur")?;
    if masks.len() != psfs.len() || masks.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} masks for {} PSFs",
            masks.len(),
            psfs.len()
        )));
    }
    let mut cover = vec![0u32; h * w];
    for m in masks {
        if (m.height, m.width) != (h, w) || m.mask.len() != h * w {
            return Err(Error::shape(
                "regional blur",
                format!("mask {} is not {h}×{w}", m.id),
            ));
        }
        for (cnt, &on) in cover.iter_mut().zip(&m.mask) {
            *cnt += on as u32;
        }
    }
    if let Some(i) = cover.iter().position(|&n| n != 1) {
        return Err(Error::InvalidArgument(format!(
            "masks must cover every pixel exactly once; pixel ({}, {}) is covered {} times",
            i / w,
            i % w,
            cover[i]
        )));
    }
    let mut out = vec![0.0; c * h * w];
    for (m, psf) in masks.iter().zip(psfs) {
        let blurred = apply_uniform_blur(img, psf)?;
        for ch in 0..c {
            for (i, &on) in m.mask.iter().enumerate() {
                if on {
                    out[ch * h * w + i] = blurred.data()[ch * h * w + i];
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Splits the image into a random geometric shape (half-plane, rectangle or
/// ellipse) and its complement.
pub fn gen_partition(rng: &mut impl Rng, h: usize, w: usize) -> Vec<RegionMask> {
    let kind = rng.random_range(0..3);
    let (cx, cy) = (
        rng.random_range(0.0..w as f64),
        rng.random_range(0.0..h as f64),
    );
    let (a, b) = (
        rng.random_range(0.2..0.5) * w as f64,
        rng.random_range(0.2..0.5) * h as f64,
    );
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let inside = |y: f64, x: f64| -> bool {
        match kind {
            0 => (x - cx) * theta.cos() + (y - cy) * theta.sin() > 0.0,
            1 => (x - cx).abs() < a && (y - cy).abs() < b,
            _ => ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) < 1.0,
        }
    };
    let shape: Vec<bool> = (0..h * w)
        .map(|i| inside((i / w) as f64 + 0.5, (i % w) as f64 + 0.5))
        .collect();
    vec![
        RegionMask {
            id: 0,
            height: h,
            width: w,
            mask: shape.iter().map(|&v| !v).collect(),
        },
        RegionMask {
            id: 1,
            height: h,
            width: w,
            mask: shape,
        },
    ]
}

/// Procedural sharp scene in `[0, 1]`: a tilted flat background overlaid
/// with 3 to 7 constant-intensity rectangles, ellipses and half-plane
/// wedges.
pub fn gen_scene(rng: &mut impl Rng, channels: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut img = vec![0.0; channels * h * w];
    let base: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
    let tilt = rng.random_range(-0.3..0.3);
    for ch in 0..channels {
        for i in 0..h * w {
            img[ch * h * w + i] = base[ch] + tilt * ((i % w) as f64 / w as f64 - 0.5);
        }
    }
    let shapes = rng.random_range(3..8);
    for _ in 0..shapes {
        let value: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
        let kind = rng.random_range(0..3);
        let (cx, cy) = (
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
        );
        let scale = w.min(h) as f64 / 32.0;
        let (a, b) = (
            rng.random_range(2.0..12.0) * scale,
            rng.random_range(2.0..12.0) * scale,
        );
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 - cx, y as f64 - cy);
                let hit = match kind {
                    0 => fx.abs() < a && fy.abs() < b,
                    1 => (fx / a).powi(2) + (fy / b).powi(2) < 1.0,
                    _ => {
                        fx * theta.cos() + fy * theta.sin() > 0.0
                            && fx.abs() < 2.0 * a
                            && fy.abs() < 2.0 * b
                    }
                };
                if hit {
                    for ch in 0..channels {
                        img[(ch * h + y) * w + x] = value[ch];
                    }
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![channels, h, w], img).expect("consistent scene extents")
}

/// Writes `count` procedural scenes as `scene_{i:05}.pgm` (or `.ppm` for
/// three channels). Scene `i` depends only on `(seed, i)`.
pub fn write_scenes(
    dir: &Path,
    count: usize,
    channels: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "{channels} channels: need 1 or 3"
        )));
    }
    std::fs::create_dir_all(dir)?;
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    (0..count)
        .map(|i| {
            let img = gen_scene(
                &mut stream(seed, Purpose::Scene, i as u64),
                channels,
                size,
                size,
            );
            let path = dir.join(format!("scene_{i:05}.{ext}"));
            write_image(&path, &img, BitDepth::Eight)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurKind {
    #[default]
    Uniform,
    Regional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub kind: BlurKind,
    pub support: usize,
    pub max_len: usize,
    pub seed: u64,
    pub walk: WalkParams,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: BlurKind::Uniform,
            support: 7,
            max_len: 13,
            seed: 0,
            walk: WalkParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: usize,
    /// Relative to the dataset directory.
    pub sharp_path: String,
    pub blurry_path: String,
    pub seed: u64,
    pub support: usize,
    pub kind: BlurKind,
    /// File name of the sharp image inside the source directory.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub pairs: Vec<PairRecord>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dataset_dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dataset_dir.join(Self::FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dataset_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dataset_dir.join(Self::FILE), text)?;
        Ok(())
    }
}

/// Blurs one sharp image with the randomness of `pair_seed`.
pub fn blur_with_seed(
    sharp: &Tensor<f64>,
    spec: &SynthSpec,
    kind: BlurKind,
    pair_seed: u64,
) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
    let mut psf = || -> Result<Psf> {
        let traj = gen_trajectory(&mut rng, spec.max_len, spec.support, &spec.walk)?;
        rasterize_psf(&traj, spec.support)
    };
    match kind {
        BlurKind::Uniform => apply_uniform_blur(sharp, &psf()?),
        BlurKind::Regional => {
            let psfs = vec![psf()?, psf()?];
            let (_, h, w) = sharp.dims3("regional blur")?;
            let masks = gen_partition(&mut rng, h, w);
            apply_regional_blur(sharp, &masks, &psfs)
        }
    }
}

fn sorted_images(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && (name.ends_with(".pgm") || name.ends_with(".ppm")) {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn render(record: &PairRecord, spec: &SynthSpec, sharp_dir: &Path, out_dir: &Path) -> Result<()> {
    let src = sharp_dir.join(&record.source);
    let bytes = std::fs::read(&src)?;
    let (sharp, _) = crate::imageio::decode_pnm(&bytes)
        .map_err(|e| Error::Image(format!("{}: {e}", src.display())))?;
    let blurry = blur_with_seed(&sharp, spec, record.kind, record.seed)?;
    let sharp_out = out_dir.join(&record.sharp_path);
    let blurry_out = out_dir.join(&record.blurry_path);
    for p in [&sharp_out, &blurry_out] {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&sharp_out, &bytes)?;
    write_image(&blurry_out, &blurry, BitDepth::Eight)
}

/// Builds `count` pairs from the images in `sharp_dir` (sorted by name and
/// reused cyclically). Pair `i` draws its blur from a seed derived from
/// `(spec.seed, i)`. With `count == 0` nothing is written.
pub fn synth_dataset(
    sharp_dir: &Path,
    out_dir: &Path,
    count: usize,
    spec: &SynthSpec,
) -> Result<Manifest> {
    check_support(spec.support)?;
    let mut manifest = Manifest {
        spec: spec.clone(),
        pairs: Vec::with_capacity(count),
    };
    if count == 0 {
        return Ok(manifest);
    }
    let sources = sorted_images(sharp_dir)?;
    if sources.is_empty() {
        return Err(Error::Dataset(format!(
            "no PGM/PPM images in {}",
            sharp_dir.display()
        )));
    }
    for id in 0..count {
        let source = sources[id % sources.len()].clone();
        let ext = &source[source.len() - 3..];
        manifest.pairs.push(PairRecord {
            id,
            sharp_path: format!("sharp/{id:05}.{ext}"),
            blurry_path: format!("blurry/{id:05}.{ext}"),
            seed: rand::RngCore::next_u64(&mut stream(spec.seed, Purpose::Pair, id as u64)),
            support: spec.support,
            kind: spec.kind,
            source,
        });
    }
    regenerate(&manifest, sharp_dir, out_dir)?;
    Ok(manifest)
}

/// Re-renders every pair of `manifest` and rewrites the manifest.
pub fn regenerate(manifest: &Manifest, sharp_dir: &Path, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for record in &manifest.pairs {
        let spec = SynthSpec {
            support: record.support,
            ..manifest.spec.clone()
        };
        render(record, &spec, sharp_dir, out_dir)?;
    }
    manifest.save(out_dir)
}

/// Sharp and blurry images of every manifest entry, in manifest order.
pub fn load_pairs(dataset_dir: &Path) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>> {
    let manifest = Manifest::load(dataset_dir)?;
    manifest
        .pairs
        .iter()
        .map(|p| {
            let sharp = read_image(&dataset_dir.join(&p.sharp_path))?;
            let blurry = read_image(&dataset_dir.join(&p.blurry_path))?;
            if sharp.shape() != blurry.shape() {
                return Err(Error::Dataset(format!(
                    "pair {} has mismatched extents",
                    p.id
                )));
            }
            Ok((sharp, blurry))
        })
        .collect()
}
