//! `kpdiff` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or I/O error,
//! 3 verification failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kpdiff::blur_synth::{synth_dataset, write_scenes, BlurKind, SynthSpec};
use kpdiff::checkpoint::Checkpoint;
use kpdiff::imageio::{read_image, write_image, BitDepth};
use kpdiff::metrics::{psnr, ssim, ImageScore, QualityReport, SsimParams};
use kpdiff::model::{Ablation, DeblurModel};
use kpdiff::pipeline::{deblur, load_latent_pairs};
use kpdiff::training::{train_loop, TrainConfig, TrainOutputs, TrainState};
use kpdiff::verify;

#[derive(Parser, Debug)]
#[command(
    name = "kpdiff",
    version,
    about = "Kernel-prediction diffusion deblurring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic sharp grayscale scenes.
    GenSharp(GenSharpArgs),
    /// Blur sharp images into a paired dataset with a manifest.
    Synth(SynthArgs),
    /// Train (or resume) a model on a synthesized dataset.
    Train(TrainArgs),
    /// Restore one image or every image of a directory.
    Deblur(DeblurArgs),
    /// PSNR and SSIM of predictions against ground truth, paired by file name.
    Eval(EvalArgs),
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenSharpArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum KindArg {
    Uniform,
    Regional,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    sharp_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    support: usize,
    #[arg(long, default_value_t = 13)]
    max_len: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    kind: KindArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum AblationArg {
    Full,
    NoEac,
    NoSd,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON training configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct DeblurArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// An image file or a directory of PGM/PPM images.
    #[arg(long)]
    input: PathBuf,
    /// Output file for a single image, output directory otherwise.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the decoded guidance of every step as `step_{t:04}.pgm`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// Directory receiving `quality.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    /// `all` or a comma-separated list of op names.
    #[arg(long, default_value = "all")]
    ops: String,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Scale analytic gradients by 1 + 1e-3 to exercise failure detection.
    #[arg(long, hide = true)]
    perturb: bool,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
    Verification(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn echo(name: &str, args: &impl Serialize) -> Result<()> {
    println!("{name} {}", serde_json::to_string(args)?);
    Ok(())
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

fn image_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && is_image(&path) {
            names.insert(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

fn gen_sharp(a: GenSharpArgs) -> Result<()> {
    echo("gen-sharp", &a)?;
    let paths = write_scenes(&a.out, a.count, 1, a.size, a.seed)?;
    println!("wrote {} images to {}", paths.len(), a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    echo("synth", &a)?;
    let spec = SynthSpec {
        kind: match a.kind {
            KindArg::Uniform => BlurKind::Uniform,
            KindArg::Regional => BlurKind::Regional,
        },
        support: a.support,
        max_len: a.max_len,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let manifest = synth_dataset(&a.sharp_dir, &a.out, a.count, &spec)?;
    println!(
        "wrote {} pairs to {}",
        manifest.pairs.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    echo("train", &a)?;
    let mut state = match &a.resume {
        Some(path) => {
            if a.config.is_some()
                || a.ablation.is_some()
                || a.lr.is_some()
                || a.batch.is_some()
                || a.seed.is_some()
            {
                bail!("--resume uses the checkpoint's configuration; only --steps and --checkpoint-every may change");
            }
            TrainState::from_checkpoint(Checkpoint::load(path)?)
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<TrainConfig>(&text)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => TrainConfig::default(),
            };
            if let Some(ab) = a.ablation {
                cfg.model.ablation = match ab {
                    AblationArg::Full => Ablation::Full,
                    AblationArg::NoEac => Ablation::NoEac,
                    AblationArg::NoSd => Ablation::NoSdForLkpn,
                };
            }
            if let Some(v) = a.lr {
                cfg.lr = v;
            }
            if let Some(v) = a.batch {
                cfg.batch = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            TrainState::new(cfg)?
        }
    };
    if let Some(v) = a.steps {
        state.config.steps = v;
    }
    if let Some(v) = a.checkpoint_every {
        state.config.checkpoint_every = v;
    }
    state.config.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let effective = serde_json::to_string_pretty(&state.config)?;
    println!("effective config {effective}");
    std::fs::write(a.out.join("config.json"), effective + "\n")?;

    let data = load_latent_pairs(
        &a.data,
        state.config.codec,
        state.config.model.lkpn.latent_channels,
    )
    .with_context(|| format!("loading dataset {}", a.data.display()))?;
    let outputs = TrainOutputs {
        loss_csv: Some(a.out.join("loss.csv")),
        checkpoint_dir: Some(a.out.clone()),
    };
    let total = state.config.steps;
    train_loop(&mut state, &data, &outputs, |r| {
        if r.step % 50 == 0 || r.step + 1 == total {
            eprintln!(
                "step {} loss {:.5} (denoise {:.5} latent {:.5} pixel {:.5})",
                r.step, r.total, r.denoise, r.latent, r.pixel
            );
        }
    })?;
    println!("final checkpoint {}", a.out.join("final.ckpt").display());
    Ok(())
}

fn deblur_cmd(a: DeblurArgs) -> Result<()> {
    echo("deblur", &a)?;
    let ck = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let model = DeblurModel::new(ck.config.model.clone())?;
    let sched = ck.config.schedule.build()?;
    let codec = ck.config.codec;
    let jobs: Vec<(PathBuf, PathBuf, Option<PathBuf>)> = if a.input.is_dir() {
        std::fs::create_dir_all(&a.out)?;
        let names = image_names(&a.input)?;
        if names.is_empty() {
            bail!("no PGM/PPM images in {}", a.input.display());
        }
        names
            .iter()
            .map(|n| {
                let stem = Path::new(n).file_stem().unwrap().to_owned();
                (
                    a.input.join(n),
                    a.out.join(n),
                    a.trace.as_ref().map(|t| t.join(&stem)),
                )
            })
            .collect()
    } else {
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        vec![(a.input.clone(), a.out.clone(), a.trace.clone())]
    };
    for (input, output, trace) in jobs {
        let img = read_image(&input).with_context(|| format!("reading {}", input.display()))?;
        let restored = deblur(&model, &ck.params, &img, codec, &sched, a.seed)?;
        write_image(&output, &restored.image, BitDepth::Eight)?;
        if let Some(dir) = trace {
            std::fs::create_dir_all(&dir)?;
            for (t, zs) in &restored.trace {
                write_image(&dir.join(format!("step_{t:04}.pgm")), zs, BitDepth::Eight)?;
            }
        }
        println!("{} -> {}", input.display(), output.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    echo("eval", &a)?;
    let preds = image_names(&a.pred_dir)?;
    let gts = image_names(&a.gt_dir)?;
    let unmatched: Vec<&String> = preds.difference(&gts).collect();
    if !unmatched.is_empty() {
        bail!("predictions without ground truth: {unmatched:?}");
    }
    if preds.is_empty() {
        bail!(
            "no prediction images in {} to pair with {}",
            a.pred_dir.display(),
            a.gt_dir.display()
        );
    }
    let params = SsimParams::default();
    let mut report = QualityReport::default();
    for name in &preds {
        let p = read_image(&a.pred_dir.join(name))?;
        let g = read_image(&a.gt_dir.join(name))?;
        report.images.push(ImageScore {
            path: name.clone(),
            psnr_db: psnr(&p, &g, 1.0)?,
            ssim: ssim(&p, &g, &params)?,
        });
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("quality.csv"), report.to_csv())?;
    println!(
        "images {} mean_psnr_db {} mean_ssim {}",
        report.images.len(),
        report.mean_psnr(),
        report.mean_ssim()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> std::result::Result<(), Failure> {
    echo("gradcheck", &a)?;
    let ops: Vec<String> = if a.ops == "all" {
        verify::OPS.iter().map(|s| s.to_string()).collect()
    } else {
        a.ops.split(',').map(|s| s.trim().to_string()).collect()
    };
    for op in &ops {
        if !verify::OPS.contains(&op.as_str()) {
            return Err(Failure::Usage(format!(
                "unknown op `{op}`; known: {}",
                verify::OPS.join(", ")
            )));
        }
    }
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let mut failed = Vec::new();
    for op in &ops {
        let mut worst = 0.0f64;
        for seed in 0..a.seeds {
            let r = verify::check(op, seed, a.perturb).map_err(anyhow::Error::from)?;
            worst = worst.max(r.max_rel_error);
        }
        let threshold = verify::threshold(op);
        let ok = worst <= threshold;
        println!(
            "{op:<12} max_rel_error {worst:.3e} threshold {threshold:.0e} {}",
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(op.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::GenSharp(a) => gen_sharp(a).map_err(Failure::from),
        Command::Synth(a) => synth(a).map_err(Failure::from),
        Command::Train(a) => train(a).map_err(Failure::from),
        Command::Deblur(a) => deblur_cmd(a).map_err(Failure::from),
        Command::Eval(a) => eval(a).map_err(Failure::from),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}
