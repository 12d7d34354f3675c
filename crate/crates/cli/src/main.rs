//! `vaot`: data generation, training, inference and evaluation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file
//! format error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vaot_core::gradsuite;
use vaot_core::io::{read_image, write_image, Manifest};
use vaot_core::metrics::{evaluate, load_eval_samples};
use vaot_core::morphology::{binarize, hard_skeletonize, soft_skeletonize, BinaryMask, SoftMask};
use vaot_core::nets::{enhance, Generator, ParamSet, ResidualGenerator, Segmenter};
use vaot_core::synthdata::make_dataset;
use vaot_core::topo::{detect_endpoints, EndpointSource};
use vaot_core::trainer::{load_generator, train, Dataset, StepLog, TrainConfig, CKPT_FINAL};
use vaot_core::{Error, Grid2D};

#[derive(Parser)]
#[command(name = "vaot", version, about = "Vessel-preserving unpaired fundus enhancement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic phantom dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_low: usize,
        #[arg(long)]
        n_high: usize,
        /// Held-out (clean, degraded, mask) triples, written under eval/.
        #[arg(long, default_value_t = 4)]
        n_eval: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image size as HxW; both sides must be multiples of 4.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Two-phase training from a manifest.
    Train {
        /// `key = value` file; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained generator on one image.
    Enhance {
        /// Checkpoint directory, e.g. `<train-out>/ckpt_final`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Skeleton of a mask image.
    Skeletonize(SkeletonizeArgs),
    /// Endpoints of a skeleton image as `row<TAB>col` lines.
    Endpoints {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the held-out triples of a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skeleton depth for clDice and endpoint counts.
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// `all`, or one of: primitives, msssim, sga, evp, generator.
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(Args)]
struct SkeletonizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Min/max-pool skeleton of the probability map.
    #[arg(long, conflicts_with = "hard", required_unless_present = "hard")]
    soft: bool,
    /// Exact skeleton of the mask thresholded at 0.5.
    #[arg(long)]
    hard: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height `{h}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width `{w}`"))?;
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) || h == 0 || w == 0 {
        return Err(format!("{h}x{w} is not a positive multiple of 4 on both sides"));
    }
    Ok((h, w))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::TensorShape { .. } => 3,
        Error::NonFinite { .. } | Error::BackwardTwice => 4,
        Error::Dimension(_) | Error::Contract(_) | Error::Config(_) => 2,
    }
}

fn generator_params(ckpt: &Path) -> vaot_core::Result<(ResidualGenerator, ParamSet)> {
    let gen = ResidualGenerator::default();
    let params = load_generator(ckpt, &gen.init_params(0))?;
    Ok((gen, params))
}

/// Averages step logs over one epoch.
struct EpochSummary {
    len: u64,
    logs: Vec<StepLog>,
}

impl EpochSummary {
    fn push(&mut self, l: &StepLog) {
        self.logs.push(l.clone());
        if (l.step + 1).is_multiple_of(self.len) {
            self.flush();
        }
    }

    fn flush(&mut self) {
        let (Some(first), Some(last)) = (self.logs.first(), self.logs.last()) else {
            return;
        };
        let n = self.logs.len() as f64;
        let mean = |f: fn(&StepLog) -> f64| self.logs.iter().map(f).sum::<f64>() / n;
        println!(
            "epoch {:>4}  phase {}  steps {}-{}  L_D {:.4}  GP {:.4}  L_G {:.4}  C_id {:.4}  C_s {:.4}  C_e {:.4}  W1 {:.4}",
            first.step / self.len + 1,
            last.phase.number(),
            first.step,
            last.step,
            mean(|l| l.critic.total),
            mean(|l| l.critic.gp),
            mean(|l| l.gen.total),
            mean(|l| l.gen.c_id),
            mean(|l| l.gen.c_s),
            mean(|l| l.gen.c_e),
            mean(|l| l.critic.w1),
        );
        self.logs.clear();
    }
}

fn run(cmd: Cmd) -> vaot_core::Result<ExitCode> {
    match cmd {
        Cmd::GenData { out, n_low, n_high, n_eval, seed, size } => {
            let m = make_dataset(n_low, n_high, n_eval, seed, size, &out)?;
            println!(
                "wrote {} low, {} high and {} held-out samples to {}",
                n_low,
                n_high,
                m.eval_triples()?.len(),
                out.display()
            );
        }
        Cmd::Train { config, data, out } => {
            let cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    TrainConfig::parse(&text)?
                }
                None => TrainConfig::default(),
            };
            cfg.validate()?;
            let manifest = Manifest::read(&data)?;
            let dataset = Dataset::from_manifest(&manifest)?;
            let epoch = (dataset.low.len() as u64).div_ceil(cfg.batch as u64).max(1);
            let mut summary = EpochSummary { len: epoch, logs: Vec::new() };
            let t = train(&cfg, dataset, &out, |l| summary.push(l))?;
            summary.flush();
            println!("{} steps done; final checkpoint in {}", t.state.step, out.join(CKPT_FINAL).display());
        }
        Cmd::Enhance { ckpt, input, out } => {
            let (gen, params) = generator_params(&ckpt)?;
            let img = read_image(&input)?;
            let y = enhance(&gen, &params, &img.to_tensor())?;
            write_image(&out, &Grid2D::from_tensor(&y)?)?;
        }
        Cmd::Skeletonize(a) => {
            let img = read_image(&a.input)?;
            let out = if a.soft {
                soft_skeletonize(&SoftMask::new(img)?, a.k).union
            } else {
                hard_skeletonize(&binarize(&SoftMask::new(img)?, 0.5), a.k).into_grid()
            };
            write_image(&a.out, &out)?;
        }
        Cmd::Endpoints { input, out } => {
            let img = read_image(&input)?;
            let skel = BinaryMask::new(img.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))?;
            let pts = detect_endpoints(&skel, EndpointSource::Input);
            let text: String = pts.points().iter().map(|(r, c)| format!("{r}\t{c}\n")).collect();
            std::fs::write(&out, text).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        }
        Cmd::Eval { ckpt, data, out, k } => {
            let (gen, params) = generator_params(&ckpt)?;
            let samples = load_eval_samples(&Manifest::read(&data)?)?;
            let report = evaluate(&gen, &params, &Segmenter::default(), &samples, k)?;
            std::fs::write(&out, report.to_tsv()).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let m = report.mean();
            println!(
                "{} samples  SSIM {:.4}  PSNR {:.2}  clDice {:.4}  dice {:.4}",
                report.rows.len(),
                m[0],
                m[1],
                m[2],
                m[3]
            );
        }
        Cmd::GradCheck { suite } => {
            let results = gradsuite::run_suite(&suite)?;
            let mut failed = 0;
            for r in &results {
                let verdict = if r.pass { "ok" } else { "FAIL" };
                println!("{verdict:4} {:10} {:40} rel {:.3e} (tol {:.0e})", r.suite, r.name, r.max_rel_error, r.tol);
                failed += usize::from(!r.pass);
            }
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
