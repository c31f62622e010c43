use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use resvit::data::{generate_phantom_dataset, load_dataset, PhantomSpec, Split};
use resvit::pipeline::{self, RolloutRequest};
use resvit::suite;
use resvit::trainer::{train, TrainConfig};
use resvit::{Error, Result};

#[derive(Parser)]
#[command(name = "resvit", version, about = "Unified multi-modality image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural three-modality phantom dataset.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        subjects: usize,
        #[arg(long, default_value_t = 16)]
        slices: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Subjects held out for validation.
        #[arg(long, default_value_t = 2)]
        val: usize,
        /// Subjects held out for testing.
        #[arg(long, default_value_t = 2)]
        test: usize,
    },
    /// Train a unified model on the train split.
    Train {
        /// Flat JSON configuration; defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize the targets of a task for every slice of a split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Task such as `T1+T2->PD`.
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        /// Configuration of the checkpoint; defaults to `config.json` beside it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score a synthesized tree against its reference dataset.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        syn: PathBuf,
        /// Directory receiving `report.csv` and `summary.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the attention rollout map of one block as an 8-bit graymap.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Slice as `subject:index`; defaults to the first test slice.
        #[arg(long)]
        slice: Option<String>,
        /// ART block position; defaults to the first block with a transformer.
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "toy")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::config(format!(
            "unknown split {other:?} (expected train, val or test)"
        ))),
    }
}

fn load_train_config(path: Option<&Path>) -> Result<(TrainConfig, BTreeSet<String>)> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::parse(&text).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("{}: {m}", p.display())),
                other => other,
            })
        }
        None => Ok((TrainConfig::default(), BTreeSet::new())),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            out,
            subjects,
            slices,
            size,
            seed,
            val,
            test,
        } => {
            let spec = PhantomSpec {
                seed,
                subjects,
                val,
                test,
                slices,
                height: size,
                width: size,
            };
            let manifest = generate_phantom_dataset(&out, &spec)?;
            let files: usize = manifest
                .subjects
                .iter()
                .map(|s| s.slices.len() * manifest.modalities.len())
                .sum();
            println!("wrote {files} slice files to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            variant,
            seed,
        } => {
            let (mut cfg, mut given) = load_train_config(config.as_deref())?;
            if let Some(v) = variant {
                cfg.apply_variant(&v)?;
            }
            if let Some(s) = seed {
                cfg.plan.seed = s;
                given.insert("seed".into());
            }
            let ds = load_dataset(&data)?;
            cfg.bind_dataset(&given, &ds)?;
            let report = train(&cfg, &ds, &out)?;
            println!(
                "trained {} steps; final epoch mean L_pix {:.6}; checkpoint {}",
                report.steps,
                report.epoch_mean_pix.last().copied().unwrap_or(f64::NAN),
                report.final_checkpoint.display()
            );
        }
        Command::Infer {
            checkpoint,
            data,
            task,
            out,
            config,
            split,
        } => {
            let cfg = pipeline::resolve_config(&checkpoint, config.as_deref())?;
            let ds = load_dataset(&data)?;
            let record = pipeline::infer(&checkpoint, &cfg, &ds, &task, parse_split(&split)?, &out)?;
            println!(
                "synthesized {} slices for {} into {}",
                record.files.len(),
                record.task,
                out.display()
            );
        }
        Command::Eval {
            reference,
            syn,
            out,
        } => {
            let report = pipeline::evaluate(&reference, &syn)?;
            report.write(&out)?;
            let s = &report.summary;
            println!(
                "{}: PSNR {:.2} +/- {:.2} dB, SSIM {:.4} +/- {:.4}, FID {:.4}",
                s.task, s.mean_psnr, s.std_psnr, s.mean_ssim, s.std_ssim, s.fid
            );
        }
        Command::Rollout {
            checkpoint,
            data,
            slice,
            block,
            task,
            out,
            config,
        } => {
            let cfg = pipeline::resolve_config(&checkpoint, config.as_deref())?;
            let ds = load_dataset(&data)?;
            let req = RolloutRequest {
                slice: slice.as_deref().map(pipeline::parse_slice_id).transpose()?,
                block,
                task,
            };
            let e = pipeline::export_rollout(&checkpoint, &cfg, &ds, &req, &out)?;
            println!(
                "rollout of block {} for {}:{} ({}) written to {} ({}x{})",
                e.block,
                e.subject,
                e.index,
                e.task,
                out.display(),
                e.width,
                e.height
            );
        }
        Command::Gradcheck { size, seed } => {
            if size != "toy" {
                return Err(Error::config(format!("unknown gradcheck size {size:?} (expected toy)")));
            }
            let results = suite::run_suite(seed)?;
            for c in &results {
                println!(
                    "{} {:<28} max rel error {:.3e} (tolerance {:.0e})",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel_error,
                    c.tolerance
                );
            }
            if let Some(e) = suite::failures(&results) {
                return Err(e);
            }
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("RESVIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("RESVIT_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
