use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saldet::config::Config;
use saldet::data::{gen_dataset, load_examples, DatasetManifest};
use saldet::fusion::FusionVariant;
use saldet::gradcheck;
use saldet::harness;
use saldet::metrics::{write_pr_csv, write_report_csv, DEFAULT_LAMBDA};
use saldet::train::{train, TrainOptions};

#[derive(Parser)]
#[command(
    name = "saldet",
    about = "Salient object detection on reflective image pairs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: images, masks and a manifest.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Canvas resolution of the generated images.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train on a manifest and write the final checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one grayscale saliency map per input image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score saved maps against a manifest's masks.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Also sweep the composed network for every fusion variant.
        #[arg(long)]
        full: bool,
    },
    /// Train and score every fusion variant and loss mode.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn Error>> {
    match cli.command {
        Command::GenData { count, seed, out, size } => {
            let manifest = gen_dataset(count, size, seed, &out)?;
            println!("wrote {} examples under {}", manifest.entries.len(), out.display());
        }
        Command::Train { config, manifest, out } => {
            let config = Config::load(&config)?;
            let manifest = DatasetManifest::load(&manifest)?;
            let examples = load_examples(&manifest)?;
            let outcome = train(&config, &examples, TrainOptions::default(), Some(&out), &mut |log| {
                println!("{}", log.line());
            })?;
            let end = if outcome.converged { "converged" } else { "reached max steps" };
            println!("{end} after {} steps; checkpoint at {}", outcome.state.step, out.display());
        }
        Command::Infer { ckpt, images, out } => {
            for path in harness::infer(&ckpt, &images, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Eval { manifest, maps, out } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let report = harness::eval_maps(&manifest, &maps, saldet::metrics::DEFAULT_ETA2, DEFAULT_LAMBDA)?;
            write_report_csv(&report, &out)?;
            let stem = out
                .file_stem()
                .map_or_else(|| "report".to_string(), |s| s.to_string_lossy().into_owned());
            let pr = out.with_file_name(format!("{stem}_pr.csv"));
            write_pr_csv(&report, &pr)?;
            let m = &report.mean;
            println!(
                "{} images  f_eta {:.4}  f_max {:.4}  mae {:.4}  s_lambda {:.4}",
                report.per_image.len(),
                m.f_eta,
                m.f_max,
                m.mae,
                m.s_lambda
            );
            println!("report at {}, PR curve at {}", out.display(), pr.display());
        }
        Command::Gradcheck { full } => {
            let mut reports = gradcheck::primitive_checks(11)?;
            let variants: &[FusionVariant] = if full {
                &[
                    FusionVariant::Input,
                    FusionVariant::Early,
                    FusionVariant::Late,
                    FusionVariant::Adhoc,
                    FusionVariant::Hyper,
                ]
            } else {
                &[FusionVariant::Hyper]
            };
            for &variant in variants {
                reports.push(gradcheck::model_check(&gradcheck::toy_check_config(variant))?);
            }
            let mut all_ok = true;
            for r in &reports {
                println!("{}", r.line());
                all_ok &= r.passed;
            }
            if !all_ok {
                return Ok(ExitCode::FAILURE);
            }
            println!("all gradient checks passed");
        }
        Command::Ablate { config, manifest, out } => {
            let config = Config::load(&config)?;
            let manifest = DatasetManifest::load(&manifest)?;
            harness::ablate(&config, &manifest, &out, &mut |msg| println!("{msg}"))?;
            println!("fusion table at {}", out.join(harness::FUSION_TABLE).display());
            println!("loss table at {}", out.join(harness::LOSS_TABLE).display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
