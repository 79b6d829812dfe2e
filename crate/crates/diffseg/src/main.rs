use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use diffseg::checkpoint;
use diffseg::config::DatasetSpec;
use diffseg::dataset::{export_folder_dataset, read_volume, write_volume};
use diffseg::harness::{load_datasets, Harness};
use diffseg::record::{load_records, RunRecord};
use diffseg::report::write_report;
use diffseg::{ExperimentConfig, OUTPUT_ENV};
use diffseg_core::data::SegmentationSample;
use diffseg_core::evaluator::{sliding_window_predict, SlidingWindowSpec};
use diffseg_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    /// The published 200-epoch recipe.
    Paper,
    /// Small CPU-sized synthetic benchmark.
    Desk,
}

#[derive(Parser)]
#[command(name = "diffseg", version, about = "Semi-supervised diffusion segmentation experiments")]
struct Cli {
    /// TOML experiment config; overrides --profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_enum, default_value = "paper")]
    profile: Profile,
    /// Output root (also settable through the environment).
    #[arg(long, global = true, env = OUTPUT_ENV)]
    out: Option<PathBuf>,
    /// Replace the configured seeds; repeatable.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Replace the configured labeled fractions; repeatable.
    #[arg(long = "fraction", global = true)]
    fractions: Vec<f64>,
    /// Run sweep cells sequentially.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export the configured synthetic dataset in the folder layout under <out>/dataset.
    Synth,
    /// Cycle-consistency pretraining of one teacher per seed.
    Pretrain,
    /// Pretrain (unless --teacher is given), co-train and evaluate every cell.
    Cotrain {
        /// Checkpoint directory of an already pretrained teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Supervised-only training on each labeled subset.
    Baseline,
    /// Evaluate a checkpoint on the test split, or segment a raw volume.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON header of a raw volume to segment with a sliding window.
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Patch size `d,h,w` for volumes.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        patch: Option<Vec<usize>>,
    },
    /// Aggregate <out>/records into metrics.csv, table.md and plots.
    Report {
        /// Records directory (default <out>/records).
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => match cli.profile {
            Profile::Paper => ExperimentConfig::default(),
            Profile::Desk => ExperimentConfig::desk(),
        },
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if !cli.seeds.is_empty() {
        cfg.seeds = cli.seeds.clone();
    }
    if !cli.fractions.is_empty() {
        cfg.fractions = cli.fractions.clone();
    }
    cfg.deterministic |= cli.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn print_records(records: &[RunRecord]) {
    for r in records {
        match (&r.error, &r.student) {
            (Some(e), _) => println!("{} FAILED: {e}", r.file_name()),
            (None, Some(s)) => {
                let teacher = r.teacher.as_ref().map(|t| format!(" teacher DC {:.2} JI {:.2}", t.dice, t.jaccard));
                println!(
                    "{} DC {:.2} JI {:.2}{} ({:.0}s)",
                    r.file_name(),
                    s.dice,
                    s.jaccard,
                    teacher.unwrap_or_default(),
                    r.wall_clock_seconds
                );
            }
            (None, None) => println!("{} produced no metrics", r.file_name()),
        }
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Synth => {
            if !matches!(cfg.dataset, DatasetSpec::Synthetic { .. }) {
                bail!("the configured dataset is not synthetic");
            }
            let data = load_datasets(&cfg.dataset)?;
            let root = out.join("dataset");
            let as_samples = |v: &[diffseg_core::data::LabeledSample]| -> Vec<SegmentationSample> {
                v.iter().cloned().map(Into::into).collect()
            };
            export_folder_dataset(&data.train, &root.join("train"))?;
            export_folder_dataset(&as_samples(&data.test), &root.join("test"))?;
            if !data.validation.is_empty() {
                export_folder_dataset(&as_samples(&data.validation), &root.join("validation"))?;
            }
            println!("wrote {}", root.display());
        }
        Command::Pretrain => {
            let harness = Harness::new(cfg)?;
            for dir in harness.run_pretraining()? {
                println!("teacher checkpoint {}", dir.display());
            }
        }
        Command::Cotrain { teacher } => {
            let harness = Harness::new(cfg)?;
            let teacher = match teacher {
                Some(dir) => Some(checkpoint::load(dir).with_context(|| format!("loading {}", dir.display()))?.0),
                None => None,
            };
            print_records(&harness.run_experiment(teacher.as_ref())?);
        }
        Command::Baseline => {
            let harness = Harness::new(cfg)?;
            print_records(&harness.run_supervised_baseline()?);
        }
        Command::Evaluate {
            checkpoint: dir,
            volume,
            patch,
        } => {
            let seed = cfg.seeds[0];
            match volume {
                None => {
                    let harness = Harness::new(cfg)?;
                    let r = harness.evaluate_checkpoint(dir, seed)?;
                    println!("DC {:.4} JI {:.4} on {} test images", r.dice, r.jaccard, r.per_sample_dice.len());
                }
                Some(header) => {
                    let (model, _) = checkpoint::load(dir)?;
                    let vol = read_volume(header)?;
                    let mut spec = SlidingWindowSpec::default();
                    if let Some(p) = patch {
                        spec.patch_size = [p[0], p[1], p[2]];
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let labels = sliding_window_predict(&model, &vol, &spec, &cfg.schedule.build()?, cfg.eval.ensemble, &mut rng)?;
                    let dims = &vol.shape()[1..];
                    let mask = Tensor::new(&[1, dims[0], dims[1], dims[2]], labels.iter().map(|&l| l as f32).collect())?;
                    let stem = header.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
                    let path = write_volume(&out.join("predictions"), &format!("{stem}-mask"), &mask)?;
                    println!("wrote {}", path.display());
                }
            }
        }
        Command::Report { records } => {
            let dir = records.clone().unwrap_or_else(|| out.join("records"));
            let records = load_records(&dir)?;
            let files = write_report(&records, &out, cfg.confidence)?;
            print!("{}", std::fs::read_to_string(&files.table)?);
        }
    }
    Ok(())
}
