use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use twinspec::harness::{
    baseline_model, checkpoint_model, emit_report, load_report, run_matrix_with, run_single, CellSpec, Dataset,
    ExperimentConfig, SceneSource, DUMP_FILE,
};
use twinspec::pairing::{BranchPipelines, CubePair, PairStrategy};
use twinspec::speccube::{save_cube, write_crowns};
use twinspec::ssl::{embed_with, load_checkpoint, save_checkpoint, Pretrainer, EMBED_CHUNK};
use twinspec::synthgen::generate_paired_scene;

#[derive(Parser)]
#[command(name = "twinspec", version, about = "Barlow Twins pretraining with inter-date pairs for hyperspectral pixels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run seed. For `gen` it overrides the scene seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    InterDate,
    SameView,
}

impl From<Strategy> for PairStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::InterDate => PairStrategy::InterDate,
            Strategy::SameView => PairStrategy::SameView,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Date {
    T1,
    T2,
}

#[derive(Args)]
struct CellArgs {
    #[arg(long, value_enum, default_value = "inter-date")]
    strategy: Strategy,
    /// Name of an augmentation set from the config.
    #[arg(long, default_value = "none")]
    augment: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired scene (t1.hsc, t2.hsc, crowns.tsv).
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to <output_dir>/scene.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain one cell and write a checkpoint per epoch.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellArgs,
        /// Checkpoint directory; defaults to <output_dir>/checkpoints/<cell>_seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed the labeled spectra of one date with a checkpoint, as CSV.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "t1")]
        date: Date,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit LDA on date-1 features (reflectance, or embeddings with --checkpoint) and save it as JSON.
    FitLda {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (or the reflectance baseline), or run one full seed of a cell.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the reflectance baseline instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        baseline: bool,
        #[command(flatten)]
        cell: CellArgs,
        /// Write the per-seed report here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the strategy × augmentation × seed matrix and emit the report.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Report directory; defaults to <output_dir>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit CSV and SVG from a JSON dump.
    Report {
        #[command(flatten)]
        common: Common,
        /// JSON dump; defaults to <output_dir>/report.json.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))
}

fn seeds(config: &ExperimentConfig, common: &Common) -> Vec<u64> {
    common.seed.map_or_else(|| config.seeds.clone(), |s| vec![s])
}

fn run_seed(config: &ExperimentConfig, common: &Common) -> u64 {
    common.seed.unwrap_or(config.seeds[0])
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { common, out } => {
            let config = load_config(&common)?;
            let SceneSource::Synthetic {
                mut synthetic,
                abiotic_t1,
                abiotic_t2,
            } = config.scene.clone()
            else {
                bail!("`gen` needs a synthetic scene source");
            };
            if let Some(s) = common.seed {
                synthetic.seed = s;
            }
            let scene = generate_paired_scene(&synthetic, &abiotic_t1, &abiotic_t2, synthetic.seed)?;
            let dir = out.unwrap_or_else(|| config.output_dir.join("scene"));
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            save_cube(&scene.t1, &dir.join("t1.hsc"))?;
            save_cube(&scene.t2, &dir.join("t2.hsc"))?;
            write_crowns(&scene.crowns, &dir.join("crowns.tsv"))?;
            println!(
                "wrote {} ({} crowns, {} labeled pixels)",
                dir.display(),
                scene.crowns.crowns.len(),
                scene.crowns.pixel_count()
            );
        }
        Command::Pretrain { common, cell, out } => {
            let config = load_config(&common)?;
            let seed = run_seed(&config, &common);
            let data = Dataset::load(&config.scene)?;
            let strategy: PairStrategy = cell.strategy.into();
            let pipelines: BranchPipelines = config.augmentation_set(&cell.augment)?.pipelines(data.t1.layout())?;
            let dir = out.unwrap_or_else(|| {
                config
                    .output_dir
                    .join("checkpoints")
                    .join(format!("{}_{}_seed{seed}", strategy.label(), cell.augment))
            });
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let mut trainer = Pretrainer::new(
                CubePair::new(&data.t1, &data.t2)?,
                strategy,
                pipelines,
                Some(data.standardizer.clone()),
                config.ssl.clone(),
                seed,
            )?;
            let mut losses = String::from("epoch,train_loss\n");
            for _ in 0..config.ssl.train.n_epochs {
                let ckpt = trainer.next_checkpoint()?;
                save_checkpoint(&ckpt, &dir.join(format!("epoch_{:03}.ckpt", ckpt.epoch)))?;
                losses.push_str(&format!("{},{}\n", ckpt.epoch, ckpt.train_loss));
                println!("epoch {:>3}  loss {:.6}", ckpt.epoch, ckpt.train_loss);
            }
            write_file(&dir.join("losses.csv"), &losses)?;
        }
        Command::Embed {
            common,
            checkpoint,
            date,
            out,
        } => {
            let config = load_config(&common)?;
            let data = Dataset::load(&config.scene)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let spectra = match date {
                Date::T1 => &data.train,
                Date::T2 => &data.test,
            };
            let h = embed_with(&ckpt.model, spectra.matrix.view(), EMBED_CHUNK)?;
            let mut body = String::from("crown_id,species_id");
            for k in 0..h.ncols() {
                body.push_str(&format!(",h{k}"));
            }
            body.push('\n');
            for (r, row) in h.outer_iter().enumerate() {
                body.push_str(&format!("{},{}", spectra.crown_ids[r], spectra.labels[r]));
                for v in row {
                    body.push_str(&format!(",{v}"));
                }
                body.push('\n');
            }
            write_file(&out, &body)?;
            println!("wrote {} rows × {} features to {}", h.nrows(), h.ncols(), out.display());
        }
        Command::FitLda { common, checkpoint, out } => {
            let config = load_config(&common)?;
            let data = Dataset::load(&config.scene)?;
            let (acc, model) = match checkpoint {
                Some(path) => checkpoint_model(&data, &load_checkpoint(&path)?, config.lda_shrinkage)?,
                None => baseline_model(&data, config.lda_shrinkage)?,
            };
            write_file(&out, &(serde_json::to_string_pretty(&model)? + "\n"))?;
            println!("train macro accuracy {:.4}, test macro accuracy {:.4}", acc.train, acc.test);
        }
        Command::Eval {
            common,
            checkpoint,
            baseline,
            cell,
            out,
        } => {
            let config = load_config(&common)?;
            let data = Dataset::load(&config.scene)?;
            let body = if baseline || checkpoint.is_some() {
                let acc = match checkpoint {
                    Some(path) => checkpoint_model(&data, &load_checkpoint(&path)?, config.lda_shrinkage)?.0,
                    None => baseline_model(&data, config.lda_shrinkage)?.0,
                };
                println!(
                    "train macro {:.4} (overall {:.4}), test macro {:.4} (overall {:.4})",
                    acc.train, acc.train_overall, acc.test, acc.test_overall
                );
                serde_json::to_string_pretty(&acc)?
            } else {
                let seed = run_seed(&config, &common);
                let spec = CellSpec {
                    strategy: cell.strategy.into(),
                    augmentation: cell.augment,
                };
                let report = run_single(&data, &config, &spec, seed)?;
                for p in &report.curve {
                    println!(
                        "epoch {:>3}  loss {:.6}  train {:.4}  test {:.4}",
                        p.epoch, p.train_loss, p.accuracy.train, p.accuracy.test
                    );
                }
                println!("best test {:.4} at epoch {}", report.best_test, report.best_epoch);
                serde_json::to_string_pretty(&report)?
            };
            if let Some(out) = out {
                write_file(&out, &(body + "\n"))?;
            }
        }
        Command::Sweep { common, out } => {
            let mut config = load_config(&common)?;
            config.seeds = seeds(&config, &common);
            let data = Dataset::load(&config.scene)?;
            let report = run_matrix_with(&data, &config, |cell, r| {
                println!(
                    "{:<10} {:<20} seed {:<4} best {:.4} (epoch {})",
                    cell.strategy.label(),
                    cell.augmentation,
                    r.seed,
                    r.best_test,
                    r.best_epoch
                );
                let _ = std::io::stdout().flush();
            })?;
            let dir = out.unwrap_or_else(|| config.output_dir.clone());
            for path in emit_report(&report, &dir)? {
                println!("wrote {}", path.display());
            }
            println!("baseline train {:.4} test {:.4}", report.baseline.train, report.baseline.test);
        }
        Command::Report { common, input, out } => {
            let config = load_config(&common)?;
            let input = input.unwrap_or_else(|| config.output_dir.join(DUMP_FILE));
            let report = load_report(&input)?;
            let dir = out.unwrap_or_else(|| config.output_dir.clone());
            for path in emit_report(&report, &dir)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
