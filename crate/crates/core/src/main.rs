use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sparsedc::depthio::{self, Manifest, ManifestEntry, Split};
use sparsedc::patterns::PatternSpec;
use sparsedc::pipeline::{self, TrainConfig};
use sparsedc::synthetic;

#[derive(Parser)]
#[command(name = "sparsedc", version, about = "Depth completion from sparse measurements and RGB")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on every manifest entry under a sampling pattern.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// e.g. `random_n:n=500,seed=7`
        #[arg(long)]
        pattern: PatternSpec,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Complete one sparse depth file (16-bit PNG, millimeters).
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-scale `1 - u` maps of both branches next to the output.
        #[arg(long)]
        dump_weights: bool,
    },
    /// Apply a sampling pattern to a ground-truth depth file.
    SimulatePattern {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pattern: PatternSpec,
        #[arg(long)]
        out: PathBuf,
        /// RGB image, required by the keypoint pattern.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Also write an 8-bit preview of the sparse map.
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Render synthetic scenes with a manifest (all entries in the train split).
    Synth {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> sparsedc::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let outcome = pipeline::train(&cfg)?;
            println!(
                "epochs={} steps={} best_val_rmse={} stopped_early={}",
                outcome.state.epoch,
                outcome.state.step,
                outcome.state.best_val_rmse.unwrap_or(f64::NAN),
                outcome.state.stopped_early
            );
            println!("best checkpoint: {}", outcome.best_checkpoint.display());
        }
        Command::Eval {
            ckpt,
            manifest,
            pattern,
            csv,
            json,
        } => {
            let report = pipeline::evaluate(&ckpt, &manifest, &pattern)?;
            println!("{}", sparsedc::metrics::CSV_HEADER);
            println!("{}", report.csv_row());
            println!("{}", serde_json::to_string(&report)?);
            if let Some(p) = csv {
                report.write_csv(&p)?;
            }
            if let Some(p) = json {
                report.write_json(&p)?;
            }
        }
        Command::Complete {
            ckpt,
            image,
            sparse,
            out,
            dump_weights,
        } => {
            let done = pipeline::complete_files(&ckpt, &image, &sparse, &out, dump_weights)?;
            for p in done.written {
                println!("{}", p.display());
            }
        }
        Command::SimulatePattern {
            gt,
            pattern,
            out,
            image,
            preview,
        } => {
            let gt_map = depthio::read_depth_file(&gt)?;
            let rgb = match image {
                Some(p) => depthio::read_image_file(&p)?,
                None => depthio::ImageRgb::from_fn(gt_map.width(), gt_map.height(), |_, _| [0.0; 3])?,
            };
            let id = gt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let sparse = pattern.apply_for(&gt_map, &rgb, &id)?;
            depthio::write_depth_file(&out, &sparse)?;
            if let Some(p) = preview {
                depthio::depth_preview(&sparse).save(&p).map_err(|e| sparsedc::Error::Image {
                    path: p.clone(),
                    source: e,
                })?;
            }
            println!("{} valid points -> {}", sparse.valid_count(), out.display());
        }
        Command::Synth { count, seed, out } => {
            std::fs::create_dir_all(&out).map_err(|e| sparsedc::Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let mut manifest = Manifest::default();
            for s in synthetic::scenes(count, seed)? {
                let image = out.join(format!("{}_rgb.png", s.id));
                let depth = out.join(format!("{}.png", s.id));
                depthio::write_image_file(&image, &s.image)?;
                depthio::write_depth_file(&depth, &s.gt)?;
                manifest.entries.push(ManifestEntry {
                    image,
                    depth,
                    split: Split::Train,
                });
            }
            let path = out.join("manifest.tsv");
            manifest.write(&path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
