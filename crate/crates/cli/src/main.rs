use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use leugan_core::edge::{edge_image, EdgeKernel};
use leugan_core::imaging::{list_images, load_image, save_image, synth_darken, synthetic::dead_leaves};
use leugan_core::metrics::{evaluate_directory, fit_pristine_dir, NiqeConfig, NIQE_PATCH};
use leugan_core::train::{train, Enhancer, TrainConfig};

#[derive(Parser)]
#[command(name = "leugan", version, about = "Unsupervised low-light image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both generator/discriminator pairs from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override `train.iterations`.
        #[arg(long)]
        iterations: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one image with a trained checkpoint.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the pixel attention map.
        #[arg(long)]
        save_attn: Option<PathBuf>,
        /// Also write the edge map seen by the generator.
        #[arg(long)]
        save_edge: Option<PathBuf>,
    },
    /// NIQE, Vollath and PCA-noise report for a directory.
    Eval {
        #[arg(long)]
        dir: PathBuf,
        /// Directory of pristine images used to fit the NIQE model.
        #[arg(long)]
        pristine: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// NIQE patch size; images must be at least twice this size.
        #[arg(long, default_value_t = NIQE_PATCH)]
        patch: usize,
    },
    /// Normalized gradient-magnitude map of an image.
    Edge {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "sobel")]
        kernel: EdgeKernel,
    },
    /// Darken every image in a directory with a gamma curve plus noise.
    Synth {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2.2)]
        gamma: f64,
        #[arg(long, default_value_t = 0.03)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write procedural dead-leaves images, a stand-in natural corpus.
    DeadLeaves {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            iterations,
            resume,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if resume.is_some() {
                cfg.resume = resume;
            }
            cfg.validate()?;
            let summary = train(&cfg)?;
            if let Some(last) = summary.last {
                println!("{}", leugan_core::train::LOG_HEADER);
                println!("{}", last.csv_row());
            }
            println!("checkpoint: {}", summary.checkpoint.display());
        }
        Command::Enhance {
            ckpt,
            input,
            out,
            save_attn,
            save_edge,
        } => {
            let enhancer = Enhancer::load(&ckpt)?;
            let img = load_image(&input)?;
            let result = enhancer.enhance(&img)?;
            save_image(&result.image, &out)?;
            if let Some(p) = save_attn {
                save_image(&result.attention, p)?;
            }
            if let Some(p) = save_edge {
                save_image(&result.edges, p)?;
            }
        }
        Command::Eval {
            dir,
            pristine,
            out,
            patch,
        } => {
            let model = fit_pristine_dir(&pristine, NiqeConfig::with_patch(patch))?;
            let report = evaluate_directory(&dir, &model)?;
            report.write_csv(&out)?;
            print!("{}", report.to_table());
            if report.rows.is_empty() {
                bail!("no image in {} could be measured", dir.display());
            }
        }
        Command::Edge {
            input,
            output,
            kernel,
        } => {
            let img = load_image(&input)?;
            save_image(&edge_image(&img, kernel)?, &output)?;
        }
        Command::Synth {
            input,
            out,
            gamma,
            sigma,
            seed,
        } => {
            let files = list_images(&input)?;
            if files.is_empty() {
                bail!("no images in {}", input.display());
            }
            create_dir(&out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for f in &files {
                let dark = synth_darken(&load_image(f)?, gamma, sigma, &mut rng)?;
                let name = f.file_stem().context("file without a name")?;
                save_image(&dark, out.join(Path::new(name).with_extension("png")))?;
            }
            println!("wrote {} image(s) to {}", files.len(), out.display());
        }
        Command::DeadLeaves {
            out,
            count,
            size,
            seed,
        } => {
            create_dir(&out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..count {
                save_image(&dead_leaves(size, size, &mut rng), out.join(format!("leaves_{i:04}.png")))?;
            }
            println!("wrote {count} image(s) to {}", out.display());
        }
    }
    Ok(())
}
