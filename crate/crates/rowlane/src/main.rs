//! Command-line pipeline: dataset generation, training, evaluation,
//! single-image inference, and feature visualization.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rowlane::datagen::{write_dataset, SceneConfig};
use rowlane::decode::{decode, rescale};
use rowlane::error::{Error, Result};
use rowlane::nn::ForwardCtx;
use rowlane::trainer::{
    self, image_to_input, load_checkpoint, load_dataset, Benchmark, ExperimentConfig,
};
use rowlane::viz::{draw_overlay, feature_to_rgb, select_taps};

#[derive(Parser)]
#[command(
    name = "rowlane",
    version,
    about = "Row-wise lane-marker detection: generate, train, evaluate, infer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images/ plus labels.jsonl).
    Gen {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long, default_value_t = 128)]
        count: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Image height in pixels (multiple of 16).
        #[arg(long, default_value_t = 128)]
        height: u32,
        /// Image width in pixels (multiple of 16).
        #[arg(long, default_value_t = 256)]
        width: u32,
        /// Maximum lanes per scene.
        #[arg(long, default_value_t = 4)]
        lanes: usize,
        /// Additive Gaussian pixel noise, fraction of full scale.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
    /// Train a model described by a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and metrics.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        /// Checkpoint weights (.bin, with its .manifest alongside).
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (labels.jsonl + images).
        #[arg(long)]
        data: PathBuf,
        /// Evaluation protocol: tusimple or culane.
        #[arg(long)]
        benchmark: String,
        /// Output directory for report.json and summary.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint on one image; write decoded lanes and an overlay.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory for lanes.json and overlay.png.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render PCA feature images for selected layers.
    VizFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated tap names, or "all" (decoder, shared_hrm1, ...).
        #[arg(long, default_value = "all")]
        layers: String,
        /// Output directory, one PNG per selected layer.
        #[arg(long)]
        out: PathBuf,
    },
}

fn cmd_gen(
    out: &Path,
    count: u64,
    seed: u64,
    height: u32,
    width: u32,
    lanes: usize,
    noise: f64,
) -> Result<()> {
    let cfg = SceneConfig {
        image_height: height,
        image_width: width,
        max_lanes: lanes,
        noise_level: noise,
        seed,
        ..SceneConfig::default()
    };
    let records = write_dataset(&cfg, count, out)?;
    println!(
        "wrote {} scenes ({}x{}) to {}",
        records.len(),
        width,
        height,
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let outcome = trainer::train(&cfg, out)?;
    println!(
        "trained {} steps, final loss {:.4}; checkpoints and metrics.jsonl in {}",
        outcome.steps,
        outcome.final_loss,
        out.display()
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, benchmark: &str, out: &Path) -> Result<()> {
    let benchmark: Benchmark = benchmark.parse()?;
    let (cfg, model, params) = load_checkpoint(ckpt)?;
    let dataset = load_dataset(data)?;
    let report = trainer::evaluate(
        &model,
        &params,
        &dataset,
        &cfg.decode_config(),
        benchmark,
        cfg.train.batch_size,
    )?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json_path = out.join("report.json");
    fs::write(&json_path, report.to_json()).map_err(|e| Error::io(&json_path, e))?;
    let txt_path = out.join("summary.txt");
    fs::write(&txt_path, report.summary()).map_err(|e| Error::io(&txt_path, e))?;
    print!("{}", report.summary());
    println!("report written to {}", json_path.display());
    Ok(())
}

fn cmd_infer(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (cfg, model, params) = load_checkpoint(ckpt)?;
    let img = image::open(image).map_err(|e| Error::image(image, e))?.to_rgb8();
    let x = image_to_input(&img, cfg.model.net_h, cfg.model.net_w)
        .insert_axis(ndarray::Axis(0));
    let mut ctx = ForwardCtx::eval();
    let (pred, _) = model.fwd(&params, &mut ctx, &x)?;
    let lanes = decode(&pred.image(0), &cfg.decode_config());
    let lanes = rescale(
        &lanes,
        cfg.model.grid_h(),
        cfg.model.grid_w(),
        img.height(),
        img.width(),
    );
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json_path = out.join("lanes.json");
    let json = serde_json::to_string_pretty(&lanes.lanes).expect("lane serialization");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let overlay = draw_overlay(&img, &lanes);
    let overlay_path = out.join("overlay.png");
    overlay
        .save(&overlay_path)
        .map_err(|e| Error::image(&overlay_path, e))?;
    println!(
        "{} lanes decoded; wrote {} and {}",
        lanes.n_lanes(),
        json_path.display(),
        overlay_path.display()
    );
    Ok(())
}

fn cmd_viz_features(ckpt: &Path, image: &Path, layers: &str, out: &Path) -> Result<()> {
    let (cfg, model, params) = load_checkpoint(ckpt)?;
    let img = image::open(image).map_err(|e| Error::image(image, e))?.to_rgb8();
    let x = image_to_input(&img, cfg.model.net_h, cfg.model.net_w)
        .insert_axis(ndarray::Axis(0));
    let mut taps = Vec::new();
    let mut ctx = ForwardCtx::eval();
    ctx.taps = Some(&mut taps);
    model.fwd(&params, &mut ctx, &x)?;
    drop(ctx);
    let picked = select_taps(taps, layers)?;
    if picked.is_empty() {
        return Err(Error::Config("no layers selected".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, feat) in &picked {
        let rgb = feature_to_rgb(&feat.index_axis(ndarray::Axis(0), 0), 0)?;
        let path = out.join(format!("{name}.png"));
        rgb.save(&path).map_err(|e| Error::image(&path, e))?;
        println!("{} -> {}", name, path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            out,
            count,
            seed,
            height,
            width,
            lanes,
            noise,
        } => cmd_gen(&out, count, seed, height, width, lanes, noise),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Eval {
            ckpt,
            data,
            benchmark,
            out,
        } => cmd_eval(&ckpt, &data, &benchmark, &out),
        Command::Infer { ckpt, image, out } => cmd_infer(&ckpt, &image, &out),
        Command::VizFeatures {
            ckpt,
            image,
            layers,
            out,
        } => cmd_viz_features(&ckpt, &image, &layers, &out),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
