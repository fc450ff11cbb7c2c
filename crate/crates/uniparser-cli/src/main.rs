//! Command-line front end: dataset synthesis, training, evaluation,
//! ablation tables, and overlay rendering. Exit codes: 0 success,
//! 1 runtime failure, 2 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array3;

use uniparser::config::{
    parse_fusion_mode, parse_similarity_space, ExperimentConfig,
};
use uniparser::datamodel::{instance_part_masks, FusionMode, SimilaritySpace};
use uniparser::error::{Error, Result};
use uniparser::inference::{
    default_palette, matrix_nms, predict, render_overlay, MATRIX_NMS_CUTOFF, MATRIX_NMS_SIGMA,
};
use uniparser::metrics::{evaluate, write_kv_report, write_text_report, EvalResult, Scene};
use uniparser::model::UniParserModel;
use uniparser::synthgen::{generate_sample, read_dataset, write_dataset};
use uniparser::trainer::{train, write_history_csv};

#[derive(Parser)]
#[command(
    name = "uniparser",
    about = "Multi-human-parsing pipeline: synthesize data, train, evaluate, ablate, render.",
    after_help = "Env: UNIPARSER_THREADS caps the worker count (all pipelines currently run single-threaded)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val dataset from a config file.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; train/ and val/ subsets are written inside.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoint + loss history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training dataset directory (a synth output subset).
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for model.ckpt and history.csv.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training/model seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset and write reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for report.txt and report.kv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare ablation variants in one table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding (or receiving) per-variant checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Evaluation dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Restrict to one variant (default: all known variants).
        #[arg(long)]
        variant: Option<String>,
        /// Train any variant whose checkpoint is missing.
        #[arg(long)]
        train_missing: bool,
    },
    /// Render a prediction overlay for one image.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = check_thread_env() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(&config, &out, seed),
        Command::Train {
            config,
            dataset,
            out,
            seed,
        } => cmd_train(&config, &dataset, &out, seed),
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => cmd_eval(&checkpoint, &dataset, &out),
        Command::Ablate {
            config,
            out,
            dataset,
            variant,
            train_missing,
        } => cmd_ablate(&config, &out, &dataset, variant.as_deref(), train_missing),
        Command::Render {
            checkpoint,
            image,
            out,
        } => cmd_render(&checkpoint, &image, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::DatasetCorrupt(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn check_thread_env() -> Result<()> {
    if let Ok(v) = std::env::var("UNIPARSER_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("UNIPARSER_THREADS must be an integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("UNIPARSER_THREADS must be >= 1".into()));
        }
    }
    Ok(())
}

/// Treats output-directory problems as configuration errors.
fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output dir {}: {e}", dir.display())))
}

fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    ensure_out_dir(out)?;
    let mut total = 0usize;
    for (name, count, seed_offset) in [
        ("train", cfg.data.n_train_samples, 0u64),
        ("val", cfg.data.n_val_samples, 1u64),
    ] {
        let mut spec = cfg.synth.clone();
        spec.seed = spec.seed.wrapping_add(seed_offset.wrapping_mul(0x5851F42D4C957F2D));
        let samples: Vec<_> = (0..count)
            .map(|i| generate_sample(&spec, i))
            .collect::<Result<_>>()?;
        let dir = out.join(name);
        ensure_out_dir(&dir)?;
        write_dataset(&samples, Some(&spec), &dir)?;
        // round-trip check: everything we wrote must read back valid
        let back = read_dataset(&dir)?;
        for s in &back {
            s.validate()?;
        }
        total += back.len();
    }
    println!("validated {total} samples");
    Ok(())
}

fn cmd_train(config: &Path, dataset: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if !dataset.join("manifest.txt").exists() {
        return Err(Error::DatasetCorrupt(format!(
            "no dataset at {}",
            dataset.display()
        )));
    }
    ensure_out_dir(out)?;
    let samples = read_dataset(dataset)?;
    let mut model = UniParserModel::new(cfg.model_config())?;
    let history = train(&mut model, &samples, &cfg.train)?;
    model.save(&out.join("model.ckpt"))?;
    write_history_csv(&out.join("history.csv"), &history)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "trained {} steps: l_total {} -> {}",
            history.len(),
            first.report.l_total,
            last.report.l_total
        );
    } else {
        println!("trained 0 steps: checkpoint is the initialization");
    }
    Ok(())
}

fn load_scenes(model: &UniParserModel, dataset: &Path) -> Result<Vec<Scene>> {
    if !dataset.join("manifest.txt").exists() {
        return Err(Error::DatasetCorrupt(format!(
            "no dataset at {}",
            dataset.display()
        )));
    }
    read_dataset(dataset)?
        .iter()
        .map(|s| Ok((predict(model, &s.image)?, instance_part_masks(s)?)))
        .collect()
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let model = UniParserModel::load(checkpoint)?;
    ensure_out_dir(out)?;
    let scenes = load_scenes(&model, dataset)?;
    let result = evaluate(&scenes);
    write_text_report(&out.join("report.txt"), &result)?;
    write_kv_report(&out.join("report.kv"), &result)?;
    println!(
        "AP^p_50 {:.4}  AP^p_vol {:.4}  PCP_50 {:.4} over {} images",
        result.ap_p_at(0.5),
        result.ap_p_vol,
        result.pcp_50,
        scenes.len()
    );
    Ok(())
}

const VARIANTS: [&str; 7] = [
    "base",
    "no_metric",
    "inner",
    "inner_sigmoid_after",
    "inner_sigmoid_before",
    "fusion_convs",
    "fusion_multi",
];

fn variant_config(base: &ExperimentConfig, name: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.hyper.similarity_space = SimilaritySpace::Cosine;
    cfg.hyper.fusion_mode = FusionMode::Index;
    match name {
        "base" => {}
        "no_metric" => cfg.hyper.lambda_metric = 0.0,
        "fusion_convs" | "fusion_multi" => {
            cfg.hyper.fusion_mode = parse_fusion_mode(name.trim_start_matches("fusion_"))?;
        }
        other => cfg.hyper.similarity_space = parse_similarity_space(other)?,
    }
    Ok(cfg)
}

struct VariantRow {
    name: &'static str,
    result: Option<(EvalResult, f64)>, // (metrics, category off-diagonal mean)
}

fn cmd_ablate(
    config: &Path,
    out: &Path,
    dataset: &Path,
    only: Option<&str>,
    train_missing: bool,
) -> Result<()> {
    let base = ExperimentConfig::load(config)?;
    if let Some(v) = only {
        if !VARIANTS.contains(&v) {
            return Err(Error::Config(format!(
                "unknown variant {v:?}; known: {}",
                VARIANTS.join(", ")
            )));
        }
    }
    ensure_out_dir(out)?;
    let mut rows = Vec::new();
    let mut nms_delta: Option<(f64, f64)> = None;
    for name in VARIANTS {
        if only.is_some_and(|o| o != name) {
            continue;
        }
        let cfg = variant_config(&base, name)?;
        let ckpt = out.join(format!("ckpt_{name}.ckpt"));
        let model = if ckpt.exists() {
            Some(UniParserModel::load(&ckpt)?)
        } else if train_missing {
            let samples = read_dataset(dataset)?;
            let mut m = UniParserModel::new(cfg.model_config())?;
            train(&mut m, &samples, &cfg.train)?;
            m.save(&ckpt)?;
            Some(m)
        } else {
            None
        };
        let result = match model {
            None => None,
            Some(m) => {
                let scenes = load_scenes(&m, dataset)?;
                let r = evaluate(&scenes);
                if name == "base" {
                    let nms_scenes: Vec<Scene> = scenes
                        .iter()
                        .map(|(p, g)| {
                            (
                                matrix_nms(p, MATRIX_NMS_SIGMA, Some(MATRIX_NMS_CUTOFF)),
                                g.clone(),
                            )
                        })
                        .collect();
                    nms_delta = Some((r.ap_p_at(0.5), evaluate(&nms_scenes).ap_p_at(0.5)));
                }
                Some((r, m.category_offdiag_mean()))
            }
        };
        rows.push(VariantRow { name, result });
    }
    let table = render_ablation_table(&rows, nms_delta);
    std::fs::write(out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn render_ablation_table(rows: &[VariantRow], nms: Option<(f64, f64)>) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<22} {:>8} {:>9} {:>8} {:>12}\n",
        "variant", "AP^p_50", "AP^p_vol", "PCP_50", "offdiag|A_c|"
    ));
    for row in rows {
        match &row.result {
            Some((r, off)) => s.push_str(&format!(
                "{:<22} {:>8.4} {:>9.4} {:>8.4} {:>12.4}\n",
                row.name,
                r.ap_p_at(0.5),
                r.ap_p_vol,
                r.pcp_50,
                off
            )),
            None => s.push_str(&format!(
                "{:<22} {:>8} {:>9} {:>8} {:>12}\n",
                row.name, "n/a", "n/a", "n/a", "n/a"
            )),
        }
    }
    match nms {
        Some((plain, with_nms)) => s.push_str(&format!(
            "matrix-nms on base:    AP^p_50 {plain:.4} -> {with_nms:.4} (delta {:+.4})\n",
            with_nms - plain
        )),
        None => s.push_str("matrix-nms on base:    n/a\n"),
    }
    s
}

fn cmd_render(checkpoint: &Path, image_path: &Path, out: &Path) -> Result<()> {
    let model = UniParserModel::load(checkpoint)?;
    let img = image::open(image_path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let arr = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    });
    let pred = predict(&model, &arr)?;
    let overlay = render_overlay(&arr, &pred, &default_palette());
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_out_dir(dir)?;
        }
    }
    overlay
        .save(out)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", out.display())))?;
    println!("rendered {} instances", pred.instances.len());
    Ok(())
}
