//! Batch command-line front end: dataset synthesis, the two training
//! stages, protocol evaluation, prediction and gradient checking.

use agelstm::attention::box_to_edges;
use agelstm::checkpoint::{load_checkpoint, model_from_checkpoint, save_checkpoint};
use agelstm::config::{load_config, FullConfig};
use agelstm::data::{load_manifest, synth_dataset, write_dataset};
use agelstm::error::Error as CoreError;
use agelstm::estimation::{evaluate_protocol, EvalOptions, Protocol};
use agelstm::model::{AgeModel, Branch, PredictedValue};
use agelstm::tensor::Tensor;
use agelstm::trainer::{train_global, train_local, Stage};
use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "agelstm", version, about = "Attention-LSTM age estimation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Configuration file (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.epochs=20 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set train.seed=N and synth.seed=N.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic planted-region dataset (rasters + manifest).
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage; `--stage local` needs a stage-A checkpoint in --base.
    Train {
        /// Dataset manifest.
        manifest: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training stage (overrides train.stage from the config).
        #[arg(long)]
        stage: Option<String>,
        /// Base checkpoint: required for stage local; optional
        /// initialization or resume point for stage global.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Output checkpoint path; per-epoch metrics append to <out>.log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under a cross-validation protocol.
    Eval {
        manifest: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long)]
        base: PathBuf,
        /// fivefold | loop | fixed
        #[arg(long, default_value = "fixed")]
        protocol: String,
        /// Average predictions over the ten oversampled views.
        #[arg(long = "ten-crop")]
        ten_crop: bool,
        /// Write the machine-readable report here as well.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the five-fold subject shuffle.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict every sample in a manifest.
    Predict {
        manifest: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Write predictions here (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write attended regions (grid and pixel coordinates).
        #[arg(long = "emit-boxes")]
        emit_boxes: Option<PathBuf>,
    },
    /// Compare analytic gradients against central finite differences on a
    /// freshly initialized model.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Relative tolerance per sampled coordinate.
        #[arg(long, default_value_t = 1e-2)]
        tolerance: f64,
        /// Number of sampled parameter coordinates.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
}

fn resolve_config(args: &ConfigArgs) -> Result<FullConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("synth.seed={seed}"));
    }
    Ok(load_config(&text, &overrides)?)
}

fn print_resolved(cfg: &FullConfig) {
    println!("# resolved configuration");
    for line in cfg.canonical_text().lines() {
        println!("{line}");
    }
    println!();
}

fn is_usage(err: &anyhow::Error) -> bool {
    matches!(err.downcast_ref::<CoreError>(), Some(CoreError::Usage(_)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { cfg, out } => {
            let full = resolve_config(&cfg)?;
            print_resolved(&full);
            let manifest = synth_dataset(&full.synth)?;
            let written = write_dataset(&manifest, &out)?;
            println!(
                "wrote {} samples ({} classes, patch hull {:?}) to {}",
                written.samples.len(),
                full.synth.n_classes,
                written.meta.region,
                out.display()
            );
            Ok(())
        }
        Cmd::Train { manifest, cfg, stage, base, out } => {
            let mut args = cfg.clone();
            if let Some(stage) = &stage {
                args.set.push(format!("train.stage={stage}"));
            }
            let full = resolve_config(&args)?;
            print_resolved(&full);
            let data = load_manifest(&manifest)?;
            let base_ckpt = match &base {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            let outcome = match full.train.stage {
                Stage::Global => train_global(&full.train, &data, base_ckpt.as_ref())?,
                Stage::Local => {
                    let base = base_ckpt.ok_or(CoreError::Usage(
                        "train --stage local needs --base with a stage-A checkpoint".into(),
                    ))?;
                    train_local(&full.train, &data, &base)?
                }
            };
            save_checkpoint(&outcome.checkpoint, &out)?;
            let log_path = log_path_for(&out);
            let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
            for stats in &outcome.log {
                writeln!(log, "{}", stats.line())?;
                println!("{}", stats.line());
            }
            println!("checkpoint -> {}", out.display());
            println!("log -> {}", log_path.display());
            Ok(())
        }
        Cmd::Eval { manifest, base, protocol, ten_crop, out, seed } => {
            let protocol = parse_protocol(&protocol)?;
            let ckpt = load_checkpoint(&base)?;
            let (model, full) = model_from_checkpoint(&ckpt)?;
            print_resolved(&full);
            let data = load_manifest(&manifest)?;
            let opts = EvalOptions { branch: branch_of(&full), ten_crop };
            let report = evaluate_protocol(
                &model,
                &data,
                protocol,
                seed.unwrap_or(full.train.seed),
                &full.train.preprocess,
                opts,
            )?;
            print!("{}", report.text_table());
            if let Some(p) = out {
                fs::write(&p, report.records_tsv())?;
                println!("# report -> {}", p.display());
            }
            Ok(())
        }
        Cmd::Predict { manifest, base, out, emit_boxes } => {
            let ckpt = load_checkpoint(&base)?;
            let (model, full) = model_from_checkpoint(&ckpt)?;
            print_resolved(&full);
            let data = load_manifest(&manifest)?;
            let branch = if emit_boxes.is_some() { Branch::Fused } else { branch_of(&full) };
            let mut lines = String::new();
            let mut box_lines = String::from("id\tgx0\tgy0\tgw\tgh\tpx0\tpy0\tpw\tph\n");
            let mut state = model.fresh_state();
            for i in 0..data.samples.len() {
                let pixels = data.load_pixels(i)?;
                let img = agelstm::data::preprocess(
                    &pixels,
                    &full.train.preprocess,
                    agelstm::data::PreprocessMode::Eval,
                    0,
                )?;
                let p = model.predict(&img, &mut state, branch)?;
                let value = match p.value {
                    PredictedValue::Age(a) => format!("{a:.3}"),
                    PredictedValue::Group(g) => g.to_string(),
                };
                lines.push_str(&format!("{}\t{}\n", data.samples[i].id, value));
                if emit_boxes.is_some() {
                    let region = p.region.expect("fused branch always produces a region");
                    let bx = p.attention_box.expect("fused branch always produces a box");
                    let (_, hf, wf) = full.train.backbone.feature_map_shape()?;
                    let e = box_to_edges(&bx, hf, wf);
                    let scale = full.train.backbone.input_size as f64 / wf as f64;
                    box_lines.push_str(&format!(
                        "{}\t{}\t{}\t{}\t{}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\n",
                        data.samples[i].id,
                        region.x0,
                        region.y0,
                        region.w,
                        region.h,
                        e.x0 * scale,
                        e.y0 * scale,
                        (e.x1 - e.x0) * scale,
                        (e.y1 - e.y0) * scale,
                    ));
                }
            }
            match out {
                Some(p) => {
                    fs::write(&p, &lines)?;
                    println!("# predictions -> {}", p.display());
                }
                None => print!("{lines}"),
            }
            if let Some(p) = emit_boxes {
                fs::write(&p, &box_lines)?;
                println!("# boxes -> {}", p.display());
            }
            Ok(())
        }
        Cmd::Gradcheck { cfg, tolerance, samples } => {
            let full = resolve_config(&cfg)?;
            print_resolved(&full);
            let seed = full.train.seed;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = AgeModel::new(&full.model_config(), &mut rng)?;
            let s = full.train.backbone.input_size;
            let c = full.train.backbone.input_channels;
            let data: Vec<f32> = (0..c * s * s).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            let input = Tensor::new(vec![c, s, s], data)?;
            let report = agelstm::model::grad_check(&model, &input, 0, 1e-3, tolerance, samples, seed)?;
            println!(
                "checked {} coordinates ({} skipped below 1e-8): max relative error {:.3e}",
                report.checked, report.skipped, report.max_rel_err
            );
            for f in &report.failures {
                println!(
                    "FAIL {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                    f.name, f.index, f.analytic, f.numeric, f.rel_err
                );
            }
            if report.passed() {
                println!("gradient check passed at tolerance {tolerance}");
                Ok(())
            } else {
                Err(anyhow!("gradient check failed: {} coordinates over tolerance", report.failures.len()))
            }
        }
    }
}

fn log_path_for(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".log");
    PathBuf::from(os)
}

fn parse_protocol(s: &str) -> Result<Protocol> {
    match s {
        "fivefold" => Ok(Protocol::FivefoldSubjectExclusive),
        "loop" => Ok(Protocol::Loop),
        "fixed" => Ok(Protocol::FixedFolds),
        other => Err(CoreError::Usage(format!("unknown protocol {other:?}")).into()),
    }
}

/// Stage-A checkpoints predict from the global branch; stage-B checkpoints
/// have a trained attention head and predict from the fusion.
fn branch_of(full: &FullConfig) -> Branch {
    match full.train.stage {
        Stage::Global => Branch::GlobalOnly,
        Stage::Local => Branch::Fused,
    }
}
