use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use teachkit_cli::acceptance::Primary;
use teachkit_cli::classify_bench::{bench_conditions, spurious_benchmark, ClassifyBenchConfig};
use teachkit_cli::diversity_bench::{bench_diversity, DiversityBenchConfig};
use teachkit_cli::seg_bench::{conditioning_report, prepare, sensitivity, train_variant, SegBenchConfig};
use teachkit_core::classifier::ClassifierSnapshot;
use teachkit_core::dataset::{generate_synthetic, gesture_histogram, load_manifest, split_by_participant};
use teachkit_core::saliency::{assess, overlay};
use teachkit_core::segmenter::train::load_examples;
use teachkit_core::segmenter::{evaluate_iou, train_from_manifest, ObjectSegmenter, SegTrainConfig, UNetConfig};
use teachkit_core::Frame;
use teachkit_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "teachkit", version, about = "Teaching-platform benchmarks and server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic gesture dataset with a manifest.
    SynthGen {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Paint the class-correlated background cue.
        #[arg(long)]
        spurious: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the object segmenter. Without --manifest, runs the synthetic
    /// 4-channel vs RGB-only comparison plus the hand-shift probe.
    TrainSeg {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out IoU of a saved segmenter on a manifest's participant split.
    EvalSeg {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train classifiers on a synthetic spurious-cue teaching set, with and
    /// without gesture masks, and compare their explanations.
    TrainCls {
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 0.8)]
        suppression: f64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict and explain one image with a saved classifier.
    Assess {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        target: Option<u32>,
        /// Where to write the overlay PNG.
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Naive / click / contour / in-situ annotation on identical frames.
    BenchConditions {
        /// Saved object segmenter; trained from scratch when absent.
        #[arg(long)]
        segmenter_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diverse vs redundant teacher policies over several seeds.
    BenchDiversity {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the HTTP + SSE server.
    Serve {
        #[arg(long, env = "PORT")]
        port: Option<u16>,
        #[arg(long, env = "MODEL_DIR")]
        model_dir: Option<PathBuf>,
        #[arg(long, env = "MAX_FRAME_BYTES")]
        max_frame_bytes: Option<usize>,
        /// Startup report, written before the server begins listening.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the acceptance criteria and print one line per criterion.
    Acceptance {
        #[arg(long, default_value = "primary")]
        suite: String,
        /// Subset of criteria, e.g. 1,3,7.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
        #[arg(long)]
        verbose: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

type CliResult<T> = Result<T, String>;

fn write_report(out: &Path, report: &impl Serialize) -> CliResult<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(report).map_err(|e| e.to_string())?;
    std::fs::write(out, text + "\n").map_err(|e| format!("{}: {e}", out.display()))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn epoch_log(tag: &'static str) -> impl FnMut(usize, f32) {
    move |e, loss| eprintln!("{tag} epoch {e} loss {loss:.4}")
}

fn run(cmd: Command) -> CliResult<(PathBuf, Value, bool)> {
    Ok(match cmd {
        Command::SynthGen { dir, n, seed, size, spurious, out } => {
            let (m, _) = generate_synthetic(&dir, n, seed, spurious, size).map_err(err)?;
            let report = json!({
                "dir": dir,
                "images": m.records.len(),
                "participants": m.participants().len(),
                "fingerprint": m.fingerprint,
                "gestures": gesture_histogram(&m),
                "seed": seed,
                "size": size,
                "spurious_cue": spurious,
            });
            (out, report, true)
        }
        Command::TrainSeg { manifest, model_dir, channels, epochs, lr, batch, resolution, seed, out } => match manifest {
            Some(path) => {
                let m = load_manifest(&path).map_err(err)?;
                let config = SegTrainConfig {
                    epochs,
                    batch_size: batch,
                    learning_rate: lr,
                    seed,
                    architecture: UNetConfig {
                        in_channels: channels,
                        resolution,
                        ..UNetConfig::default()
                    },
                    ..SegTrainConfig::default()
                };
                let (model, report) = train_from_manifest(&m, &config, epoch_log("segmenter")).map_err(err)?;
                if let Some(dir) = &model_dir {
                    model.save(dir, Some(m.fingerprint.clone()), Some(report.clone())).map_err(err)?;
                }
                (out, json!({ "config": config, "report": report, "model_dir": model_dir }), true)
            }
            None => {
                let cfg = SegBenchConfig {
                    epochs,
                    learning_rate: lr,
                    batch_size: batch,
                    size: resolution,
                    seed,
                    ..SegBenchConfig::default()
                };
                let data = prepare(&cfg).map_err(err)?;
                let four = train_variant(&data, &cfg, 4, epoch_log("4ch")).map_err(err)?;
                let three = train_variant(&data, &cfg, 3, epoch_log("3ch")).map_err(err)?;
                let cond = conditioning_report(&cfg, &data, &four, &three);
                let sens = sensitivity(&four.model, &data, 50).map_err(err)?;
                if let Some(dir) = &model_dir {
                    four.model.save(dir, None, Some(four.report.clone())).map_err(err)?;
                }
                (out, json!({ "conditioning": cond, "sensitivity": sens, "model_dir": model_dir }), true)
            }
        },
        Command::EvalSeg { model_dir, manifest, ratio, seed, out } => {
            let (model, sidecar) = ObjectSegmenter::load(&model_dir).map_err(err)?;
            let m = load_manifest(&manifest).map_err(err)?;
            let split = split_by_participant(&m, ratio, seed.unwrap_or(sidecar.seed)).map_err(err)?;
            let test = load_examples(&m, &split.test).map_err(err)?;
            let mut ious = Vec::with_capacity(test.len());
            for ex in &test {
                let hand = ex.hand_mask.clone().ok_or("manifest record has no hand mask")?;
                let pred = model.segment_object(&ex.frame, &hand).map_err(err)?;
                ious.push(evaluate_iou(&pred.mask, &ex.object_mask).map_err(err)?);
            }
            let mean = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
            let report = json!({
                "model_dir": model_dir,
                "channels": sidecar.channels,
                "split": split,
                "test_examples": test.len(),
                "mean_iou": mean,
                "ious": ious,
            });
            (out, report, true)
        }
        Command::TrainCls { model_dir, epochs, suppression, seed, out } => {
            let cfg = ClassifyBenchConfig {
                epochs,
                suppression,
                seed,
                ..ClassifyBenchConfig::default()
            };
            let outcome = spurious_benchmark(&cfg).map_err(err)?;
            if let Some(dir) = &model_dir {
                outcome.masked_model.save(&dir.join("masked")).map_err(err)?;
                outcome.unmasked_model.save(&dir.join("unmasked")).map_err(err)?;
            }
            (out, json!(outcome.report), true)
        }
        Command::Assess { model_dir, image, target, overlay: overlay_path, out } => {
            let model = ClassifierSnapshot::load(&model_dir).map_err(err)?;
            let frame = Frame::load(&image).map_err(err)?;
            let result = assess(&model, &frame, target).map_err(err)?;
            if let Some(p) = &overlay_path {
                let img = overlay(&frame, &result.saliency).map_err(err)?;
                std::fs::write(p, img.to_png().map_err(err)?).map_err(err)?;
            }
            let report = json!({
                "image": image,
                "prediction": result.prediction,
                "target": result.target,
                "latency_ms": result.latency_ms,
                "overlay": overlay_path,
            });
            (out, report, true)
        }
        Command::BenchConditions { segmenter_dir, out } => {
            let segmenter = match segmenter_dir {
                Some(dir) => ObjectSegmenter::load(&dir).map_err(err)?.0,
                None => {
                    let cfg = SegBenchConfig::default();
                    let data = prepare(&cfg).map_err(err)?;
                    train_variant(&data, &cfg, 4, epoch_log("4ch")).map_err(err)?.model
                }
            };
            let report = bench_conditions(&ClassifyBenchConfig::default(), &segmenter).map_err(err)?;
            (out, json!(report), true)
        }
        Command::BenchDiversity { seeds, per_class, out } => {
            let cfg = DiversityBenchConfig {
                seeds,
                per_class,
                ..DiversityBenchConfig::default()
            };
            let report = bench_diversity(&cfg).map_err(err)?;
            let ok = report.min_accuracy_gain >= 0.05 && report.min_diversity_gain > 0.0;
            (out, json!(report), ok)
        }
        Command::Serve { port, model_dir, max_frame_bytes, out } => {
            let mut config = ServiceConfig::default();
            if let Some(p) = port {
                config.port = p;
            }
            config.model_dir = model_dir;
            if let Some(m) = max_frame_bytes {
                config.max_frame_bytes = m;
            }
            write_report(
                &out,
                &json!({ "port": config.port, "model_dir": config.model_dir, "max_frame_bytes": config.max_frame_bytes }),
            )?;
            let rt = tokio::runtime::Runtime::new().map_err(err)?;
            eprintln!("listening on 0.0.0.0:{}", config.port);
            rt.block_on(teachkit_service::serve(config)).map_err(err)?;
            return Err("server stopped".into());
        }
        Command::Acceptance { suite, criteria, verbose, out } => {
            if suite != "primary" {
                return Err(format!("unknown suite {suite:?}; available: primary"));
            }
            let ids: Vec<u8> = if criteria.is_empty() { (1..=8).collect() } else { criteria };
            let primary = Primary::new(verbose);
            let report = primary.run(&ids, |r| println!("{}", r.line()));
            println!("{} {}/{} criteria passed", if report.passed { "PASS" } else { "FAIL" }, report.criteria.iter().filter(|c| c.passed).count(), report.criteria.len());
            let ok = report.passed;
            (out, json!(report), ok)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command).and_then(|(out, report, ok)| write_report(&out, &report).map(|_| ok)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
