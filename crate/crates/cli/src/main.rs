mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hsd_core::config::{load_config, write_effective_config, DistillConfig};
use hsd_core::core_nn::count_parameters;
use hsd_core::data_io::{audit_dataset, generate_synthetic, load_dataset, SyntheticSpec};
use hsd_core::distill::{
    evaluate_detector, grid_components, grid_lambda, grid_neck, grid_tau,
    load_detector_from_checkpoint, run_ablation, train_student, train_teacher, AblationRow,
};
use hsd_core::eval_metrics::{benchmark_inference, format_report_table};
use hsd_core::Error;

#[derive(Parser)]
#[command(
    name = "hsd",
    version,
    about = "Self-distillation fault detector: data generation, training, evaluation, ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic missing-component dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        num_train: usize,
        #[arg(long, default_value_t = 100)]
        num_test: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "256x256")]
        image_size: String,
        #[arg(long, default_value_t = 0.5)]
        fault_ratio: f64,
        #[arg(long, default_value_t = 3)]
        clutter_level: usize,
        #[arg(long, default_value_t = 0.3)]
        occlusion_prob: f64,
    },
    /// Train the teacher (no distillation term).
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dotted config overrides, e.g. --set schedule.epochs=2 (last wins).
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the student against a frozen teacher checkpoint.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher_checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also benchmark single-image inference.
        #[arg(long, default_value_t = false)]
        benchmark: bool,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Run an ablation grid and write its CSV.
    Ablate {
        /// One of: neck, components, tau, lambda.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Render loss curves from one or two loss CSV logs.
    PlotLoss {
        /// Repeatable: one curve per CSV.
        #[arg(long = "csv")]
        csvs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's parameter accounting and manifest summary.
    InspectModel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Parse/usage problems are validation failures: exit 1.
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match &e {
                Error::Validation(_)
                | Error::Config(_)
                | Error::InvalidSpec { .. }
                | Error::Shape { .. }
                | Error::Dataset { .. } => 1,
                _ => 2,
            };
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), Error> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Validation(format!("--image-size `{s}` is not HxW")))?;
    Ok((
        h.parse().map_err(|_| Error::Validation(format!("bad height in `{s}`")))?,
        w.parse().map_err(|_| Error::Validation(format!("bad width in `{s}`")))?,
    ))
}

fn effective_config(path: Option<&Path>, overrides: &[String]) -> Result<DistillConfig, Error> {
    match path {
        Some(p) => load_config(p, overrides),
        None => {
            let text = toml::to_string(&DistillConfig::desk()).expect("default serializes");
            hsd_core::config::parse_config(&text, overrides)
        }
    }
}

fn write_result(out_dir: &Path, command: &str, data: serde_json::Value) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("result.json");
    let result = serde_json::json!({
        "schema_version": 1,
        "command": command,
        "data": data,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&result)?)
        .map_err(|e| Error::io(&path, e))
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData {
            out,
            seed,
            num_train,
            num_test,
            image_size,
            fault_ratio,
            clutter_level,
            occlusion_prob,
        } => {
            let spec = SyntheticSpec {
                num_train,
                num_test,
                image_size: parse_size(&image_size)?,
                fault_ratio,
                clutter_level,
                occlusion_prob,
                seed,
            };
            generate_synthetic(&spec, &out)?;
            let train = load_dataset(&out, "train")?;
            let test = load_dataset(&out, "test")?;
            let audit_train = audit_dataset(&train);
            let audit_test = audit_dataset(&test);
            std::fs::write(
                out.join("effective_config.json"),
                serde_json::to_string_pretty(&spec)?,
            )
            .map_err(|e| Error::io(out.join("effective_config.json"), e))?;
            write_result(
                &out,
                "gen-data",
                serde_json::json!({ "train": audit_train, "test": audit_test }),
            )?;
            println!(
                "generated {} train / {} test images under {}",
                train.len(),
                test.len(),
                out.display()
            );
            Ok(())
        }

        Command::TrainTeacher { config, data, out, overrides, resume } => {
            let mut cfg = effective_config(config.as_deref(), &overrides)?;
            cfg.data.root = data.to_string_lossy().into_owned();
            write_effective_config(&cfg, &out)?;
            let outcome = train_teacher(&cfg, &data, &out, resume.as_deref())?;
            println!(
                "teacher trained: mCDR {:.4}, checkpoint {}",
                outcome.report.mcdr,
                outcome.checkpoint_path.display()
            );
            write_result(&out, "train-teacher", serde_json::to_value(&outcome)?)
        }

        Command::Distill { config, data, teacher_checkpoint, out, overrides } => {
            let mut cfg = effective_config(config.as_deref(), &overrides)?;
            cfg.data.root = data.to_string_lossy().into_owned();
            write_effective_config(&cfg, &out)?;
            let outcome = train_student(&cfg, &data, &teacher_checkpoint, &out)?;
            println!(
                "student distilled: mCDR {:.4}, checkpoint {}",
                outcome.report.mcdr,
                outcome.checkpoint_path.display()
            );
            write_result(&out, "distill", serde_json::to_value(&outcome)?)
        }

        Command::Eval { checkpoint, data, out, split, benchmark, overrides } => {
            let (mut det, manifest) = load_detector_from_checkpoint(&checkpoint)?;
            let mut cfg: DistillConfig =
                serde_json::from_value(manifest.config["config"].clone())
                    .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
            for ov in &overrides {
                // Re-parse the echoed config with overrides applied.
                let text =
                    toml::to_string(&cfg).map_err(|e| Error::Config(format!("echo: {e}")))?;
                cfg = hsd_core::config::parse_config(&text, std::slice::from_ref(ov))?;
            }
            let samples = load_dataset(&data, &split)?;
            let train = load_dataset(&data, "train")?;
            let stats = hsd_core::data_io::load_or_compute_stats(&data, &train)?;
            let eval = evaluate_detector(&mut det, &samples, &stats, &cfg.data)?;
            let report = eval.report;

            let bench = if benchmark {
                let sample = &samples[0];
                let mut rng = rand_seed();
                let p = hsd_core::data_io::preprocess(
                    sample,
                    false,
                    (cfg.data.image_size[0], cfg.data.image_size[1]),
                    &stats,
                    &mut rng,
                );
                Some(benchmark_inference(
                    || {
                        det.infer(
                            &p.tensor,
                            p.content_size,
                            cfg.data.eval_score_threshold as f32,
                            cfg.data.nms_iou as f32,
                        )
                        .expect("benchmark inference");
                    },
                    2,
                    10,
                ))
            } else {
                None
            };
            let size_bytes = count_parameters(&det.store).model_size_bytes;
            print!("{}", format_report_table(&report, bench.as_ref(), size_bytes));
            write_effective_config(&cfg, &out)?;
            write_result(
                &out,
                "eval",
                serde_json::json!({
                    "split": split,
                    "report": report,
                    "debug_ap50": eval.ap50,
                    "benchmark": bench,
                    "model_size_bytes": size_bytes,
                }),
            )
        }

        Command::Ablate { grid, config, data, out, overrides } => {
            let mut cfg = effective_config(config.as_deref(), &overrides)?;
            cfg.data.root = data.to_string_lossy().into_owned();
            let rows: Vec<AblationRow> = match grid.as_str() {
                "neck" => grid_neck(&cfg),
                "components" => grid_components(&cfg),
                "tau" => grid_tau(&cfg),
                "lambda" => grid_lambda(&cfg),
                other => {
                    return Err(Error::Validation(format!(
                        "--grid must be one of neck/components/tau/lambda, got `{other}`"
                    )))
                }
            };
            write_effective_config(&cfg, &out)?;
            let results = run_ablation(&rows, &data, &out)?;
            for r in &results {
                println!(
                    "{:<28} cdr {:>7.4} mdr {:>7.4} fdr {:>7.4} params {:>9} [{}]",
                    r.label, r.cdr, r.mdr, r.fdr, r.params, r.status
                );
            }
            write_result(&out, "ablate", serde_json::to_value(&results)?)
        }

        Command::PlotLoss { csvs, out } => {
            if csvs.is_empty() {
                return Err(Error::Validation("at least one --csv is required".into()));
            }
            let series: Result<Vec<_>, Error> =
                csvs.iter().map(|p| plot::parse_loss_csv(p)).collect();
            plot::render_loss_plot(&series?, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::InspectModel { checkpoint, out } => {
            let (det, manifest) = load_detector_from_checkpoint(&checkpoint)?;
            let report = count_parameters(&det.store);
            println!(
                "role: {}  epoch: {}  fingerprint: {}...",
                manifest.config["role"].as_str().unwrap_or("?"),
                manifest.epoch,
                &manifest.fingerprint[..12]
            );
            println!("{:<12} {:>12}", "module", "params");
            for (module, count) in &report.per_module_counts {
                println!("{module:<12} {count:>12}");
            }
            println!("{:<12} {:>12}", "total", report.total_params);
            println!(
                "model size: {:.2} MB",
                report.model_size_bytes as f64 / (1024.0 * 1024.0)
            );
            if let Some(out) = out {
                write_result(
                    &out,
                    "inspect-model",
                    serde_json::json!({ "report": report, "epoch": manifest.epoch }),
                )?;
            }
            Ok(())
        }
    }
}

fn rand_seed() -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}
