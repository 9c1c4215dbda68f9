//! Command-line surface: train, eval, infer, params, metrics, bench.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ban::config::RunConfig;
use ban::data::Split;
use ban::error::{Error, Result};
use ban::infer;
use ban::metrics::{bcd_metrics, scd_metrics, ConfusionCounts, MetricReport};
use ban::model::count_params;
use ban::raster::{Mask, Raster};
use ban::train::{evaluate, train_loop};

#[derive(Parser)]
#[command(name = "ban", version, about = "Bi-temporal adapter network for remote-sensing change detection")]
struct Cli {
    /// Override the run seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dump per-stage bridging traces next to the produced outputs.
    #[arg(long, global = true)]
    trace_bridges: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to evaluate: train, val or test.
        #[arg(long, default_value = "val")]
        split: String,
        /// Report file; defaults to stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a change mask for one bi-temporal pair.
    Infer {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// The two co-registered input images, first then second phase.
        #[arg(long, num_args = 2, value_names = ["T1", "T2"])]
        pair: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sliding window size; defaults to the full image.
        #[arg(long)]
        window: Option<usize>,
        /// Window stride; defaults to the window size.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Report learnable/frozen parameter counts.
    Params {
        config: PathBuf,
    },
    /// Compute metrics from prediction and label mask directories.
    Metrics {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        label_dir: PathBuf,
        /// Directories hold change/, sem_t1/, sem_t2/ subfolders.
        #[arg(long)]
        scd: bool,
        /// Semantic class count, required with --scd.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark sliding-window inference throughput.
    Bench {
        config: PathBuf,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value_t = 3)]
        n_images: usize,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn split_of(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::config(format!(
            "unknown split {other}; expected train, val or test"
        ))),
    }
}

fn list_masks(dir: &PathBuf) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.push((name.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn accumulate_mask_dir(
    counts: &mut ConfusionCounts,
    pred_dir: &PathBuf,
    label_dir: &PathBuf,
    seg: bool,
) -> Result<()> {
    let preds = list_masks(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::data(format!("no masks in {}", pred_dir.display())));
    }
    for (name, pred_path) in preds {
        let label_path = label_dir.join(&name);
        if !label_path.is_file() {
            return Err(Error::data(format!("no label for prediction {name}")));
        }
        let pred = Mask::open(&pred_path)?;
        let label = Mask::open(&label_path)?;
        if seg {
            counts.update_seg(&pred, &label)?;
        } else {
            counts.update(&pred, &label)?;
        }
    }
    Ok(())
}

fn emit_report(report: &MetricReport, out: Option<&PathBuf>) -> Result<()> {
    print!("{}", report.to_table());
    if let Some(path) = out {
        std::fs::write(path, report.to_text()).map_err(|e| Error::io(path, e))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let model = cfg.build_model(cli.seed)?;
            let report = count_params(&model);
            println!("{}", report.render());
            let (train, val, _) = cfg.load_sources()?;
            let mut settings = cfg.train_settings(cli.seed);
            if let Some(dir) = &settings.work_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            settings.log_every = 10;
            let outcome = train_loop(&model, &train, val.as_ref(), &settings)?;
            if let Some(best) = outcome.best_metric {
                println!(
                    "best validation metric {:.4} at iteration {}",
                    best,
                    outcome.best_iter.unwrap_or(0)
                );
            }
            if let Some(dir) = &settings.work_dir {
                println!("checkpoints in {}", dir.display());
            }
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let model = cfg.build_model(cli.seed)?;
            let container = ban::checkpoint::Container::read(&checkpoint)?;
            for extra in model.load_learnable(&container)? {
                eprintln!("warning: checkpoint has unused key {extra}");
            }
            let wanted = split_of(&split)?;
            let (train, val, test) = cfg.load_sources()?;
            let source = match wanted {
                Split::Train => Some(train),
                Split::Val => val,
                Split::Test => test,
            }
            .ok_or_else(|| Error::data(format!("no records in split {split}")))?;
            if cli.trace_bridges {
                let sample = source.fetch(0)?;
                let (_, traces) = model.forward_traced(&sample.t1, &sample.t2)?;
                let path = out
                    .clone()
                    .map(|p| p.with_extension("traces.ckpt"))
                    .unwrap_or_else(|| PathBuf::from("traces.ckpt"));
                traces.to_container().write(&path)?;
                println!("bridge traces written to {}", path.display());
            }
            let (_, report) = evaluate(&model, &source, Some(cfg.data.crop_size), None)?;
            emit_report(&report, out.as_ref())
        }
        Command::Infer {
            config,
            checkpoint,
            pair,
            out,
            window,
            stride,
        } => {
            let cfg = RunConfig::load(&config)?;
            let model = cfg.build_model(cli.seed)?;
            let container = ban::checkpoint::Container::read(&checkpoint)?;
            for extra in model.load_learnable(&container)? {
                eprintln!("warning: checkpoint has unused key {extra}");
            }
            let x1 = Raster::open(&pair[0])?;
            let x2 = Raster::open(&pair[1])?;
            let win = window
                .unwrap_or_else(|| x1.height().min(x1.width()))
                .min(x1.height())
                .min(x1.width());
            let st = stride.unwrap_or(win);
            let mask = infer::sliding_window_infer(&model, &x1, &x2, win, st)?;
            mask.save(&out)?;
            if cli.trace_bridges {
                let (_, traces) = model.forward_traced(&x1, &x2)?;
                let path = out.with_extension("traces.ckpt");
                traces.to_container().write(&path)?;
                println!("bridge traces written to {}", path.display());
            }
            println!("mask written to {}", out.display());
            Ok(())
        }
        Command::Params { config } => {
            let cfg = RunConfig::load(&config)?;
            let model = cfg.build_model(cli.seed)?;
            print!("{}", count_params(&model).render());
            Ok(())
        }
        Command::Metrics {
            pred_dir,
            label_dir,
            scd,
            classes,
            out,
        } => {
            let report = if scd {
                let k = classes.ok_or_else(|| {
                    Error::config("--scd needs --classes with the semantic class count")
                })?;
                let mut counts = ConfusionCounts::new_scd(k);
                accumulate_mask_dir(
                    &mut counts,
                    &pred_dir.join("change"),
                    &label_dir.join("change"),
                    false,
                )?;
                for sub in ["sem_t1", "sem_t2"] {
                    accumulate_mask_dir(
                        &mut counts,
                        &pred_dir.join(sub),
                        &label_dir.join(sub),
                        true,
                    )?;
                }
                MetricReport::from_scd(&bcd_metrics(&counts)?, &scd_metrics(&counts)?)
            } else {
                let mut counts = ConfusionCounts::new_bcd();
                accumulate_mask_dir(&mut counts, &pred_dir, &label_dir, false)?;
                MetricReport::from_bcd(&bcd_metrics(&counts)?)
            };
            emit_report(&report, out.as_ref())
        }
        Command::Bench {
            config,
            resolution,
            n_images,
            window,
            stride,
            checkpoint,
        } => {
            let cfg = RunConfig::load(&config)?;
            let model = cfg.build_model(cli.seed)?;
            if let Some(ck) = checkpoint {
                let container = ban::checkpoint::Container::read(&ck)?;
                model.load_learnable(&container)?;
            }
            let win = window.unwrap_or(cfg.data.crop_size).min(resolution);
            let st = stride.unwrap_or_else(|| win.div_ceil(2));
            let fps = infer::fps_benchmark(
                &model,
                resolution,
                n_images,
                win,
                st.min(win),
                cli.seed.unwrap_or(cfg.seed),
            )?;
            println!("{resolution}x{resolution} window {win} stride {st}: {fps:.3} img/s");
            Ok(())
        }
    }
}
