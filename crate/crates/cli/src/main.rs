use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use enseg::config::ExperimentConfig;
use enseg::data::{
    compute_channel_stats, load_dataset, load_predefined_split, write_dataset, ClassEntry, ClassTable, DatasetSplit,
    Sample, SplitName,
};
use enseg::evaluation::{build_results_table, evaluate_splits, export_overlays, Predictor, TableMetric};
use enseg::metrics::MetricsReport;
use enseg::synthetic::{generate_shapes, shapes_classes, ShapesConfig};
use enseg::training::{train, train_ensemble_members};
use enseg::{build_model, EnsegError, EnsembleModel, FusionSpec, SegModel};

type Scalar = f32;

#[derive(Parser)]
#[command(name = "enseg", version, about = "Train, fuse and evaluate segmentation ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-channel mean and std of every image under a dataset root.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the model or every ensemble member described by a config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate one checkpoint.
    Eval {
        #[command(flatten)]
        target: EvalTarget,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fuse several checkpoints and evaluate the ensemble.
    EnsembleEval {
        #[command(flatten)]
        target: EvalTarget,
        #[arg(long, num_args = 2.., required = true)]
        checkpoints: Vec<PathBuf>,
        /// One positive weight per checkpoint.
        #[arg(long, num_args = 1..)]
        weights: Option<Vec<f64>>,
        /// Fuse by plain sum renormalized by member count.
        #[arg(long)]
        sum: bool,
    },
    /// Write input | truth | prediction composites.
    ExportOverlays {
        #[arg(long)]
        config: PathBuf,
        /// One checkpoint, or several to fuse with equal weights.
        #[arg(long = "checkpoint", num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Generate a shapes dataset with a class table.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct EvalTarget {
    #[arg(long)]
    config: PathBuf,
    /// `train`, `valid`, `test` or `all`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, status) = match err.downcast_ref::<EnsegError>() {
                Some(e) => (e.code(), if e.is_input_error() { 2 } else { 3 }),
                None => ("E_RUNTIME", 3),
            };
            let message = format!("{err:#}");
            eprintln!("{}", json!({ "error": code, "message": message }));
            ExitCode::from(status)
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Stats { data } => cmd_stats(&data),
        Command::Train { config } => cmd_train(&config),
        Command::Eval { target, checkpoint } => {
            let cfg = ExperimentConfig::load(&target.config)?;
            let model = load_member(&cfg, &checkpoint)?;
            report_and_write(&cfg, &target, &model, None)
        }
        Command::EnsembleEval {
            target,
            checkpoints,
            weights,
            sum,
        } => {
            let cfg = ExperimentConfig::load(&target.config)?;
            let fusion = match (sum, weights) {
                (true, Some(_)) => bail!(EnsegError::Config("--weights and --sum are exclusive".into())),
                (true, None) => FusionSpec::elementwise_sum(),
                (false, Some(w)) => FusionSpec::weighted(w),
                (false, None) => cfg.fusion_for(checkpoints.len()),
            };
            let members = checkpoints
                .iter()
                .enumerate()
                .map(|(i, p)| SegModel::<Scalar>::load_any(p).map_err(|e| member_err(e, i)))
                .collect::<Result<Vec<_>, _>>()?;
            let ensemble = EnsembleModel::new(members, fusion)?;
            report_and_write(&cfg, &target, &ensemble, Some(ensemble.variant_name()))
        }
        Command::ExportOverlays {
            config,
            checkpoints,
            out,
            split,
            limit,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (classes, data) = cfg.load_split()?;
            let names = parse_splits(&split)?;
            let mut samples: Vec<Sample> = names.iter().flat_map(|n| data.part(*n).to_vec()).collect();
            if let Some(n) = limit {
                samples.truncate(n);
            }
            let written = if checkpoints.len() == 1 {
                let model = load_member(&cfg, &checkpoints[0])?;
                export_overlays(&model, &samples[..], &classes, &cfg.preprocess, &out)?
            } else {
                let members = checkpoints
                    .iter()
                    .map(|p| SegModel::<Scalar>::load_any(p))
                    .collect::<Result<Vec<_>, _>>()?;
                let ensemble = EnsembleModel::new(members, cfg.fusion_for(checkpoints.len()))?;
                export_overlays(&ensemble, &samples[..], &classes, &cfg.preprocess, &out)?
            };
            println!("{}", json!({ "written": written }));
            Ok(())
        }
        Command::MakeSynthetic {
            out,
            count,
            width,
            height,
            seed,
        } => {
            let cfg = ShapesConfig {
                count,
                width,
                height,
                seed,
                ..ShapesConfig::default()
            };
            let samples = generate_shapes(&cfg)?;
            let classes = shapes_classes();
            write_dataset(&out, &samples, &classes)?;
            let table = out.join("classes.json");
            fs::write(&table, serde_json::to_string_pretty(&classes)?)
                .with_context(|| format!("writing {}", table.display()))?;
            println!("{}", json!({ "root": out, "samples": samples.len(), "classes": table }));
            Ok(())
        }
    }
}

fn member_err(e: EnsegError, index: usize) -> EnsegError {
    EnsegError::Member {
        index,
        source: Box::new(e),
    }
}

/// A 256-entry table that accepts any 8-bit mask, for commands that only
/// read images.
fn permissive_classes() -> ClassTable {
    let entries = (0..256)
        .map(|id| ClassEntry {
            id,
            name: if id == 0 { "background".into() } else { format!("class_{id}") },
            color: [id as u8; 3],
        })
        .collect();
    ClassTable::new(entries).expect("valid table")
}

fn cmd_stats(root: &Path) -> anyhow::Result<()> {
    if !root.is_dir() {
        bail!(EnsegError::DatasetNotFound(root.to_path_buf()));
    }
    let classes = match root.join("classes.json") {
        p if p.is_file() => ClassTable::load(&p)?,
        _ => permissive_classes(),
    };
    let samples = if root.join("images").is_dir() {
        load_dataset(root, &classes)?
    } else {
        let DatasetSplit { train, valid, test } = load_predefined_split(root, &classes)?;
        [train, valid, test].concat()
    };
    let stats = compute_channel_stats(&samples)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| EnsegError::io(path, e))?;
    Ok(())
}

fn cmd_train(config: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let (_, split) = cfg.load_split()?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| EnsegError::io(&run_dir, e))?;
    write_json(&run_dir.join("config.resolved.json"), &cfg)?;
    let specs = cfg.member_specs();
    let (train_set, valid_set) = (&split.train[..], &split.valid[..]);
    let summary = if let [spec] = specs.as_slice() {
        let model = build_model::<Scalar>(spec, cfg.train.seed)?;
        let out = train(model, train_set, valid_set, &cfg.train, &cfg.preprocess)?;
        let best = &out.history[out.best_epoch - 1];
        json!({
            "run_dir": run_dir,
            "model": spec.label(),
            "best_epoch": out.best_epoch,
            "best_valid_iou": best.valid_iou,
            "checkpoint": run_dir.join("best.ckpt"),
        })
    } else {
        let outs = train_ensemble_members::<Scalar, _, _>(&specs, train_set, valid_set, &cfg.train, &cfg.preprocess)?;
        let members: Vec<_> = specs
            .iter()
            .zip(&outs)
            .map(|(s, o)| {
                let dir = o.run_dir.clone().unwrap_or_default();
                json!({
                    "model": s.label(),
                    "best_epoch": o.best_epoch,
                    "best_valid_iou": o.history[o.best_epoch - 1].valid_iou,
                    "checkpoint": dir.join("best.ckpt"),
                })
            })
            .collect();
        json!({ "run_dir": run_dir, "members": members })
    };
    println!("{summary}");
    Ok(())
}

fn load_member(cfg: &ExperimentConfig, checkpoint: &Path) -> anyhow::Result<SegModel<Scalar>> {
    Ok(match &cfg.model {
        Some(spec) => SegModel::load(checkpoint, spec)?,
        None => SegModel::load_any(checkpoint)?,
    })
}

fn parse_splits(s: &str) -> anyhow::Result<Vec<SplitName>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(SplitName::ALL.to_vec());
    }
    s.split(',')
        .map(|p| p.trim().parse::<SplitName>().map_err(Into::into))
        .collect()
}

fn report_and_write<P: Predictor<Scalar>>(
    cfg: &ExperimentConfig,
    target: &EvalTarget,
    predictor: &P,
    row_name: Option<&str>,
) -> anyhow::Result<()> {
    let names = parse_splits(&target.split)?;
    let (classes, data) = cfg.load_split()?;
    let parts: Vec<(SplitName, &[Sample])> = names.iter().map(|n| (*n, data.part(*n))).collect();
    let report: MetricsReport = evaluate_splits(predictor, &parts, classes.names(), &cfg.preprocess, &cfg.eval)?;

    let out_dir = target.out.clone().unwrap_or_else(|| cfg.run_dir());
    fs::create_dir_all(&out_dir).map_err(|e| EnsegError::io(&out_dir, e))?;
    let stem = report.model.replace(['/', '\\'], "_");
    write_json(&out_dir.join(format!("metrics_{stem}.json")), &report)?;
    let text_path = out_dir.join(format!("metrics_{stem}.txt"));
    fs::write(&text_path, report.to_string()).map_err(|e| EnsegError::io(&text_path, e))?;

    let row = row_name.map(str::to_string).unwrap_or_else(|| report.model.clone());
    let mut tables = Vec::new();
    for metric in [TableMetric::Iou, TableMetric::DiceLoss, TableMetric::F1] {
        let table = build_results_table(&[(row.clone(), &report)], metric)?;
        let name = serde_json::to_value(metric)?.as_str().unwrap_or("metric").to_string();
        write_json(&out_dir.join(format!("table_{name}_{stem}.json")), &table)?;
        let p = out_dir.join(format!("table_{name}_{stem}.txt"));
        fs::write(&p, table.to_text()).map_err(|e| EnsegError::io(&p, e))?;
        tables.push(table);
    }
    print!("{report}");
    for t in &tables {
        print!("\n{}\n{}", t.title(), t.to_text());
    }
    Ok(())
}
