use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ldn_core::data::{
    gen_spirals_with_radius, load_checkpoint, load_dataset, save_checkpoint, save_dataset, standardize,
    Checkpoint, Dataset,
};
use ldn_core::experiments::{
    derive_seeds, emit_results, emit_summary, measure_speedup, run_depth_scan, run_ntrain_scan,
    run_rotation_scan, run_width_scan, summarize, ExperimentConfig, ExperimentRecord, Format,
};
use ldn_core::inference::{prune, DepthPrior, Heuristic};
use ldn_core::metrics::{evaluate, write_reliability_csv};
use ldn_core::trainer::{train_ddn, train_ldn, ModelKind, TrainedModel};
use ldn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ldn", version, about = "Residual networks that learn a posterior over their own depth")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base seed; repeat r of a scan uses seed + r
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Result file format: csv or json
    #[arg(long, global = true, default_value = "csv", value_parser = parse_format)]
    format: Format,
    /// Cells trained in parallel
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seeds per scan setting
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// JSON experiment config; flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on optimizer iterations
    #[arg(long, global = true)]
    max_iterations: Option<usize>,
    /// Print training progress every N iterations
    #[arg(long, global = true)]
    log_every: Option<usize>,
    /// Equal-width confidence bins for ECE
    #[arg(long, global = true)]
    bins: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a raw train/test spiral pair as CSV
    GenData(DataArgs),
    /// Train one model and save a checkpoint
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// ldn or ddn
        #[arg(long, default_value = "ldn", value_parser = parse_kind)]
        kind: ModelKind,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Raw train CSV; generated from the seed when absent
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// Score a checkpoint on a raw dataset CSV
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// argmax, p95 or expected
        #[arg(long, default_value = "argmax")]
        heuristic: Heuristic,
        /// Marginalize over every depth instead of pruning
        #[arg(long)]
        full: bool,
    },
    /// LDNs over max depths plus the fixed-depth baseline grid
    ScanDepth {
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        ddn_depths: Option<Vec<usize>>,
    },
    /// LDNs over layer widths
    ScanWidth {
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
    },
    /// LDNs over spiral rotations
    ScanRotation {
        #[arg(long, value_delimiter = ',')]
        rotations: Option<Vec<f64>>,
    },
    /// LDNs over train-set sizes
    ScanN {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Time the pruned network against the full one
    Speedup {
        #[arg(long)]
        model: PathBuf,
        /// Raw dataset CSV to time on
        #[arg(long)]
        data: PathBuf,
        /// Cutoff depth; the argmax heuristic when absent
        #[arg(long)]
        d_opt: Option<usize>,
        #[arg(long)]
        passes: Option<usize>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    rotation: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    match s {
        "ldn" => Ok(ModelKind::Ldn),
        "ddn" => Ok(ModelKind::Ddn),
        other => Err(format!("unknown model kind {other:?}, expected ldn or ddn")),
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(r) = g.repeats {
        cfg.repeats = r;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(m) = g.max_iterations {
        cfg.base.train.max_iterations = m;
    }
    if let Some(b) = g.bins {
        cfg.base.ece_bins = b;
    }
    if let Some(l) = g.log_every {
        cfg.base.train.log_every = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_data_args(cfg: &mut ExperimentConfig, a: &DataArgs) {
    let d = &mut cfg.base.data;
    if let Some(v) = a.rotation {
        d.rotation_deg = v;
    }
    if let Some(v) = a.sigma {
        d.sigma = v;
    }
    if let Some(v) = a.radius {
        d.radius = v;
    }
    if let Some(v) = a.n_train {
        d.n_train = v;
    }
    if let Some(v) = a.n_test {
        d.n_test = v;
    }
}

fn raw_pair(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let seeds = derive_seeds(cfg.seed);
    let d = &cfg.base.data;
    let train = gen_spirals_with_radius(d.n_train, d.rotation_deg, d.sigma, d.radius, seeds.train_data)?;
    let test = gen_spirals_with_radius(d.n_test, d.rotation_deg, d.sigma, d.radius, seeds.test_data)?;
    Ok((train, test))
}

/// Applies the checkpoint's standardization unless the data already carry one.
fn prepare(ckpt: &Checkpoint, data: Dataset) -> Dataset {
    match (&ckpt.standardization, &data.meta.standardization) {
        (Some(s), None) => {
            let mut meta = data.meta.clone();
            meta.standardization = Some(s.clone());
            Dataset {
                inputs: s.apply(&data.inputs),
                labels: data.labels,
                meta,
            }
        }
        _ => data,
    }
}

fn load_model(path: &Path) -> Result<(Checkpoint, TrainedModel)> {
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

fn write_scan(g: &Global, name: &str, records: &[ExperimentRecord]) -> Result<()> {
    let ext = g.format.extension();
    let path = g.out.join(format!("{name}.{ext}"));
    emit_results(records, &path, g.format)?;
    let summary = summarize(records);
    let summary_path = g.out.join(format!("{name}_summary.{ext}"));
    emit_summary(&summary, &summary_path, g.format)?;
    for s in &summary {
        let fmt = |m: Option<ldn_core::experiments::MeanStd>| {
            m.map(|m| format!("{:.4} ± {:.4}", m.mean, m.std)).unwrap_or_else(|| "n/a".into())
        };
        println!(
            "{:?} {}={} runs={} excluded={} d_opt={} pruned_ll={} full_ll={}",
            s.kind,
            s.parameter,
            s.value,
            s.runs,
            s.excluded,
            fmt(s.d_opt_argmax),
            fmt(s.pruned_ll),
            fmt(s.full_ll)
        );
    }
    println!("wrote {} and {}", path.display(), summary_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = load_config(g)?;
    fs::create_dir_all(&g.out)?;
    match cli.command {
        Command::GenData(args) => {
            apply_data_args(&mut cfg, &args);
            let (train, test) = raw_pair(&cfg)?;
            let (tp, sp) = (g.out.join("train.csv"), g.out.join("test.csv"));
            save_dataset(&train, &tp)?;
            save_dataset(&test, &sp)?;
            println!("wrote {} ({} points) and {} ({} points)", tp.display(), train.len(), sp.display(), test.len());
        }
        Command::Train {
            data,
            kind,
            max_depth,
            width,
            train_data,
        } => {
            apply_data_args(&mut cfg, &data);
            if let Some(d) = max_depth {
                cfg.base.max_depth = d;
            }
            if let Some(w) = width {
                cfg.base.width = w;
            }
            cfg.base.validate()?;
            let raw = match train_data {
                Some(path) => load_dataset(&path)?,
                None => raw_pair(&cfg)?.0,
            };
            let (train, _, standardization) = standardize(&raw, &[])?;
            let mut tc = cfg.base.train.clone();
            tc.seed = derive_seeds(cfg.seed).init;
            let net = cfg.base.network();
            let model = match kind {
                ModelKind::Ldn => {
                    let prior = DepthPrior::new(cfg.base.max_depth, cfg.base.gamma)?;
                    train_ldn(&train, net, &prior, &tc)?
                }
                ModelKind::Ddn => train_ddn(&train, cfg.base.max_depth, net, &tc)?,
            };
            let path = g.out.join("model.json");
            save_checkpoint(&Checkpoint::from_model(&model, Some(&standardization)), &path)?;
            let h = &model.history;
            print!(
                "{:?} trained: {} iterations, best objective {:.6} at iteration {}",
                kind, h.iterations, h.best_objective, h.best_iteration
            );
            if let Some(post) = &model.posterior {
                print!(", argmax depth {}", prune(post.probs(), Heuristic::Argmax).d_opt);
            }
            println!();
            println!("wrote {}", path.display());
        }
        Command::Eval {
            model,
            data,
            heuristic,
            full,
        } => {
            let (ckpt, model) = load_model(&model)?;
            let data = prepare(&ckpt, load_dataset(&data)?);
            let cutoff = if full { None } else { Some(model.prune(heuristic).d_opt) };
            let probs = model.predict(&data.inputs, cutoff)?;
            let report = evaluate(&probs, &data.labels, cfg.base.ece_bins)?;
            let path = g.out.join("eval.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            let rel = g.out.join("reliability.csv");
            write_reliability_csv(&report.bins, fs::File::create(&rel)?)?;
            let depth = cutoff.map(|d| d.to_string()).unwrap_or_else(|| "all".into());
            println!(
                "depths 0..={depth}: log-likelihood {:.6}, error {:.4}, ECE {:.4}",
                report.log_likelihood, report.error, report.ece
            );
            println!("wrote {} and {}", path.display(), rel.display());
        }
        Command::ScanDepth { depths, ddn_depths } => {
            if let Some(d) = depths {
                cfg.depths = d;
            }
            if let Some(d) = ddn_depths {
                cfg.ddn_depths = d;
            }
            write_scan(g, "scan_depth", &run_depth_scan(&cfg)?)?;
        }
        Command::ScanWidth { widths } => {
            if let Some(w) = widths {
                cfg.widths = w;
            }
            write_scan(g, "scan_width", &run_width_scan(&cfg)?)?;
        }
        Command::ScanRotation { rotations } => {
            if let Some(r) = rotations {
                cfg.rotations = r;
            }
            write_scan(g, "scan_rotation", &run_rotation_scan(&cfg)?)?;
        }
        Command::ScanN { sizes } => {
            if let Some(n) = sizes {
                cfg.n_trains = n;
            }
            write_scan(g, "scan_n", &run_ntrain_scan(&cfg)?)?;
        }
        Command::Speedup {
            model,
            data,
            d_opt,
            passes,
        } => {
            let (ckpt, model) = load_model(&model)?;
            let data = prepare(&ckpt, load_dataset(&data)?);
            let d = d_opt.unwrap_or_else(|| model.prune(Heuristic::Argmax).d_opt);
            let rec = measure_speedup(&model, d, &data.inputs, passes.unwrap_or(cfg.speedup_passes))?;
            if let Some(w) = &rec.warning {
                eprintln!("warning: {w}");
            }
            let path = g.out.join("speedup.json");
            fs::write(&path, serde_json::to_string_pretty(&rec)?)?;
            println!(
                "depth {} of {}: {:.3e}s vs {:.3e}s, speedup {:.1}%",
                rec.d_opt,
                rec.max_depth,
                rec.truncated_median_seconds,
                rec.full_median_seconds,
                100.0 * rec.speedup
            );
            println!("wrote {}", path.display());
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
