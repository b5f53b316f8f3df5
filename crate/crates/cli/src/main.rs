use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use rigidreg::data::{gen_synthetic, read_dataset, write_dataset, GenConfig};
use rigidreg::harness::{
    cdf_csv, evaluate, load_checkpoint, parse_poses_csv, poses_csv, register_pair, split_validation, train,
    uniform_grid, EpochLog, EvalOptions, EvalReport, Method, RegisterMethod, RegisterOptions, TrainConfig,
};

/// Rigid registration from 3D point correspondences.
#[derive(Parser, Debug)]
#[command(name = "rigidreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML file with optional [gen], [train] and [eval] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the active table.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic correspondence dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pairs: Option<usize>,
        /// Correspondences per pair.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network or cascade; writes the checkpoint and a per-epoch CSV log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training pairs.
        #[arg(long)]
        dataset: PathBuf,
        /// Validation pairs; split from the training set when absent.
        #[arg(long)]
        val_dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch log CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate methods against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of regnet, regnet+icp, regnet+umeyama, ransac, ransac+umeyama, icp.
        #[arg(long, value_delimiter = ',')]
        method: Vec<Method>,
        /// Summary CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-pair error CSV (input for `cdf`).
        #[arg(long)]
        per_pair: Option<PathBuf>,
    },
    /// Register one pair and print R (row-major) and t.
    Register {
        #[command(flatten)]
        common: Common,
        /// Dataset file holding the pair.
        #[arg(long)]
        dataset: PathBuf,
        /// Record to register.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// An evaluation method, or procrustes/umeyama driven by the stored labels.
        #[arg(long)]
        method: RegisterMethod,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Writes the per-correspondence weights, one per line.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compose pairwise transforms into a trajectory in the first scan's frame.
    Chain {
        /// CSV of pairwise transforms: r00..r22,tx,ty,tz per row (optional leading index).
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cumulative distribution of rotation errors.
    Cdf {
        /// Per-pair CSV from `eval --per-pair`, or one error in degrees per line.
        input: PathBuf,
        /// Method column to read from a per-pair CSV.
        #[arg(long)]
        method: Option<Method>,
        /// Grid of thresholds 0, step, ..., max added to the distinct errors.
        #[arg(long, default_value_t = 10.0)]
        grid_max: f64,
        #[arg(long, default_value_t = 0.5)]
        grid_step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    gen: GenConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    eval: EvalOptions,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn log_csv(log: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy,val_rot_mean_deg,val_trans_mean_m\n");
    for e in log {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            opt(e.val_loss),
            opt(e.val_accuracy),
            opt(e.val_rot_mean),
            opt(e.val_trans_mean)
        )
        .unwrap();
    }
    s
}

fn per_pair_csv(report: &EvalReport, ids: &[u64]) -> String {
    let mut s = String::from("pair_id,method,rot_deg,trans_m\n");
    for row in &report.rows {
        for ((id, r), t) in ids.iter().zip(&row.rot_errors).zip(&row.trans_errors) {
            writeln!(s, "{id},{},{r},{t}", row.method).unwrap();
        }
    }
    s
}

fn read_errors(path: &Path, method: Option<Method>) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().next().unwrap_or_default();
    if first.starts_with("pair_id,") {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut out = Vec::new();
        let mut methods = std::collections::BTreeSet::new();
        for rec in reader.records() {
            let rec = rec?;
            let m: Method = rec[1].parse()?;
            methods.insert(m);
            if method.is_none_or(|want| want == m) {
                out.push(rec[2].parse()?);
            }
        }
        if method.is_none() && methods.len() > 1 {
            bail!("{} holds several methods; pick one with --method", path.display());
        }
        Ok(out)
    } else {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<f64>().with_context(|| format!("bad error value '{l}'")))
            .collect()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, pairs, n, out } => {
            let mut cfg = load_config(common.config.as_deref())?.gen;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.pairs = pairs.unwrap_or(cfg.pairs);
            cfg.n = n.unwrap_or(cfg.n);
            let sets = gen_synthetic(&cfg)?;
            write_dataset(&out, &sets)?;
            eprintln!("wrote {} pairs of {} correspondences to {}", sets.len(), cfg.n, out.display());
        }
        Command::Train {
            common,
            dataset,
            val_dataset,
            epochs,
            checkpoint,
            out,
        } => {
            let mut cfg = load_config(common.config.as_deref())?.train;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.checkpoint = Some(checkpoint.clone());
            let sets = read_dataset(&dataset)?;
            let (train_set, val_set) = match val_dataset {
                Some(p) => (sets, read_dataset(p)?),
                None => split_validation(&sets, cfg.validation_fraction, cfg.seed),
            };
            eprintln!("training on {} pairs, validating on {}", train_set.len(), val_set.len());
            let outcome = train(&cfg, &train_set, &val_set, |e| {
                eprintln!(
                    "epoch {:>3}  train {:.5}  val {}  acc {}  rot {}",
                    e.epoch,
                    e.train_loss,
                    e.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
                    e.val_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
                    e.val_rot_mean.map_or("-".into(), |v| format!("{v:.3}")),
                );
            })?;
            eprintln!("best epoch {}; checkpoint {}", outcome.best_epoch, checkpoint.display());
            if let Some(out) = out {
                emit(Some(&out), &log_csv(&outcome.log))?;
            }
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            method,
            out,
            per_pair,
        } => {
            let mut opts = load_config(common.config.as_deref())?.eval;
            opts.ransac_seed = common.seed.unwrap_or(opts.ransac_seed);
            let ckpt = checkpoint.map(load_checkpoint).transpose()?;
            if !method.is_empty() {
                opts.methods = method;
            } else if ckpt.is_none() {
                opts.methods.retain(|m| !m.uses_network());
            }
            let sets = read_dataset(&dataset)?;
            let report = evaluate(ckpt.as_ref(), &sets, &opts)?;
            emit(out.as_deref(), &report.to_csv())?;
            if let Some(p) = per_pair {
                let ids: Vec<u64> = sets.iter().map(|s| s.pair_id).collect();
                emit(Some(&p), &per_pair_csv(&report, &ids))?;
            }
        }
        Command::Register {
            common,
            dataset,
            index,
            method,
            checkpoint,
            out,
        } => {
            let sets = read_dataset(&dataset)?;
            let pair = sets
                .get(index)
                .with_context(|| format!("{} has {} records; no index {index}", dataset.display(), sets.len()))?;
            let ckpt = checkpoint.map(load_checkpoint).transpose()?;
            let eval = load_config(common.config.as_deref())?.eval;
            let opts = RegisterOptions {
                ransac_iters: eval.ransac_iters,
                ransac_threshold: eval.ransac_threshold,
                seed: common.seed.unwrap_or(eval.ransac_seed),
                icp_iters: eval.icp_iters,
                icp_tol: eval.icp_tol,
            };
            let res = register_pair(pair, method, ckpt.as_ref(), &opts)?;
            let v = res.transform.to_row_major();
            let join = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            println!("R {}", join(&v[..9]));
            println!("t {}", join(&v[9..]));
            if let Some(k) = res.inliers {
                println!("inliers {k}");
            }
            if let Some(k) = res.icp_iterations {
                println!("icp_iterations {k}");
            }
            if let Some(r) = res.mean_residual {
                println!("mean_residual {r}");
            }
            if let Some(gt) = pair.gt {
                println!("rot_error_deg {}", rigidreg::geom3d::rot_error(&res.transform.rotation, &gt.rotation));
                println!(
                    "trans_error_m {}",
                    rigidreg::geom3d::trans_error(&res.transform.translation, &gt.translation)
                );
            }
            if let Some(out) = out {
                let w = res
                    .weights
                    .with_context(|| "this method produces no weights".to_string())?;
                let text: String = w.iter().map(|x| format!("{x}\n")).collect();
                emit(Some(&out), &text)?;
            }
        }
        Command::Chain { input, out } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let pairwise = parse_poses_csv(&text)?;
            emit(out.as_deref(), &poses_csv(&rigidreg::geom3d::chain(&pairwise)?))?;
        }
        Command::Cdf {
            input,
            method,
            grid_max,
            grid_step,
            out,
        } => {
            let errors = read_errors(&input, method)?;
            emit(out.as_deref(), &cdf_csv(&errors, &uniform_grid(grid_max, grid_step))?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("RIGIDREG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
