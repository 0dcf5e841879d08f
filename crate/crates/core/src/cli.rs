//! Command-line surface. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code: 0 on success, 1 on a runtime error,
//! 2 on a usage error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::adaptation::LodaModel;
use crate::config::{Config, Mode};
use crate::data::synthetic::generate_dataset;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::spectrum::{compare_profiles, layer_maps};
use crate::train::{self, EvalReport, SplitPlan};

/// File names written by `train --out DIR`.
pub const LOG_FILE: &str = "epoch_log.csv";
pub const WEIGHTS_FILE: &str = "weights.lodaw";
pub const CONFIG_FILE: &str = "config.toml";

const MODES: [&str; 4] = ["loda", "linear_probe", "full_finetune", "extractor_only"];

#[derive(Debug, Parser)]
#[command(name = "loda", version, about = "Local-distortion injection into a frozen ViT for image quality assessment")]
pub struct Cli {
    /// TOML config file; missing keys keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (PPM images and manifest.csv).
    GenData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model; writes the epoch log, the weights and the config.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Held-out manifest evaluated after training.
        #[arg(long, value_name = "MANIFEST")]
        test: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate saved weights, or run the repeated-split protocol.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Evaluate these weights on the whole dataset instead of training.
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        /// Write per-split results as CSV.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Train on one dataset and evaluate on another without adaptation.
    CrossEval {
        /// Training manifest (default: synthetic set from --data-seed).
        #[arg(long, value_name = "MANIFEST")]
        train: Option<PathBuf>,
        /// Test manifest (default: synthetic set from --data-seed + 1).
        #[arg(long, value_name = "MANIFEST")]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sweep one adapter hyperparameter through the split protocol.
    Ablate {
        #[arg(long, value_enum)]
        sweep: Sweep,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-difference check of every op and of the full model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Compare layer-wise feature spectra of the plain ViT and a LoDa model.
    Fourier {
        #[command(flatten)]
        data: DataArgs,
        /// LoDa weights (default: a fresh model, identical to the ViT at init).
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Plot data CSV.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Print trainable and total parameter counts.
    Params {
        #[arg(long, value_parser = MODES)]
        mode: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sweep {
    Latent,
    Heads,
    Interactions,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset manifest (default: in-memory synthetic set).
    #[arg(long, value_name = "MANIFEST")]
    data: Option<PathBuf>,
    /// Seed of the in-memory synthetic set.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, value_parser = MODES)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(m) = &self.mode {
            out.push(format!("train.mode=\"{m}\""));
        }
        if let Some(s) = self.seed {
            out.push(format!("train.seed={s}"));
        }
        if let Some(e) = self.epochs {
            out.push(format!("train.epochs={e}"));
        }
        out
    }
}

fn load_data(args: &DataArgs, cfg: &Config) -> Result<Dataset> {
    match &args.data {
        Some(path) => Dataset::from_manifest(path),
        None => Dataset::synthetic(&cfg.data, args.data_seed),
    }
}

fn load_config(cli: &Cli, extra: Vec<String>) -> Result<Config> {
    let mut overrides = cli.set.clone();
    overrides.extend(extra);
    Config::load(cli.config.as_deref(), &overrides)
}

/// Parse `args` (including the program name) and run. Normal output goes to
/// `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Input(format!("writing output: {e}"))
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::GenData { out: dir, seed } => {
            let cfg = load_config(cli, Vec::new())?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let m = generate_dataset(&cfg.data, *seed, dir)?;
            writeln!(out, "wrote {} images and {}", m.rows.len(), dir.join("manifest.csv").display()).map_err(io_err)?;
        }
        Command::Train { data, test, run, out: dir } => {
            let cfg = load_config(cli, run.overrides())?;
            let train_set = load_data(data, &cfg)?;
            let test_set = test.as_deref().map(Dataset::from_manifest).transpose()?;
            let mut model = LodaModel::new(&cfg, cfg.train.mode, cfg.train.seed)?;
            let outcome = train::train(&mut model, &train_set, test_set.as_ref(), &cfg.train)?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            train::save_log(&outcome.log, &dir.join(LOG_FILE))?;
            model.save(&dir.join(WEIGHTS_FILE))?;
            let cfg_path = dir.join(CONFIG_FILE);
            std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
            let last = outcome.log.last().expect("at least one epoch");
            writeln!(out, "mode {} epochs {} steps {} final loss {:.6}", cfg.train.mode, last.epoch, last.step, last.loss)
                .map_err(io_err)?;
            if let (Some(s), Some(p)) = (last.test_srcc, last.test_plcc) {
                writeln!(out, "test srcc {s:.4} plcc {p:.4}").map_err(io_err)?;
            }
            writeln!(out, "wrote {}", dir.display()).map_err(io_err)?;
        }
        Command::Eval { data, weights, run, report } => {
            let cfg = load_config(cli, run.overrides())?;
            let set = load_data(data, &cfg)?;
            match weights {
                Some(w) => {
                    let model = LodaModel::load(&cfg, cfg.train.mode, w)?;
                    let r = train::evaluate(&model, &set, &cfg.train)?;
                    writeln!(out, "images {} srcc {:.6} plcc {:.6}", set.len(), r.metrics.srcc, r.metrics.plcc)
                        .map_err(io_err)?;
                    if let Some(w) = r.warning {
                        writeln!(out, "warning: {w}").map_err(io_err)?;
                    }
                }
                None => {
                    let plan = SplitPlan::random(set.len(), cfg.train.splits, cfg.train.train_fraction, cfg.train.seed)?;
                    let rep = train::run_splits(&set, &cfg, &plan)?;
                    print_report(out, &rep)?;
                    if let Some(path) = report {
                        save_report(&rep, path)?;
                    }
                }
            }
        }
        Command::CrossEval { train: a, test: b, data_seed, run } => {
            let cfg = load_config(cli, run.overrides())?;
            let load = |p: &Option<PathBuf>, seed: u64| match p {
                Some(p) => Dataset::from_manifest(p),
                None => Dataset::synthetic(&cfg.data, seed),
            };
            let train_set = load(a, *data_seed)?;
            let test_set = load(b, data_seed + 1)?;
            let rep = train::cross_dataset(&train_set, &test_set, &cfg)?;
            print_report(out, &rep)?;
        }
        Command::Ablate { sweep, data, run } => {
            let base = load_config(cli, run.overrides())?;
            let set = load_data(data, &base)?;
            let values: Vec<usize> = match sweep {
                Sweep::Latent => vec![16, 32, 48, 64, 80],
                Sweep::Heads => vec![2, 4, 8],
                Sweep::Interactions => (1..=base.vit.num_layers).filter(|n| base.vit.num_layers % n == 0).collect(),
            };
            let plan = SplitPlan::random(set.len(), base.train.splits, base.train.train_fraction, base.train.seed)?;
            writeln!(out, "sweep,value,trainable,total,median_srcc,median_plcc").map_err(io_err)?;
            for v in values {
                let mut cfg = base.clone();
                match sweep {
                    Sweep::Latent => cfg.adapter.latent_dim = v,
                    Sweep::Heads => cfg.adapter.heads = v,
                    Sweep::Interactions => cfg.adapter.interactions = v,
                }
                cfg.validate()?;
                let rep = train::run_splits(&set, &cfg, &plan)?;
                writeln!(
                    out,
                    "{},{v},{},{},{},{}",
                    sweep_name(*sweep),
                    rep.trainable,
                    rep.total,
                    rep.median_srcc,
                    rep.median_plcc
                )
                .map_err(io_err)?;
            }
        }
        Command::Gradcheck { seeds, step, tolerance } => {
            let cfg = load_config(cli, Vec::new())?;
            let results = gradcheck::full_suite(&cfg, 0..*seeds, *step)?;
            let mut names: Vec<&str> = Vec::new();
            for r in &results {
                if !names.contains(&r.name.as_str()) {
                    names.push(&r.name);
                }
            }
            let mut failed = 0;
            for name in names {
                let group: Vec<_> = results.iter().filter(|r| r.name == name).collect();
                let worst = group.iter().map(|r| r.rel_err).fold(0.0, f64::max);
                let bad = group.iter().filter(|r| !r.passed(*tolerance)).count();
                failed += bad;
                let status = if bad == 0 { "ok" } else { "FAIL" };
                writeln!(out, "{status:4} {name:32} checks {:3} max rel err {worst:.3e}", group.len()).map_err(io_err)?;
            }
            writeln!(out, "{} checks, {failed} failed (tolerance {tolerance:e}, step {step:e})", results.len())
                .map_err(io_err)?;
            return Ok(if failed == 0 { 0 } else { 1 });
        }
        Command::Fourier { data, weights, images, seed, out: path } => {
            let cfg = load_config(cli, Vec::new())?;
            let set = load_data(data, &cfg)?;
            let loda = match weights {
                Some(w) => LodaModel::load(&cfg, Mode::Loda, w)?,
                None => LodaModel::new(&cfg, Mode::Loda, *seed)?,
            };
            let vit = LodaModel::with_backbones(&cfg, Mode::LinearProbe, loda.frozen.clone(), *seed)?;
            let n = (*images).min(set.len());
            let a = layer_maps(&vit, &set.images[..n], 32)?;
            let b = layer_maps(&loda, &set.images[..n], 32)?;
            let rep = compare_profiles("vit", &a, "loda", &b)?;
            rep.save_csv(path)?;
            writeln!(out, "layer,high_band_diff").map_err(io_err)?;
            for l in &rep.layers {
                writeln!(out, "{},{}", l.layer, l.high_band_diff).map_err(io_err)?;
            }
            writeln!(out, "wrote {} ({n} images)", path.display()).map_err(io_err)?;
        }
        Command::Params { mode } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(format!("train.mode=\"{m}\""));
            }
            let cfg = load_config(cli, extra)?;
            let model = LodaModel::new(&cfg, cfg.train.mode, cfg.train.seed)?;
            let (_, trainable) = model.trainable_parameters();
            let total = model.total_parameters();
            writeln!(out, "mode {}", cfg.train.mode).map_err(io_err)?;
            let mut groups: Vec<(String, usize)> = Vec::new();
            for (name, t) in model.trainable.iter() {
                let g = name.split('.').next().unwrap_or(name).to_string();
                match groups.iter_mut().find(|(n, _)| *n == g) {
                    Some((_, c)) => *c += t.numel(),
                    None => groups.push((g, t.numel())),
                }
            }
            for (g, c) in groups {
                writeln!(out, "  {g} {c}").map_err(io_err)?;
            }
            writeln!(out, "trainable {trainable}").map_err(io_err)?;
            writeln!(out, "total {total}").map_err(io_err)?;
            writeln!(out, "fraction {:.6}", trainable as f64 / total as f64).map_err(io_err)?;
        }
    }
    Ok(0)
}

fn sweep_name(s: Sweep) -> &'static str {
    match s {
        Sweep::Latent => "latent",
        Sweep::Heads => "heads",
        Sweep::Interactions => "interactions",
    }
}

fn write_splits(out: &mut dyn Write, rep: &EvalReport) -> Result<()> {
    writeln!(out, "split,train_srcc,test_srcc,test_plcc,final_loss").map_err(io_err)?;
    for s in &rep.splits {
        writeln!(out, "{},{},{},{},{}", s.split, s.train_srcc, s.test.srcc, s.test.plcc, s.final_loss).map_err(io_err)?;
    }
    Ok(())
}

fn print_report(out: &mut dyn Write, rep: &EvalReport) -> Result<()> {
    write_splits(out, rep)?;
    writeln!(out, "mode {} median srcc {:.6} median plcc {:.6}", rep.mode, rep.median_srcc, rep.median_plcc)
        .map_err(io_err)?;
    writeln!(out, "trainable {} total {}", rep.trainable, rep.total).map_err(io_err)
}

fn save_report(rep: &EvalReport, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_splits(&mut buf, rep)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
