//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{parse_override, Config};
use crate::error::{Error, Result};
use crate::federated::{fed_train_run, FedData};
use crate::io::{sha256_hex, write_grad2d_csv, write_json, JsonlWriter};
use crate::models::{ModelKind, ModelParams};
use crate::privacy::RdpAccountant;
use crate::subspace::{refresh_projection, PublicPool};
use crate::trainer::{grad2d_dump, train_run, TrainData};

#[derive(Debug, Parser)]
#[command(name = "pcdp", version, about = "Differentially private training with public-subspace projected clipping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Centralized private training.
    Train(CommonArgs),
    /// Federated simulation.
    Fedtrain(CommonArgs),
    /// Print the privacy spent by a noise schedule.
    Accountant(CommonArgs),
    /// Training with holdout subspace-skew reporting.
    DiagnoseSkew(CommonArgs),
    /// Dump 2-D views of raw and projected per-sample gradients from a checkpoint.
    DumpGrad2d(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite an existing summary.json.
    #[arg(long)]
    pub force: bool,
    /// `key=value` override; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub diagnose_skew: bool,
    /// Comma-separated layer names for dump-grad2d.
    #[arg(long, value_name = "NAME,NAME")]
    pub dump_layers: Option<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Fedtrain(_) => "fedtrain",
            Command::Accountant(_) => "accountant",
            Command::DiagnoseSkew(_) => "diagnose-skew",
            Command::DumpGrad2d(_) => "dump-grad2d",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Train(a)
            | Command::Fedtrain(a)
            | Command::Accountant(a)
            | Command::DiagnoseSkew(a)
            | Command::DumpGrad2d(a) => a,
        }
    }
}

/// Accountant output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub q: f64,
    pub sigma: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub delta: f64,
    pub epsilon: f64,
}

/// Written as `summary.json` by every successful command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub config: Config,
    pub result: serde_json::Value,
    pub accountant: Option<PrivacyReport>,
    pub metrics_file: Option<String>,
    pub metrics_sha256: String,
}

/// Saved model weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub step: usize,
    pub values: Vec<f64>,
}

fn resolve_config(args: &CommonArgs) -> Result<Config> {
    let overrides = args
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = Config::load(args.config.as_deref(), &overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.diagnose_skew {
        cfg.diagnose_skew = true;
    }
    if let Some(layers) = &args.dump_layers {
        cfg.set("dump_layers", layers)?;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path, force: bool) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = dir.join("summary.json");
    if summary.exists() && !force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            summary.display()
        )));
    }
    Ok(summary)
}

fn report(q: f64, sigma: f64, steps: usize, delta: f64) -> Result<Option<PrivacyReport>> {
    if sigma == 0.0 {
        return Ok(None);
    }
    let epsilon = RdpAccountant::new(q, sigma, delta)?.epsilon(steps);
    Ok(Some(PrivacyReport {
        q,
        sigma,
        steps,
        delta,
        epsilon,
    }))
}

/// Runs one command and returns its summary.
pub fn run(command: &Command) -> Result<Summary> {
    let args = command.args();
    let mut cfg = resolve_config(args)?;
    if matches!(command, Command::DiagnoseSkew(_)) {
        cfg.diagnose_skew = true;
    }
    let summary_path = prepare_out(&args.out, args.force)?;
    let summary = match command {
        Command::Train(_) | Command::DiagnoseSkew(_) => run_train(&cfg, &args.out)?,
        Command::Fedtrain(_) => run_fedtrain(&cfg, &args.out)?,
        Command::Accountant(_) => run_accountant(&cfg)?,
        Command::DumpGrad2d(_) => run_dump(&cfg, &args.out)?,
    };
    let summary = Summary {
        command: command.name().into(),
        ..summary
    };
    write_json(&summary_path, &summary)?;
    Ok(summary)
}

fn run_train(cfg: &Config, out: &Path) -> Result<Summary> {
    let splits = cfg.splits()?;
    let kind = cfg.model_kind(&splits.private);
    let tcfg = cfg.train_config(kind)?;
    let data = TrainData {
        private: splits.private,
        public: splits.public,
        holdout: splits.holdout,
        test: splits.test,
    };
    let metrics = out.join("metrics.jsonl");
    let mut writer = JsonlWriter::create(&metrics)?;
    let outcome = train_run(&tcfg, &data, &mut |r| writer.write(r))?;
    let hash = writer.finish()?;
    write_json(
        &out.join("params.json"),
        &Checkpoint {
            model: kind,
            step: outcome.steps,
            values: outcome.params.values().to_vec(),
        },
    )?;
    let last = outcome.records.last();
    Ok(Summary {
        command: String::new(),
        config: cfg.clone(),
        result: serde_json::json!({
            "steps": outcome.steps,
            "q": outcome.q,
            "test_loss": outcome.test_loss,
            "test_acc": outcome.test_acc,
            "final_train_loss": last.and_then(|r| r.train_loss),
        }),
        accountant: report(outcome.q, tcfg.sigma, outcome.steps, tcfg.delta)?,
        metrics_file: Some("metrics.jsonl".into()),
        metrics_sha256: hash,
    })
}

fn run_fedtrain(cfg: &Config, out: &Path) -> Result<Summary> {
    let splits = cfg.splits()?;
    let kind = cfg.model_kind(&splits.private);
    let fcfg = cfg.fed_config(kind)?;
    let public = splits
        .public
        .ok_or_else(|| Error::Config("fedtrain needs public_size > 0".into()))?;
    let data = FedData {
        train: splits.private,
        public,
        test: splits.test,
    };
    let metrics = out.join("rounds.jsonl");
    let mut writer = JsonlWriter::create(&metrics)?;
    let outcome = fed_train_run(&fcfg, &data, &mut |r| writer.write(r))?;
    let hash = writer.finish()?;
    write_json(
        &out.join("params.json"),
        &Checkpoint {
            model: kind,
            step: fcfg.rounds,
            values: outcome.params.values().to_vec(),
        },
    )?;
    let max_eps = outcome
        .eps_per_client
        .iter()
        .flatten()
        .cloned()
        .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))));
    Ok(Summary {
        command: String::new(),
        config: cfg.clone(),
        result: serde_json::json!({
            "rounds": fcfg.rounds,
            "test_loss": outcome.test_loss,
            "test_acc": outcome.test_acc,
            "eps_per_client": outcome.eps_per_client,
            "max_client_epsilon": max_eps,
            "client_sizes": outcome.plan.clients.iter().map(Vec::len).collect::<Vec<_>>(),
        }),
        accountant: None,
        metrics_file: Some("rounds.jsonl".into()),
        metrics_sha256: hash,
    })
}

fn run_accountant(cfg: &Config) -> Result<Summary> {
    let (q, steps) = cfg.accountant_inputs()?;
    if !(cfg.sigma > 0.0) {
        return Err(Error::Config("key `sigma`: the accountant needs sigma > 0".into()));
    }
    let r = report(q, cfg.sigma, steps, cfg.delta)?.expect("sigma > 0");
    let text = serde_json::to_string(&r)?;
    println!("{text}");
    Ok(Summary {
        command: String::new(),
        config: cfg.clone(),
        result: serde_json::to_value(r)?,
        accountant: Some(r),
        metrics_file: None,
        metrics_sha256: sha256_hex(text.as_bytes()),
    })
}

fn run_dump(cfg: &Config, out: &Path) -> Result<Summary> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("dump-grad2d needs the `checkpoint` key".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    let splits = cfg.splits()?;
    let kind = cfg.model_kind(&splits.private);
    if kind != ckpt.model {
        return Err(Error::Config(format!(
            "checkpoint model {:?} does not match the configured data/model {:?}",
            ckpt.model, kind
        )));
    }
    let params = ModelParams::from_values(&kind, ckpt.values)?;
    let public = splits
        .public
        .ok_or_else(|| Error::Config("dump-grad2d needs public_size > 0".into()))?;
    let pool = PublicPool::new(public, cfg.segmentation, cfg.public_batch, cfg.seed)?;
    let batch = pool.draw_public_batch(0)?;
    let pset = refresh_projection(
        &kind,
        &params,
        pool.data(),
        &batch,
        cfg.k,
        cfg.projection,
        cfg.interval,
        ckpt.step,
    )?;
    let layers = if cfg.dump_layers.is_empty() {
        params.layout().iter().map(|l| l.name.clone()).collect()
    } else {
        cfg.dump_layers.clone()
    };
    let samples: Vec<usize> = (0..cfg.dump_samples.min(splits.private.len())).collect();
    let rows = grad2d_dump(
        &kind,
        &params,
        &splits.private,
        &samples,
        &pset,
        &layers,
        ckpt.step,
        cfg.seed,
    )?;
    let hash = write_grad2d_csv(&out.join("grad2d.csv"), &rows)?;
    Ok(Summary {
        command: String::new(),
        config: cfg.clone(),
        result: serde_json::json!({
            "rows": rows.len(),
            "layers": layers,
            "samples": samples.len(),
            "step": ckpt.step,
        }),
        accountant: None,
        metrics_file: Some("grad2d.csv".into()),
        metrics_sha256: hash,
    })
}

/// Parses `args` (including the program name), runs, and returns the exit code:
/// 0 success, 1 configuration error, 2 runtime failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}
