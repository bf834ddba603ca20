use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssql::checkpoint::Checkpoint;
use ssql::config::RunConfig;
use ssql::data::{DataSource, Dataset};
use ssql::diag;
use ssql::error::{Error, Result};
use ssql::eval::{self, EvalMode};
use ssql::nn::{build_model, ModelParams};
use ssql::quant::Precision;
use ssql::train::{metrics_csv, pretrain};

#[derive(Parser)]
#[command(
    name = "ssql",
    version,
    about = "Quantization-friendly self-supervised pretraining and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CIFAR-10 binary directory, or `synthetic[:key=value,...]`.
    #[arg(long)]
    data: String,
    /// Overrides a config key; repeatable, applied after the file and the
    /// dedicated flags.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Stratified training subset size.
    #[arg(long)]
    subset: Option<usize>,
    /// Stratified test subset size.
    #[arg(long)]
    test_subset: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining; writes a checkpoint and a metrics CSV next to it.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// simsiam, ssql, ssql_aux or ssql_nce.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Linear probe of a frozen, quantized backbone at each precision.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Supervised fine-tuning, then post-training quantization at each precision.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Decomposition, error correlation and weight statistics of a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Precision of the quantized branch.
        #[arg(long, default_value = "4w4a")]
        bits: Precision,
        /// Number of batches to decompose; all by default.
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Evaluates several checkpoints into one table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated checkpoint paths.
        #[arg(long, value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        /// Method labels, one per checkpoint; defaults to each training variant.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        /// linear_eval or finetune_ptq.
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long)]
        bits: Option<String>,
        /// Long-format CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// One row per method, one column per precision.
        #[arg(long)]
        wide: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated precisions such as `fp,8w8a,4w4a`.
    #[arg(long)]
    bits: Option<String>,
    /// Method label in the result table; defaults to the training variant.
    #[arg(long)]
    method: Option<String>,
    /// Result CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Some(n) = common.subset {
        cfg.data.subset = Some(n);
    }
    if let Some(n) = common.test_subset {
        cfg.data.test_subset = Some(n);
    }
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

fn load_data(common: &Common, cfg: &RunConfig) -> Result<Dataset> {
    let ds = DataSource::parse(&common.data)?.load()?;
    cfg.data.apply(ds)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `run.ckpt` -> `run.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn run_pretrain(common: &Common, out: &Path, flags: &[(&str, Option<String>)]) -> Result<()> {
    let mut cfg = load_config(common, flags)?;
    let ds = load_data(common, &cfg)?;
    cfg.model.input = ds.shape;
    cfg.validate()?;
    let params = build_model(&cfg.model, cfg.train.seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let snapshot_every = cfg.train.snapshot_every;
    let run = pretrain(&ds, params, &cfg.train, |epoch, state| {
        if snapshot_every > 0 && epoch % snapshot_every == 0 {
            let path = sibling(out, &format!("epoch{epoch:04}.ckpt"));
            Checkpoint::from_state(state, &cfg.train).save(&path)?;
        }
        Ok(())
    })?;
    Checkpoint::from_state(&run.state, &cfg.train).save(out)?;
    write(&sibling(out, "metrics.csv"), &metrics_csv(&run.metrics))?;
    if cfg.train.diag_every > 0 {
        write(
            &sibling(out, "decomposition.csv"),
            &diag::decomposition_csv(&run.decomposition),
        )?;
        let corr: Vec<(usize, f32)> = run.correlation.iter().map(|c| (c.step, c.r)).collect();
        write(
            &sibling(out, "correlation.csv"),
            &diag::correlation_csv(&corr),
        )?;
    }
    if let Some(last) = run.metrics.last() {
        eprintln!("{} steps, final loss {}", run.metrics.len(), last.loss);
    }
    Ok(())
}

fn label_for(ckpt: &Checkpoint, explicit: Option<&String>) -> String {
    explicit
        .cloned()
        .unwrap_or_else(|| ckpt.config.loss.variant.to_string())
}

fn run_eval(common: &Common, args: &EvalArgs, mode: EvalMode) -> Result<()> {
    let mut cfg = load_config(common, &[("bits", args.bits.clone())])?;
    cfg.eval.mode = mode;
    let ds = load_data(common, &cfg)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let models = vec![(label_for(&ckpt, args.method.as_ref()), ckpt.params)];
    let table = eval::sweep(&models, &ds, &cfg.eval)?;
    emit(args.out.as_deref(), &table.to_csv())
}

fn run_diagnose(
    common: &Common,
    ckpt: &Path,
    out_dir: &Path,
    bits: Precision,
    batches: Option<usize>,
) -> Result<()> {
    let cfg = load_config(common, &[])?;
    let ds = load_data(common, &cfg)?;
    let ckpt = Checkpoint::load(ckpt)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = &ckpt.config;
    let records = diag::decompose_dataset(
        &ckpt.params,
        &ds,
        bits,
        &train.augment,
        train.batch_size,
        batches,
        train.seed,
    )?;
    let window = if train.diag_window == 0 {
        train.batch_size
    } else {
        train.diag_window
    };
    let recs: Vec<_> = records.iter().map(|(_, r)| r.clone()).collect();
    let corr: Vec<(usize, f32)> = diag::qcl_correlation(&recs, window)?
        .into_iter()
        .enumerate()
        .collect();
    let stats = diag::weight_stats(&ckpt.params)?;
    write(
        &out_dir.join("decomposition.csv"),
        &diag::decomposition_csv(&records),
    )?;
    write(
        &out_dir.join("correlation.csv"),
        &diag::correlation_csv(&corr),
    )?;
    write(
        &out_dir.join("weight_stats.csv"),
        &diag::weight_stats_csv(&stats),
    )?;
    write(&out_dir.join("histogram.csv"), &diag::histogram_csv(&stats))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_sweep(
    common: &Common,
    ckpts: &[PathBuf],
    labels: &[String],
    mode: Option<EvalMode>,
    bits: Option<String>,
    out: Option<&Path>,
    wide: Option<&Path>,
) -> Result<()> {
    if !labels.is_empty() && labels.len() != ckpts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} checkpoints",
            labels.len(),
            ckpts.len()
        )));
    }
    let cfg = load_config(
        common,
        &[("bits", bits), ("eval_mode", mode.map(|m| m.to_string()))],
    )?;
    cfg.validate()?;
    let ds = load_data(common, &cfg)?;
    let models = ckpts
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let ckpt = Checkpoint::load(path)?;
            Ok((label_for(&ckpt, labels.get(i)), ckpt.params))
        })
        .collect::<Result<Vec<(String, ModelParams)>>>()?;
    let table = eval::sweep(&models, &ds, &cfg.eval)?;
    if let Some(path) = wide {
        write(path, &table.to_wide_csv())?;
    }
    emit(out, &table.to_csv())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            common,
            out,
            variant,
            epochs,
            seed,
        } => run_pretrain(
            &common,
            &out,
            &[
                ("variant", variant),
                ("epochs", epochs.map(|e| e.to_string())),
                ("seed", seed.map(|s| s.to_string())),
            ],
        ),
        Command::Probe { common, eval } => run_eval(&common, &eval, EvalMode::LinearEval),
        Command::Finetune { common, eval } => run_eval(&common, &eval, EvalMode::FinetunePtq),
        Command::Diagnose {
            common,
            ckpt,
            out_dir,
            bits,
            batches,
        } => run_diagnose(&common, &ckpt, &out_dir, bits, batches),
        Command::Sweep {
            common,
            ckpts,
            labels,
            mode,
            bits,
            out,
            wide,
        } => run_sweep(
            &common,
            &ckpts,
            &labels,
            mode,
            bits,
            out.as_deref(),
            wide.as_deref(),
        ),
    }
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
