use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use saft_core::config::ExperimentConfig;
use saft_core::eval::{generalization_bound, margin_curve, sparsity_plot_svg, sparsity_points, MetricTable, RowLabel};
use saft_core::experiment::{record_metrics, run_sweep, store_config, Lab, Method, Protocol};
use saft_core::select::{mask_layer_histogram, Mask};
use saft_core::store::{
    append_run_log, load_checkpoint, load_mask, read_checkpoint, save_checkpoint, save_mask, write_atomic,
};
use saft_core::{Error, Result};

const DEFAULT_OUT: &str = "saft-out";

#[derive(Parser)]
#[command(name = "saft-lab", version, about = "Sparse adaptation fine-tuning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dual encoder on the full universe and write the pre-trained checkpoint.
    Pretrain(Common),
    /// Score parameters on the downstream few-shot split and write a mask.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides selection.alpha.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Fine-tune a checkpoint on the downstream task.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Required for saft, rejected otherwise.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// One of zeroshot, saft, ft, lp, wise.
        #[arg(long, default_value = "saft")]
        method: String,
    },
    /// Evaluate a checkpoint and write a CSV report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of shift, base_new, cross_task, sparsity_curve (default: eval.protocol).
        #[arg(long)]
        protocol: Option<String>,
        /// Label written to the method column.
        #[arg(long, default_value = "model")]
        method: String,
        /// Mask the checkpoint was trained under; sets d for the bound and the alpha column.
        /// Without it every parameter counts as learnable.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Run the configured sweep grid and aggregate mean and SD over seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Reuse a pre-trained checkpoint instead of pre-training in-process.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// key=value config file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $SAFT_LAB_OUT, else ./saft-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

struct Context {
    lab: Lab,
    out: PathBuf,
    force: bool,
}

impl Common {
    fn context(&self) -> Result<Context> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config = config.with_seed(seed)?;
        }
        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os("SAFT_LAB_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
        store_config(&config, &out)?;
        Ok(Context {
            lab: Lab::new(config)?,
            out,
            force: self.force,
        })
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn pretrain(common: &Common) -> Result<()> {
    let ctx = common.context()?;
    let pre = ctx.lab.pretrain()?;
    let path = ctx.out.join("pretrained.ckpt");
    save_checkpoint(&pre.params, ctx.lab.config.train.precision, &path, ctx.force)?;
    let mut record = pre.record;
    record.artifacts.push("pretrained.ckpt".into());
    append_run_log(&record, &ctx.out.join("runs.jsonl"))?;
    println!(
        "zero-shot held-out accuracy: {:.4} ({}/{}, chance {:.4})",
        pre.heldout.value(),
        pre.heldout.count,
        pre.heldout.total,
        1.0 / ctx.lab.universe.classes() as f64
    );
    println!("config hash: {}", record.config_hash);
    println!("wrote {}", path.display());
    Ok(())
}

fn select(common: &Common, checkpoint: &Path, alpha: Option<f64>) -> Result<()> {
    let mut ctx = common.context()?;
    if let Some(a) = alpha {
        ctx.lab.config = ctx.lab.config.with("selection.alpha", a)?;
        store_config(&ctx.lab.config, &ctx.out)?;
    }
    let params = load_checkpoint(checkpoint)?;
    let seed = ctx.lab.config.seed;
    let task = ctx.lab.task(seed)?;
    let cfg = ctx.lab.train_config(seed);
    let mask = ctx.lab.select(&params, &task.train, &cfg)?;
    let path = ctx.out.join("mask.bin");
    save_mask(&mask, &path, ctx.force)?;
    let hist = mask_layer_histogram(&mask, ctx.lab.model.layout())?;
    println!(
        "strategy {}  alpha {}  d {}  D {}",
        cfg.strategy,
        cfg.alpha,
        mask.count(),
        mask.len()
    );
    for s in &hist.segments {
        println!(
            "  {:<16} {:>6} / {:<6} ({})",
            s.name,
            s.selected,
            s.len,
            s.side.as_str()
        );
    }
    println!("  image {}  text {}  total {}", hist.image, hist.text, hist.total());
    println!("wrote {}", path.display());
    Ok(())
}

fn finetune(common: &Common, checkpoint: &Path, mask: Option<&Path>, method: &str) -> Result<()> {
    let ctx = common.context()?;
    let method: Method = method.parse()?;
    let pretrained = read_checkpoint(checkpoint)?;
    let mask: Option<Mask> = match (method, mask) {
        (Method::Saft, None) => return Err(Error::Config("method saft requires --mask".into())),
        (Method::Saft, Some(p)) => Some(load_mask(p)?),
        (_, Some(_)) => return Err(Error::Config(format!("method {method} does not take --mask"))),
        (_, None) => None,
    };
    if let Some(m) = &mask {
        if m.len() != pretrained.params.len() {
            return Err(Error::LengthMismatch {
                expected: pretrained.params.len(),
                got: m.len(),
            });
        }
    }
    let seed = ctx.lab.config.seed;
    let task = ctx.lab.task(seed)?;
    let mut cfg = ctx.lab.train_config(seed);
    if let Some(m) = &mask {
        cfg.alpha = m.alpha();
    }
    let fitted = ctx.lab.fit(method, &pretrained.params, &task.train, &cfg, mask)?;
    let name = format!("finetuned-{method}.ckpt");
    let path = ctx.out.join(&name);
    save_checkpoint(&fitted.params, cfg.precision, &path, ctx.force)?;
    let mut record = fitted.record;
    record.artifacts.push(name);
    append_run_log(&record, &ctx.out.join("runs.jsonl"))?;
    println!(
        "{method}: learnable {} of {}  final loss {}",
        record.metrics["learnable"],
        record.metrics["params"],
        record
            .metrics
            .get("final_loss")
            .map_or("-".to_string(), |l| format!("{l:.6}"))
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, protocol: Option<&str>, method: &str, mask: Option<&Path>) -> Result<()> {
    let ctx = common.context()?;
    let protocol: Protocol = protocol.unwrap_or(&ctx.lab.config.eval.protocol).parse()?;
    let params = load_checkpoint(checkpoint)?;
    let seed = ctx.lab.config.seed;
    let lab = &ctx.lab;
    let table: MetricTable = match protocol {
        Protocol::SparsityCurve => {
            let table = lab.sparsity_curve(&params, seed, &lab.config.eval.alpha_grid)?;
            let svg = sparsity_plot_svg(&sparsity_points(&table));
            let plot = ctx.out.join("sparsity_curve.svg");
            write_atomic(&plot, svg.as_bytes(), ctx.force)?;
            println!("wrote {}", plot.display());
            table
        }
        _ => {
            let (learnable, alpha) = match mask {
                Some(p) => {
                    let m = load_mask(p)?;
                    (m.count(), m.alpha())
                }
                None => (params.len(), 1.0),
            };
            let label = RowLabel::new(method, seed, alpha);
            let table = lab.evaluate(protocol, &params, &label)?;
            if protocol == Protocol::Shift {
                let task = lab.task(seed)?;
                let bank = lab.bank();
                let curve = margin_curve(&lab.model, &params, &task.test, bank, &lab.config.eval.gamma_grid)?;
                let cells: Vec<String> = curve.iter().map(|(g, r)| format!("{g}:{:.4}", r.value())).collect();
                println!("margin loss (id): {}", cells.join(" "));
                let ev = &lab.config.eval;
                let n = task.train.len() as f64;
                let d = learnable as f64;
                println!(
                    "bound C*sqrt(d ln r / N) at d={d} N={n}: {:.4}",
                    generalization_bound(d, ev.bound_r, n, ev.bound_c)?
                );
            }
            table
        }
    };
    for r in table.rows() {
        println!("{:<14} {:<10} {:.4}  n={}", r.split, r.method, r.accuracy, r.n);
    }
    let path = ctx.out.join(format!("eval-{}.csv", protocol.as_str()));
    table.write_csv(&path, ctx.force)?;
    let mut record = saft_core::train::RunRecord::new(method, lab.config.hash(), seed);
    record.config_hash = lab.config.hash_hex();
    record_metrics(&mut record, &table);
    record
        .artifacts
        .push(path.file_name().unwrap().to_string_lossy().into_owned());
    append_run_log(&record, &ctx.out.join("runs.jsonl"))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep(common: &Common, checkpoint: Option<&Path>, jobs: usize) -> Result<()> {
    let ctx = common.context()?;
    let params = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => ctx.lab.pretrain()?.params,
    };
    let report = run_sweep(&ctx.lab, &params, &ctx.out, jobs, ctx.force)?;
    println!("ran {} cells, skipped {} already logged", report.ran, report.skipped);
    print!(
        "{}",
        std::fs::read_to_string(&report.aggregate_csv).map_err(|e| io_error(&report.aggregate_csv, e))?
    );
    println!("wrote {}", report.aggregate_csv.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(common) => pretrain(common),
        Command::Select {
            common,
            checkpoint,
            alpha,
        } => select(common, checkpoint, *alpha),
        Command::Finetune {
            common,
            checkpoint,
            mask,
            method,
        } => finetune(common, checkpoint, mask.as_deref(), method),
        Command::Eval {
            common,
            checkpoint,
            protocol,
            method,
            mask,
        } => eval(common, checkpoint, protocol.as_deref(), method, mask.as_deref()),
        Command::Sweep {
            common,
            checkpoint,
            jobs,
        } => sweep(common, checkpoint.as_deref(), *jobs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
