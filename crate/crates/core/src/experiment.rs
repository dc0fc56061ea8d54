//! End-to-end pipeline: pre-training, selection, fine-tuning methods,
//! evaluation protocols and sweeps, all driven by an [`ExperimentConfig`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::{ExperimentConfig, SweepAxis};
use crate::data::{Rate, Split};
use crate::eval::{accuracy, base_new_eval, cross_task_eval, mean_sd, ood_suite_eval, MetricTable, RowLabel};
use crate::model::{ClassPromptBank, DualEncoder, FlatParams};
use crate::select::{build_mask, importance, Mask};
use crate::store::{append_run_log, read_run_log, write_atomic};
use crate::taskgen::{make_task, make_universe, sibling_class_sets, Task, TaskSpec, Universe};
use crate::train::{finetune_observed, full_finetune, linear_probe_mask, wise_interpolate, RunRecord, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    ZeroShot,
    Saft,
    Ft,
    Lp,
    Wise,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroShot => "zeroshot",
            Method::Saft => "saft",
            Method::Ft => "ft",
            Method::Lp => "lp",
            Method::Wise => "wise",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeroshot" => Ok(Method::ZeroShot),
            "saft" => Ok(Method::Saft),
            "ft" => Ok(Method::Ft),
            "lp" => Ok(Method::Lp),
            "wise" => Ok(Method::Wise),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected zeroshot, saft, ft, lp or wise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Shift,
    BaseNew,
    CrossTask,
    SparsityCurve,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Shift => "shift",
            Protocol::BaseNew => "base_new",
            Protocol::CrossTask => "cross_task",
            Protocol::SparsityCurve => "sparsity_curve",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shift" => Ok(Protocol::Shift),
            "base_new" => Ok(Protocol::BaseNew),
            "cross_task" => Ok(Protocol::CrossTask),
            "sparsity_curve" => Ok(Protocol::SparsityCurve),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?} (expected shift, base_new, cross_task or sparsity_curve)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: FlatParams,
    pub record: RunRecord,
    /// Zero-shot accuracy on a held-out sample of every universe class.
    pub heldout: Rate,
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub params: FlatParams,
    pub record: RunRecord,
    pub mask: Option<Mask>,
}

/// A universe, a model architecture and the config they came from.
#[derive(Debug, Clone)]
pub struct Lab {
    pub config: ExperimentConfig,
    pub universe: Universe,
    pub model: DualEncoder,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let universe = make_universe(&config.universe)?;
        let model = DualEncoder::new(config.model.clone())?;
        Ok(Self {
            config,
            universe,
            model,
        })
    }

    fn pretrain_train_config(&self) -> TrainConfig {
        let p = &self.config.pretrain;
        TrainConfig {
            alpha: 1.0,
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            weight_decay: p.weight_decay,
            seed: p.seed,
            ..self.config.train.clone()
        }
    }

    pub fn all_classes(&self) -> Vec<u32> {
        (0..self.universe.classes() as u32).collect()
    }

    pub fn heldout_split(&self) -> Result<Split> {
        let p = &self.config.pretrain;
        self.universe
            .sample(&self.all_classes(), p.heldout_per_class, p.seed, "heldout")
    }

    /// Trains the dual encoder from scratch on abundant universe data.
    pub fn pretrain(&self) -> Result<Pretrained> {
        let p = &self.config.pretrain;
        let cfg = self.pretrain_train_config();
        let data = self
            .universe
            .sample(&self.all_classes(), p.per_class, p.seed, "pretrain")?;
        let init = self.model.init_params(p.seed, cfg.precision);
        let out = full_finetune(&self.model, &init, &data, self.universe.bank(), &cfg)?;
        let heldout = accuracy(&self.model, &out.params, &self.heldout_split()?, self.universe.bank())?;
        let mut record = out.record;
        record.method = "pretrain".into();
        record.config_hash = self.config.hash_hex();
        record.seed = p.seed;
        record.metrics.insert("zeroshot_heldout".into(), heldout.value());
        Ok(Pretrained {
            params: out.params,
            record,
            heldout,
        })
    }

    fn task_specs(&self, seed: u64, shots: usize) -> Result<Vec<TaskSpec>> {
        let t = &self.config.task;
        let sets = sibling_class_sets(&self.universe, t.siblings, t.classes, t.class_seed)?;
        Ok(sets
            .into_iter()
            .enumerate()
            .map(|(k, classes)| TaskSpec {
                name: format!("task{k}"),
                classes,
                domain_seed: t.domain_seed.wrapping_add(k as u64),
                seed,
                shots,
                test_per_class: t.test_per_class,
                style: t.style,
                spurious: t.spurious,
                shifts: t.shifts.clone(),
                shift_magnitude: t.shift_magnitude,
            })
            .collect())
    }

    /// The downstream task for a seed, with the configured shot count.
    pub fn task(&self, seed: u64) -> Result<Task> {
        self.task_with_shots(seed, self.config.task.shots)
    }

    pub fn task_with_shots(&self, seed: u64, shots: usize) -> Result<Task> {
        let spec = self.task_specs(seed, shots)?.swap_remove(0);
        make_task(&self.universe, &spec)
    }

    /// Tasks on the other disjoint class subsets.
    pub fn siblings(&self, seed: u64) -> Result<Vec<Task>> {
        self.task_specs(seed, self.config.task.shots)?
            .iter()
            .skip(1)
            .map(|s| make_task(&self.universe, s))
            .collect()
    }

    pub fn bank(&self) -> &ClassPromptBank {
        self.universe.bank()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.config.train.clone()
        }
    }

    /// Importance over `data` and the top-`⌊αD⌋` mask (config strategy and scope).
    pub fn select(&self, pretrained: &FlatParams, data: &Split, cfg: &TrainConfig) -> Result<Mask> {
        let bank = self.bank().restrict(&data.label_set())?;
        let w = importance(cfg.strategy, &self.model, pretrained, data, &bank, cfg.seed)?;
        build_mask(&w, cfg.alpha, cfg.scope, Some(self.model.layout()))
    }

    /// Adapts `pretrained` to `data` with `method`. For SAFT a precomputed
    /// mask may be supplied; otherwise one is selected from `data`.
    pub fn fit(
        &self,
        method: Method,
        pretrained: &FlatParams,
        data: &Split,
        cfg: &TrainConfig,
        mask: Option<Mask>,
    ) -> Result<Fitted> {
        if mask.is_some() && method != Method::Saft {
            return Err(Error::Config(format!("method {method} does not take a mask")));
        }
        let bank = self.bank().restrict(&data.label_set())?;
        let run = |mask: Option<&Mask>| {
            finetune_observed(
                &self.model,
                pretrained,
                mask,
                data,
                &bank,
                cfg,
                method.as_str(),
                |_, _, _| {},
            )
        };
        let (params, mut record, mask) = match method {
            Method::ZeroShot => {
                let mut record = RunRecord::new(method.as_str(), 0, cfg.seed);
                record.metrics.insert("learnable".into(), 0.0);
                record.metrics.insert("params".into(), pretrained.len() as f64);
                (pretrained.clone(), record, None)
            }
            Method::Saft => {
                let mask = match mask {
                    Some(m) => m,
                    None => self.select(pretrained, data, cfg)?,
                };
                let out = run(Some(&mask))?;
                (out.params, out.record, Some(mask))
            }
            Method::Ft => {
                let out = run(None)?;
                (out.params, out.record, None)
            }
            Method::Lp => {
                let mask = linear_probe_mask(&self.model)?;
                let out = run(Some(&mask))?;
                (out.params, out.record, Some(mask))
            }
            Method::Wise => {
                let out = run(None)?;
                let mut mixed = wise_interpolate(pretrained, &out.params, self.config.wise_lambda)?;
                cfg.precision.round_slice(mixed.values_mut());
                (mixed, out.record, None)
            }
        };
        record.config_hash = self.config.hash_hex();
        Ok(Fitted { params, record, mask })
    }

    /// Evaluates `params` under a fixed-checkpoint protocol.
    pub fn evaluate(&self, protocol: Protocol, params: &FlatParams, label: &RowLabel) -> Result<MetricTable> {
        let task = self.task(label.seed)?;
        match protocol {
            Protocol::Shift => ood_suite_eval(&self.model, params, &task, self.bank(), label),
            Protocol::BaseNew => base_new_eval(&self.model, params, &task, self.bank(), label),
            Protocol::CrossTask => {
                let siblings = self.siblings(label.seed)?;
                cross_task_eval(&self.model, params, &task, &siblings, self.bank(), label)
            }
            Protocol::SparsityCurve => Err(Error::Config(
                "sparsity_curve trains one model per alpha; use sparsity_curve()".into(),
            )),
        }
    }

    /// Training data for a method under `protocol`: base classes only for
    /// base-to-new, the full few-shot split otherwise.
    pub fn protocol_train_split(&self, protocol: Protocol, task: &Task) -> Split {
        match protocol {
            Protocol::BaseNew => task.train.filter_labels(&task.base),
            _ => task.train.clone(),
        }
    }

    /// One SAFT run per α on a shared importance vector, each evaluated with
    /// the shift protocol.
    pub fn sparsity_curve(&self, pretrained: &FlatParams, seed: u64, alphas: &[f64]) -> Result<MetricTable> {
        if alphas.windows(2).any(|w| w[0] > w[1]) || alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("alpha grid must be ascending within [0, 1]"));
        }
        let task = self.task(seed)?;
        let cfg = self.train_config(seed);
        let bank = self.bank().restrict(&task.train.label_set())?;
        let w = importance(cfg.strategy, &self.model, pretrained, &task.train, &bank, cfg.seed)?;
        let tables = alphas
            .par_iter()
            .map(|&alpha| {
                let mask = build_mask(&w, alpha, cfg.scope, Some(self.model.layout()))?;
                let cfg = TrainConfig { alpha, ..cfg.clone() };
                let fitted = self.fit(Method::Saft, pretrained, &task.train, &cfg, Some(mask))?;
                let label = RowLabel::new(Method::Saft.as_str(), seed, alpha);
                ood_suite_eval(&self.model, &fitted.params, &task, self.bank(), &label)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = MetricTable::new();
        for t in tables {
            out.extend(t)?;
        }
        Ok(out)
    }
}

/// Writes the canonical config under `out/configs/<hash>.cfg`.
pub fn store_config(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let path = out.join("configs").join(format!("{}.cfg", config.hash_hex()));
    if !path.exists() {
        write_atomic(&path, config.canonical().as_bytes(), false)?;
    }
    Ok(path)
}

/// Copies a table's accuracies into a run record as `acc.<split>` metrics.
pub fn record_metrics(record: &mut RunRecord, table: &MetricTable) {
    for r in table.rows() {
        record.metrics.insert(format!("acc.{}", r.split), r.accuracy);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub method: Method,
    pub value: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// Summary of one sweep invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub ran: usize,
    pub skipped: usize,
    pub aggregate_csv: PathBuf,
}

pub const SWEEP_HEADER: &str = "method,axis,value,split,mean,sd,count";

/// Expands the sweep grid into cells in a fixed order.
pub fn sweep_cells(config: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let sweep = &config.sweep;
    if sweep.values.is_empty() || sweep.methods.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let methods = sweep
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<Vec<Method>>>()?;
    let key = match sweep.axis {
        SweepAxis::Shots => "task.shots",
        SweepAxis::Alpha => "selection.alpha",
        SweepAxis::Strategy => "selection.strategy",
        SweepAxis::Seed => "seed",
    };
    let seeds: Vec<u64> = if sweep.axis == SweepAxis::Seed {
        vec![0]
    } else {
        config.eval.seeds.clone()
    };
    let mut cells = Vec::new();
    for value in &sweep.values {
        let base = config.with(key, value)?;
        for &method in &methods {
            for &seed in &seeds {
                let cfg = if sweep.axis == SweepAxis::Seed {
                    base.clone()
                } else {
                    base.with_seed(seed)?
                };
                cells.push(SweepCell {
                    method,
                    value: value.clone(),
                    seed: cfg.seed,
                    config: cfg,
                });
            }
        }
    }
    Ok(cells)
}

fn run_cell(lab: &Lab, pretrained: &FlatParams, cell: &SweepCell) -> Result<RunRecord> {
    let cell_lab = Lab {
        config: cell.config.clone(),
        universe: lab.universe.clone(),
        model: lab.model.clone(),
    };
    let task = cell_lab.task(cell.seed)?;
    let cfg = cell_lab.train_config(cell.seed);
    let fitted = cell_lab.fit(cell.method, pretrained, &task.train, &cfg, None)?;
    let alpha = match cell.method {
        Method::Saft => cfg.alpha,
        Method::ZeroShot => 0.0,
        Method::Lp => fitted.mask.as_ref().map_or(0.0, Mask::alpha),
        Method::Ft | Method::Wise => 1.0,
    };
    let label = RowLabel::new(cell.method.as_str(), cell.seed, alpha);
    let table = ood_suite_eval(&cell_lab.model, &fitted.params, &task, cell_lab.bank(), &label)?;
    let mut record = fitted.record;
    record_metrics(&mut record, &table);
    record.artifacts.push(format!("configs/{}.cfg", cell.config.hash_hex()));
    Ok(record)
}

/// Runs every cell missing from `out/sweep_runs.jsonl` (all cells with
/// `force`), then rewrites the aggregate CSV from the log. Cells run in
/// parallel on at most `jobs` threads; records are appended in cell order.
pub fn run_sweep(lab: &Lab, pretrained: &FlatParams, out: &Path, jobs: usize, force: bool) -> Result<SweepReport> {
    let cells = sweep_cells(&lab.config)?;
    let log = out.join("sweep_runs.jsonl");
    if force && log.exists() {
        std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    let done: BTreeSet<(String, String)> = if log.exists() {
        read_run_log(&log)?
            .into_iter()
            .map(|r| (r.method, r.config_hash))
            .collect()
    } else {
        BTreeSet::new()
    };
    let todo: Vec<&SweepCell> = cells
        .iter()
        .filter(|c| !done.contains(&(c.method.as_str().to_string(), c.config.hash_hex())))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let records = pool.install(|| {
        todo.par_iter()
            .map(|cell| run_cell(lab, pretrained, cell))
            .collect::<Result<Vec<_>>>()
    })?;
    for cell in &todo {
        store_config(&cell.config, out)?;
    }
    for r in &records {
        append_run_log(r, &log)?;
    }

    let by_key: BTreeMap<(String, String), RunRecord> = read_run_log(&log)?
        .into_iter()
        .map(|r| ((r.method.clone(), r.config_hash.clone()), r))
        .collect();
    let csv = aggregate_sweep(&lab.config, &cells, &by_key)?;
    let aggregate_csv = out.join("sweep.csv");
    write_atomic(&aggregate_csv, csv.as_bytes(), true)?;
    Ok(SweepReport {
        ran: records.len(),
        skipped: cells.len() - records.len(),
        aggregate_csv,
    })
}

/// Per-(method, value, split) mean and SD over the cell's seeds.
fn aggregate_sweep(
    config: &ExperimentConfig,
    cells: &[SweepCell],
    records: &BTreeMap<(String, String), RunRecord>,
) -> Result<String> {
    let mut groups: Vec<((String, String), Vec<&RunRecord>)> = Vec::new();
    for c in cells {
        let group_value = if config.sweep.axis == SweepAxis::Seed {
            "all".to_string()
        } else {
            c.value.clone()
        };
        let key = (c.method.as_str().to_string(), group_value);
        let rec = records
            .get(&(c.method.as_str().to_string(), c.config.hash_hex()))
            .ok_or_else(|| Error::invalid("sweep log is missing a cell"))?;
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(rec),
            None => groups.push((key, vec![rec])),
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(SWEEP_HEADER.split(',')).map_err(io)?;
    for ((method, value), recs) in &groups {
        let splits: BTreeSet<&String> = recs
            .iter()
            .flat_map(|r| r.metrics.keys())
            .filter(|k| k.starts_with("acc."))
            .collect();
        for split in splits {
            let vals: Vec<f64> = recs.iter().filter_map(|r| r.metrics.get(split).copied()).collect();
            let (mean, sd) = mean_sd(&vals)?;
            w.write_record([
                method.as_str(),
                config.sweep.axis.as_str(),
                value.as_str(),
                &split["acc.".len()..],
                &mean.to_string(),
                &sd.to_string(),
                &vals.len().to_string(),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
