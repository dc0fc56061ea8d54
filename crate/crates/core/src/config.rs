//! Flat `key=value` experiment configuration with dotted sections.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are ignored.
//! Every key has a default, unknown keys are rejected, and the canonical
//! form (all resolved keys, sorted, one `key=value` per line) is what gets
//! hashed and stored next to results.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Precision;
use crate::model::ModelConfig;
use crate::select::{Scope, Strategy};
use crate::store::checksum64;
use crate::taskgen::{Shift, UniverseConfig};
use crate::train::{Schedule, TrainConfig};
use crate::{Error, Result};

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("universe.seed", "0"),
    ("universe.classes", "24"),
    ("universe.dim", "16"),
    ("universe.separation", "2"),
    ("universe.noise", "0.6"),
    ("universe.spurious", "0.5"),
    ("universe.prompt_dim", "8"),
    ("task.classes", "8"),
    ("task.class_seed", "0"),
    ("task.domain_seed", "1"),
    ("task.shots", "16"),
    ("task.test_per_class", "50"),
    ("task.style", "1"),
    ("task.spurious", "2"),
    ("task.shifts", "rotate,noise,spurious_flip,style_shear"),
    ("task.shift_magnitude", "1"),
    ("task.siblings", "3"),
    ("model.image_hidden", "32"),
    ("model.text_hidden", "32"),
    ("model.embed_dim", "16"),
    ("model.temperature", "0.07"),
    ("pretrain.per_class", "64"),
    ("pretrain.heldout_per_class", "50"),
    ("pretrain.steps", "1500"),
    ("pretrain.batch_size", "64"),
    ("pretrain.lr", "0.003"),
    ("pretrain.weight_decay", "0.0001"),
    ("pretrain.seed", "0"),
    ("train.steps", "500"),
    ("train.batch_size", "32"),
    ("train.lr", "0.001"),
    ("train.weight_decay", "0.1"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "0.00000001"),
    ("train.schedule", "cosine"),
    ("train.precision", "f32"),
    ("train.wise_lambda", "0.5"),
    ("selection.strategy", "grad_mean"),
    ("selection.alpha", "0.001"),
    ("selection.scope", "all"),
    ("eval.protocol", "shift"),
    ("eval.alpha_grid", "0,0.001,0.01,0.1,1"),
    ("eval.gamma_grid", "0,0.05,0.1,0.2,0.3,0.5,0.75,1,1.5,2"),
    ("eval.seeds", "0,1,2,3,4,5,6,7,8,9"),
    ("eval.bound_c", "1"),
    ("eval.bound_r", "65536"),
    ("sweep.axis", "seed"),
    ("sweep.values", "0,1,2,3,4,5,6,7,8,9"),
    ("sweep.methods", "zeroshot,saft,ft"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub classes: usize,
    pub class_seed: u64,
    pub domain_seed: u64,
    pub shots: usize,
    pub test_per_class: usize,
    pub style: f64,
    pub spurious: f64,
    pub shifts: Vec<Shift>,
    pub shift_magnitude: f64,
    pub siblings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub per_class: usize,
    pub heldout_per_class: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub protocol: String,
    pub alpha_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub bound_c: f64,
    pub bound_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Shots,
    Alpha,
    Strategy,
    Seed,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Shots => "shots",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Strategy => "strategy",
            SweepAxis::Seed => "seed",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shots" => Ok(SweepAxis::Shots),
            "alpha" => Ok(SweepAxis::Alpha),
            "strategy" => Ok(SweepAxis::Strategy),
            "seed" => Ok(SweepAxis::Seed),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected shots, alpha, strategy or seed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub universe: UniverseConfig,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Fine-tuning settings; `alpha`, `strategy` and `scope` come from the
    /// `selection` section and `seed` from the top-level seed.
    pub train: TrainConfig,
    pub wise_lambda: f64,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    entries: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_entries(BTreeMap::new()).expect("defaults are valid")
    }
}

fn get<T: FromStr>(entries: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: Display,
{
    let raw = &entries[key];
    raw.parse().map_err(|e| Error::Config(format!("{key}={raw}: {e}")))
}

fn list<T: FromStr>(entries: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    let raw = &entries[key];
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::Config(format!("{key}: {s:?}: {e}"))))
        .collect()
}

fn strings(entries: &BTreeMap<String, String>, key: &str) -> Vec<String> {
    entries[key]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Self::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn from_entries(given: BTreeMap<String, String>) -> Result<Self> {
        let mut entries: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in given {
            if !entries.contains_key(&k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            entries.insert(k, v);
        }
        let e = &entries;
        let seed: u64 = get(e, "seed")?;

        let universe = UniverseConfig {
            seed: get(e, "universe.seed")?,
            classes: get(e, "universe.classes")?,
            dim: get(e, "universe.dim")?,
            separation: get(e, "universe.separation")?,
            noise: get(e, "universe.noise")?,
            spurious: get(e, "universe.spurious")?,
            prompt_dim: get(e, "universe.prompt_dim")?,
        };
        let task = TaskConfig {
            classes: get(e, "task.classes")?,
            class_seed: get(e, "task.class_seed")?,
            domain_seed: get(e, "task.domain_seed")?,
            shots: get(e, "task.shots")?,
            test_per_class: get(e, "task.test_per_class")?,
            style: get(e, "task.style")?,
            spurious: get(e, "task.spurious")?,
            shifts: list(e, "task.shifts")?,
            shift_magnitude: get(e, "task.shift_magnitude")?,
            siblings: get(e, "task.siblings")?,
        };
        if task.classes < 2 {
            return Err(Error::Config("task.classes must be at least 2".into()));
        }
        if task.shots == 0 {
            return Err(Error::Config("task.shots must be at least 1".into()));
        }
        if task.siblings == 0 || task.siblings * task.classes > universe.classes {
            return Err(Error::Config(format!(
                "task.siblings × task.classes must fit in universe.classes ({})",
                universe.classes
            )));
        }
        let model = ModelConfig {
            image_input: universe.dim,
            image_hidden: list(e, "model.image_hidden")?,
            text_input: universe.classes + universe.prompt_dim,
            text_hidden: list(e, "model.text_hidden")?,
            embed_dim: get(e, "model.embed_dim")?,
            temperature: get(e, "model.temperature")?,
        };
        let pretrain = PretrainConfig {
            per_class: get(e, "pretrain.per_class")?,
            heldout_per_class: get(e, "pretrain.heldout_per_class")?,
            steps: get(e, "pretrain.steps")?,
            batch_size: get(e, "pretrain.batch_size")?,
            lr: get(e, "pretrain.lr")?,
            weight_decay: get(e, "pretrain.weight_decay")?,
            seed: get(e, "pretrain.seed")?,
        };
        let precision = match e["train.precision"].as_str() {
            "f32" | "32" => Precision::F32,
            "f64" | "64" => Precision::F64,
            other => {
                return Err(Error::Config(format!(
                    "train.precision must be f32 or f64, got {other:?}"
                )))
            }
        };
        let train = TrainConfig {
            alpha: get(e, "selection.alpha")?,
            strategy: get::<Strategy>(e, "selection.strategy")?,
            scope: get::<Scope>(e, "selection.scope")?,
            steps: get(e, "train.steps")?,
            batch_size: get(e, "train.batch_size")?,
            lr: get(e, "train.lr")?,
            weight_decay: get(e, "train.weight_decay")?,
            beta1: get(e, "train.beta1")?,
            beta2: get(e, "train.beta2")?,
            eps: get(e, "train.eps")?,
            schedule: get::<Schedule>(e, "train.schedule")?,
            seed,
            precision,
        };
        train.validate()?;
        let wise_lambda: f64 = get(e, "train.wise_lambda")?;
        if !(0.0..=1.0).contains(&wise_lambda) {
            return Err(Error::Config("train.wise_lambda must lie in [0, 1]".into()));
        }
        let eval = EvalConfig {
            protocol: e["eval.protocol"].clone(),
            alpha_grid: list(e, "eval.alpha_grid")?,
            gamma_grid: list(e, "eval.gamma_grid")?,
            seeds: list(e, "eval.seeds")?,
            bound_c: get(e, "eval.bound_c")?,
            bound_r: get(e, "eval.bound_r")?,
        };
        if eval.alpha_grid.windows(2).any(|w| w[0] > w[1]) || eval.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("eval.alpha_grid must be ascending within [0, 1]".into()));
        }
        if eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds is empty".into()));
        }
        let sweep = SweepConfig {
            axis: get(e, "sweep.axis")?,
            values: strings(e, "sweep.values"),
            methods: strings(e, "sweep.methods"),
        };
        Ok(Self {
            seed,
            universe,
            task,
            model,
            pretrain,
            train,
            wise_lambda,
            eval,
            sweep,
            entries,
        })
    }

    /// Returns a copy with one key replaced.
    pub fn with(&self, key: &str, value: impl Display) -> Result<Self> {
        let mut entries = self.entries.clone();
        if !entries.contains_key(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        entries.insert(key.to_string(), value.to_string());
        Self::from_entries(entries)
    }

    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        self.with("seed", seed)
    }

    pub fn value(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Every resolved key, sorted, as `key=value` lines.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> u64 {
        checksum64(self.canonical().as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = ExperimentConfig::default();
        assert_eq!(c.train.alpha, 0.001);
        assert_eq!(c.task.shots, 16);
        assert_eq!(c.train.weight_decay, 0.1);
        assert_eq!(c.model.text_input, 32);
        assert_eq!(c.eval.alpha_grid, vec![0.0, 0.001, 0.01, 0.1, 1.0]);
    }

    #[test]
    fn canonical_ignores_order_whitespace_and_comments() {
        let a = ExperimentConfig::parse("train.lr = 0.01\n# note\n\nseed=3\n").unwrap();
        let b = ExperimentConfig::parse("  seed=3\ntrain.lr=0.01  ").unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn explicit_default_hashes_like_omitted() {
        let a = ExperimentConfig::parse("selection.alpha=0.001").unwrap();
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn seed_override_changes_hash_and_train_seed() {
        let c = ExperimentConfig::default().with_seed(9).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(ExperimentConfig::parse("nope=1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("seed"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::parse("seed=1\nseed=2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("selection.alpha=2"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::parse("selection.strategy=magic").is_err());
        assert!(ExperimentConfig::parse("sweep.axis=colour").is_err());
        assert!(ExperimentConfig::parse("eval.alpha_grid=0.5,0.1").is_err());
        assert!(ExperimentConfig::parse("task.shifts=rotate,warp").is_err());
    }

    #[test]
    fn round_trips_through_canonical_text() {
        let c = ExperimentConfig::parse("train.precision=f64\nsweep.axis=shots\nsweep.values=1,2,4").unwrap();
        let again = ExperimentConfig::parse(&c.canonical()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.train.precision, Precision::F64);
        assert_eq!(again.sweep.axis, SweepAxis::Shots);
    }
}
