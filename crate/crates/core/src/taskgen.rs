//! Deterministic synthetic benchmark families.
//!
//! A [`Universe`] holds Gaussian class prototypes in `R^p` whose last
//! coordinate is a spurious axis: its mean is weakly tied to a per-class
//! code in the universe and strongly tied to it inside a [`Task`]. Each
//! task also applies its own fixed linear "style" distortion, so a model
//! pre-trained on the universe starts below its ceiling on the task.
//! Shifted test variants reuse the in-distribution test examples and labels,
//! rendered in the universe's own (unstyled) domain with the task's spurious
//! axis, then shifted.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Array;
use crate::data::Split;
use crate::model::ClassPromptBank;
use crate::store::checksum64;
use crate::{Error, Result};

const PACKING_RETRIES: usize = 10_000;

/// Independent generator stream for `(seed, tag)`.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    ChaCha8Rng::seed_from_u64(checksum64(&bytes))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniverseConfig {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    /// Mean spurious value is `spurious · code(class)` in the universe.
    pub spurious: f64,
    pub prompt_dim: usize,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 24,
            dim: 16,
            separation: 2.0,
            noise: 0.6,
            spurious: 0.5,
            prompt_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    config: UniverseConfig,
    prototypes: Vec<f64>,
    code: Vec<f64>,
    bank: ClassPromptBank,
}

/// Builds a universe whose prototypes are pairwise at least `separation` apart.
pub fn make_universe(config: &UniverseConfig) -> Result<Universe> {
    let (l, p) = (config.classes, config.dim);
    if l < 4 {
        return Err(Error::invalid("a universe needs at least 4 classes"));
    }
    if p < 2 {
        return Err(Error::invalid("feature dimension must be at least 2"));
    }
    if !(config.separation > 0.0) || !(config.noise >= 0.0) {
        return Err(Error::invalid("separation must be positive and noise non-negative"));
    }
    let mut rng = stream(config.seed, "prototypes");
    let mut prototypes: Vec<f64> = Vec::with_capacity(l * p);
    for c in 0..l {
        let mut placed = false;
        for _ in 0..PACKING_RETRIES {
            let cand: Vec<f64> = (0..p - 1)
                .map(|_| f32_exact(gauss(&mut rng)))
                .chain(std::iter::once(0.0))
                .collect();
            let far_enough = (0..c).all(|o| {
                let other = &prototypes[o * p..(o + 1) * p];
                dist(&cand, other) >= config.separation
            });
            if far_enough {
                prototypes.extend(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasiblePacking {
                classes: l,
                dim: p,
                separation: config.separation,
            });
        }
    }

    // evenly spaced in [-1, 1], so negation maps one class's code onto another's
    let mut code: Vec<f64> = (0..l)
        .map(|c| f32_exact(-1.0 + 2.0 * c as f64 / (l - 1) as f64))
        .collect();
    code.shuffle(&mut stream(config.seed, "spurious-code"));

    let q = l + config.prompt_dim;
    let mut prompt_rng = stream(config.seed, "prompt");
    let prompt: Vec<f64> = (0..config.prompt_dim)
        .map(|_| f32_exact(0.5 * gauss(&mut prompt_rng)))
        .collect();
    let mut desc = vec![0.0; l * q];
    for c in 0..l {
        desc[c * q + c] = 1.0;
        desc[c * q + l..(c + 1) * q].copy_from_slice(&prompt);
    }
    let bank = ClassPromptBank::new((0..l as u32).collect(), Array::matrix(l, q, desc)?)?;

    Ok(Universe {
        config: config.clone(),
        prototypes,
        code,
        bank,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Universe {
    pub fn config(&self) -> &UniverseConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn prototype(&self, class: u32) -> &[f64] {
        let p = self.config.dim;
        &self.prototypes[class as usize * p..(class as usize + 1) * p]
    }

    pub fn prototypes(&self) -> &[f64] {
        &self.prototypes
    }

    /// Spurious-axis code of a class, in `[-1, 1]`.
    pub fn spurious_code(&self, class: u32) -> f64 {
        self.code[class as usize]
    }

    /// Descriptor bank over every universe class.
    pub fn bank(&self) -> &ClassPromptBank {
        &self.bank
    }

    /// Minimum pairwise prototype distance.
    pub fn min_separation(&self) -> f64 {
        let (l, p) = (self.config.classes, self.config.dim);
        let mut best = f64::INFINITY;
        for a in 0..l {
            for b in a + 1..l {
                best = best.min(dist(
                    &self.prototypes[a * p..(a + 1) * p],
                    &self.prototypes[b * p..(b + 1) * p],
                ));
            }
        }
        best
    }

    /// Content hash of the prototype matrix.
    pub fn prototype_hash(&self) -> u64 {
        let bytes: Vec<u8> = self.prototypes.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
        checksum64(&bytes)
    }

    fn draw(&self, class: u32, spurious_mean: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = self.config.dim;
        let proto = self.prototype(class);
        let mut x: Vec<f64> = (0..p - 1).map(|i| proto[i] + self.config.noise * gauss(rng)).collect();
        x.push(spurious_mean * self.spurious_code(class) + self.config.noise * gauss(rng));
        x
    }

    /// Draws `per_class` examples of each listed class from the universe
    /// distribution, class-major order.
    pub fn sample(&self, classes: &[u32], per_class: usize, seed: u64, tag: &str) -> Result<Split> {
        let mut rng = stream(seed, tag);
        let mut out = Split::empty(self.config.dim);
        for &c in classes {
            if c as usize >= self.config.classes {
                return Err(Error::UnknownLabel(c));
            }
            for _ in 0..per_class {
                let x: Vec<f64> = self
                    .draw(c, self.config.spurious, &mut rng)
                    .into_iter()
                    .map(f32_exact)
                    .collect();
                out.push(&x, c);
            }
        }
        Ok(out)
    }
}

/// `s` examples per class from the universe distribution.
pub fn sample_few_shot(universe: &Universe, classes: &[u32], shots: usize, seed: u64) -> Result<Split> {
    if shots == 0 {
        return Err(Error::invalid("shots must be at least 1"));
    }
    universe.sample(classes, shots, seed, "few-shot")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shift {
    Rotate,
    Noise,
    SpuriousFlip,
    StyleShear,
}

impl Shift {
    pub const ALL: [Shift; 4] = [Shift::Rotate, Shift::Noise, Shift::SpuriousFlip, Shift::StyleShear];

    pub fn as_str(self) -> &'static str {
        match self {
            Shift::Rotate => "rotate",
            Shift::Noise => "noise",
            Shift::SpuriousFlip => "spurious_flip",
            Shift::StyleShear => "style_shear",
        }
    }
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Shift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shift::ALL
            .into_iter()
            .find(|sh| sh.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown shift {s:?}")))
    }
}

/// Rotation angle per unit magnitude.
const ROTATE_ANGLE: f64 = std::f64::consts::PI / 6.0;
/// Added noise standard deviation per unit magnitude.
const SHIFT_NOISE: f64 = 1.0;
/// Superdiagonal shear coefficient per unit magnitude.
const SHEAR: f64 = 0.6;

/// Applies a label-preserving covariate shift; the last coordinate is the
/// spurious axis. Magnitude 0 returns the split unchanged.
pub fn apply_shift(split: &Split, shift: Shift, magnitude: f64, seed: u64) -> Result<Split> {
    if !(magnitude >= 0.0) {
        return Err(Error::invalid(format!(
            "shift magnitude must be non-negative, got {magnitude}"
        )));
    }
    if magnitude == 0.0 {
        return Ok(split.clone());
    }
    let p = split.dim();
    let core = p - 1;
    let mut out = split.clone();
    match shift {
        Shift::Rotate => {
            let (s, c) = (magnitude * ROTATE_ANGLE).sin_cos();
            for row in out.rows_mut() {
                for i in (0..core.saturating_sub(1)).step_by(2) {
                    let (a, b) = (row[i], row[i + 1]);
                    row[i] = c * a - s * b;
                    row[i + 1] = s * a + c * b;
                }
            }
        }
        Shift::Noise => {
            let mut rng = stream(seed, "shift-noise");
            for row in out.rows_mut() {
                for v in row[..core].iter_mut() {
                    *v += magnitude * SHIFT_NOISE * gauss(&mut rng);
                }
            }
        }
        Shift::SpuriousFlip => {
            for row in out.rows_mut() {
                row[core] *= 1.0 - 2.0 * magnitude.min(1.0);
            }
        }
        Shift::StyleShear => {
            for row in out.rows_mut() {
                for i in 0..core.saturating_sub(1) {
                    row[i] += magnitude * SHEAR * row[i + 1];
                }
            }
        }
    }
    out.features_mut().iter_mut().for_each(|v| *v = f32_exact(*v));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub classes: Vec<u32>,
    /// Identity of the task's domain (style map and test split).
    pub domain_seed: u64,
    /// Few-shot sampling seed.
    pub seed: u64,
    pub shots: usize,
    pub test_per_class: usize,
    /// Strength of the task's linear style distortion.
    pub style: f64,
    /// Mean spurious value `spurious · code(class)` inside the task.
    pub spurious: f64,
    pub shifts: Vec<Shift>,
    pub shift_magnitude: f64,
}

/// One downstream task: few-shot train split, test split, shifted test
/// variants and a base/new class partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub classes: Vec<u32>,
    pub train: Split,
    pub test: Split,
    pub ood: Vec<(String, Split)>,
    pub base: Vec<u32>,
    pub new: Vec<u32>,
}

impl Task {
    pub fn bank(&self, universe_bank: &ClassPromptBank) -> Result<ClassPromptBank> {
        universe_bank.restrict(&self.classes)
    }
}

/// Fixed per-domain linear map on the non-spurious coordinates: `I + style·G/√p`.
fn style_matrix(dim: usize, style: f64, domain_seed: u64) -> Vec<f64> {
    let mut rng = stream(domain_seed, "style");
    let scale = style / (dim as f64).sqrt();
    let mut a = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            a[i * dim + j] = scale * gauss(&mut rng) + if i == j { 1.0 } else { 0.0 };
        }
    }
    a
}

fn into_domain(universe: &Universe, split: &Split, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Split {
    let p = split.dim();
    let core = p - 1;
    let a = style_matrix(core, spec.style, spec.domain_seed);
    let mut out = Split::empty(p);
    for i in 0..split.len() {
        let x = split.row(i);
        let label = split.labels()[i];
        let mut y = vec![0.0; p];
        for (r, yr) in y[..core].iter_mut().enumerate() {
            *yr = f32_exact((0..core).map(|c| a[r * core + c] * x[c]).sum());
        }
        y[core] = f32_exact(spec.spurious * universe.spurious_code(label) + universe.config.noise * gauss(rng));
        out.push(&y, label);
    }
    out
}

/// Materializes a task from the universe.
pub fn make_task(universe: &Universe, spec: &TaskSpec) -> Result<Task> {
    if spec.classes.len() < 2 {
        return Err(Error::invalid("a task needs at least two classes"));
    }
    if spec.test_per_class == 0 {
        return Err(Error::invalid("test split needs at least one example per class"));
    }
    let mut classes = spec.classes.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() != spec.classes.len() {
        return Err(Error::invalid("duplicate class in task"));
    }

    let clean_train = sample_few_shot(universe, &classes, spec.shots, spec.seed)?;
    let clean_test = universe.sample(&classes, spec.test_per_class, spec.domain_seed, "task-test")?;
    let train = into_domain(universe, &clean_train, spec, &mut stream(spec.seed, "train-spurious"));
    let test = into_domain(
        universe,
        &clean_test,
        spec,
        &mut stream(spec.domain_seed, "test-spurious"),
    );

    // Shifted variants start from the source rendering of the same test
    // examples, keeping the task's spurious axis.
    let mut source = clean_test;
    let core = source.dim() - 1;
    for (i, row) in source.rows_mut().enumerate() {
        row[core] = test.row(i)[core];
    }
    let ood = spec
        .shifts
        .iter()
        .map(|&sh| {
            Ok((
                sh.as_str().to_string(),
                apply_shift(&source, sh, spec.shift_magnitude, spec.domain_seed)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (base, new) = base_new_split(&classes, 0.5)?;
    Ok(Task {
        name: spec.name.clone(),
        classes,
        train,
        test,
        ood,
        base,
        new,
    })
}

/// First `⌊fraction·L⌋` sorted labels are base, the rest new.
pub fn base_new_split(classes: &[u32], fraction: f64) -> Result<(Vec<u32>, Vec<u32>)> {
    if classes.len() < 2 {
        return Err(Error::invalid("base/new split needs at least two classes"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("base fraction must lie in [0, 1]"));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    let cut = (fraction * sorted.len() as f64).floor() as usize;
    let new = sorted.split_off(cut);
    Ok((sorted, new))
}

/// `count` disjoint class subsets of size `size`, drawn from a seeded
/// permutation of the universe's classes.
pub fn sibling_class_sets(universe: &Universe, count: usize, size: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if count * size > universe.classes() {
        return Err(Error::invalid(format!(
            "{count} tasks of {size} classes exceed the universe's {} classes",
            universe.classes()
        )));
    }
    let mut perm: Vec<u32> = (0..universe.classes() as u32).collect();
    perm.shuffle(&mut stream(seed, "siblings"));
    Ok(perm
        .chunks(size)
        .take(count)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect())
}

/// Uniform integer in `[0, n)` from a tagged stream.
pub fn seeded_index(seed: u64, tag: &str, n: usize) -> usize {
    stream(seed, tag).random_range(0..n)
}
