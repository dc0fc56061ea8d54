//! Parameter importance and top-`d` mask construction.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Precision;
use crate::data::Split;
use crate::model::{ClassPromptBank, DualEncoder, FlatParams, Layout, Side};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Magnitude of the mean per-example gradient.
    GradMean,
    /// Mean squared per-example gradient (diagonal Fisher).
    FisherDiag,
    Random,
    /// Smallest absolute pre-trained weights.
    WeightMagnitude,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::GradMean,
        Strategy::FisherDiag,
        Strategy::Random,
        Strategy::WeightMagnitude,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::GradMean => "grad_mean",
            Strategy::FisherDiag => "fisher_diag",
            Strategy::Random => "random",
            Strategy::WeightMagnitude => "weight_magnitude",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown selection strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Scope {
    #[default]
    All,
    ImageOnly,
    TextOnly,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::ImageOnly => "image_only",
            Scope::TextOnly => "text_only",
        }
    }

    fn admits(self, side: Side) -> bool {
        match self {
            Scope::All => true,
            Scope::ImageOnly => side == Side::Image,
            Scope::TextOnly => side == Side::Text,
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            "image_only" => Ok(Scope::ImageOnly),
            "text_only" => Ok(Scope::TextOnly),
            _ => Err(Error::Config(format!("unknown selection scope {s:?}"))),
        }
    }
}

/// Per-parameter scores produced by a [`Strategy`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    values: Vec<f64>,
    strategy: Strategy,
    fingerprint: u64,
}

impl ImportanceVector {
    pub fn new(values: Vec<f64>, strategy: Strategy, fingerprint: u64) -> Result<Self> {
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite importance at index {k}")));
        }
        Ok(Self {
            values,
            strategy,
            fingerprint,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Hash of the data the scores were computed from (0 when data-free).
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Larger key ranks first. Magnitude for every strategy except weight
    /// magnitude, whose scores are `−|θ|` and rank by signed value.
    pub fn ranking_key(&self, k: usize) -> f64 {
        match self.strategy {
            Strategy::WeightMagnitude => self.values[k],
            _ => self.values[k].abs(),
        }
    }
}

/// `⌊α·n⌋`, snapping products within 1e-9 (relative) of an integer to that integer.
pub fn learnable_count(alpha: f64, n: usize) -> usize {
    let x = alpha * n as f64;
    let r = x.round();
    let count = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.floor()
    };
    (count.max(0.0) as usize).min(n)
}

/// Immutable learnable-parameter mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    bits: Vec<u8>,
    len: usize,
    alpha: f64,
    count: usize,
}

impl Mask {
    /// Builds a mask from explicit membership flags.
    pub fn from_bools(flags: &[bool], alpha: f64) -> Mask {
        let mut bits = vec![0u8; flags.len().div_ceil(8)];
        let mut count = 0;
        for (k, &on) in flags.iter().enumerate() {
            if on {
                bits[k / 8] |= 1 << (k % 8);
                count += 1;
            }
        }
        Mask {
            bits,
            len: flags.len(),
            alpha,
            count,
        }
    }

    /// Little-endian packed bytes (bit `k` is bit `k % 8` of byte `k / 8`).
    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Result<Mask> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::LengthMismatch {
                expected: len.div_ceil(8),
                got: bytes.len(),
            });
        }
        if !len.is_multiple_of(8) && bytes[len / 8] >> (len % 8) != 0 {
            return Err(Error::invalid("mask padding bits are set"));
        }
        let count = bytes.iter().map(|b| b.count_ones() as usize).sum();
        let alpha = if len == 0 { 0.0 } else { count as f64 / len as f64 };
        Ok(Mask {
            bits: bytes,
            len,
            alpha,
            count,
        })
    }

    pub fn all(len: usize) -> Mask {
        Mask::from_bools(&vec![true; len], 1.0)
    }

    pub fn none(len: usize) -> Mask {
        Mask::from_bools(&vec![false; len], 0.0)
    }

    /// Marks exactly the given segments.
    pub fn for_segments(layout: &Layout, names: &[&str]) -> Result<Mask> {
        let mut flags = vec![false; layout.total()];
        for name in names {
            let seg = layout
                .segment(name)
                .ok_or_else(|| Error::Layout(format!("no segment named {name}")))?;
            flags[seg.range()].iter_mut().for_each(|f| *f = true);
        }
        let count = flags.iter().filter(|f| **f).count();
        Ok(Mask::from_bools(&flags, count as f64 / layout.total() as f64))
    }

    #[inline]
    pub fn get(&self, k: usize) -> bool {
        self.bits[k / 8] >> (k % 8) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of learnable parameters `d`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&k| self.get(k))
    }
}

fn fingerprint(split: &Split) -> u64 {
    let mut bytes = Vec::with_capacity(split.len() * 8);
    for i in 0..split.len() {
        bytes.extend_from_slice(&split.example_hash(i).to_le_bytes());
    }
    crate::store::checksum64(&bytes)
}

/// 64-bit per-example gradients, computed in parallel, indexed by example.
fn per_example_gradients(
    model: &DualEncoder,
    params: &FlatParams,
    data: &Split,
    bank: &ClassPromptBank,
) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Err(Error::invalid("importance requires at least one example"));
    }
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let batch = bank.batch(data, &[i])?;
            let (_, g) = model
                .loss_and_grad(params, &batch, bank, Precision::F64)
                .map_err(|e| match e {
                    Error::Autodiff(_) => Error::NonFiniteGradient { example: i },
                    other => other,
                })?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { example: i });
            }
            Ok(g)
        })
        .collect()
}

/// Per-coordinate mean of `f(g_i)` over examples. Contributions are summed in
/// sorted order so the result does not depend on example order.
fn order_free_mean(grads: &[Vec<f64>], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = grads.len();
    let dim = grads[0].len();
    let mut column = vec![0.0; n];
    (0..dim)
        .map(|k| {
            for (slot, g) in column.iter_mut().zip(grads) {
                *slot = f(g[k]);
            }
            column.sort_unstable_by(f64::total_cmp);
            column.iter().sum::<f64>() / n as f64
        })
        .collect()
}

/// `w = (1/N) Σ ∇θ L_CE(x_i, y_i; θ)`.
pub fn importance_grad_mean(
    model: &DualEncoder,
    params: &FlatParams,
    data: &Split,
    bank: &ClassPromptBank,
) -> Result<ImportanceVector> {
    let grads = per_example_gradients(model, params, data, bank)?;
    ImportanceVector::new(order_free_mean(&grads, |g| g), Strategy::GradMean, fingerprint(data))
}

/// `w = (1/N) Σ (∇θ L_CE(x_i, y_i; θ))²`.
pub fn importance_fisher_diag(
    model: &DualEncoder,
    params: &FlatParams,
    data: &Split,
    bank: &ClassPromptBank,
) -> Result<ImportanceVector> {
    let grads = per_example_gradients(model, params, data, bank)?;
    ImportanceVector::new(
        order_free_mean(&grads, |g| g * g),
        Strategy::FisherDiag,
        fingerprint(data),
    )
}

/// Seeded uniform `[0, 1)` scores.
pub fn importance_random(len: usize, seed: u64) -> Result<ImportanceVector> {
    if len == 0 {
        return Err(Error::invalid("random importance needs D ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..len).map(|_| rng.random::<f64>()).collect();
    ImportanceVector::new(values, Strategy::Random, 0)
}

/// `w_k = −|θ_k|`: the smallest weights rank first.
pub fn importance_weight_magnitude(params: &FlatParams) -> Result<ImportanceVector> {
    let values = params.values().iter().map(|v| -v.abs()).collect();
    ImportanceVector::new(values, Strategy::WeightMagnitude, 0)
}

/// Dispatches on `strategy`.
pub fn importance(
    strategy: Strategy,
    model: &DualEncoder,
    params: &FlatParams,
    data: &Split,
    bank: &ClassPromptBank,
    seed: u64,
) -> Result<ImportanceVector> {
    match strategy {
        Strategy::GradMean => importance_grad_mean(model, params, data, bank),
        Strategy::FisherDiag => importance_fisher_diag(model, params, data, bank),
        Strategy::Random => importance_random(params.len(), seed),
        Strategy::WeightMagnitude => importance_weight_magnitude(params),
    }
}

/// Top-`⌊α·D_scope⌋` indices by ranking key, lower index first on ties.
///
/// Without a layout the scope must be [`Scope::All`].
pub fn build_mask(w: &ImportanceVector, alpha: f64, scope: Scope, layout: Option<&Layout>) -> Result<Mask> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut candidates: Vec<usize> = match (scope, layout) {
        (Scope::All, _) => (0..w.len()).collect(),
        (_, None) => return Err(Error::invalid("a layout is required for a restricted scope")),
        (_, Some(layout)) => {
            if layout.total() != w.len() {
                return Err(Error::LengthMismatch {
                    expected: layout.total(),
                    got: w.len(),
                });
            }
            layout
                .segments()
                .iter()
                .filter(|s| scope.admits(s.side))
                .flat_map(|s| s.range())
                .collect()
        }
    };
    let d = learnable_count(alpha, candidates.len());
    let mut flags = vec![false; w.len()];
    if d > 0 {
        let order = |a: &usize, b: &usize| w.ranking_key(*b).total_cmp(&w.ranking_key(*a)).then(a.cmp(b));
        if d < candidates.len() {
            candidates.select_nth_unstable_by(d - 1, order);
        }
        for &k in &candidates[..d] {
            flags[k] = true;
        }
    }
    Ok(Mask::from_bools(&flags, alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCount {
    pub name: String,
    pub side: Side,
    pub selected: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerHistogram {
    pub segments: Vec<SegmentCount>,
    pub image: usize,
    pub text: usize,
}

impl LayerHistogram {
    pub fn total(&self) -> usize {
        self.image + self.text
    }
}

/// Selected-parameter counts per segment and per side.
pub fn mask_layer_histogram(mask: &Mask, layout: &Layout) -> Result<LayerHistogram> {
    if mask.len() != layout.total() {
        return Err(Error::LengthMismatch {
            expected: layout.total(),
            got: mask.len(),
        });
    }
    let mut hist = LayerHistogram {
        segments: Vec::new(),
        image: 0,
        text: 0,
    };
    for s in layout.segments() {
        let selected = s.range().filter(|&k| mask.get(k)).count();
        match s.side {
            Side::Image => hist.image += selected,
            Side::Text => hist.text += selected,
        }
        hist.segments.push(SegmentCount {
            name: s.name.clone(),
            side: s.side,
            selected,
            len: s.len,
        });
    }
    Ok(hist)
}
