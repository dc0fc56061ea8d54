//! Dual encoder classifier.
//!
//! Two ReLU MLP towers embed an input feature vector and a class descriptor
//! into a shared `k`-dimensional space. Both embeddings are L2-normalized;
//! cosine similarities divided by a fixed temperature are the class logits.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Array, Precision, Tape, Var};
use crate::data::{Rate, Split};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Image,
    Text,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Image => "image",
            Side::Text => "text",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Side::Image => 0,
            Side::Text => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Side> {
        match tag {
            0 => Some(Side::Image),
            1 => Some(Side::Text),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub side: Side,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered, contiguous, non-overlapping segments covering `[0, D)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.offset != next {
                return Err(Error::Layout(format!(
                    "segment {} starts at {} but previous ended at {next}",
                    s.name, s.offset
                )));
            }
            next += s.len;
        }
        if next == 0 {
            return Err(Error::Layout("layout covers zero parameters".into()));
        }
        Ok(Self { segments, total: next })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total parameter count `D`.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn side_of(&self, index: usize) -> Option<Side> {
        self.segments
            .iter()
            .find(|s| s.range().contains(&index))
            .map(|s| s.side)
    }
}

/// The flattened parameter vector with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl FlatParams {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::LengthMismatch {
                expected: layout.total(),
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.layout.clone())
    }

    /// Bitwise equality of values and layouts.
    pub fn bitwise_eq(&self, other: &FlatParams) -> bool {
        self.layout == other.layout
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// One descriptor vector per class label; row order defines class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPromptBank {
    labels: Vec<u32>,
    descriptors: Array,
}

impl ClassPromptBank {
    pub fn new(labels: Vec<u32>, descriptors: Array) -> Result<Self> {
        let shape = descriptors.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::invalid(format!(
                "descriptor matrix {shape:?} does not match {} labels",
                labels.len()
            )));
        }
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate label in class bank"));
        }
        Ok(Self { labels, descriptors })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.shape()[1]
    }

    pub fn descriptors(&self) -> &Array {
        &self.descriptors
    }

    pub fn index_of(&self, label: u32) -> Result<usize> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .ok_or(Error::UnknownLabel(label))
    }

    /// Sub-bank with rows for `labels`, in the given order.
    pub fn restrict(&self, labels: &[u32]) -> Result<ClassPromptBank> {
        let q = self.descriptor_dim();
        let mut data = Vec::with_capacity(labels.len() * q);
        for &l in labels {
            let i = self.index_of(l)?;
            data.extend_from_slice(&self.descriptors.data()[i * q..(i + 1) * q]);
        }
        ClassPromptBank::new(labels.to_vec(), Array::matrix(labels.len(), q, data)?)
    }

    /// Feature matrix and bank-relative targets for the given rows of a split.
    pub fn batch(&self, split: &Split, rows: &[usize]) -> Result<Batch> {
        let p = split.dim();
        let mut features = Vec::with_capacity(rows.len() * p);
        let mut targets = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(split.row(r));
            targets.push(self.index_of(split.labels()[r])?);
        }
        Ok(Batch {
            features: Array::matrix(rows.len(), p, features)?,
            targets,
        })
    }

    pub fn full_batch(&self, split: &Split) -> Result<Batch> {
        let rows: Vec<usize> = (0..split.len()).collect();
        self.batch(split, &rows)
    }
}

/// Inputs (`B×p`) and bank-relative class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_input: usize,
    pub image_hidden: Vec<usize>,
    pub text_input: usize,
    pub text_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub temperature: f64,
}

impl ModelConfig {
    /// Image MLP `[p → 32 → 16]`, text MLP `[q → 32 → 16]`, τ = 0.07.
    pub fn with_inputs(image_input: usize, text_input: usize) -> Self {
        Self {
            image_input,
            image_hidden: vec![32],
            text_input,
            text_hidden: vec![32],
            embed_dim: 16,
            temperature: 0.07,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    config: ModelConfig,
    layout: Arc<Layout>,
    image_layers: Vec<LayerShape>,
    text_layers: Vec<LayerShape>,
}

/// Per-segment tape handles, in layout order (weight, bias per layer).
struct Bound {
    vars: Vec<Var>,
}

impl DualEncoder {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if !(config.temperature > 0.0 && config.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if config.image_input == 0 || config.text_input == 0 || config.embed_dim == 0 {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        let shapes = |input: usize, hidden: &[usize]| -> Result<Vec<LayerShape>> {
            let mut widths = vec![input];
            widths.extend_from_slice(hidden);
            widths.push(config.embed_dim);
            if widths.contains(&0) {
                return Err(Error::invalid("encoder widths must be positive"));
            }
            Ok(widths
                .windows(2)
                .map(|w| LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                })
                .collect())
        };
        let image_layers = shapes(config.image_input, &config.image_hidden)?;
        let text_layers = shapes(config.text_input, &config.text_hidden)?;

        let mut segments = Vec::new();
        let mut offset = 0;
        for (side, layers) in [(Side::Image, &image_layers), (Side::Text, &text_layers)] {
            for (i, l) in layers.iter().enumerate() {
                for (kind, len) in [("weight", l.fan_in * l.fan_out), ("bias", l.fan_out)] {
                    segments.push(Segment {
                        name: format!("{}.{i}.{kind}", side.as_str()),
                        offset,
                        len,
                        side,
                    });
                    offset += len;
                }
            }
        }
        Ok(Self {
            layout: Arc::new(Layout::new(segments)?),
            config,
            image_layers,
            text_layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    /// Names of the final image layer's weight and bias segments.
    pub fn image_head_segments(&self) -> [String; 2] {
        let last = self.image_layers.len() - 1;
        [format!("image.{last}.weight"), format!("image.{last}.bias")]
    }

    /// He-normal weights, zero biases.
    pub fn init_params(&self, seed: u64, precision: Precision) -> FlatParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.num_params()];
        let layers = self.image_layers.iter().chain(&self.text_layers);
        let weights = self.layout.segments().iter().step_by(2);
        for (seg, l) in weights.zip(layers) {
            let normal = Normal::new(0.0, (2.0 / l.fan_in as f64).sqrt()).expect("valid std");
            for v in &mut values[seg.range()] {
                *v = precision.round(normal.sample(&mut rng));
            }
        }
        FlatParams {
            values,
            layout: self.layout.clone(),
        }
    }

    fn check_params(&self, params: &FlatParams) -> Result<()> {
        if params.layout != self.layout && *params.layout != *self.layout {
            return Err(Error::Layout("parameters do not match the model layout".into()));
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape, params: &FlatParams, track: bool) -> Bound {
        let layers = self.image_layers.iter().chain(&self.text_layers);
        let mut vars = Vec::with_capacity(self.layout.segments().len());
        let segs = self.layout.segments();
        for (i, l) in layers.enumerate() {
            let w = &segs[2 * i];
            let b = &segs[2 * i + 1];
            let warr = Array::matrix(l.fan_in, l.fan_out, params.values[w.range()].to_vec())
                .expect("layout matches layer shape");
            let barr =
                Array::matrix(1, l.fan_out, params.values[b.range()].to_vec()).expect("layout matches layer shape");
            for arr in [warr, barr] {
                vars.push(if track { tape.leaf(arr) } else { tape.constant(arr) });
            }
        }
        Bound { vars }
    }

    fn tower(&self, tape: &mut Tape, bound: &Bound, side: Side, input: Array) -> Result<Var> {
        let (layers, first) = match side {
            Side::Image => (&self.image_layers, 0),
            Side::Text => (&self.text_layers, self.image_layers.len()),
        };
        let rows = input.shape()[0];
        let ones = tape.constant(Array::filled(&[rows, 1], 1.0));
        let mut h = tape.constant(input);
        for (i, _) in layers.iter().enumerate() {
            let w = bound.vars[2 * (first + i)];
            let b = bound.vars[2 * (first + i) + 1];
            let z = tape.matmul(h, w)?;
            let bias = tape.matmul(ones, b)?;
            h = tape.add(z, bias)?;
            if i + 1 < layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(tape.l2_normalize(h)?)
    }

    fn check_input(&self, features: &Array, bank: &ClassPromptBank) -> Result<()> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.config.image_input {
            return Err(Error::invalid(format!(
                "expected features of width {}, got shape {s:?}",
                self.config.image_input
            )));
        }
        if bank.descriptor_dim() != self.config.text_input {
            return Err(Error::invalid(format!(
                "expected descriptors of width {}, got {}",
                self.config.text_input,
                bank.descriptor_dim()
            )));
        }
        Ok(())
    }

    /// Cosine similarity matrix `B×L` recorded on `tape`.
    fn similarity_var(&self, tape: &mut Tape, bound: &Bound, features: &Array, bank: &ClassPromptBank) -> Result<Var> {
        self.check_input(features, bank)?;
        let img = self.tower(tape, bound, Side::Image, features.clone())?;
        let txt = self.tower(tape, bound, Side::Text, bank.descriptors().clone())?;
        let txt_t = tape.transpose(txt)?;
        Ok(tape.matmul(img, txt_t)?)
    }

    /// Mean cross-entropy over the batch via a max-shifted log-sum-exp.
    fn ce_var(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, bank: &ClassPromptBank) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("cross-entropy of an empty batch"));
        }
        if bank.len() < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        let sims = self.similarity_var(tape, bound, &batch.features, bank)?;
        let logits = tape.scale(sims, 1.0 / self.config.temperature)?;
        let (b, l) = (batch.len(), bank.len());
        let values = tape.value(logits).data();
        let mut shift = Vec::with_capacity(b * l);
        for r in 0..b {
            let m = values[r * l..(r + 1) * l]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            shift.extend(std::iter::repeat_n(m, l));
        }
        let shift = tape.constant(Array::matrix(b, l, shift)?);
        let shifted = tape.sub(logits, shift)?;
        let e = tape.exp(shifted)?;
        let ones = tape.constant(Array::filled(&[l, 1], 1.0));
        let row_sums = tape.matmul(e, ones)?;
        let lse = tape.log(row_sums)?;
        let all_rows: Vec<usize> = (0..b).collect();
        let lse = tape.index_select(lse, &all_rows)?;
        let picks: Vec<usize> = batch.targets.iter().enumerate().map(|(r, &t)| r * l + t).collect();
        if batch.targets.iter().any(|&t| t >= l) {
            return Err(Error::invalid("target index outside the class bank"));
        }
        let picked = tape.index_select(shifted, &picks)?;
        let nll = tape.sub(lse, picked)?;
        Ok(tape.mean(nll)?)
    }

    /// Cosine similarities between each input row and each bank class (64-bit).
    pub fn similarities(&self, params: &FlatParams, features: &Array, bank: &ClassPromptBank) -> Result<Array> {
        self.check_params(params)?;
        let mut tape = Tape::new(Precision::F64);
        let bound = self.bind(&mut tape, params, false);
        let sims = self.similarity_var(&mut tape, &bound, features, bank)?;
        Ok(tape.value(sims).clone())
    }

    pub fn split_similarities(&self, params: &FlatParams, split: &Split, bank: &ClassPromptBank) -> Result<Array> {
        let x = Array::matrix(split.len(), split.dim(), split.features().to_vec())?;
        self.similarities(params, &x, bank)
    }

    /// `f(x, y)`: cosine similarity of the embeddings of `x` and class `y`.
    pub fn similarity(&self, params: &FlatParams, x: &[f64], label: u32, bank: &ClassPromptBank) -> Result<f64> {
        let y = bank.index_of(label)?;
        let sims = self.similarities(params, &Array::matrix(1, x.len(), x.to_vec())?, bank)?;
        Ok(sims.data()[y])
    }

    /// Softmax of similarities over temperature, in bank order.
    pub fn class_probabilities(&self, params: &FlatParams, x: &[f64], bank: &ClassPromptBank) -> Result<Vec<f64>> {
        if bank.len() < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        let sims = self.similarities(params, &Array::matrix(1, x.len(), x.to_vec())?, bank)?;
        Ok(softmax_with_temperature(sims.data(), self.config.temperature))
    }

    /// Mean cross-entropy of the batch (64-bit).
    pub fn ce_loss(&self, params: &FlatParams, batch: &Batch, bank: &ClassPromptBank) -> Result<f64> {
        self.check_params(params)?;
        let mut tape = Tape::new(Precision::F64);
        let bound = self.bind(&mut tape, params, false);
        let loss = self.ce_var(&mut tape, &bound, batch, bank)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Loss and flattened gradient at `precision`.
    pub fn loss_and_grad(
        &self,
        params: &FlatParams,
        batch: &Batch,
        bank: &ClassPromptBank,
        precision: Precision,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        let mut tape = Tape::new(precision);
        let bound = self.bind(&mut tape, params, true);
        let loss = self.ce_var(&mut tape, &bound, batch, bank)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(self.num_params());
        for v in &bound.vars {
            flat.extend(grads.remove(*v).expect("every leaf has a gradient").into_data());
        }
        Ok((value, flat))
    }

    /// Fraction of examples with `f(x, y) ≤ γ + max_{c≠y} f(x, c)`.
    pub fn margin_loss(&self, params: &FlatParams, split: &Split, bank: &ClassPromptBank, gamma: f64) -> Result<Rate> {
        let curve = self.margin_losses(params, split, bank, &[gamma])?;
        Ok(curve[0])
    }

    /// Margin losses for several margins from one forward pass.
    pub fn margin_losses(
        &self,
        params: &FlatParams,
        split: &Split,
        bank: &ClassPromptBank,
        gammas: &[f64],
    ) -> Result<Vec<Rate>> {
        if let Some(g) = gammas.iter().find(|g| !(**g >= 0.0)) {
            return Err(Error::invalid(format!("margin must be non-negative, got {g}")));
        }
        if split.is_empty() {
            return Ok(gammas.iter().map(|_| Rate { count: 0, total: 0 }).collect());
        }
        let gaps = self.margins(params, split, bank)?;
        Ok(gammas
            .iter()
            .map(|&g| Rate {
                count: gaps.iter().filter(|&&gap| gap <= g).count(),
                total: gaps.len(),
            })
            .collect())
    }

    /// Per-example `f(x, y) − max_{c≠y} f(x, c)`.
    pub fn margins(&self, params: &FlatParams, split: &Split, bank: &ClassPromptBank) -> Result<Vec<f64>> {
        if bank.len() < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        let sims = self.split_similarities(params, split, bank)?;
        let l = bank.len();
        split
            .labels()
            .iter()
            .enumerate()
            .map(|(r, &label)| {
                let y = bank.index_of(label)?;
                let row = &sims.data()[r * l..(r + 1) * l];
                let rival = row
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| *c != y)
                    .map(|(_, v)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                Ok(row[y] - rival)
            })
            .collect()
    }
}

/// Numerically stable `softmax(s / τ)`.
pub fn softmax_with_temperature(similarities: &[f64], temperature: f64) -> Vec<f64> {
    let max = similarities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = similarities.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
