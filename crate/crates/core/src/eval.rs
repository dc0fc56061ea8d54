//! Metrics, evaluation protocols and report writers.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Rate, Split};
use crate::model::{ClassPromptBank, DualEncoder, FlatParams};
use crate::store::write_atomic;
use crate::taskgen::Task;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "method,protocol,split,seed,alpha,accuracy,loss,n";

/// Restricts `bank` to the labels present in `split`.
fn split_bank(split: &Split, bank: &ClassPromptBank) -> Result<ClassPromptBank> {
    bank.restrict(&split.label_set())
}

/// Fraction of examples whose own class has strictly the highest similarity,
/// with the softmax restricted to the split's label set. Ties count as errors.
pub fn accuracy(model: &DualEncoder, params: &FlatParams, split: &Split, bank: &ClassPromptBank) -> Result<Rate> {
    if split.is_empty() {
        return Err(Error::invalid("accuracy of an empty split"));
    }
    let bank = split_bank(split, bank)?;
    let margins = model.margins(params, split, &bank)?;
    Ok(Rate {
        count: margins.iter().filter(|&&m| m > 0.0).count(),
        total: margins.len(),
    })
}

/// Mean cross-entropy over the split in 64-bit, restricted to its label set.
pub fn split_loss(model: &DualEncoder, params: &FlatParams, split: &Split, bank: &ClassPromptBank) -> Result<f64> {
    let bank = split_bank(split, bank)?;
    model.ce_loss(params, &bank.full_batch(split)?, &bank)
}

/// `2ab/(a+b)`; zero when both are zero.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0) || !(b >= 0.0) {
        return Err(Error::invalid(format!("harmonic mean of negative values ({a}, {b})")));
    }
    if a == b {
        return Ok(a);
    }
    Ok(2.0 * a * b / (a + b))
}

/// `C·√(d·ln r / N)`.
pub fn generalization_bound(d: f64, r: f64, n: f64, c: f64) -> Result<f64> {
    if !(d >= 0.0)
        || !(r >= 2.0)
        || !(n >= 1.0)
        || !(c > 0.0)
        || !(d.is_finite() && r.is_finite() && n.is_finite() && c.is_finite())
    {
        return Err(Error::invalid(format!(
            "bound needs d ≥ 0, r ≥ 2, N ≥ 1, C > 0 (got d={d}, r={r}, N={n}, C={c})"
        )));
    }
    Ok(c * (d * r.ln() / n).sqrt())
}

/// `(γ, L_γ)` for each margin, restricted to the split's label set.
pub fn margin_curve(
    model: &DualEncoder,
    params: &FlatParams,
    split: &Split,
    bank: &ClassPromptBank,
    gammas: &[f64],
) -> Result<Vec<(f64, Rate)>> {
    let bank = split_bank(split, bank)?;
    let rates = model.margin_losses(params, split, &bank, gammas)?;
    Ok(gammas.iter().copied().zip(rates).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub protocol: String,
    pub split: String,
    pub seed: u64,
    pub alpha: f64,
    pub accuracy: f64,
    /// Absent for derived rows (averages, harmonic means).
    pub loss: Option<f64>,
    pub n: usize,
}

impl MetricRow {
    fn key(&self) -> (String, String, String, u64, u64) {
        (
            self.method.clone(),
            self.protocol.clone(),
            self.split.clone(),
            self.seed,
            self.alpha.to_bits(),
        )
    }
}

/// Result rows keyed by `(method, protocol, split, seed, alpha)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(Error::invalid(format!("accuracy {} outside [0, 1]", row.accuracy)));
        }
        let key = row.key();
        if self.rows.iter().any(|r| r.key() == key) {
            return Err(Error::invalid(format!(
                "duplicate row ({}, {}, {}, seed {}, alpha {})",
                row.method, row.protocol, row.split, row.seed, row.alpha
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: MetricTable) -> Result<()> {
        other.rows.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn find(&self, method: &str, split: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method && r.split == split)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_HEADER.split(','))
            .map_err(|e| Error::invalid(e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r
            .headers()
            .map_err(|e| Error::format("<csv>", e.to_string()))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != CSV_HEADER {
            return Err(Error::format("<csv>", format!("unexpected header {header:?}")));
        }
        let mut table = MetricTable::new();
        for row in r.deserialize() {
            table.push(row.map_err(|e| Error::format("<csv>", e.to_string()))?)?;
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path, overwrite: bool) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes(), overwrite)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }
}

/// Identity of the rows an evaluation emits.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLabel {
    pub method: String,
    pub seed: u64,
    pub alpha: f64,
}

impl RowLabel {
    pub fn new(method: impl Into<String>, seed: u64, alpha: f64) -> Self {
        Self {
            method: method.into(),
            seed,
            alpha,
        }
    }

    fn row(&self, protocol: &str, split: &str, accuracy: f64, loss: Option<f64>, n: usize) -> MetricRow {
        MetricRow {
            method: self.method.clone(),
            protocol: protocol.into(),
            split: split.into(),
            seed: self.seed,
            alpha: self.alpha,
            accuracy,
            loss,
            n,
        }
    }
}

fn measured_row(
    label: &RowLabel,
    protocol: &str,
    name: &str,
    model: &DualEncoder,
    params: &FlatParams,
    split: &Split,
    bank: &ClassPromptBank,
) -> Result<MetricRow> {
    let acc = accuracy(model, params, split, bank)?;
    let loss = split_loss(model, params, split, bank)?;
    Ok(label.row(protocol, name, acc.value(), Some(loss), acc.total))
}

/// Rows `id`, one per shift variant, and `ood_avg` (unweighted mean over variants).
pub fn ood_suite_eval(
    model: &DualEncoder,
    params: &FlatParams,
    task: &Task,
    bank: &ClassPromptBank,
    label: &RowLabel,
) -> Result<MetricTable> {
    if task.ood.is_empty() {
        return Err(Error::invalid("task has no shifted variants"));
    }
    let mut table = MetricTable::new();
    table.push(measured_row(label, "shift", "id", model, params, &task.test, bank)?)?;
    let mut accs = Vec::with_capacity(task.ood.len());
    let mut n = 0;
    for (name, split) in &task.ood {
        let row = measured_row(label, "shift", name, model, params, split, bank)?;
        accs.push(row.accuracy);
        n += row.n;
        table.push(row)?;
    }
    let avg = accs.iter().sum::<f64>() / accs.len() as f64;
    table.push(label.row("shift", "ood_avg", avg, None, n))?;
    Ok(table)
}

/// Rows `base`, `new` and `h`. Each accuracy uses only its own label set.
pub fn base_new_eval(
    model: &DualEncoder,
    params: &FlatParams,
    task: &Task,
    bank: &ClassPromptBank,
    label: &RowLabel,
) -> Result<MetricTable> {
    let base = task.test.filter_labels(&task.base);
    let new = task.test.filter_labels(&task.new);
    let mut table = MetricTable::new();
    let b = measured_row(label, "base_new", "base", model, params, &base, bank)?;
    let n = measured_row(label, "base_new", "new", model, params, &new, bank)?;
    let h = harmonic_mean(b.accuracy, n.accuracy)?;
    let total = b.n + n.n;
    table.push(b)?;
    table.push(n)?;
    table.push(label.row("base_new", "h", h, None, total))?;
    Ok(table)
}

/// Rows `source` (the fine-tuning task's test split), one per sibling task and
/// `transfer_avg` over the siblings.
pub fn cross_task_eval(
    model: &DualEncoder,
    params: &FlatParams,
    source: &Task,
    siblings: &[Task],
    bank: &ClassPromptBank,
    label: &RowLabel,
) -> Result<MetricTable> {
    if siblings.is_empty() {
        return Err(Error::invalid("cross-task evaluation needs at least one sibling task"));
    }
    let mut table = MetricTable::new();
    table.push(measured_row(
        label,
        "cross_task",
        "source",
        model,
        params,
        &source.test,
        bank,
    )?)?;
    let mut accs = Vec::new();
    let mut n = 0;
    for t in siblings {
        let row = measured_row(label, "cross_task", &t.name, model, params, &t.test, bank)?;
        accs.push(row.accuracy);
        n += row.n;
        table.push(row)?;
    }
    let avg = accs.iter().sum::<f64>() / accs.len() as f64;
    table.push(label.row("cross_task", "transfer_avg", avg, None, n))?;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityPoint {
    pub alpha: f64,
    pub id: f64,
    pub ood_avg: f64,
}

/// Rows for a sparsity sweep: the `id` and `ood_avg` rows of each α's shift table.
pub fn sparsity_points(table: &MetricTable) -> Vec<SparsityPoint> {
    let alphas: BTreeSet<u64> = table.rows().iter().map(|r| r.alpha.to_bits()).collect();
    let mut out: Vec<SparsityPoint> = alphas
        .into_iter()
        .filter_map(|bits| {
            let a = f64::from_bits(bits);
            let pick = |split: &str| {
                table
                    .rows()
                    .iter()
                    .find(|r| r.alpha.to_bits() == bits && r.split == split)
                    .map(|r| r.accuracy)
            };
            Some(SparsityPoint {
                alpha: a,
                id: pick("id")?,
                ood_avg: pick("ood_avg")?,
            })
        })
        .collect();
    out.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("mean of no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// 1-based ranks with ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_sd(&rx)?;
    let (my, _) = mean_sd(&ry)?;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// A standalone SVG of ID and OOD accuracy against α. The x axis is the
/// index into the α grid so that 0 and small values stay readable.
pub fn sparsity_plot_svg(points: &[SparsityPoint]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let n = points.len().max(2) as f64;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (n - 1.0);
    let y = |acc: f64| H - PAD - (H - 2.0 * PAD) * acc.clamp(0.0, 1.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    for t in 0..=4 {
        let acc = t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1:.1}" x2="{PAD}" y2="{1:.1}" stroke="black"/><text x="{2}" y="{3:.1}" text-anchor="end">{acc:.2}</text>"#,
            PAD - 4.0,
            y(acc),
            PAD - 6.0,
            y(acc) + 4.0,
        );
    }
    for (i, p) in points.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{1}" x2="{0:.1}" y2="{2}" stroke="black"/><text x="{0:.1}" y="{3}" text-anchor="middle">{4}</text>"#,
            x(i),
            H - PAD,
            H - PAD + 4.0,
            H - PAD + 16.0,
            p.alpha,
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">alpha</text>"#,
        W / 2.0,
        H - 10.0
    );
    for (name, colour, pick) in [
        ("ID", "#1f77b4", (|p: &SparsityPoint| p.id) as fn(&SparsityPoint) -> f64),
        ("OOD avg", "#d62728", |p: &SparsityPoint| p.ood_avg),
    ] {
        let pts: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{:.1},{:.1}", x(i), y(pick(p))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for (i, p) in points.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#,
                x(i),
                y(pick(p))
            );
        }
        let ly = if name == "ID" { PAD - 20.0 } else { PAD - 6.0 };
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{colour}">{name}</text>"#,
            W - PAD - 60.0
        );
    }
    s.push_str("</svg>\n");
    s
}
