//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p saft-lab --test acceptance -- --nocapture` to see
//! the report. Every tolerance, threshold and runtime budget is a constant
//! below; the trend thresholds were frozen after the calibration run
//! described in the README.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saft_core::autodiff::{grad_check, Array, Precision, Tape, Var};
use saft_core::config::ExperimentConfig;
use saft_core::data::Split;
use saft_core::eval::{
    accuracy, generalization_bound, harmonic_mean, margin_curve, mean_sd, sparsity_points, spearman, RowLabel,
};
use saft_core::experiment::{Lab, Method, Protocol};
use saft_core::model::{ClassPromptBank, DualEncoder, FlatParams, Layout, ModelConfig, Segment, Side};
use saft_core::select::{build_mask, importance, learnable_count, ImportanceVector, Mask, Scope, Strategy};
use saft_core::store::{decode_checkpoint, decode_mask, encode_checkpoint, encode_mask, Checkpoint, OptimizerBlocks};
use saft_core::train::{finetune_observed, TrainConfig};

// Criterion 1
const CARDINALITY_PAIRS: usize = 1000;
const MAX_D: f64 = 1e6;
const REFERENCE_D: usize = 149_620_000;
const REFERENCE_ALPHA: f64 = 0.001;
const REFERENCE_COUNT: usize = 149_620;
// Criterion 2
const ORACLE_SEEDS: u64 = 100;
const ORACLE_MAX_D: usize = 10_000;
// Criterion 3
const FROZEN_STEPS: usize = 200;
const FROZEN_ALPHAS: [f64; 3] = [0.001, 0.01, 0.1];
// Criterion 5
const PRIMITIVE_SHAPES: usize = 20;
const PRIMITIVE_TOL: f64 = 1e-6;
const PRIMITIVE_EPS: f64 = 1e-5;
const CE_CONFIGS: usize = 50;
const CE_TOL: f64 = 1e-4;
const CE_STEP: f64 = 1e-4;
/// Denominator floor of the CE relative error; gradients below it are pure FD roundoff.
const CE_FLOOR: f64 = 1e-6;
// Criterion 6
const HMEAN_CASES: [(f64, f64, f64); 2] = [(83.97, 74.78, 79.11), (77.74, 71.40, 74.44)];
const HMEAN_TOL: f64 = 0.01;
// Criterion 7
const BOUND_TRIPLES: usize = 1000;
// Criterion 8
const MARGIN_PAIRS: usize = 20;
// Criterion 9
const TREND_SEEDS: u64 = 10;
/// Desk-scale SAFT sparsity. D = 2656 here, so α = 0.001 leaves only two
/// learnable parameters; 0.01 (d = 26) is the default rescaled to this model.
const DESK_ALPHA: f64 = 0.01;
const MIN_WINS: usize = 7;
// Criterion 10
const ALPHA_GRID: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 1.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Fixture {
    lab: Lab,
    pretrained: FlatParams,
}

fn fixture() -> Fixture {
    let lab = Lab::new(ExperimentConfig::default()).unwrap();
    let pretrained = lab.pretrain().unwrap().params;
    Fixture { lab, pretrained }
}

fn tied_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = rng.random_range(1..50) as f64;
    (0..n)
        .map(|_| (rng.random_range(0.0..1.0) * levels).floor() / levels)
        .collect()
}

fn mask_cardinality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = tied_scores(&mut rng, MAX_D as usize);
    let mut bad = 0;
    for _ in 0..CARDINALITY_PAIRS {
        // D log-uniform in [1, 10^6]; α a decimal with six places so ⌊αD⌋ is exact in integers.
        let d = (10f64.powf(rng.random_range(0.0..MAX_D.log10())).round() as usize).clamp(1, MAX_D as usize);
        let millionths: u64 = rng.random_range(0..=1_000_000);
        let alpha = millionths as f64 / 1e6;
        let w = ImportanceVector::new(pool[..d].to_vec(), Strategy::Random, 0).unwrap();
        let mask = build_mask(&w, alpha, Scope::All, None).unwrap();
        if mask.count() as u64 != millionths * d as u64 / 1_000_000 {
            bad += 1;
        }
    }
    let reference = learnable_count(REFERENCE_ALPHA, REFERENCE_D);
    outcome(
        bad == 0 && reference == REFERENCE_COUNT,
        format!(
            "{bad}/{CARDINALITY_PAIRS} mismatches; D={REFERENCE_D} α={REFERENCE_ALPHA} → d={reference} ({:.2}M of {:.2}M)",
            reference as f64 / 1e6,
            REFERENCE_D as f64 / 1e6
        ),
    )
}

fn oracle(w: &ImportanceVector, alpha: f64) -> Vec<usize> {
    let keys: Vec<f64> = match w.strategy() {
        Strategy::WeightMagnitude => w.values().to_vec(),
        _ => w.values().iter().map(|v| v.abs()).collect(),
    };
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).unwrap().then(a.cmp(&b)));
    let mut top = order[..learnable_count(alpha, keys.len())].to_vec();
    top.sort_unstable();
    top
}

fn selection_oracle(f: &Fixture) -> Outcome {
    let universe = &f.lab.universe;
    let mut bad = 0;
    let mut largest = 0;
    for seed in 0..ORACLE_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            image_hidden: vec![rng.random_range(16..64)],
            text_hidden: vec![rng.random_range(16..64)],
            embed_dim: rng.random_range(4..24),
            ..f.lab.config.model.clone()
        };
        let model = DualEncoder::new(config).unwrap();
        assert!(model.num_params() <= ORACLE_MAX_D);
        largest = largest.max(model.num_params());
        let classes: Vec<u32> = (0..universe.classes() as u32)
            .filter(|_| rng.random_bool(0.5))
            .collect();
        let classes = if classes.len() < 2 { vec![0, 1] } else { classes };
        let data = universe
            .sample(&classes, rng.random_range(1..6), seed, "oracle")
            .unwrap();
        let bank = universe.bank().restrict(&classes).unwrap();
        // Half the seeds quantize the parameters so weight-magnitude ties occur.
        let mut params = model.init_params(seed, Precision::F64);
        if seed % 2 == 1 {
            params
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = (*v * 256.0).round() / 256.0);
        }
        for strategy in Strategy::ALL {
            let w = importance(strategy, &model, &params, &data, &bank, seed).unwrap();
            let alpha = rng.random_range(0.0..1.0) * if rng.random_bool(0.5) { 0.05 } else { 1.0 };
            let got: Vec<usize> = build_mask(&w, alpha, Scope::All, None).unwrap().selected().collect();
            if got != oracle(&w, alpha) {
                bad += 1;
            }
        }
    }
    outcome(
        bad == 0,
        format!("{bad}/{} mismatches, D up to {largest}", ORACLE_SEEDS * 4),
    )
}

fn frozen_invariant(f: &Fixture) -> Outcome {
    let task = f.lab.task(0).unwrap();
    let bank = f.lab.bank().restrict(&task.classes).unwrap();
    let mut violations = 0;
    let mut counts = Vec::new();
    for alpha in FROZEN_ALPHAS {
        let cfg = TrainConfig {
            alpha,
            steps: FROZEN_STEPS,
            ..f.lab.train_config(0)
        };
        let mask = f.lab.select(&f.pretrained, &task.train, &cfg).unwrap();
        let pre = &f.pretrained;
        let out = finetune_observed(
            &f.lab.model,
            pre,
            Some(&mask),
            &task.train,
            &bank,
            &cfg,
            "saft",
            |_, p, _| {
                violations += (0..p.len())
                    .filter(|&k| !mask.get(k) && p.values()[k].to_bits() != pre.values()[k].to_bits())
                    .count();
            },
        )
        .unwrap();
        violations += (0..pre.len())
            .filter(|&k| !mask.get(k) && out.params.values()[k].to_bits() != pre.values()[k].to_bits())
            .count();
        counts.push(format!("α={alpha}: d={}", mask.count()));
    }
    outcome(
        violations == 0,
        format!(
            "{violations} frozen entries moved over {FROZEN_STEPS} steps ({})",
            counts.join(", ")
        ),
    )
}

fn boundary_equivalences(f: &Fixture) -> Outcome {
    let task = f.lab.task(0).unwrap();
    let cfg = f.lab.train_config(0);
    let full = TrainConfig {
        alpha: 1.0,
        ..cfg.clone()
    };
    let saft1 = f
        .lab
        .fit(Method::Saft, &f.pretrained, &task.train, &full, None)
        .unwrap();
    let ft = f.lab.fit(Method::Ft, &f.pretrained, &task.train, &full, None).unwrap();
    let same_as_ft = saft1.params.bitwise_eq(&ft.params);

    let empty = TrainConfig { alpha: 0.0, ..cfg };
    let saft0 = f
        .lab
        .fit(Method::Saft, &f.pretrained, &task.train, &empty, None)
        .unwrap();
    let zs = f
        .lab
        .fit(Method::ZeroShot, &f.pretrained, &task.train, &empty, None)
        .unwrap();
    let unchanged = saft0.params.bitwise_eq(&f.pretrained);
    let label = RowLabel::new("model", 0, 0.0);
    let mut csv_equal = true;
    for protocol in [Protocol::Shift, Protocol::BaseNew, Protocol::CrossTask] {
        let a = f
            .lab
            .evaluate(protocol, &saft0.params, &label)
            .unwrap()
            .to_csv()
            .unwrap();
        let b = f.lab.evaluate(protocol, &zs.params, &label).unwrap().to_csv().unwrap();
        csv_equal &= a == b;
    }
    outcome(
        same_as_ft && unchanged && csv_equal,
        format!("α=1 ≡ FT: {same_as_ft}; α=0 ≡ pre-trained: {unchanged}; eval CSVs equal: {csv_equal}"),
    )
}

fn readout(t: &mut Tape, y: Var, w: &Array) -> saft_core::autodiff::Result<Var> {
    let c = t.constant(w.clone());
    let p = t.mul(y, c)?;
    t.sum(p)
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let mut a = rand_array(rng, shape, 0.1, 2.0);
    let flips: Vec<bool> = (0..a.len()).map(|_| rng.random_bool(0.5)).collect();
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(flips)
        .map(|(v, f)| if f { -v } else { *v })
        .collect();
    a = Array::new(shape.to_vec(), data).unwrap();
    a
}

/// Worst relative error over every primitive and shape.
fn primitive_errors() -> (f64, &'static str) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = (0.0, "");
    let mut note = |name: &'static str, e: f64| {
        if e > worst.0 {
            worst = (e, name);
        }
    };
    for _ in 0..PRIMITIVE_SHAPES {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..6));
        let s = [r, c];
        let w = rand_array(&mut rng, &s, 0.5, 1.5);
        let x = signed(&mut rng, &s);
        let pos = rand_array(&mut rng, &s, 0.2, 3.0);
        let other = rand_array(&mut rng, &s, -2.0, 2.0);
        let g = |f: &dyn Fn(&mut Tape, Var) -> saft_core::autodiff::Result<Var>, at: &Array| {
            grad_check(f, at, PRIMITIVE_EPS).unwrap()
        };
        note(
            "add",
            g(
                &|t, v| {
                    let o = t.constant(other.clone());
                    let y = t.add(v, o)?;
                    readout(t, y, &w)
                },
                &x,
            ),
        );
        note(
            "sub",
            g(
                &|t, v| {
                    let o = t.constant(other.clone());
                    let y = t.sub(o, v)?;
                    readout(t, y, &w)
                },
                &x,
            ),
        );
        note(
            "mul",
            g(
                &|t, v| {
                    let y = t.mul(v, v)?;
                    readout(t, y, &w)
                },
                &x,
            ),
        );
        note(
            "relu",
            g(
                &|t, v| {
                    let y = t.relu(v)?;
                    readout(t, y, &w)
                },
                &x,
            ),
        );
        note(
            "exp",
            g(
                &|t, v| {
                    let y = t.exp(v)?;
                    readout(t, y, &w)
                },
                &x,
            ),
        );
        note(
            "log",
            g(
                &|t, v| {
                    let y = t.log(v)?;
                    readout(t, y, &w)
                },
                &pos,
            ),
        );
        note(
            "square",
            g(
                &|t, v| {
                    let y = t.square(v)?;
                    readout(t, y, &w)
                },
                &x,
            ),
        );
        note(
            "sqrt",
            g(
                &|t, v| {
                    let y = t.sqrt(v)?;
                    readout(t, y, &w)
                },
                &pos,
            ),
        );
        note(
            "scale",
            g(
                &|t, v| {
                    let y = t.scale(v, -1.7)?;
                    readout(t, y, &w)
                },
                &x,
            ),
        );
        note(
            "sum",
            g(
                &|t, v| {
                    let y = t.square(v)?;
                    t.sum(y)
                },
                &x,
            ),
        );
        note(
            "mean",
            g(
                &|t, v| {
                    let y = t.exp(v)?;
                    t.mean(y)
                },
                &x,
            ),
        );
        note(
            "l2_normalize",
            g(
                &|t, v| {
                    let y = t.l2_normalize(v)?;
                    readout(t, y, &w)
                },
                &x,
            ),
        );
        let wt = rand_array(&mut rng, &[c, r], 0.5, 1.5);
        note(
            "transpose",
            g(
                &|t, v| {
                    let y = t.transpose(v)?;
                    readout(t, y, &wt)
                },
                &x,
            ),
        );
        let idx: Vec<usize> = (0..2 * r * c).map(|_| rng.random_range(0..r * c)).collect();
        let wi = rand_array(&mut rng, &[idx.len()], 0.5, 1.5);
        note(
            "index_select",
            g(
                &|t, v| {
                    let y = t.index_select(v, &idx)?;
                    readout(t, y, &wi)
                },
                &x,
            ),
        );
        let wc = rand_array(&mut rng, &[r, 2 * c], 0.5, 1.5);
        note(
            "concat",
            g(
                &|t, v| {
                    let o = t.constant(other.clone());
                    let y = t.concat(&[v, o], 1)?;
                    readout(t, y, &wc)
                },
                &x,
            ),
        );
        let p = rng.random_range(1..6);
        let b = rand_array(&mut rng, &[c, p], -1.5, 1.5);
        let wm = rand_array(&mut rng, &[r, p], 0.5, 1.5);
        note(
            "matmul",
            g(
                &|t, v| {
                    let o = t.constant(b.clone());
                    let y = t.matmul(v, o)?;
                    readout(t, y, &wm)
                },
                &x,
            ),
        );
    }
    worst
}

fn ce_error() -> f64 {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < CE_CONFIGS {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = |rng: &mut ChaCha8Rng| (0..rng.random_range(0..3)).map(|_| rng.random_range(2..6)).collect();
        let config = ModelConfig {
            image_input: rng.random_range(2..6),
            image_hidden: depth(&mut rng),
            text_input: rng.random_range(2..6),
            text_hidden: depth(&mut rng),
            embed_dim: rng.random_range(2..5),
            temperature: rng.random_range(0.05..1.0),
        };
        let l = rng.random_range(2..6);
        let bank = ClassPromptBank::new(
            (0..l as u32).collect(),
            rand_array(&mut rng, &[l, config.text_input], -1.0, 1.0),
        )
        .unwrap();
        let n = rng.random_range(1..7);
        let feats = (0..n * config.image_input)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let split = Split::new(
            config.image_input,
            feats,
            (0..n).map(|_| rng.random_range(0..l as u32)).collect(),
        )
        .unwrap();
        let model = DualEncoder::new(config).unwrap();
        let params = model.init_params(seed, Precision::F64);
        let batch = bank.full_batch(&split).unwrap();
        // A collapsed relu stack leaves an embedding undefined; draw another configuration.
        let Ok((_, analytic)) = model.loss_and_grad(&params, &batch, &bank, Precision::F64) else {
            continue;
        };
        checked += 1;
        for (k, &a) in analytic.iter().enumerate() {
            let at = |delta: f64| {
                let mut v = params.values().to_vec();
                v[k] += delta;
                model.ce_loss(&params.with_values(v).unwrap(), &batch, &bank).unwrap()
            };
            let h = CE_STEP;
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(CE_FLOOR));
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let (prim, which) = primitive_errors();
    let ce = ce_error();
    outcome(
        prim < PRIMITIVE_TOL && ce < CE_TOL,
        format!("ce_loss max rel err {ce:.2e} over {CE_CONFIGS} models; primitives {prim:.2e} (worst {which})"),
    )
}

fn harmonic_means() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (a, b, expect) in HMEAN_CASES {
        let h = harmonic_mean(a, b).unwrap();
        ok &= (h - expect).abs() <= HMEAN_TOL;
        parts.push(format!("H({a}, {b}) = {h:.4}"));
    }
    outcome(ok, parts.join("; "))
}

fn bound_calculator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = 0;
    for _ in 0..BOUND_TRIPLES {
        let d = rng.random_range(1.0..1e6_f64).floor();
        let n = rng.random_range(1.0..1e7_f64).floor();
        let r = rng.random_range(1.5..1e9_f64);
        let c = rng.random_range(0.1..10.0);
        let base = generalization_bound(d, r, n, c).unwrap();
        let up_d = generalization_bound(d * rng.random_range(1.01..3.0), r, n, c).unwrap();
        let up_n = generalization_bound(d, r, n * rng.random_range(1.01..3.0), c).unwrap();
        let up_r = generalization_bound(d, r * rng.random_range(1.01..3.0), n, c).unwrap();
        if !(up_d > base && up_n < base && up_r > base) {
            bad += 1;
        }
        if generalization_bound(0.0, r, n, c).unwrap().to_bits() != 0f64.to_bits() {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{bad} violations over {BOUND_TRIPLES} triples"))
}

fn margin_consistency(f: &Fixture) -> Outcome {
    let gammas = &f.lab.config.eval.gamma_grid;
    let mut bad = 0;
    let mut ulp_gap: f64 = 0.0;
    for i in 0..MARGIN_PAIRS as u64 {
        let params = if i % 2 == 0 {
            f.pretrained.clone()
        } else {
            f.lab.model.init_params(i, Precision::F32)
        };
        let task = f.lab.task(i).unwrap();
        let split = match i % 3 {
            0 => task.test.clone(),
            1 => task.train.clone(),
            _ => task.ood[i as usize % task.ood.len()].1.clone(),
        };
        let acc = accuracy(&f.lab.model, &params, &split, f.lab.bank()).unwrap();
        let curve = margin_curve(&f.lab.model, &params, &split, f.lab.bank(), gammas).unwrap();
        let l0 = curve[0].1;
        // Exact as count ratios; the two f64 spellings can differ in the last ulp.
        let exact = curve[0].0 == 0.0 && l0 == acc.complement();
        ulp_gap = ulp_gap.max((l0.value() - (1.0 - acc.value())).abs());
        let monotone = curve.windows(2).all(|w| w[0].1.count <= w[1].1.count);
        bad += usize::from(!(exact && monotone));
    }
    outcome(
        bad == 0 && gammas.len() == 10,
        format!(
            "{bad}/{MARGIN_PAIRS} pairs inconsistent over a {}-point γ grid; largest f64 gap {ulp_gap:.1e}",
            gammas.len()
        ),
    )
}

fn ood_avg(table: &saft_core::eval::MetricTable) -> (f64, f64) {
    let find = |s: &str| table.rows().iter().find(|r| r.split == s).unwrap().accuracy;
    (find("id"), find("ood_avg"))
}

fn ood_trend(f: &Fixture) -> Outcome {
    let lab = &f.lab;
    let mut zs = Vec::new();
    let mut ft = Vec::new();
    let mut saft = Vec::new();
    for seed in 0..TREND_SEEDS {
        let task = lab.task(seed).unwrap();
        let cfg = TrainConfig {
            alpha: DESK_ALPHA,
            ..lab.train_config(seed)
        };
        let label = RowLabel::new("model", seed, 0.0);
        let eval = |p: &FlatParams| ood_avg(&lab.evaluate(Protocol::Shift, p, &label).unwrap());
        zs.push(eval(&f.pretrained));
        ft.push(eval(
            &lab.fit(Method::Ft, &f.pretrained, &task.train, &cfg, None)
                .unwrap()
                .params,
        ));
        saft.push(eval(
            &lab.fit(Method::Saft, &f.pretrained, &task.train, &cfg, None)
                .unwrap()
                .params,
        ));
    }
    let mean = |v: &[(f64, f64)], ood: bool| {
        mean_sd(&v.iter().map(|p| if ood { p.1 } else { p.0 }).collect::<Vec<_>>())
            .unwrap()
            .0
    };
    let wins = saft.iter().zip(&ft).filter(|(s, f)| s.1 > f.1).count();
    let (zs_id, ft_id, saft_id) = (mean(&zs, false), mean(&ft, false), mean(&saft, false));
    let (ft_ood, saft_ood) = (mean(&ft, true), mean(&saft, true));
    outcome(
        saft_ood >= ft_ood && wins >= MIN_WINS && saft_id >= zs_id && ft_id >= zs_id,
        format!(
            "OOD saft {saft_ood:.4} vs ft {ft_ood:.4}, wins {wins}/{TREND_SEEDS}; ID zs {zs_id:.4} ft {ft_id:.4} saft {saft_id:.4} (α={DESK_ALPHA})"
        ),
    )
}

fn sparsity_tradeoff(f: &Fixture) -> Outcome {
    let mut id = vec![0.0; ALPHA_GRID.len()];
    let mut ood = vec![0.0; ALPHA_GRID.len()];
    for seed in 0..TREND_SEEDS {
        let points = sparsity_points(&f.lab.sparsity_curve(&f.pretrained, seed, &ALPHA_GRID).unwrap());
        for (i, p) in points.iter().enumerate() {
            id[i] += p.id / TREND_SEEDS as f64;
            ood[i] += p.ood_avg / TREND_SEEDS as f64;
        }
    }
    let rho = spearman(&ALPHA_GRID, &id).unwrap();
    let best = (0..ALPHA_GRID.len())
        .max_by(|&a, &b| ood[a].total_cmp(&ood[b]).then(b.cmp(&a)))
        .unwrap();
    let cells: Vec<String> = ALPHA_GRID
        .iter()
        .zip(id.iter().zip(&ood))
        .map(|(a, (i, o))| format!("{a}:{i:.3}/{o:.3}"))
        .collect();
    outcome(
        rho > 0.0 && ALPHA_GRID[best] < 1.0,
        format!(
            "spearman(α, ID) = {rho:.3}; best OOD α = {}; α:ID/OOD {}",
            ALPHA_GRID[best],
            cells.join(" ")
        ),
    )
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let precision = if rng.random_bool(0.5) {
        Precision::F32
    } else {
        Precision::F64
    };
    let mut segments = Vec::new();
    let mut offset = 0;
    for i in 0..rng.random_range(1..5) {
        let len = rng.random_range(1..64);
        let side = if i % 2 == 0 { Side::Image } else { Side::Text };
        segments.push(Segment {
            name: format!("s{i}"),
            offset,
            len,
            side,
        });
        offset += len;
    }
    let layout = Arc::new(Layout::new(segments).unwrap());
    let draw = |rng: &mut ChaCha8Rng| {
        (0..offset)
            .map(|_| precision.round(rng.random_range(-5.0..5.0)))
            .collect::<Vec<f64>>()
    };
    let params = FlatParams::new(draw(rng), layout).unwrap();
    let optimizer = rng.random_bool(0.5).then(|| OptimizerBlocks {
        step: rng.random_range(0..1000),
        m: draw(rng),
        v: draw(rng).into_iter().map(f64::abs).collect(),
    });
    Checkpoint {
        params,
        precision,
        optimizer,
    }
}

fn persistence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let path = Path::new("acceptance");
    let (mut mismatches, mut missed, mut corruptions) = (0, 0, 0);
    for _ in 0..100 {
        let ckpt = random_checkpoint(&mut rng);
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes, path).unwrap();
        let same_opt = match (&back.optimizer, &ckpt.optimizer) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                a.step == b.step
                    && a.m.iter().zip(&b.m).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.v.iter().zip(&b.v).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        };
        mismatches +=
            usize::from(!(back.params.bitwise_eq(&ckpt.params) && same_opt && back.precision == ckpt.precision));

        let flags: Vec<bool> = (0..rng.random_range(1..4000)).map(|_| rng.random_bool(0.3)).collect();
        let mask = Mask::from_bools(&flags, 0.3);
        let mbytes = encode_mask(&mask);
        mismatches += usize::from(decode_mask(&mbytes, path).unwrap().bytes() != mask.bytes());

        for (bytes, is_mask) in [(&bytes, false), (&mbytes, true)] {
            for at in 0..bytes.len() {
                let mut bad = bytes.clone();
                bad[at] ^= rng.random_range(1..=255u8);
                corruptions += 1;
                let detected = if is_mask {
                    decode_mask(&bad, path).is_err()
                } else {
                    decode_checkpoint(&bad, path).is_err()
                };
                missed += usize::from(!detected);
            }
        }
    }
    outcome(
        mismatches == 0 && missed == 0,
        format!("{mismatches} roundtrip mismatches over 100+100 instances; {missed}/{corruptions} corruptions missed"),
    )
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_saft-lab"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "saft-lab {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(config: &Path, out: &Path) -> Vec<(String, Vec<u8>)> {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    let at = |name: &str| out.join(name).to_str().unwrap().to_string();
    run_cli(&["pretrain", "--config", c, "--out", o]);
    run_cli(&[
        "select",
        "--config",
        c,
        "--out",
        o,
        "--checkpoint",
        &at("pretrained.ckpt"),
        "--alpha",
        "0.01",
    ]);
    run_cli(&[
        "finetune",
        "--config",
        c,
        "--out",
        o,
        "--checkpoint",
        &at("pretrained.ckpt"),
        "--mask",
        &at("mask.bin"),
        "--method",
        "saft",
    ]);
    run_cli(&[
        "finetune",
        "--config",
        c,
        "--out",
        o,
        "--checkpoint",
        &at("pretrained.ckpt"),
        "--method",
        "ft",
    ]);
    let saft = at("finetuned-saft.ckpt");
    let mask = at("mask.bin");
    for protocol in ["shift", "base_new", "cross_task"] {
        run_cli(&[
            "eval",
            "--config",
            c,
            "--out",
            o,
            "--checkpoint",
            &saft,
            "--mask",
            &mask,
            "--method",
            "saft",
            "--protocol",
            protocol,
            "--force",
        ]);
    }
    run_cli(&[
        "eval",
        "--config",
        c,
        "--out",
        o,
        "--checkpoint",
        &at("pretrained.ckpt"),
        "--protocol",
        "sparsity_curve",
    ]);
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("lab.cfg");
    std::fs::write(&config, "seed = 3\ntrain.precision = f64\neval.alpha_grid = 0,0.01,1\n").unwrap();
    let a = pipeline(&config, &dir.path().join("a"));
    let b = pipeline(&config, &dir.path().join("b"));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    outcome(
        a.len() == 4 && a == b,
        format!(
            "{} CSVs byte-identical across two runs: {}",
            names.len(),
            names.join(", ")
        ),
    )
}

#[test]
fn acceptance() {
    let t = Instant::now();
    let f = fixture();
    let setup = t.elapsed();
    // Straight to the stderr handle: the harness captures print macros, and
    // the report should show up in a plain `cargo test` log.
    let mut report = std::io::stderr().lock();
    writeln!(report, "\nacceptance (pre-training fixture {:.2}s)", setup.as_secs_f64()).unwrap();

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(u32, &str, u64, Check)> = vec![
        (1, "mask cardinality", 5, Box::new(mask_cardinality)),
        (2, "selection oracle equivalence", 10, Box::new(|| selection_oracle(&f))),
        (3, "frozen-parameter invariant", 30, Box::new(|| frozen_invariant(&f))),
        (4, "boundary equivalences", 60, Box::new(|| boundary_equivalences(&f))),
        (5, "gradient correctness", 60, Box::new(gradient_correctness)),
        (6, "harmonic mean", 1, Box::new(harmonic_means)),
        (7, "generalization bound calculator", 1, Box::new(bound_calculator)),
        (8, "margin-loss consistency", 10, Box::new(|| margin_consistency(&f))),
        (9, "qualitative OOD trend", 300, Box::new(|| ood_trend(&f))),
        (10, "sparsity tradeoff", 600, Box::new(|| sparsity_tradeoff(&f))),
        (11, "persistence", 5, Box::new(persistence)),
        (12, "end-to-end determinism", 120, Box::new(determinism)),
    ];
    let mut failed = Vec::new();
    for (id, name, budget, check) in &criteria {
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let pass = o.pass && in_time;
        writeln!(
            report,
            "[{}] {id:>2} {name}: {} ({:.2}s of {budget}s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        )
        .unwrap();
        if !pass {
            failed.push(*id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
