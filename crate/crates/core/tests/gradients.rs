use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saft_core::autodiff::{grad_check, primitive_set, Array, AutodiffError, Precision, Tape, Var};
use saft_core::data::Split;
use saft_core::model::{ClassPromptBank, DualEncoder, ModelConfig};

const SHAPES: usize = 24;
const PRIMITIVE_TOL: f64 = 1e-6;
const CE_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
/// Denominator floor for the CE check; below it the FD stencil only sees roundoff.
const CE_FLOOR: f64 = 1e-6;
const CE_EPS: f64 = 1e-4;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so relu has no kink within the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

fn shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rng.random_bool(0.4) {
        vec![rng.random_range(1..8)]
    } else {
        vec![rng.random_range(1..6), rng.random_range(1..6)]
    }
}

/// Contracts `y` against fixed weights so every output coordinate matters.
fn readout(tape: &mut Tape, y: Var, weights: &Array) -> saft_core::autodiff::Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn weights_for(rng: &mut ChaCha8Rng, tape_shape: &[usize]) -> Array {
    rand_array(rng, tape_shape, 0.5, 1.5)
}

fn check(name: &str, case: usize, err: f64) {
    assert!(err < PRIMITIVE_TOL, "{name} case {case}: relative error {err:e}");
}

#[test]
fn elementwise_unary_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..SHAPES {
        let s = shape(&mut rng);
        let w = weights_for(&mut rng, &s);
        let signed = away_from_zero(&mut rng, &s);
        let positive = rand_array(&mut rng, &s, 0.2, 3.0);
        let factor = rng.random_range(-2.0..2.0);

        check(
            "relu",
            case,
            grad_check(
                |t, x| {
                    let y = t.relu(x)?;
                    readout(t, y, &w)
                },
                &signed,
                FD_EPS,
            )
            .unwrap(),
        );
        check(
            "exp",
            case,
            grad_check(
                |t, x| {
                    let y = t.exp(x)?;
                    readout(t, y, &w)
                },
                &signed,
                FD_EPS,
            )
            .unwrap(),
        );
        check(
            "log",
            case,
            grad_check(
                |t, x| {
                    let y = t.log(x)?;
                    readout(t, y, &w)
                },
                &positive,
                FD_EPS,
            )
            .unwrap(),
        );
        check(
            "square",
            case,
            grad_check(
                |t, x| {
                    let y = t.square(x)?;
                    readout(t, y, &w)
                },
                &signed,
                FD_EPS,
            )
            .unwrap(),
        );
        check(
            "sqrt",
            case,
            grad_check(
                |t, x| {
                    let y = t.sqrt(x)?;
                    readout(t, y, &w)
                },
                &positive,
                FD_EPS,
            )
            .unwrap(),
        );
        check(
            "scale",
            case,
            grad_check(
                |t, x| {
                    let y = t.scale(x, factor)?;
                    readout(t, y, &w)
                },
                &signed,
                FD_EPS,
            )
            .unwrap(),
        );
    }
}

#[test]
fn binary_primitives_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..SHAPES {
        let s = shape(&mut rng);
        let w = weights_for(&mut rng, &s);
        let x = away_from_zero(&mut rng, &s);
        let other = rand_array(&mut rng, &s, -2.0, 2.0);
        let scalar = Array::scalar(rng.random_range(-2.0..2.0));
        for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
            let apply = |t: &mut Tape, a: Var, b: Var| match op {
                0 => t.add(a, b),
                1 => t.sub(a, b),
                _ => t.mul(a, b),
            };
            let same = grad_check(
                |t, v| {
                    let o = t.constant(other.clone());
                    let y = apply(t, v, o)?;
                    readout(t, y, &w)
                },
                &x,
                FD_EPS,
            )
            .unwrap();
            check(name, case, same);
            // The operand itself on both sides, and the scalar side of a broadcast.
            let both = grad_check(
                |t, v| {
                    let y = apply(t, v, v)?;
                    readout(t, y, &w)
                },
                &x,
                FD_EPS,
            )
            .unwrap();
            check(name, case, both);
            let lhs_scalar = grad_check(
                |t, v| {
                    let o = t.constant(other.clone());
                    let y = apply(t, v, o)?;
                    readout(t, y, &w)
                },
                &scalar,
                FD_EPS,
            )
            .unwrap();
            check(name, case, lhs_scalar);
        }
    }
}

#[test]
fn matmul_both_operands() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..SHAPES {
        let (m, n, p) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let vector_rhs = case % 3 == 0;
        let a = rand_array(&mut rng, &[m, n], -1.5, 1.5);
        let b = if vector_rhs {
            rand_array(&mut rng, &[n], -1.5, 1.5)
        } else {
            rand_array(&mut rng, &[n, p], -1.5, 1.5)
        };
        let out_shape = if vector_rhs { vec![m] } else { vec![m, p] };
        let w = weights_for(&mut rng, &out_shape);
        let left = grad_check(
            |t, x| {
                let c = t.constant(b.clone());
                let y = t.matmul(x, c)?;
                readout(t, y, &w)
            },
            &a,
            FD_EPS,
        )
        .unwrap();
        check("matmul lhs", case, left);
        let right = grad_check(
            |t, x| {
                let c = t.constant(a.clone());
                let y = t.matmul(c, x)?;
                readout(t, y, &w)
            },
            &b,
            FD_EPS,
        )
        .unwrap();
        check("matmul rhs", case, right);
    }
}

#[test]
fn reductions_and_structural_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..SHAPES {
        let s = shape(&mut rng);
        let x = rand_array(&mut rng, &s, -2.0, 2.0);
        let w = weights_for(&mut rng, &s);

        check(
            "sum",
            case,
            grad_check(
                |t, v| {
                    let y = t.square(v)?;
                    t.sum(y)
                },
                &x,
                FD_EPS,
            )
            .unwrap(),
        );
        check(
            "mean",
            case,
            grad_check(
                |t, v| {
                    let y = t.square(v)?;
                    t.mean(y)
                },
                &x,
                FD_EPS,
            )
            .unwrap(),
        );

        let rows = away_from_zero(&mut rng, &s);
        check(
            "l2_normalize",
            case,
            grad_check(
                |t, v| {
                    let y = t.l2_normalize(v)?;
                    readout(t, y, &w)
                },
                &rows,
                FD_EPS,
            )
            .unwrap(),
        );

        let n = x.len();
        let indices: Vec<usize> = (0..rng.random_range(1..2 * n + 1))
            .map(|_| rng.random_range(0..n))
            .collect();
        let wi = rand_array(&mut rng, &[indices.len()], 0.5, 1.5);
        check(
            "index_select",
            case,
            grad_check(
                |t, v| {
                    let y = t.index_select(v, &indices)?;
                    readout(t, y, &wi)
                },
                &x,
                FD_EPS,
            )
            .unwrap(),
        );

        let (r, c) = (rng.random_range(1..6), rng.random_range(1..6));
        let mtx = rand_array(&mut rng, &[r, c], -2.0, 2.0);
        let wt = weights_for(&mut rng, &[c, r]);
        check(
            "transpose",
            case,
            grad_check(
                |t, v| {
                    let y = t.transpose(v)?;
                    readout(t, y, &wt)
                },
                &mtx,
                FD_EPS,
            )
            .unwrap(),
        );

        let axis = case % 2;
        let extra = if axis == 0 {
            vec![rng.random_range(1..4), c]
        } else {
            vec![r, rng.random_range(1..4)]
        };
        let other = rand_array(&mut rng, &extra, -2.0, 2.0);
        let out_shape = if axis == 0 {
            vec![r + extra[0], c]
        } else {
            vec![r, c + extra[1]]
        };
        let wc = weights_for(&mut rng, &out_shape);
        check(
            "concat",
            case,
            grad_check(
                |t, v| {
                    let o = t.constant(other.clone());
                    let y = t.concat(&[v, o, v], axis)?;
                    let wc3 = if axis == 0 {
                        let mut s = out_shape.clone();
                        s[0] += r;
                        s
                    } else {
                        let mut s = out_shape.clone();
                        s[1] += c;
                        s
                    };
                    let ones = Array::filled(&wc3, 1.0);
                    let head = readout(t, y, &ones)?;
                    let y2 = t.concat(&[v, o], axis)?;
                    let tail = readout(t, y2, &wc)?;
                    t.add(head, tail)
                },
                &mtx,
                FD_EPS,
            )
            .unwrap(),
        );
    }
}

#[test]
fn every_primitive_is_covered() {
    let covered = [
        "add",
        "sub",
        "mul",
        "matmul",
        "relu",
        "exp",
        "log",
        "sum",
        "mean",
        "square",
        "sqrt",
        "l2_normalize",
        "concat",
        "index_select",
        "scale",
        "transpose",
    ];
    for p in primitive_set() {
        assert!(covered.contains(p), "primitive {p} has no gradient check");
    }
}

struct TinyCase {
    model: DualEncoder,
    bank: ClassPromptBank,
    split: Split,
}

fn tiny_case(seed: u64) -> TinyCase {
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
    let classes = rng.random_range(2..6);
    let labels: Vec<u32> = (0..classes as u32).collect();
    let descriptors = rand_array(&mut rng, &[classes, config.text_input], -1.0, 1.0);
    let bank = ClassPromptBank::new(labels, descriptors).unwrap();
    let n = rng.random_range(1..7);
    let features = (0..n * config.image_input)
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();
    let ys = (0..n).map(|_| rng.random_range(0..classes as u32)).collect();
    let split = Split::new(config.image_input, features, ys).unwrap();
    TinyCase {
        model: DualEncoder::new(config).unwrap(),
        bank,
        split,
    }
}

#[test]
fn ce_loss_gradient_over_random_tiny_models() {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0u64.. {
        if checked == 50 {
            break;
        }
        let case = tiny_case(seed);
        let params = case.model.init_params(seed, Precision::F64);
        let batch = case.bank.full_batch(&case.split).unwrap();
        // A narrow relu stack can collapse an embedding to zero; redraw those.
        let analytic = match case.model.loss_and_grad(&params, &batch, &case.bank, Precision::F64) {
            Ok((_, g)) => g,
            Err(saft_core::Error::Autodiff(AutodiffError::NormalizationFailure { .. })) => continue,
            Err(e) => panic!("config {seed}: {e}"),
        };
        checked += 1;
        for (k, &a) in analytic.iter().enumerate() {
            let at = |delta: f64| {
                let mut v = params.values().to_vec();
                v[k] += delta;
                case.model
                    .ce_loss(&params.with_values(v).unwrap(), &batch, &case.bank)
                    .unwrap()
            };
            // Five-point stencil: O(h⁴) truncation lets h stay far above roundoff.
            let h = CE_EPS;
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(CE_FLOOR);
            worst = worst.max(err);
            assert!(
                err < CE_TOL,
                "config {seed} parameter {k}: analytic {a} numeric {numeric}"
            );
        }
    }
    assert!(worst < CE_TOL);
}
