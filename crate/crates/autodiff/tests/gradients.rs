//! Central finite-difference checks for every operation on the tape.

use coevo_autodiff::{evaluate, grad_check, value_and_grad, Array, Bindings, NamedArrays, Result, Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, used for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn point(pairs: Vec<(&str, Array)>) -> NamedArrays {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Reduces an arbitrary-shaped output to a scalar with fixed, non-uniform weights
/// so every output coordinate contributes a distinct amount.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(Array::from_fn(&shape, |i| 0.3 + 0.17 * ((i * 7) % 5) as f64));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn check_five_points(
    name: &str,
    tol: f64,
    sample: impl Fn(&mut ChaCha8Rng) -> NamedArrays,
    graph: impl Fn(&mut Tape, &Bindings) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0E0 ^ name.len() as u64);
    for trial in 0..5 {
        let p = sample(&mut rng);
        let err = grad_check(&graph, &p, STEP).unwrap();
        assert!(err <= tol, "{name} trial {trial}: max rel err {err:e} > {tol:e}");
    }
}

macro_rules! unary_check {
    ($test:ident, $method:ident, $lo:expr, $hi:expr) => {
        #[test]
        fn $test() {
            check_five_points(
                stringify!($method),
                1e-6,
                |rng| point(vec![("x", random(rng, &[3, 4], $lo, $hi))]),
                |t, b| {
                    let x = b.get("x")?;
                    let y = t.$method(x);
                    weighted_sum(t, y)
                },
            );
        }
    };
}

unary_check!(tanh_grad, tanh, -2.0, 2.0);
unary_check!(sigmoid_grad, sigmoid, -4.0, 4.0);
unary_check!(exp_grad, exp, -2.0, 2.0);
unary_check!(log_grad, log, 0.2, 3.0);
unary_check!(sqrt_grad, sqrt, 0.2, 3.0);
unary_check!(square_grad, square, -2.0, 2.0);
unary_check!(softplus_grad, softplus, -5.0, 5.0);
unary_check!(softmax_grad, softmax, -3.0, 3.0);
unary_check!(log_softmax_grad, log_softmax, -3.0, 3.0);
unary_check!(sum_rows_grad, sum_rows, -2.0, 2.0);
unary_check!(mean_rows_grad, mean_rows, -2.0, 2.0);

#[test]
fn relu_abs_clamp_away_from_kinks() {
    for (name, op) in [("relu", 0usize), ("abs", 1), ("clamp", 2), ("l1", 3)] {
        check_five_points(
            name,
            1e-6,
            |rng| point(vec![("x", away_from_zero(rng, &[2, 5]))]),
            move |t, b| {
                let x = b.get("x")?;
                let y = match op {
                    0 => t.relu(x),
                    1 => t.abs(x),
                    2 => t.clamp(x, -0.05, 0.05 + 10.0),
                    _ => return Ok(t.l1_norm(x)),
                };
                weighted_sum(t, y)
            },
        );
    }
}

#[test]
fn binary_ops() {
    for (name, op) in [("add", 0usize), ("sub", 1), ("mul", 2), ("div", 3), ("minimum", 4)] {
        check_five_points(
            name,
            1e-6,
            |rng| {
                point(vec![
                    ("a", random(rng, &[2, 3], -2.0, 2.0)),
                    ("b", away_from_zero(rng, &[2, 3]).map(|v| v + 3.0 * v.signum())),
                ])
            },
            move |t, b| {
                let (x, y) = (b.get("a")?, b.get("b")?);
                let z = match op {
                    0 => t.add(x, y)?,
                    1 => t.sub(x, y)?,
                    2 => t.mul(x, y)?,
                    3 => t.div(x, y)?,
                    _ => t.minimum(x, y)?,
                };
                weighted_sum(t, z)
            },
        );
    }
}

#[test]
fn matmul_and_broadcast() {
    check_five_points(
        "matmul+add_row",
        1e-6,
        |rng| {
            point(vec![
                ("a", random(rng, &[3, 4], -1.0, 1.0)),
                ("w", random(rng, &[4, 2], -1.0, 1.0)),
                ("v", random(rng, &[2], -1.0, 1.0)),
            ])
        },
        |t, b| {
            let m = t.matmul(b.get("a")?, b.get("w")?)?;
            let y = t.add_row(m, b.get("v")?)?;
            weighted_sum(t, y)
        },
    );
}

#[test]
fn reductions_and_norms() {
    check_five_points(
        "sum/mean/l2/scale",
        1e-6,
        |rng| point(vec![("x", random(rng, &[6], -2.0, 2.0))]),
        |t, b| {
            let x = b.get("x")?;
            let s = t.sum(x);
            let m = t.mean(x);
            let n = t.l2_norm(x);
            let sm = t.mul(s, m)?;
            let n2 = t.scale(n, 0.7);
            let y = t.add(sm, n2)?;
            Ok(t.add_scalar(y, 2.0))
        },
    );
}

#[test]
fn gather_pick_permute_reshape() {
    check_five_points(
        "gather/pick/permute/reshape",
        1e-6,
        |rng| point(vec![("table", random(rng, &[5, 3], -1.0, 1.0))]),
        |t, b| {
            let rows = t.gather_rows(b.get("table")?, &[4, 0, 4, 2])?;
            let lp = t.log_softmax(rows);
            let picked = t.pick(lp, &[2, 0, 1, 1])?;
            let r = t.reshape(rows, &[2, 6])?;
            let p = t.permute(r, vec![11, 3, 3, 0].into(), &[4])?;
            let a = weighted_sum(t, picked)?;
            let c = weighted_sum(t, p)?;
            t.add(a, c)
        },
    );
}

#[test]
fn softmax_weighted_sum_matches_fd() {
    // y = Σ softmax(v)·c with c constant
    check_five_points(
        "softmax·c",
        1e-6,
        |rng| point(vec![("v", random(rng, &[5], -3.0, 3.0))]),
        |t, b| {
            let p = t.softmax(b.get("v")?);
            let c = t.constant(Array::vector(vec![1.0, -2.0, 0.5, 3.0, 0.1]));
            let y = t.mul(p, c)?;
            Ok(t.sum(y))
        },
    );
}

#[test]
fn log_softmax_gather_composite() {
    check_five_points(
        "log_softmax+gather",
        1e-6,
        |rng| {
            point(vec![
                ("emb", random(rng, &[6, 4], -1.0, 1.0)),
                ("w", random(rng, &[4, 6], -1.0, 1.0)),
            ])
        },
        |t, b| {
            let e = t.gather_rows(b.get("emb")?, &[1, 3, 5])?;
            let logits = t.matmul(e, b.get("w")?)?;
            let lp = t.log_softmax(logits);
            let picked = t.pick(lp, &[0, 2, 5])?;
            Ok(t.sum(picked))
        },
    );
}

#[test]
fn tanh_chain_depth_three() {
    check_five_points(
        "tanh^3",
        1e-6,
        |rng| {
            point(vec![
                ("x", random(rng, &[2, 3], -1.0, 1.0)),
                ("w", random(rng, &[3, 3], -1.5, 1.5)),
            ])
        },
        |t, b| {
            let w = b.get("w")?;
            let mut h = b.get("x")?;
            for _ in 0..3 {
                let m = t.matmul(h, w)?;
                h = t.tanh(m);
            }
            weighted_sum(t, h)
        },
    );
}

#[test]
fn stop_gradient_contract() {
    let p = point(vec![("x", Array::vector(vec![0.4, -1.1, 2.0]))]);
    let graph = |t: &mut Tape, b: &Bindings| {
        let s = t.stop_gradient(b.get("x")?);
        let y = t.square(s);
        Ok(t.sum(y))
    };
    let (v, g) = value_and_grad(&graph, &p).unwrap();
    assert_eq!(v, 0.16 + 1.21 + 4.0);
    assert_eq!(g["x"], Array::zeros(&[3]));
    let fwd = evaluate(&|t: &mut Tape, b: &Bindings| Ok(t.stop_gradient(b.get("x")?)), &p).unwrap();
    assert_eq!(fwd, p["x"]);
}

#[test]
fn constant_output_has_zero_gradient() {
    let p = point(vec![("x", Array::vector(vec![1.0, 2.0]))]);
    let graph = |t: &mut Tape, _: &Bindings| Ok(t.constant(Array::scalar(4.0)));
    let (_, g) = value_and_grad(&graph, &p).unwrap();
    assert_eq!(g["x"], Array::zeros(&[2]));
}

#[test]
fn forward_and_backward_are_bit_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = point(vec![("x", random(&mut rng, &[4, 4], -1.0, 1.0)), ("w", random(&mut rng, &[4, 4], -1.0, 1.0))]);
    let graph = |t: &mut Tape, b: &Bindings| {
        let m = t.matmul(b.get("x")?, b.get("w")?)?;
        let s = t.softmax(m);
        let l = t.log(s);
        Ok(t.mean(l))
    };
    let a = value_and_grad(&graph, &p).unwrap();
    let b = value_and_grad(&graph, &p).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    for (k, v) in &a.1 {
        let bits: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
        let other: Vec<u64> = b.1[k].data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, other);
    }
}

proptest! {
    #[test]
    fn finite_inputs_give_finite_outputs(xs in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let mut t = Tape::new();
        let x = t.param(Array::vector(xs));
        let s = t.softmax(x);
        let l = t.log_softmax(x);
        let sp = t.softplus(x);
        let sg = t.sigmoid(x);
        for v in [s, l, sp, sg] {
            prop_assert!(t.value(v).is_finite());
        }
        let total: f64 = t.value(s).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
