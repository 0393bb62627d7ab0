//! Reverse-mode gradients against central finite differences.

use ehr_autodiff::{AutodiffError, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

fn eval(build: &Build<'_>, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).item().unwrap()
}

fn finite_difference(build: &Build<'_>, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    (0..inputs.len())
        .map(|k| {
            Tensor::from_fn(inputs[k].shape(), |i| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += STEP;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= STEP;
                (eval(build, &plus) - eval(build, &minus)) / (2.0 * STEP)
            })
        })
        .collect()
}

fn analytic(build: &Build<'_>, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect()
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(1e-8)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn check(name: &str, build: &Build<'_>, shapes: &[&[usize]], lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    for trial in 0..20 {
        let inputs: Vec<_> = shapes.iter().map(|s| random(&mut rng, s, lo, hi)).collect();
        let a = analytic(build, &inputs);
        let n = finite_difference(build, &inputs);
        for (k, (x, y)) in a.iter().zip(&n).enumerate() {
            let e = rel_err(x, y);
            assert!(e < 1e-5, "{name} trial {trial} input {k}: relative error {e}");
        }
    }
}

// A fixed projection keeps every scalar output sensitive to each element.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let w = Tensor::from_fn(&shape, |i| 0.3 + 0.17 * (i as f64 % 7.0) - 0.05 * i as f64);
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn matmul_gradients() {
    check(
        "matmul",
        &|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, y)
        },
        &[&[3, 4], &[4, 2]],
        -2.0,
        2.0,
    );
    for (ta, tb) in [(true, false), (false, true), (true, true)] {
        check(
            "matmul_t",
            &move |g, v| {
                let y = g.matmul_t(v[0], v[1], ta, tb).unwrap();
                weighted_sum(g, y)
            },
            &[
                if ta { &[4, 3] } else { &[3, 4] },
                if tb { &[2, 4] } else { &[4, 2] },
            ],
            -2.0,
            2.0,
        );
    }
}

#[test]
fn elementwise_binary_gradients() {
    for (name, shapes) in [
        ("same", [&[2usize, 3][..], &[2, 3][..]]),
        ("row", [&[2, 3][..], &[3][..]]),
        ("col", [&[2, 3][..], &[2, 1][..]]),
    ] {
        check(name, &|g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            weighted_sum(g, a)
        }, &shapes, -2.0, 2.0);
        check(name, &|g, v| {
            let a = g.sub(v[0], v[1]).unwrap();
            weighted_sum(g, a)
        }, &shapes, -2.0, 2.0);
        check(name, &|g, v| {
            let a = g.mul(v[0], v[1]).unwrap();
            weighted_sum(g, a)
        }, &shapes, -2.0, 2.0);
        check(name, &|g, v| {
            let a = g.div(v[0], v[1]).unwrap();
            weighted_sum(g, a)
        }, &shapes, 0.5, 2.0);
    }
}

#[test]
fn elementwise_unary_gradients() {
    let unary: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, Var) -> Var>, f64, f64)> = vec![
        ("scale", Box::new(|g, x| g.scale(x, -1.7).unwrap()), -2.0, 2.0),
        ("add_scalar", Box::new(|g, x| g.add_scalar(x, 0.3).unwrap()), -2.0, 2.0),
        ("sigmoid", Box::new(|g, x| g.sigmoid(x).unwrap()), -2.0, 2.0),
        ("tanh", Box::new(|g, x| g.tanh(x).unwrap()), -2.0, 2.0),
        ("ln", Box::new(|g, x| g.ln(x).unwrap()), 0.1, 2.0),
        ("square", Box::new(|g, x| g.square(x).unwrap()), -2.0, 2.0),
        ("sqrt", Box::new(|g, x| g.sqrt(x).unwrap()), 0.1, 2.0),
        ("relu", Box::new(|g, x| g.relu(x).unwrap()), -2.0, 2.0),
        ("min_const", Box::new(|g, x| g.min_const(x, 0.4).unwrap()), -2.0, 2.0),
        ("max_const", Box::new(|g, x| g.max_const(x, -0.4).unwrap()), -2.0, 2.0),
    ];
    for (name, f, lo, hi) in unary {
        check(name, &|g, v| {
            let y = f(g, v[0]);
            weighted_sum(g, y)
        }, &[&[3, 4]], lo, hi);
    }
}

#[test]
fn structural_gradients() {
    check("concat0", &|g, v| {
        let c = g.concat(&[v[0], v[1]], 0).unwrap();
        weighted_sum(g, c)
    }, &[&[2, 3], &[4, 3]], -2.0, 2.0);
    check("concat1", &|g, v| {
        let c = g.concat(&[v[0], v[1]], 1).unwrap();
        let s = g.square(c).unwrap();
        weighted_sum(g, s)
    }, &[&[2, 3], &[2, 1]], -2.0, 2.0);
    check("slice", &|g, v| {
        let c = g.slice(v[0], 1, 1, 2).unwrap();
        let s = g.square(c).unwrap();
        weighted_sum(g, s)
    }, &[&[3, 4]], -2.0, 2.0);
    check("sum", &|g, v| {
        let s = g.square(v[0]).unwrap();
        g.sum(s).unwrap()
    }, &[&[3, 4]], -2.0, 2.0);
    check("mean", &|g, v| {
        let s = g.sigmoid(v[0]).unwrap();
        g.mean(s).unwrap()
    }, &[&[3, 4]], -2.0, 2.0);
    check("sum_axis", &|g, v| {
        let s = g.sum_axis(v[0], 0).unwrap();
        let s = g.square(s).unwrap();
        weighted_sum(g, s)
    }, &[&[3, 4]], -2.0, 2.0);
    check("broadcast", &|g, v| {
        let b = g.broadcast_to(v[0], &[3, 4]).unwrap();
        let s = g.tanh(b).unwrap();
        weighted_sum(g, s)
    }, &[&[1, 4]], -2.0, 2.0);
    check("reshape", &|g, v| {
        let r = g.reshape(v[0], &[4, 3]).unwrap();
        let s = g.sum_axis(r, 1).unwrap();
        let s = g.square(s).unwrap();
        weighted_sum(g, s)
    }, &[&[3, 4]], -2.0, 2.0);
    check("l2_norm_rows", &|g, v| {
        let n = g.l2_norm_rows(v[0]).unwrap();
        weighted_sum(g, n)
    }, &[&[3, 4]], -2.0, 2.0);
    for axis in [0, 1] {
        check("softmax", &move |g, v| {
            let s = g.softmax(v[0], axis).unwrap();
            weighted_sum(g, s)
        }, &[&[3, 4]], -2.0, 2.0);
    }
}

#[test]
fn composite_sigmoid_matmul_mean() {
    check("composite", &|g, v| {
        let h = g.matmul(v[0], v[1]).unwrap();
        let h = g.sigmoid(h).unwrap();
        g.mean(h).unwrap()
    }, &[&[1, 5], &[5, 3]], -2.0, 2.0);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = g.square(x).unwrap();
    let f = g.sum(s).unwrap();
    let grads = g.backward(f).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[4]));
    let s = g.sigmoid(x).unwrap();
    assert!(g.value(s).data().iter().all(|v| *v == 0.5));
    let f = g.sum(s).unwrap();
    let grads = g.backward(f).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 0.25));
}

#[test]
fn concat_and_softmax_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::vector(vec![0.0; 3]));
    let b = g.constant(Tensor::vector(vec![0.0; 5]));
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.shape(c), &[8]);

    let v = g.constant(Tensor::vector(vec![1f64.ln(), 3f64.ln()]));
    let s = g.softmax(v, 0).unwrap();
    let got = g.value(s).data();
    assert!((got[0] - 0.25).abs() < 1e-15 && (got[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_survives_large_logits() {
    let mut g = Graph::<f32>::new();
    let v = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let s = g.softmax(v, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn shape_errors_name_the_operation() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] }
    );
    let c = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(g.add(a, c), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
}

#[test]
fn backward_requires_single_element() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[3]));
    assert_eq!(g.backward(x).unwrap_err(), AutodiffError::NotScalar(vec![3]));
}

#[test]
fn gradient_map_has_one_entry_per_reachable_leaf() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::zeros(&[2]));
    let b = g.param(Tensor::zeros(&[2]));
    let unused = g.param(Tensor::zeros(&[5]));
    let c = g.constant(Tensor::ones(&[2]));
    let s = g.mul(a, b).unwrap();
    let s = g.add(s, c).unwrap();
    let s = g.add(s, a).unwrap();
    let f = g.sum(s).unwrap();
    let grads = g.backward(f).unwrap();
    assert_eq!(grads.len(), 2);
    assert!(grads.contains(a) && grads.contains(b) && !grads.contains(unused));
    assert_eq!(grads.get(a).unwrap().shape(), &[2]);
}

#[test]
fn cubic_second_derivative() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let x2 = g.square(x).unwrap();
    let x3 = g.mul(x2, x).unwrap();
    let dx = g.grad_as_node(x3, x).unwrap();
    assert_eq!(g.value(dx).item(), Some(12.0));
    let grads = g.backward(dx).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), Some(12.0));
}

#[test]
fn norm_gradient_is_unit_direction() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
    let n = g.l2_norm_rows(x).unwrap();
    let dn = g.grad_as_node(n, x).unwrap();
    let got = g.value(dn).data();
    assert!((got[0] - 0.6).abs() < 1e-15 && (got[1] - 0.8).abs() < 1e-15);
}

#[test]
fn unreachable_wrt_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(1.0));
    let y = g.param(Tensor::scalar(1.0));
    let f = g.square(x).unwrap();
    assert_eq!(g.grad_as_node(f, y).unwrap_err(), AutodiffError::Unreachable(y.index()));
}

/// Builds `(|| d/dx f(x) ||_2 - 1)^2` for `f(x) = sum(c * a^T x)` and returns
/// it as a function of `a`, so second-order gradients flow into `a`.
fn penalty(g: &mut Graph<f64>, a: Var, x: &Tensor<f64>, c: f64) -> Var {
    let xv = g.param(x.clone());
    let fx = g.matmul_t(xv, a, false, true).unwrap();
    let fx = g.scale(fx, c).unwrap();
    let fx = g.sum(fx).unwrap();
    let dx = g.grad_as_node(fx, xv).unwrap();
    let n = g.l2_norm_rows(dx).unwrap();
    let n = g.add_scalar(n, -1.0).unwrap();
    let p = g.square(n).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn penalty_of_scaled_unit_linear_function() {
    let a_val = Tensor::matrix(1, 3, vec![2.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
    let x = Tensor::matrix(1, 3, vec![0.3, -1.0, 0.5]).unwrap();
    let mut g = Graph::<f64>::new();
    let a = g.param(a_val.clone());
    let p = penalty(&mut g, a, &x, 2.0);
    assert!((g.value(p).item().unwrap() - 1.0).abs() < 1e-12);
    let grads = g.backward(p).unwrap();
    let analytic = grads.get(a).unwrap().clone();

    let fd = Tensor::from_fn(&[1, 3], |i| {
        let at = |delta: f64| {
            let mut av = a_val.clone();
            av.data_mut()[i] += delta;
            let mut g = Graph::<f64>::new();
            let a = g.constant(av);
            let p = penalty(&mut g, a, &x, 2.0);
            g.value(p).item().unwrap()
        };
        (at(STEP) - at(-STEP)) / (2.0 * STEP)
    });
    assert!(rel_err(&analytic, &fd) < 1e-5, "{analytic:?} vs {fd:?}");
}

#[test]
fn second_order_through_nonlinear_network() {
    // Penalty on a tanh/relu network: parameter gradients vs finite differences.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let w1 = random(&mut rng, &[4, 3], -1.0, 1.0);
        let w2 = random(&mut rng, &[1, 4], -1.0, 1.0);
        let x = random(&mut rng, &[2, 3], -2.0, 2.0);
        let build = |g: &mut Graph<f64>, w1: Var, w2: Var| {
            let xv = g.param(x.clone());
            let h = g.matmul_t(xv, w1, false, true).unwrap();
            let h = g.tanh(h).unwrap();
            let o = g.matmul_t(h, w2, false, true).unwrap();
            let o = g.sum(o).unwrap();
            let dx = g.grad_as_node(o, xv).unwrap();
            let n = g.l2_norm_rows(dx).unwrap();
            let n = g.add_scalar(n, -1.0).unwrap();
            let p = g.square(n).unwrap();
            g.mean(p).unwrap()
        };
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.param(w1.clone()), g.param(w2.clone()));
        let p = build(&mut g, a, b);
        let grads = g.backward(p).unwrap();
        for (k, (var, base)) in [(a, &w1), (b, &w2)].into_iter().enumerate() {
            let fd = Tensor::from_fn(base.shape(), |i| {
                let at = |delta: f64| {
                    let mut ws = [w1.clone(), w2.clone()];
                    ws[k].data_mut()[i] += delta;
                    let mut g = Graph::<f64>::new();
                    let (a, b) = (g.constant(ws[0].clone()), g.constant(ws[1].clone()));
                    let p = build(&mut g, a, b);
                    g.value(p).item().unwrap()
                };
                (at(STEP) - at(-STEP)) / (2.0 * STEP)
            });
            let e = rel_err(grads.get(var).unwrap(), &fd);
            assert!(e < 1e-4, "param {k}: {e}");
        }
    }
}

#[test]
fn replay_is_bitwise_identical() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let w = g.param(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
        let x = g.constant(Tensor::matrix(4, 3, (0..12).map(|i| i as f32 * 0.1).collect()).unwrap());
        let h = g.matmul_t(x, w, false, true).unwrap();
        let h = g.sigmoid(h).unwrap();
        let m = g.mean(h).unwrap();
        let before = g.value(m).clone();
        let grads = g.backward(m).unwrap();
        assert_eq!(g.value(m), &before);
        (before, grads.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(v));
        let s = g.softmax(x, 0).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sum_to_inverts_broadcast_count(rows in 1usize..6, cols in 1usize..6) {
        let mut g = Graph::<f64>::new();
        let b = g.param(Tensor::ones(&[cols]));
        let big = g.broadcast_to(b, &[rows, cols]).unwrap();
        let f = g.sum(big).unwrap();
        let grads = g.backward(f).unwrap();
        prop_assert!(grads.get(b).unwrap().data().iter().all(|x| *x == rows as f64));
    }
}
