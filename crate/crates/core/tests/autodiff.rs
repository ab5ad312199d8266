//! Reverse-mode gradients against central finite differences, plus the
//! algebraic properties the trainer relies on.

use ecs_pinn::autodiff::{NodeId, Tape, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-6;

/// Builds a graph from parameter leaves and returns a scalar node.
type Build = dyn Fn(&mut Tape, &[NodeId]) -> NodeId;

fn scalar_of(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let root = build(&mut tape, &ids);
    tape.value(root).item().unwrap()
}

/// Max relative error between tape gradients and central differences.
fn gradient_error(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let g = grads.get(*id).unwrap();
        for j in 0..inputs[k].len() {
            let mut up = inputs.to_vec();
            let mut dn = inputs.to_vec();
            up[k] = Tensor::new(up[k].shape().to_vec(), bump(up[k].values(), j, H)).unwrap();
            dn[k] = Tensor::new(dn[k].shape().to_vec(), bump(dn[k].values(), j, -H)).unwrap();
            let fd = (scalar_of(&up, build) - scalar_of(&dn, build)) / (2.0 * H);
            let err = (g.values()[j] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

fn bump(v: &[f64], j: usize, h: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    out[j] += h;
    out
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.5f64..1.5, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v))
}

/// Weighted sum against a fixed probe so every output element matters.
fn probe(tape: &mut Tape, node: NodeId) -> NodeId {
    let shape = tape.value(node).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * (i as f64).sin()).collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap()).unwrap();
    let prod = tape.mul(node, w).unwrap();
    tape.sum(prod).unwrap()
}

const TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_gradients(a in tensor(3, 4), b in tensor(4, 2)) {
        let f = |t: &mut Tape, x: &[NodeId]| { let m = t.matmul(x[0], x[1]).unwrap(); probe(t, m) };
        prop_assert!(gradient_error(&[a, b], &f) < TOL);
    }

    #[test]
    fn add_sub_mul_same_shape(a in tensor(3, 2), b in tensor(3, 2)) {
        let add = |t: &mut Tape, x: &[NodeId]| { let m = t.add(x[0], x[1]).unwrap(); probe(t, m) };
        let sub = |t: &mut Tape, x: &[NodeId]| { let m = t.sub(x[0], x[1]).unwrap(); probe(t, m) };
        let mul = |t: &mut Tape, x: &[NodeId]| { let m = t.mul(x[0], x[1]).unwrap(); probe(t, m) };
        for f in [&add as &Build, &sub, &mul] {
            prop_assert!(gradient_error(&[a.clone(), b.clone()], f) < TOL);
        }
    }

    #[test]
    fn row_broadcast(a in tensor(4, 3), b in tensor(1, 3)) {
        let add = |t: &mut Tape, x: &[NodeId]| { let m = t.add(x[0], x[1]).unwrap(); probe(t, m) };
        let mul = |t: &mut Tape, x: &[NodeId]| { let m = t.mul(x[0], x[1]).unwrap(); probe(t, m) };
        let sub = |t: &mut Tape, x: &[NodeId]| { let m = t.sub(x[0], x[1]).unwrap(); probe(t, m) };
        for f in [&add as &Build, &sub, &mul] {
            prop_assert!(gradient_error(&[a.clone(), b.clone()], f) < TOL);
        }
    }

    #[test]
    fn scalar_broadcast(a in tensor(3, 3), s in -2.0f64..2.0) {
        let b = Tensor::scalar(s);
        let mul = |t: &mut Tape, x: &[NodeId]| { let m = t.mul(x[0], x[1]).unwrap(); probe(t, m) };
        let sub = |t: &mut Tape, x: &[NodeId]| { let m = t.sub(x[0], x[1]).unwrap(); probe(t, m) };
        for f in [&mul as &Build, &sub] {
            prop_assert!(gradient_error(&[a.clone(), b.clone()], f) < TOL);
        }
    }

    #[test]
    fn unary_and_reductions(a in tensor(4, 2), s in -3.0f64..3.0) {
        let tanh = |t: &mut Tape, x: &[NodeId]| { let m = t.tanh(x[0]).unwrap(); probe(t, m) };
        let square = |t: &mut Tape, x: &[NodeId]| { let m = t.square(x[0]).unwrap(); probe(t, m) };
        let scale = move |t: &mut Tape, x: &[NodeId]| { let m = t.scale(x[0], s).unwrap(); probe(t, m) };
        let mean = |t: &mut Tape, x: &[NodeId]| { let q = t.square(x[0]).unwrap(); t.mean(q).unwrap() };
        let sum = |t: &mut Tape, x: &[NodeId]| { let q = t.tanh(x[0]).unwrap(); t.sum(q).unwrap() };
        for f in [&tanh as &Build, &square, &scale, &mean, &sum] {
            prop_assert!(gradient_error(std::slice::from_ref(&a), f) < TOL);
        }
    }

    #[test]
    fn two_layer_network(x in tensor(5, 2), w1 in tensor(2, 4), b1 in tensor(1, 4), w2 in tensor(4, 1)) {
        let f = |t: &mut Tape, p: &[NodeId]| {
            let h = t.matmul(p[0], p[1]).unwrap();
            let h = t.add(h, p[2]).unwrap();
            let h = t.tanh(h).unwrap();
            let y = t.matmul(h, p[3]).unwrap();
            let y2 = t.square(y).unwrap();
            t.mean(y2).unwrap()
        };
        prop_assert!(gradient_error(&[x, w1, b1, w2], &f) < TOL);
    }

    #[test]
    fn gradient_is_linear_in_the_root(a in tensor(3, 2), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        // d(alpha f + beta g) = alpha df + beta dg
        let grads_of = |wf: f64, wg: f64| {
            let mut t = Tape::new();
            let x = t.param(a.clone()).unwrap();
            let th = t.tanh(x).unwrap();
            let f = t.sum(th).unwrap();
            let sq = t.square(x).unwrap();
            let g = t.mean(sq).unwrap();
            let f = t.scale(f, wf).unwrap();
            let g = t.scale(g, wg).unwrap();
            let root = t.add(f, g).unwrap();
            t.backward(root).unwrap().get(x).unwrap().values().to_vec()
        };
        let combined = grads_of(alpha, beta);
        let gf = grads_of(1.0, 0.0);
        let gg = grads_of(0.0, 1.0);
        for i in 0..combined.len() {
            let expect = alpha * gf[i] + beta * gg[i];
            prop_assert!((combined[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}

#[test]
fn fan_out_accumulates() {
    // y = x*x + x  =>  dy/dx = 2x + 1, with x used three times.
    let mut t = Tape::new();
    let x = t.param(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0])).unwrap();
    let xx = t.mul(x, x).unwrap();
    let y = t.add(xx, x).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().values(), &[2.0, -1.0, 5.0]);
}

#[test]
fn backward_is_deterministic() {
    let build = || {
        let mut t = Tape::new();
        let w = t.param(Tensor::matrix(3, 3, (0..9).map(|i| (i as f64 * 0.77).cos()).collect())).unwrap();
        let x = t.constant(Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.31).sin()).collect())).unwrap();
        let mut h = x;
        for _ in 0..3 {
            let m = t.matmul(h, w).unwrap();
            h = t.tanh(m).unwrap();
        }
        let s = t.square(h).unwrap();
        let root = t.mean(s).unwrap();
        let g = t.backward(root).unwrap();
        g.get(w).unwrap().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}

#[test]
fn constants_receive_no_gradient_and_unused_params_get_zeros() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0])).unwrap();
    let p = t.param(Tensor::matrix(1, 2, vec![3.0, 4.0])).unwrap();
    let unused = t.param(Tensor::matrix(2, 2, vec![1.0; 4])).unwrap();
    let m = t.mul(c, p).unwrap();
    let s = t.sum(m).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(p).unwrap().values(), &[1.0, 2.0]);
    assert_eq!(g.get(unused).unwrap().values(), &[0.0; 4]);
}

#[test]
fn shape_errors_are_reported() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(2, 3, vec![0.0; 6])).unwrap();
    let b = t.constant(Tensor::matrix(2, 3, vec![0.0; 6])).unwrap();
    assert!(t.matmul(a, b).is_err());
    let c = t.constant(Tensor::matrix(3, 2, vec![0.0; 6])).unwrap();
    assert!(t.add(a, c).is_err());
    assert!(t.backward(a).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::scalar(1e200)).unwrap();
    assert!(t.square(a).is_err());
}
