use lodesched::diff::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, shape: &[usize], range: f64) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-range..range)).collect()).unwrap()
}

fn weighted_sum(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Checks the vector-Jacobian product of `prim` against central differences
/// of `sum(prim(inputs) * w)` for a random weight `w`.
fn check_prim(prim: Prim, inputs: Vec<Tensor>, rng: &mut impl Rng) -> f64 {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = prim_forward(prim, &refs).unwrap();
    let w = random(rng, out.shape(), 1.0);
    let report = grad_check(
        |params| {
            let mut g = CompGraph::new();
            let ids: Vec<NodeId> = params
                .iter()
                .enumerate()
                .map(|(i, t)| g.input(format!("x{i}"), t.clone()))
                .collect();
            let y = g.apply(prim, &ids)?;
            let value = weighted_sum(g.value(y), &w);
            let grads = g.backward(y, Some(w.clone()))?;
            let per: Vec<Tensor> = (0..params.len())
                .map(|i| grads.get(&format!("x{i}")).unwrap().clone())
                .collect();
            Ok((value, per))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    report.max_rel_error
}

fn pair_shapes(rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let (m, n) = (rng.gen_range(1..6), rng.gen_range(1..6));
    match rng.gen_range(0..5) {
        0 => (vec![m, n], vec![m, n]),
        1 => (vec![1, 1], vec![m, n]),
        2 => (vec![m, n], vec![]),
        3 => (vec![1, n], vec![m, n]),
        _ => (vec![m, n], vec![1, n]),
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let cases: Vec<(Prim, Vec<Tensor>)> = {
            let (sa, sb) = pair_shapes(&mut rng);
            let (sc, sd) = pair_shapes(&mut rng);
            let axis = trial % 2;
            let other = if axis == 0 { vec![rng.gen_range(1..4), n] } else { vec![m, rng.gen_range(1..4)] };
            let start = rng.gen_range(0..n);
            let end = rng.gen_range(start + 1..=n);
            vec![
                (Prim::MatMul, vec![random(&mut rng, &[m, k], 1.0), random(&mut rng, &[k, n], 1.0)]),
                (Prim::Add, vec![random(&mut rng, &sa, 1.0), random(&mut rng, &sb, 1.0)]),
                (Prim::Mul, vec![random(&mut rng, &sc, 1.0), random(&mut rng, &sd, 1.0)]),
                (Prim::Tanh, vec![random(&mut rng, &[m, n], 2.0)]),
                (Prim::Sigmoid, vec![random(&mut rng, &[m, n], 3.0)]),
                (Prim::Concat { axis }, vec![random(&mut rng, &[m, n], 1.0), random(&mut rng, &other, 1.0)]),
                (Prim::Slice { axis: 1, start, end }, vec![random(&mut rng, &[m, n], 1.0)]),
                (Prim::Sum, vec![random(&mut rng, &[m, n], 1.0)]),
                (Prim::Mse, vec![random(&mut rng, &[m, n], 1.0), random(&mut rng, &[m, n], 1.0)]),
            ]
        };
        for (prim, inputs) in cases {
            let err = check_prim(prim, inputs, &mut rng);
            assert!(err < 1e-5, "{prim} trial {trial}: rel error {err}");
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-5);
}

#[test]
fn square_and_tanh_derivatives() {
    let (_, mut g, y) = eval_graph(&[("x", Tensor::scalar(3.0))], |g, ids| g.apply(Prim::Mul, &[ids[0], ids[0]])).unwrap();
    assert_eq!(g.value(y).item(), 9.0);
    assert_eq!(g.backward(y, None).unwrap().get("x").unwrap().item(), 6.0);

    let (v, mut g, y) = eval_graph(&[("x", Tensor::scalar(0.0))], |g, ids| g.apply(Prim::Tanh, &[ids[0]])).unwrap();
    assert_eq!(v.item(), 0.0);
    assert_eq!(g.backward(y, None).unwrap().get("x").unwrap().item(), 1.0);
}

#[test]
fn forward_values() {
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let a = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
    assert_eq!(prim_forward(Prim::MatMul, &[&a, &eye]).unwrap(), a);

    let s = prim_forward(Prim::Sigmoid, &[&Tensor::scalar(3f64.ln())]).unwrap();
    assert!((s.item() - 0.75).abs() < 1e-15);

    let row = Tensor::row(vec![10.0, 20.0]);
    let sum = prim_forward(Prim::Add, &[&a, &row]).unwrap();
    assert_eq!(sum.to_rows(), vec![vec![11.5, 18.0], vec![10.25, 24.0]]);

    let cat = prim_forward(Prim::Concat { axis: 1 }, &[&a, &eye]).unwrap();
    assert_eq!(cat.shape(), &[2, 4]);
    let back = prim_forward(Prim::Slice { axis: 1, start: 2, end: 4 }, &[&cat]).unwrap();
    assert_eq!(back, eye);

    let mse = prim_forward(Prim::Mse, &[&a, &eye]).unwrap();
    let expected = (0.25 + 4.0 + 0.0625 + 9.0) / 4.0;
    assert!((mse.item() - expected).abs() < 1e-15);
}

#[test]
fn single_element_broadcast_keeps_matrix_shape() {
    let m = Tensor::matrix(1, 1, vec![3.0]);
    let s = Tensor::scalar(-2.0);
    for pair in [[&m, &s], [&s, &m]] {
        let out = prim_forward(Prim::Mul, &pair).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.item(), -6.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(check_prim(Prim::Add, vec![s.clone(), m.clone()], &mut rng) < 1e-9);
    assert!(check_prim(Prim::Mul, vec![m, s], &mut rng) < 1e-9);
}

#[test]
fn shape_errors_name_primitive_and_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = prim_forward(Prim::MatMul, &[&a, &b]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");

    let c = Tensor::zeros(&[3, 2]);
    assert!(matches!(
        prim_forward(Prim::Add, &[&a, &c]),
        Err(EngineError::ShapeMismatch { .. })
    ));
    assert!(matches!(prim_forward(Prim::Tanh, &[&a, &c]), Err(EngineError::Arity { .. })));
    assert!(matches!(
        prim_forward(Prim::Slice { axis: 1, start: 2, end: 5 }, &[&a]),
        Err(EngineError::SliceRange { .. })
    ));
}

#[test]
fn overflow_is_reported() {
    let big = Tensor::scalar(1e200);
    assert!(matches!(
        prim_forward(Prim::Mul, &[&big, &big]),
        Err(EngineError::NonFinite { .. })
    ));
}

#[test]
fn backward_seed_rules() {
    let x = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]).unwrap();
    let (_, mut g, y) = eval_graph(&[("x", x)], |g, ids| g.apply(Prim::Tanh, &[ids[0]])).unwrap();
    assert!(matches!(g.backward(y, None), Err(EngineError::SeedShape { .. })));
    assert!(matches!(
        g.backward(y, Some(Tensor::zeros(&[1, 2]))),
        Err(EngineError::SeedShape { .. })
    ));

    let seed = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
    let g1 = g.backward(y, Some(seed.clone())).unwrap();
    let g1_again = g.backward(y, Some(seed.clone())).unwrap();
    assert_eq!(g1, g1_again);
    let g2 = g.backward(y, Some(seed.map(|v| 2.0 * v))).unwrap();
    for (a, b) in g1.get("x").unwrap().data().iter().zip(g2.get("x").unwrap().data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn shared_and_unused_inputs() {
    let mut g = CompGraph::new();
    let a = g.input("w", Tensor::scalar(2.0));
    let b = g.input("w", Tensor::scalar(5.0));
    let unused = g.input("u", Tensor::zeros(&[1, 3]));
    let y = g.apply(Prim::Mul, &[a, b]).unwrap();
    let grads = g.backward(y, None).unwrap();
    // d(ab)/da + d(ab)/db for two leaves sharing a name
    assert_eq!(grads.get("w").unwrap().item(), 7.0);
    assert_eq!(grads.get("u").unwrap(), &Tensor::zeros(&[1, 3]));
    assert!(g.adjoint(unused).is_none());
}

#[test]
fn eager_and_graph_agree_exactly() {
    fn program<B: Backend>(b: &mut B, x: &Tensor, w: &Tensor) -> Tensor {
        let x = b.parameter("x", x);
        let w = b.parameter("w", w);
        let h = b.matmul(&x, &w).unwrap();
        let h = b.tanh(&h).unwrap();
        let s = b.sigmoid(&h).unwrap();
        let p = b.mul(&h, &s).unwrap();
        let q = b.scale(&p, 0.5).unwrap();
        b.value(&q).clone()
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[4, 3], 1.0);
    let w = random(&mut rng, &[3, 5], 1.0);
    assert_eq!(program(&mut Eager, &x, &w), program(&mut CompGraph::new(), &x, &w));
}

#[test]
fn quadratic_passes_grad_check() {
    let a = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let report = grad_check(
        |p| {
            let x = &p[0];
            let ax = prim_forward(Prim::MatMul, &[&a, x])?;
            let value = 0.5 * weighted_sum(x, &ax);
            Ok((value, vec![ax]))
        },
        &[Tensor::matrix(2, 1, vec![0.7, -1.3])],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

/// Single-step GRU cell built from primitives; returns sum(h' * w).
fn gru_loss(params: &[Tensor], w: &Tensor, zero_one: bool) -> Result<(f64, Vec<Tensor>), EngineError> {
    let names = ["x", "h", "wx", "wh", "b"];
    let mut g = CompGraph::new();
    let ids: Vec<NodeId> = names.iter().zip(params).map(|(n, t)| g.input(*n, t.clone())).collect();
    let (x, h, wx, wh, b) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
    let units = params[1].cols();
    let gx = g.apply(Prim::MatMul, &[x, wx])?;
    let gx = g.apply(Prim::Add, &[gx, b])?;
    let gh = g.apply(Prim::MatMul, &[h, wh])?;
    let part = |g: &mut CompGraph, t: NodeId, i: usize| g.apply(Prim::Slice { axis: 1, start: i * units, end: (i + 1) * units }, &[t]);
    let (rx, ux, cx) = (part(&mut g, gx, 0)?, part(&mut g, gx, 1)?, part(&mut g, gx, 2)?);
    let (rh, uh, ch) = (part(&mut g, gh, 0)?, part(&mut g, gh, 1)?, part(&mut g, gh, 2)?);
    let r = g.apply(Prim::Add, &[rx, rh])?;
    let r = g.apply(Prim::Sigmoid, &[r])?;
    let u = g.apply(Prim::Add, &[ux, uh])?;
    let u = g.apply(Prim::Sigmoid, &[u])?;
    let rc = g.apply(Prim::Mul, &[r, ch])?;
    let c = g.apply(Prim::Add, &[cx, rc])?;
    let c = g.apply(Prim::Tanh, &[c])?;
    let neg = g.constant(Tensor::scalar(-1.0));
    let nc = g.apply(Prim::Mul, &[c, neg])?;
    let diff = g.apply(Prim::Add, &[h, nc])?;
    let ud = g.apply(Prim::Mul, &[u, diff])?;
    let out = g.apply(Prim::Add, &[c, ud])?;
    let value = weighted_sum(g.value(out), w);
    let grads = g.backward(out, Some(w.clone()))?;
    let mut per: Vec<Tensor> = names.iter().map(|n| grads.get(n).unwrap().clone()).collect();
    if zero_one {
        let j = per[3].len() / 2;
        per[3].data_mut()[j] = 0.0;
    }
    Ok((value, per))
}

#[test]
fn gru_cell_grad_check_and_mutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let units = 20;
    let params = vec![
        random(&mut rng, &[2, 3], 1.0),
        random(&mut rng, &[2, units], 1.0),
        random(&mut rng, &[3, 3 * units], 0.5),
        random(&mut rng, &[units, 3 * units], 0.5),
        random(&mut rng, &[1, 3 * units], 0.5),
    ];
    let w = random(&mut rng, &[2, units], 1.0);
    let ok = grad_check(|p| gru_loss(p, &w, false), &params, 1e-5).unwrap();
    assert!(ok.max_rel_error < 1e-5, "{ok:?}");
    let bad = grad_check(|p| gru_loss(p, &w, true), &params, 1e-5).unwrap();
    assert!(bad.max_rel_error > 1e-2, "{bad:?}");
}

#[test]
fn grad_check_rejects_bad_eps() {
    let r = grad_check(|p| Ok((p[0].item(), vec![Tensor::scalar(1.0)])), &[Tensor::scalar(1.0)], 0.0);
    assert!(matches!(r, Err(EngineError::Invalid(_))));
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
    let g = Tensor::zeros(&[1, 2]);
    let mut st = AdamState::new(AdamConfig::default(), &[&p]);
    adam_step(&mut [&mut p], &[&g], &mut st, 1e-3).unwrap();
    assert_eq!(p.data(), &[1.0, -2.0]);
}

#[test]
fn adam_first_steps_move_by_lr() {
    let mut p = Tensor::scalar(0.5);
    let g = Tensor::scalar(3.0);
    let mut st = AdamState::new(AdamConfig::default(), &[&p]);
    adam_step(&mut [&mut p], &[&g], &mut st, 1e-3).unwrap();
    let first = 0.5 - p.item();
    assert!((first - 1e-3).abs() < 1e-9, "{first}");
    let before = p.item();
    adam_step(&mut [&mut p], &[&g], &mut st, 1e-3).unwrap();
    let second = before - p.item();
    assert!((second - 1e-3).abs() < 1e-5, "{second}");
    assert_eq!(st.step, 2);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut p = Tensor::scalar(0.5);
    let g = Tensor::scalar(f64::NAN);
    let mut st = AdamState::new(AdamConfig::default(), &[&p]);
    assert!(adam_step(&mut [&mut p], &[&g], &mut st, 1e-3).is_err());
    assert_eq!(p.item(), 0.5);
    assert_eq!(st.step, 0);
}

#[test]
fn tensor_serde_round_trip() {
    let t = Tensor::from_rows(&[vec![0.1, 1.0 / 3.0], vec![-2.5e-300, 7.0]]).unwrap();
    let s = serde_json::to_string(&t).unwrap();
    assert_eq!(serde_json::from_str::<Tensor>(&s).unwrap(), t);
    assert_eq!(serde_json::to_string(&Tensor::scalar(2.0)).unwrap(), "2.0");
    assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    assert!(Tensor::new(vec![1, 1, 1], vec![1.0]).is_err());
}
