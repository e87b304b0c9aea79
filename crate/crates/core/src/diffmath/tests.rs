use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn check(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, MathError>, points: &[Tensor<f64>]) -> GradCheckReport {
    finite_diff_check_many(f, points, usize::MAX, 1e-5, 1e-4, &mut rng()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut t = Tape::<f64>::new();
    let eye = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let p = t.matmul(eye, m).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);

    let err = t.matmul(a, a).unwrap_err();
    assert!(matches!(err, MathError::Shape(ref s) if s.contains("[1, 2]")));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng();
    let a = uniform(&[5, 7], &mut r);
    let b = uniform(&[7, 3], &mut r);
    let w = uniform(&[5, 3], &mut r);
    let rep = check(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let w = t.constant(w.clone());
            let q = t.mul(p, w)?;
            Ok(t.sum(q))
        },
        &[a, b],
    );
    assert!(rep.passed(1e-6), "{rep:?}");
}

#[test]
fn elementwise_examples() {
    assert_eq!(gelu(0.0f64), 0.0);
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
    let s = t.softmax_rows(x);
    for &v in t.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn gelu_gradient_at_one() {
    let x = Tensor::vector(vec![1.0]);
    let rep = check(
        |t, v| {
            let g = t.gelu(v[0]);
            Ok(t.sum(g))
        },
        &[x],
    );
    assert!(rep.passed(1e-6), "{rep:?}");
}

#[test]
fn layer_norm_zero_variance_is_finite() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::matrix(2, 4, vec![3.0; 8]).unwrap());
    let g = t.constant(Tensor::filled(&[4], 1.0));
    let b = t.constant(Tensor::zeros(&[4]));
    let y = t.layer_norm(x, g, b).unwrap();
    assert!(t.value(y).all_finite());
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(x).all_finite());
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f64>::new();
    let w = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let x = t.param(Tensor::vector(vec![4.0, 5.0, 6.0]));
    let p = t.mul(w, x).unwrap();
    let s = t.sum(p);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).data(), &[1.0, 2.0, 3.0]);

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::vector(vec![1.0, -2.0]));
    let sq = t.square(x);
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).data(), &[2.0, -4.0]);

    let err = t.backward(x).unwrap_err();
    assert_eq!(err, MathError::NotScalar(vec![2]));
}

#[test]
fn unreachable_nodes_keep_zero_grad() {
    let mut t = Tape::<f64>::new();
    let a = t.param(Tensor::vector(vec![1.0, 2.0]));
    let b = t.param(Tensor::vector(vec![3.0, 4.0]));
    let s = t.sum(a);
    let _unused = t.sum(b);
    t.backward(s).unwrap();
    assert_eq!(t.grad(b).data(), &[0.0, 0.0]);
    t.zero_grad();
    assert_eq!(t.grad(a).data(), &[0.0, 0.0]);
}

#[test]
fn finite_diff_examples() {
    let x = Tensor::vector(vec![0.3, -1.2, 2.0, 0.5]);
    let rep = finite_diff_check(|t, v| Ok::<_, MathError>(t.sum(v)), &x, 10, &mut rng()).unwrap();
    assert!(rep.max_rel_error < 1e-9, "{rep:?}");

    let x = Tensor::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    let rep = finite_diff_check(
        |t, v| {
            let s = t.softmax_rows(v);
            Ok::<_, MathError>(t.sum(s))
        },
        &x,
        10,
        &mut rng(),
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn finite_diff_reports_nan_as_failure() {
    let x = Tensor::vector(vec![-1.0]);
    let rep = finite_diff_check(
        |t, v| {
            let s = t.sum(v);
            let z = t.scale(s, f64::NAN);
            Ok::<_, MathError>(z)
        },
        &x,
        1,
        &mut rng(),
    )
    .unwrap();
    assert!(rep.non_finite);
    assert!(!rep.passed(1.0));
}

#[test]
fn repeated_backward_accumulates_additively() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::vector(vec![0.5, -1.5, 2.0]));
    let g = t.gelu(x);
    let s = t.sum(g);
    t.backward(s).unwrap();
    let once = t.grad(x);
    t.backward(s).unwrap();
    let twice = t.grad(x);
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut r = rng();
    let xv = uniform(&[3, 4], &mut r);
    let build = |t: &mut Tape<f64>| {
        let x = t.param(xv.clone());
        let a = t.gelu(x);
        let a = t.sum(a);
        let b = t.softmax_rows(x);
        let b = t.square(b);
        let b = t.sum(b);
        (x, a, b)
    };
    let mut t = Tape::new();
    let (x, a, b) = build(&mut t);
    let s = t.add(a, b).unwrap();
    t.backward(s).unwrap();
    let joint = t.grad(x);

    let mut t = Tape::new();
    let (x, a, b) = build(&mut t);
    t.backward(a).unwrap();
    t.backward(b).unwrap();
    assert!(joint.max_abs_diff(&t.grad(x)) < 1e-14);
}

// Each primitive against central differences on random inputs in [-2, 2].
#[test]
fn every_primitive_matches_finite_differences() {
    let mut r = rng();
    for trial in 0..100 {
        let x = uniform(&[3, 4], &mut r);
        let y = uniform(&[3, 4], &mut r);
        let bias = uniform(&[4], &mut r);
        let gain = uniform(&[4], &mut r);
        let w = uniform(&[3, 4], &mut r);
        let reduce = |t: &mut Tape<f64>, v: Var| -> Result<Var, MathError> {
            let w = t.constant(w.clone());
            let p = t.mul(v, w)?;
            Ok(t.sum(p))
        };
        let cases: Vec<(&str, GradCheckReport)> = vec![
            (
                "add",
                check(
                    |t, v| {
                        let o = t.add(v[0], v[1])?;
                        reduce(t, o)
                    },
                    &[x.clone(), y.clone()],
                ),
            ),
            (
                "sub",
                check(
                    |t, v| {
                        let o = t.sub(v[0], v[1])?;
                        reduce(t, o)
                    },
                    &[x.clone(), y.clone()],
                ),
            ),
            (
                "mul",
                check(
                    |t, v| {
                        let o = t.mul(v[0], v[1])?;
                        reduce(t, o)
                    },
                    &[x.clone(), y.clone()],
                ),
            ),
            (
                "add_row",
                check(
                    |t, v| {
                        let o = t.add_row(v[0], v[1])?;
                        reduce(t, o)
                    },
                    &[x.clone(), bias.clone()],
                ),
            ),
            (
                "gelu",
                check(
                    |t, v| {
                        let o = t.gelu(v[0]);
                        reduce(t, o)
                    },
                    std::slice::from_ref(&x),
                ),
            ),
            (
                "square",
                check(
                    |t, v| {
                        let o = t.square(v[0]);
                        reduce(t, o)
                    },
                    std::slice::from_ref(&x),
                ),
            ),
            (
                "softmax_rows",
                check(
                    |t, v| {
                        let o = t.softmax_rows(v[0]);
                        reduce(t, o)
                    },
                    std::slice::from_ref(&x),
                ),
            ),
            (
                "layer_norm",
                check(
                    |t, v| {
                        let o = t.layer_norm(v[0], v[1], v[2])?;
                        reduce(t, o)
                    },
                    &[x.clone(), gain.clone(), bias.clone()],
                ),
            ),
            (
                "gather_rows",
                check(
                    |t, v| {
                        let o = t.gather_rows(v[0], &[2, 0, 2])?;
                        reduce(t, o)
                    },
                    std::slice::from_ref(&x),
                ),
            ),
            (
                "concat_rows",
                check(
                    |t, v| {
                        let a = t.gather_rows(v[0], &[0])?;
                        let b = t.gather_rows(v[0], &[1, 2])?;
                        let o = t.concat_rows(&[b, a])?;
                        reduce(t, o)
                    },
                    std::slice::from_ref(&x),
                ),
            ),
            (
                "column",
                check(
                    |t, v| {
                        let o = t.column(v[0], 2)?;
                        let o = t.square(o);
                        Ok(t.sum(o))
                    },
                    std::slice::from_ref(&x),
                ),
            ),
            (
                "weighted_sum",
                check(
                    |t, v| {
                        let o = t.square(v[0]);
                        t.weighted_sum(o, w.data().to_vec())
                    },
                    std::slice::from_ref(&x),
                ),
            ),
        ];
        for (name, rep) in cases {
            assert!(rep.passed(1e-6), "trial {trial} {name}: {rep:?}");
        }
    }
}

#[test]
fn attention_gradient_with_gate() {
    let mut r = rng();
    for heads in [1usize, 2] {
        let q = uniform(&[5, 4], &mut r);
        let k = uniform(&[5, 4], &mut r);
        let v = uniform(&[5, 4], &mut r);
        let gate = Tensor::vector(vec![1.0, 0.0, 1.0, 0.3, 0.0]);
        let w = uniform(&[5, 4], &mut r);
        let pos: Vec<usize> = vec![0, 2, 3, 7, 9];
        let rep = check(
            |t, vs| {
                let o = t.attention(vs[0], vs[1], vs[2], heads, &pos, &pos, Some(vs[3]))?;
                let w = t.constant(w.clone());
                let p = t.mul(o, w)?;
                Ok(t.sum(p))
            },
            &[q.clone(), k.clone(), v.clone(), gate],
        );
        assert!(rep.passed(1e-6), "heads {heads}: {rep:?}");
    }
}

#[test]
fn attention_hard_gate_equals_subset_softmax() {
    let mut r = rng();
    let q = uniform(&[6, 4], &mut r);
    let k = uniform(&[6, 4], &mut r);
    let v = uniform(&[6, 4], &mut r);
    let pos: Vec<usize> = (0..6).collect();
    let keep = [0usize, 2, 3, 5];
    let gate = Tensor::vector((0..6).map(|i| if keep.contains(&i) { 1.0 } else { 0.0 }).collect());
    let mut t = Tape::<f64>::new();
    let (qv, kv, vv, gv) = (
        t.constant(q.clone()),
        t.constant(k.clone()),
        t.constant(v.clone()),
        t.constant(gate),
    );
    let full = t.attention(qv, kv, vv, 2, &pos, &pos, Some(gv)).unwrap();
    let (qs, ks, vs) = (
        t.constant(q.select_rows(&keep)),
        t.constant(k.select_rows(&keep)),
        t.constant(v.select_rows(&keep)),
    );
    let sub = t.attention(qs, ks, vs, 2, &keep, &keep, None).unwrap();
    let full_kept = t.value(full).select_rows(&keep);
    assert!(full_kept.max_abs_diff(t.value(sub)) < 1e-14);
}

#[test]
fn nll_sum_gradient_and_values() {
    let mut r = rng();
    let logits = uniform(&[4, 6], &mut r);
    let weights = vec![1.0, 0.0, 0.5, 2.0];
    let rep = check(|t, v| t.nll_sum(v[0], &[1, 5, 0, 3], weights.clone()), &[logits]);
    assert!(rep.passed(1e-6), "{rep:?}");

    let mut t = Tape::<f64>::new();
    let u = t.constant(Tensor::zeros(&[2, 256]));
    let l = t.nll_sum(u, &[3, 7], vec![0.5, 0.5]).unwrap();
    assert!((t.value(l).item() - 256f64.ln()).abs() < 1e-12);
}

#[test]
fn pairwise_rank_gradient() {
    let mut r = rng();
    let s = uniform(&[5], &mut r);
    let pairs = vec![
        RankPair {
            i: 0,
            j: 1,
            sign: 1.0,
            weight: 1.0,
        },
        RankPair {
            i: 1,
            j: 4,
            sign: -1.0,
            weight: 2.5,
        },
        RankPair {
            i: 2,
            j: 3,
            sign: 1.0,
            weight: 0.5,
        },
    ];
    let rep = check(|t, v| t.pairwise_rank(v[0], pairs.clone()), &[s]);
    assert!(rep.passed(1e-6), "{rep:?}");
}

#[test]
fn straight_through_forward_is_hard() {
    let mut t = Tape::<f64>::new();
    let l = t.param(Tensor::matrix(3, 2, vec![10.0, -10.0, -10.0, 10.0, -10.0, 10.0]).unwrap());
    let m = t
        .straight_through_keep(l, &[0.0; 6], 1.0, &[false, false, true])
        .unwrap();
    assert_eq!(t.value(m).data(), &[1.0, 0.0, 1.0]);
    let s = t.sum(m);
    t.backward(s).unwrap();
    let g = t.grad(l);
    assert_eq!(&g.data()[4..], &[0.0, 0.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::matrix(3, 4, vals).unwrap());
        let s = t.softmax_rows(x);
        let y = t.value(s);
        for r in 0..3 {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn outputs_stay_finite(vals in proptest::collection::vec(-1e3f32..1e3, 8)) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::matrix(2, 4, vals).unwrap());
        let g = t.constant(Tensor::filled(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let ln = t.layer_norm(x, g, b).unwrap();
        let sm = t.softmax_rows(x);
        let ge = t.gelu(x);
        for v in [ln, sm, ge] {
            prop_assert!(t.value(v).all_finite());
        }
    }
}
