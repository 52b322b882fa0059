use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{project_to_scalar, random_tensor, DEFAULT_EPS};
use super::*;
use crate::error::Error;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn eval1(input: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var, Error>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(input).unwrap();
    let y = f(&mut tape, x).unwrap();
    tape.value(y).clone()
}

fn attention_inputs(d: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    for i in 0..4 {
        v.push(random_tensor(&[d, d], 0.6, rng));
        if i != 1 {
            v.push(random_tensor(&[d], 0.2, rng));
        }
    }
    v
}

fn attention_vars(v: &[Var]) -> AttentionVars {
    AttentionVars {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        wv: v[3],
        bv: v[4],
        wo: v[5],
        bo: v[6],
    }
}

#[test]
fn matmul_identity_and_permutation() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let i = tape.constant(Tensor::identity(2)).unwrap();
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let e = tape.constant(t(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
    let p = tape.constant(t(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
    let c = tape.matmul(e, p).unwrap();
    assert_eq!(tape.value(c).data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let inputs = vec![random_tensor(&[3, 4], 1.0, &mut r), random_tensor(&[4, 2], 1.0, &mut r)];
    let rep = grad_check(
        |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            project_to_scalar(tape, c, 7)
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn elementwise_examples() {
    let s = eval1(Tensor::scalar(0.0), |tp, x| tp.sigmoid(x));
    assert_eq!(s.data()[0], 0.5);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(-2.0)).unwrap();
    let a = tape.constant(Tensor::scalar(0.25)).unwrap();
    let y = tape.prelu(x, a).unwrap();
    assert_eq!(tape.value(y).data()[0], -0.5);
}

#[test]
fn mask_multiply_zeroes_and_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[&[1.0, 2.0, 3.0, 4.0]])).unwrap();
    let m = tape.constant(t(&[&[1.0, 0.0, 1.0, 0.0]])).unwrap();
    let y = tape.mul(x, m).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 3.0, 0.0]);
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn elementwise_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[&[1.0, 0.0]])).unwrap();
    assert!(matches!(tape.log(a), Err(Error::Domain { .. })));
    let b = tape.constant(t(&[&[1.0, 0.0, 2.0]])).unwrap();
    assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(
        tape.elementwise(Elementwise::Mul, a, None),
        Err(Error::Usage(_))
    ));
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(2);
    let pos = random_tensor(&[3, 4], 1.0, &mut r).map(|x| x.abs() + 0.5);
    let kinds = [
        Elementwise::Add,
        Elementwise::Sub,
        Elementwise::Mul,
        Elementwise::Sigmoid,
        Elementwise::Exp,
        Elementwise::Log,
        Elementwise::Negate,
        Elementwise::Scale(-1.7),
    ];
    for kind in kinds {
        let inputs = vec![pos.clone(), random_tensor(&[3, 4], 1.0, &mut r)];
        let rep = grad_check(
            |tape, v| {
                let b = matches!(kind, Elementwise::Add | Elementwise::Sub | Elementwise::Mul).then_some(v[1]);
                let y = tape.elementwise(kind, v[0], b)?;
                project_to_scalar(tape, y, 3)
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(rep.passes(TOL), "{kind:?}: {rep:?}");
    }
}

#[test]
fn prelu_and_softplus_gradients() {
    let mut r = rng(3);
    // keep inputs away from the PReLU kink
    let x = random_tensor(&[4, 3], 1.0, &mut r).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    let alpha = random_tensor(&[3], 0.5, &mut r);
    let rep = grad_check(
        |tape, v| {
            let y = tape.prelu(v[0], v[1])?;
            let y = tape.softplus(y)?;
            project_to_scalar(tape, y, 4)
        },
        &[x, alpha],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(rep.passes(TOL), "{rep:?}");
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let b = tape.constant(t(&[&[5.0, 6.0, 7.0], &[8.0, 9.0, 10.0]])).unwrap();
    let c = tape.concat(&[a, b]).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 5]);
    assert_eq!(tape.value(c).row(1), &[3.0, 4.0, 8.0, 9.0, 10.0]);
    let one = tape.concat(&[a]).unwrap();
    assert_eq!(tape.value(one), tape.value(a));

    let short = tape.constant(Tensor::zeros(&[3, 1])).unwrap();
    assert!(matches!(tape.concat(&[a, short]), Err(Error::Dimension { .. })));
}

#[test]
fn concat_gradient_of_sum_splits() {
    let mut r = rng(4);
    let inputs = vec![random_tensor(&[3, 2], 1.0, &mut r), random_tensor(&[3, 3], 1.0, &mut r)];
    let rep = grad_check(
        |tape, v| {
            let c = tape.concat(&[v[0], v[1]])?;
            tape.sum(c)
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(rep.passes(TOL));
    let mut tape = Tape::new();
    let a = tape.param(inputs[0].clone()).unwrap();
    let b = tape.param(inputs[1].clone()).unwrap();
    let c = tape.concat(&[a, b]).unwrap();
    let s = tape.sum(c).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(a).unwrap().iter().all(|&x| x == 1.0));
    assert!(g.get(b).unwrap().iter().all(|&x| x == 1.0));
}

#[test]
fn softmax_examples() {
    let y = eval1(t(&[&[2.0, 2.0, 2.0]]), |tp, x| tp.softmax_rows(x));
    for &p in y.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = eval1(t(&[&[0.0, 1000.0]]), |tp, x| tp.softmax_rows(x));
    assert!(y.data()[0] < 1e-300 && (y.data()[1] - 1.0).abs() < 1e-15);
}

#[test]
fn softmax_random_rows_and_gradient() {
    let mut r = rng(5);
    let x = random_tensor(&[4, 5], 3.0, &mut r);
    let y = eval1(x.clone(), |tp, x| tp.softmax_rows(x));
    for i in 0..4 {
        let s: f64 = y.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(y.row(i).iter().all(|&p| p > 0.0));
    }
    let rep = grad_check(
        |tape, v| {
            let y = tape.softmax_rows(v[0])?;
            project_to_scalar(tape, y, 5)
        },
        &[x],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(rep.passes(TOL), "{rep:?}");
}

fn ln_eval(x: Tensor<f64>) -> Tensor<f64> {
    let d = x.cols();
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let g = tape.constant(Tensor::full(&[d], 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(&[d])).unwrap();
    let y = tape.layer_norm(xv, g, b, 1e-5).unwrap();
    tape.value(y).clone()
}

#[test]
fn layer_norm_examples() {
    let y = ln_eval(t(&[&[3.0, 3.0, 3.0, 3.0]]));
    assert!(y.data().iter().all(|&v| v == 0.0));

    let mut r = rng(6);
    let y = ln_eval(random_tensor(&[5, 8], 4.0, &mut r));
    for i in 0..5 {
        let row = y.row(i);
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 1])).unwrap();
    let g = tape.constant(Tensor::zeros(&[1])).unwrap();
    assert!(tape.layer_norm(x, g, g, 1e-5).is_err());
}

#[test]
fn layer_norm_gradient() {
    let mut r = rng(7);
    let inputs = vec![
        random_tensor(&[3, 6], 2.0, &mut r),
        random_tensor(&[6], 1.0, &mut r),
        random_tensor(&[6], 1.0, &mut r),
    ];
    let rep = grad_check(
        |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project_to_scalar(tape, y, 8)
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(rep.passes(TOL), "{rep:?}");
}

#[test]
fn attention_single_key_and_identical_keys() {
    let mut r = rng(8);
    let d = 4;
    let params = attention_inputs(d, &mut r);
    let q = random_tensor(&[3, d], 1.0, &mut r);
    let k1 = random_tensor(&[1, d], 1.0, &mut r);

    let mut tape = Tape::new();
    let pv: Vec<Var> = params.iter().map(|p| tape.constant(p.clone()).unwrap()).collect();
    let av = attention_vars(&pv);
    let qv = tape.constant(q.clone()).unwrap();
    let kv = tape.constant(k1.clone()).unwrap();
    let out = multi_head_attention(&mut tape, qv, kv, kv, 2, &av).unwrap();
    // one key: every query returns the projected value row
    let vproj = affine(&mut tape, kv, av.wv, av.bv).unwrap();
    let expected = affine(&mut tape, vproj, av.wo, av.bo).unwrap();
    for i in 0..3 {
        for j in 0..d {
            assert!((tape.value(out).at(i, j) - tape.value(expected).at(0, j)).abs() < 1e-12);
        }
    }

    // identical keys: uniform weights, so the output is the mean projected value
    let krow = random_tensor(&[1, d], 1.0, &mut r);
    let keys = Tensor::new(vec![3, d], krow.data().repeat(3)).unwrap();
    let vals = random_tensor(&[3, d], 1.0, &mut r);
    let kk = tape.constant(keys).unwrap();
    let vv = tape.constant(vals.clone()).unwrap();
    let out = multi_head_attention(&mut tape, qv, kk, vv, 2, &av).unwrap();
    let vp = affine(&mut tape, vv, av.wv, av.bv).unwrap();
    let third = tape.constant(Tensor::full(&[1, 3], 1.0 / 3.0)).unwrap();
    let mean = tape.matmul(third, vp).unwrap();
    let expected = affine(&mut tape, mean, av.wo, av.bo).unwrap();
    for i in 0..3 {
        for j in 0..d {
            assert!((tape.value(out).at(i, j) - tape.value(expected).at(0, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_head_divisibility() {
    let mut r = rng(9);
    let params = attention_inputs(6, &mut r);
    let mut tape = Tape::new();
    let pv: Vec<Var> = params.iter().map(|p| tape.constant(p.clone()).unwrap()).collect();
    let x = tape.constant(random_tensor(&[2, 6], 1.0, &mut r)).unwrap();
    let err = multi_head_attention(&mut tape, x, x, x, 4, &attention_vars(&pv));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn attention_gradients() {
    for (seed, heads) in [(10u64, 1usize), (11, 2), (12, 4)] {
        let mut r = rng(seed);
        let d = 8;
        let mut inputs = attention_inputs(d, &mut r);
        inputs.push(random_tensor(&[3, d], 1.0, &mut r));
        inputs.push(random_tensor(&[5, d], 1.0, &mut r));
        let rep = grad_check(
            |tape, v| {
                let out = multi_head_attention(tape, v[7], v[8], v[8], heads, &attention_vars(v))?;
                project_to_scalar(tape, out, seed)
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(rep.passes(TOL), "heads={heads}: {rep:?}");
    }
}

#[test]
fn cosine_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[&[1.0, 2.0, 3.0], &[1.0, 0.0, 0.0]])).unwrap();
    let b = tape.constant(t(&[&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0]])).unwrap();
    let s = tape.cosine_rows(a, b).unwrap();
    assert!((tape.value(s).at(0, 0) - 1.0).abs() < 1e-12);
    assert_eq!(tape.value(s).at(1, 1), 0.0);
    let a5 = tape.constant(t(&[&[5.0, 10.0, 15.0], &[1.0, 0.0, 0.0]])).unwrap();
    let s5 = tape.cosine_rows(a5, b).unwrap();
    for j in 0..2 {
        assert!((tape.value(s).at(0, j) - tape.value(s5).at(0, j)).abs() < 1e-6);
    }
    // zero row is floored, not a NaN
    let z = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
    let sz = tape.cosine_rows(z, b).unwrap();
    assert!(tape.value(sz).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cosine_gradient() {
    let mut r = rng(13);
    let inputs = vec![random_tensor(&[3, 5], 1.0, &mut r), random_tensor(&[4, 5], 1.0, &mut r)];
    let rep = grad_check(
        |tape, v| {
            let s = tape.cosine_rows(v[0], v[1])?;
            project_to_scalar(tape, s, 13)
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(rep.passes(TOL), "{rep:?}");
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(Tensor::zeros(&[3, 16])).unwrap();
    let l = tape.cross_entropy(u, &[0, 5, 15]).unwrap();
    assert!((tape.value(l).data()[0] - 16f64.ln()).abs() < 1e-12);

    let mut logits = Tensor::<f64>::zeros(&[2, 4]);
    logits.data_mut()[1] = 100.0;
    logits.data_mut()[4 + 3] = 100.0;
    let lg = tape.constant(logits).unwrap();
    let l = tape.cross_entropy(lg, &[1, 3]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-40);

    assert!(matches!(tape.cross_entropy(lg, &[1, 4]), Err(Error::Input(_))));
    assert!(matches!(tape.cross_entropy(lg, &[1]), Err(Error::Dimension { .. })));
}

#[test]
fn cross_entropy_matches_direct_evaluation() {
    let mut r = rng(14);
    let x = random_tensor(&[6, 5], 3.0, &mut r);
    let labels = [0, 4, 2, 2, 1, 3];
    // direct oracle: −log(exp(x_y) / Σ exp(x_j)) without max shifting
    let direct: f64 = (0..6)
        .map(|i| {
            let row = x.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[labels[i]].exp() / z).ln()
        })
        .sum::<f64>()
        / 6.0;
    let mut tape = Tape::new();
    let lv = tape.constant(x.clone()).unwrap();
    let l = tape.cross_entropy(lv, &labels).unwrap();
    assert!((tape.value(l).data()[0] - direct).abs() < 1e-8);

    let rep = grad_check(|tape, v| tape.cross_entropy(v[0], &labels), &[x], DEFAULT_EPS).unwrap();
    assert!(rep.passes(TOL), "{rep:?}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[&[1.0, -2.0], &[0.5, 4.0]])).unwrap();
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 4]);

    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[&[1.0, 2.0]])).unwrap();
    let y = tape.param(t(&[&[3.0, 4.0]])).unwrap();
    let xs = tape.sigmoid(x).unwrap();
    let xd = tape.detach(xs);
    let z = tape.mul(xd, y).unwrap();
    let l = tape.sum(z).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).is_none());
    assert!(g.get(xs).is_none());
    assert_eq!(g.get_or_zeros(x, 2), vec![0.0, 0.0]);
    assert!(g.get(y).is_some());
}

#[test]
fn sigmoid_of_matmul_gradient() {
    let mut r = rng(15);
    let inputs = vec![random_tensor(&[2, 3], 1.0, &mut r), random_tensor(&[3, 4], 1.0, &mut r)];
    let rep = grad_check(
        |tape, v| {
            let m = tape.matmul(v[0], v[1])?;
            let s = tape.sigmoid(m)?;
            project_to_scalar(tape, s, 15)
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(rep.passes(TOL), "{rep:?}");
}

#[test]
fn linear_function_is_exact() {
    let mut r = rng(16);
    let inputs = vec![random_tensor(&[3, 3], 1.0, &mut r)];
    let rep = grad_check(
        |tape, v| {
            let s = tape.scale(v[0], 2.5)?;
            project_to_scalar(tape, s, 16)
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-9, "{rep:?}");
}

#[test]
fn non_finite_output_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::scalar(1000.0)).unwrap();
    assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
}

#[test]
fn slice_and_mean_gradients() {
    let mut r = rng(17);
    let rep = grad_check(
        |tape, v| {
            let s = tape.slice_cols(v[0], 1, 2)?;
            let e = tape.exp(s)?;
            tape.mean(e)
        },
        &[random_tensor(&[3, 4], 1.0, &mut r)],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(rep.passes(TOL));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..7, scale in 0.1f64..50.0) {
        let x = random_tensor(&[rows, cols], scale, &mut rng(seed));
        let y = eval1(x, |tp, x| tp.softmax_rows(x));
        for i in 0..rows {
            let s: f64 = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(y.row(i).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn layer_norm_rows_are_centred(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..9, scale in 0.1f64..100.0) {
        let y = ln_eval(random_tensor(&[rows, cols], scale, &mut rng(seed)));
        for i in 0..rows {
            let mean: f64 = y.row(i).iter().sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_bounded_and_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let a = random_tensor(&[3, 4], 1.0, &mut r);
        let b = random_tensor(&[2, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone()).unwrap();
        let bv = tape.constant(b).unwrap();
        let s = tape.cosine_rows(av, bv).unwrap();
        let ac = tape.constant(a.map(|x| x * c)).unwrap();
        let sc = tape.cosine_rows(ac, bv).unwrap();
        for (&x, &y) in tape.value(s).data().iter().zip(tape.value(sc).data()) {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&x));
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn composed_ops_pass_gradcheck(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..5) {
        let mut r = rng(seed);
        let inputs = vec![
            random_tensor(&[rows, cols], 1.0, &mut r),
            random_tensor(&[cols, cols], 1.0, &mut r),
            random_tensor(&[cols], 1.0, &mut r),
        ];
        let rep = grad_check(
            |tape, v| {
                let h = affine(tape, v[0], v[1], v[2])?;
                let h = tape.softmax_rows(h)?;
                let h = tape.sigmoid(h)?;
                project_to_scalar(tape, h, seed)
            },
            &inputs,
            DEFAULT_EPS,
        ).unwrap();
        prop_assert!(rep.passes(TOL), "{:?}", rep);
    }
}
