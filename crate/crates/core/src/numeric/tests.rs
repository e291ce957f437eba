use super::*;

use super::gradcheck::{check_op, project, random};

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t64(&[2, 1], &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    check_op(&[&[3, 3], &[3, 3]], &|t, v, _| {
        let c = t.matmul(v[0], v[1]).unwrap();
        t.sum(c).unwrap()
    });
}

#[test]
fn gradcheck_matmul_nt() {
    check_op(&[&[3, 4], &[5, 4]], &|t, v, r| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        project(t, y, r)
    });
}

#[test]
fn matmul_nt_agrees_with_transpose_route() {
    let mut rng = Rng::new(8);
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(random(&[3, 4], &mut rng));
    let b = tape.constant(random(&[5, 4], &mut rng));
    let direct = tape.matmul_nt(a, b).unwrap();
    let bt = tape.transpose(b).unwrap();
    let via = tape.matmul(a, bt).unwrap();
    for (x, y) in tape.value(direct).data().iter().zip(tape.value(via).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t64(&[2, 3], &[0.0, 0.0, 0.0, 1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = tape.softmax_rows(x).unwrap();
    let d = tape.value(y).data();
    for v in &d[..3] {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    for (v, e) in d[3..].iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((v - e).abs() < 1e-15);
    }
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut rng = Rng::new(5);
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.input(random(&[4, 5], &mut rng), true);
    let y = tape.softmax_rows(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Rng::new(9);
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(random(&[16, 11], &mut rng).cast::<f64>());
    let x = tape.scale(x, 30.0).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    for r in 0..16 {
        let s: f64 = tape.value(y).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 7]));
    let l = tape.cross_entropy(x, &[0, 3, 6]).unwrap();
    assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);

    let x = tape.constant(t64(&[1, 3], &[0.0, 60.0, 0.0]));
    let l = tape.cross_entropy(x, &[1]).unwrap();
    assert!(tape.value(l).data()[0].abs() < 1e-20);

    let x = tape.constant(t64(&[1, 2], &[0.0, 3f64.ln()]));
    let l = tape.cross_entropy(x, &[0]).unwrap();
    assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(tape.cross_entropy(x, &[4]), Err(NumericError::Index { index: 4, bound: 4 })));
}

#[test]
fn backward_on_non_scalar_is_contract_error() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.input(Tensor::zeros(&[2, 2]), true);
    assert!(matches!(tape.backward(x), Err(NumericError::Contract(_))));
}

#[test]
fn sum_of_parameters_gives_unit_grads() {
    let mut rng = Rng::new(1);
    let p = random(&[3, 4], &mut rng);
    let q = random(&[4], &mut rng);
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.param(&p, true);
    let b = tape.param(&q, true);
    let sa = tape.sum(a).unwrap();
    let sb = tape.sum(b).unwrap();
    let (ra, rb) = (tape_reshape(&mut tape, sa), tape_reshape(&mut tape, sb));
    let r = tape.concat_cols(&[ra, rb]).unwrap();
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(a).unwrap().iter().all(|&g| g == 1.0));
    assert!(tape.grad(b).unwrap().iter().all(|&g| g == 1.0));
}

fn tape_reshape(tape: &mut Tape<'_, f64>, v: Var) -> Var {
    tape.reshape(v, &[1, 1]).unwrap()
}

#[test]
fn frozen_parameters_still_yield_retained_attention_grads() {
    let mut rng = Rng::new(2);
    let q = random(&[4, 3], &mut rng);
    let k = random(&[4, 3], &mut rng);
    let mut tape: Tape<f64> = Tape::with_attention_retention();
    let qv = tape.param(&q, false);
    let kv = tape.param(&k, false);
    let kt = tape.transpose(kv).unwrap();
    let s = tape.matmul(qv, kt).unwrap();
    let s = tape.apply_mask(s, AttentionMask::causal()).unwrap();
    let a = tape.softmax_rows(s).unwrap();
    tape.retain(0, 0, a);
    let o = tape.matmul(a, qv).unwrap();
    let l = tape.sum(o).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(a).is_some());
    assert!(tape.grad(qv).is_none());
    assert_eq!(tape.retained().len(), 1);
}

#[test]
fn retention_off_records_nothing() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    let a = tape.softmax_rows(x).unwrap();
    tape.retain(0, 0, a);
    assert!(tape.retained().is_empty());
    assert!(!tape.requires_grad(a));
}

#[test]
fn composite_square_loss_matches_finite_differences() {
    check_op(&[&[3, 4], &[4, 2]], &|t, v, _| {
        let y = t.matmul(v[0], v[1]).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum(sq).unwrap()
    });
}

#[test]
fn gradcheck_add_broadcast() {
    check_op(&[&[3, 4], &[4]], &|t, v, r| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, r)
    });
    check_op(&[&[3, 4], &[3, 4]], &|t, v, r| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, r)
    });
}

#[test]
fn gradcheck_mul_broadcast() {
    check_op(&[&[3, 4], &[4]], &|t, v, r| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, r)
    });
}

#[test]
fn broadcast_requires_trailing_match() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.constant(Tensor::zeros(&[3, 4]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, b), Err(NumericError::Dimension { .. })));
}

#[test]
fn gradcheck_scale_gelu() {
    check_op(&[&[4, 5]], &|t, v, r| {
        let y = t.scale(v[0], 0.7).unwrap();
        let y = t.gelu(y).unwrap();
        project(t, y, r)
    });
}

#[test]
fn gradcheck_layer_norm() {
    check_op(&[&[3, 6], &[6], &[6]], &|t, v, r| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        project(t, y, r)
    });
}

#[test]
fn gradcheck_embedding() {
    check_op(&[&[5, 3]], &|t, v, r| {
        let y = t.embedding(v[0], &[4, 0, 4, 2]).unwrap();
        project(t, y, r)
    });
}

#[test]
fn gradcheck_masked_softmax() {
    for mask in [AttentionMask::causal(), AttentionMask::Prefix(2), AttentionMask::Full] {
        check_op(&[&[5, 5]], &move |t, v, r| {
            let y = t.apply_mask(v[0], mask).unwrap();
            let y = t.softmax_rows(y).unwrap();
            project(t, y, r)
        });
    }
}

#[test]
fn gradcheck_log_softmax() {
    check_op(&[&[3, 5]], &|t, v, r| {
        let y = t.log_softmax_rows(v[0]).unwrap();
        project(t, y, r)
    });
}

#[test]
fn gradcheck_reshape_transpose() {
    check_op(&[&[3, 4]], &|t, v, r| {
        let y = t.transpose(v[0]).unwrap();
        let y = t.reshape(y, &[2, 6]).unwrap();
        project(t, y, r)
    });
}

#[test]
fn gradcheck_reductions() {
    check_op(&[&[3, 4]], &|t, v, r| {
        let y = t.mean_rows(v[0]).unwrap();
        project(t, y, r)
    });
    check_op(&[&[3, 4]], &|t, v, r| {
        let y = t.mul(v[0], v[0]).unwrap();
        let _ = r;
        t.mean(y).unwrap()
    });
}

#[test]
fn gradcheck_cross_entropy() {
    check_op(&[&[4, 6]], &|t, v, _| t.cross_entropy(v[0], &[1, 5, 0, 1]).unwrap());
}

#[test]
fn gradcheck_slicing_and_concat() {
    check_op(&[&[3, 6], &[2, 6]], &|t, v, r| {
        let a = t.slice_cols(v[0], 1, 3).unwrap();
        let b = t.slice_cols(v[0], 4, 2).unwrap();
        let c = t.concat_cols(&[b, a]).unwrap();
        let d = t.concat_rows(&[v[0], v[1]]).unwrap();
        let e = t.gather_rows(d, &[4, 0, 0]).unwrap();
        let pc = project(t, c, r);
        let pe = project(t, e, r);
        let (pc, pe) = (t_r(t, pc), t_r(t, pe));
        let both = t.concat_rows(&[pc, pe]).unwrap();
        t.sum(both).unwrap()
    });
}

fn t_r(t: &mut Tape<'_, f64>, v: Var) -> Var {
    t.reshape(v, &[1, 1]).unwrap()
}

#[test]
fn masks_follow_prefix_rule() {
    let m = AttentionMask::Prefix(2);
    assert!(m.allows(0, 1));
    assert!(!m.allows(0, 2));
    assert!(m.allows(3, 0) && m.allows(3, 3) && !m.allows(3, 4));
    assert!(!AttentionMask::causal().allows(0, 1));
}

#[test]
fn identical_ops_are_bit_identical() {
    let run = || {
        let mut rng = Rng::new(42);
        let a = random(&[6, 5], &mut rng).cast::<f32>();
        let b = random(&[5, 7], &mut rng).cast::<f32>();
        let mut tape: Tape<f32> = Tape::new();
        let av = tape.input(a, true);
        let bv = tape.input(b, true);
        let c = tape.matmul(av, bv).unwrap();
        let c = tape.gelu(c).unwrap();
        let c = tape.softmax_rows(c).unwrap();
        let l = tape.cross_entropy(c, &[0, 1, 2, 3, 4, 5]).unwrap();
        tape.backward(l).unwrap();
        (tape.value(c).clone(), tape.grad(av).unwrap().to_vec())
    };
    let (c1, g1) = run();
    let (c2, g2) = run();
    assert_eq!(c1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(g1, g2);
}

#[test]
fn non_finite_output_is_rejected() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(t64(&[1, 1], &[1e200]));
    assert!(matches!(tape.mul(x, x), Err(NumericError::NonFinite("mul"))));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
            let y = tape.softmax_rows(x).unwrap();
            for r in 0..3 {
                let row = tape.value(y).row(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn tensor_len_matches_shape(m in 1usize..6, n in 1usize..6) {
            let t: Tensor<f32> = Tensor::zeros(&[m, n]);
            prop_assert_eq!(t.len(), m * n);
            prop_assert!(Tensor::<f32>::new(vec![m, n], vec![0.0; m * n + 1]).is_err());
        }
    }
}

#[test]
fn every_primitive_passes_the_suite() {
    for c in super::gradcheck::primitive_suite(10) {
        assert!(c.worst < super::gradcheck::TOLERANCE, "{}: {}", c.op, c.worst);
    }
}
