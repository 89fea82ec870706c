use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use skam::autodiff::{grad_check, AutodiffError, Tape, Tensor, Var};
use skam::rng::seeded;
use skam::transforms::{Transform, TransformSpec};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed, 11);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check<F>(params: &[Tensor<f64>], build: F) -> f64
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let rep = grad_check(params, build, 1e-6, 60, 3).unwrap();
    assert!(rep.checked >= 20, "too few checked coordinates: {rep:?}");
    rep.max_rel_error
}

#[test]
fn matmul_add_hadamard_sigmoid() {
    let ps = [randn(&[3, 4], 1), randn(&[4, 5], 2), randn(&[3, 5], 3), randn(&[4, 5], 4)];
    let err = check(&ps, |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let s = t.sigmoid(v[2]);
        let h = t.hadamard(m, s)?;
        let a = t.add(h, v[2])?;
        let b = t.matmul_t(a, v[3])?;
        let b = t.scale(b, 0.7);
        Ok(t.sum_squares(b))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn normalize_reshape_relu() {
    let ps = [randn(&[4, 6], 5)];
    let err = check(&ps, |t, v| {
        let n = t.row_l2_normalize(v[0], 3)?;
        let r = t.reshape(n, &[8, 3])?;
        let q = t.relu(r);
        let w = t.constant(randn(&[8, 3], 9));
        let h = t.hadamard(q, w)?;
        Ok(t.sum(h))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn embedding_and_cross_entropy() {
    let ps = [randn(&[7, 5], 6), randn(&[5, 7], 7)];
    let ids = [0, 3, 3, 6, 1];
    let targets = [1, 2, 0, 6, 5];
    let mask = [true, false, true, true, true];
    let err = check(&ps, |t, v| {
        let e = t.embedding(v[0], &ids)?;
        let l = t.matmul(e, v[1])?;
        t.masked_cross_entropy(l, &targets, &mask)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut t = Tape::<f64>::new();
    let l = t.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
    let loss = t.masked_cross_entropy(l, &[0], &[true]).unwrap();
    let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
    assert!((t.value(loss).item() - (lse - 1.0)).abs() < 1e-14);
}

#[test]
fn scans_have_correct_values_and_gradients() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap());
    let lam = t.constant(Tensor::from_f64(&[1], &[0.5]).unwrap());
    let y = t.leaky_scan(x, lam, 3, 1).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.5, 4.25]);
    let z = t.lookahead(x, lam, 3, 1).unwrap();
    assert_eq!(t.value(z).data(), &[2.0, 3.5, 3.0]);

    let ps = [randn(&[8, 4], 8), Tensor::from_f64(&[2], &[0.3, 0.8]).unwrap(), randn(&[8, 4], 10)];
    let err = check(&ps, |t, v| {
        let a = t.leaky_scan(v[0], v[1], 4, 2)?;
        let b = t.lookahead(a, v[1], 4, 2)?;
        let h = t.hadamard(b, v[2])?;
        Ok(t.sum(h))
    });
    assert!(err < 1e-6, "{err}");
}

fn attention_loss(spec: TransformSpec) -> impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError> {
    move |t, v| {
        let k = t.row_l2_normalize(v[0], 3)?;
        let a = t.causal_attention(k, v[1], 5, 2, spec.clone())?;
        let h = t.hadamard(a, v[2])?;
        Ok(t.sum(h))
    }
}

#[test]
fn causal_attention_gradients_for_every_transform() {
    let ps = [randn(&[10, 6], 12), randn(&[10, 6], 13), randn(&[10, 6], 14)];
    let transforms = [
        Transform::Softmax,
        Transform::Sparsemax,
        Transform::Entmax { alpha: 1.5 },
        Transform::Entmax { alpha: 4.0 / 3.0 },
        Transform::NormRelu { b: 0.2 },
        Transform::Relumax { b: 0.1 },
        Transform::TopkSoftmax { k: 2 },
        Transform::TopkUniform { k: 2 },
    ];
    for tr in transforms {
        let spec = TransformSpec::new(tr.clone(), 0.5);
        let err = check(&ps, attention_loss(spec));
        // bisection precision bounds the entmax forward pass
        let tol = if matches!(tr, Transform::Entmax { .. }) { 1e-3 } else { 1e-5 };
        assert!(err < tol, "{tr:?}: {err}");
    }
}

#[test]
fn causal_attention_ignores_the_future() {
    let k = randn(&[6, 4], 20);
    let v = randn(&[6, 4], 21);
    let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
        let mut t = Tape::<f64>::inference();
        let (kv, vv) = (t.constant(k.clone()), t.constant(v.clone()));
        let kn = t.row_l2_normalize(kv, 4).unwrap();
        let spec = TransformSpec::new(Transform::Sparsemax, 1.0);
        let o = t.causal_attention(kn, vv, 6, 1, spec).unwrap();
        t.value(o).clone()
    };
    let base = run(&k, &v);
    assert!(base.row(0).iter().all(|&x| x == 0.0));
    let (mut k2, mut v2) = (k.clone(), v.clone());
    for j in 0..4 {
        k2.data_mut()[5 * 4 + j] += 1.0;
        v2.data_mut()[5 * 4 + j] -= 2.0;
    }
    let pert = run(&k2, &v2);
    assert_eq!(&base.data()[..20], &pert.data()[..20]);
}

#[test]
fn transform_rows_gradient() {
    let ps = [randn(&[4, 6], 30), randn(&[4, 6], 31)];
    for tr in [Transform::Sparsemax, Transform::Softmax, Transform::NormRelu { b: 0.0 }] {
        let spec = TransformSpec::new(tr.clone(), 1.0);
        let err = check(&ps, |t, v| {
            let p = t.transform_rows(v[0], spec.clone())?;
            let h = t.hadamard(p, v[1])?;
            Ok(t.sum(h))
        });
        assert!(err < 1e-5, "{tr:?}: {err}");
    }
}

#[test]
fn inference_tape_refuses_backward() {
    let mut t = Tape::<f32>::inference();
    let x = t.param(Tensor::scalar(1.0));
    assert!(matches!(t.backward(x), Err(AutodiffError::NoGrad)));
}

#[test]
fn f32_and_f64_agree() {
    let a = randn(&[5, 3], 40);
    let b = randn(&[3, 4], 41);
    let mut t64 = Tape::<f64>::new();
    let (a64, b64) = (t64.param(a.clone()), t64.constant(b.clone()));
    let m = t64.matmul(a64, b64).unwrap();
    let l64 = t64.sum_squares(m);
    let g64 = t64.backward(l64).unwrap();
    let mut t32 = Tape::<f32>::new();
    let (a32, b32) = (t32.param(a.cast()), t32.constant(b.cast()));
    let m = t32.matmul(a32, b32).unwrap();
    let l32 = t32.sum_squares(m);
    let g32 = t32.backward(l32).unwrap();
    for (x, y) in g64.get(a64).unwrap().data().iter().zip(g32.get(a32).unwrap().data()) {
        assert!((x - *y as f64).abs() < 1e-4 * (1.0 + x.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradient_is_linear_in_upstream(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let ps = [randn(&[m, k], seed), randn(&[k, n], seed + 1)];
        let rep = grad_check(&ps, |t, v| { let p = t.matmul(v[0], v[1])?; Ok(t.sum_squares(p)) }, 1e-6, 20, seed).unwrap();
        prop_assert!(rep.max_rel_error < 1e-5);
    }

    #[test]
    fn normalized_rows_have_unit_norm(seed in 0u64..1000, r in 1usize..6, g in 1usize..5, blocks in 1usize..4) {
        let mut t = Tape::<f64>::inference();
        let x = t.constant(randn(&[r, g * blocks], seed));
        let y = t.row_l2_normalize(x, g).unwrap();
        for chunk in t.value(y).data().chunks(g) {
            let n: f64 = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
