use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use skam::autodiff::{grad_check, Tape, Tensor, Var};
use skam::kernels::{KernelKind, KernelSpec};
use skam::mosaic::{
    compute_keys, compute_values, contextual_forward, persistent_forward, read_checkpoint, write_checkpoint, AdamW,
    Batch, MosaicConfig, MosaicError, MosaicModel, OptimizerConfig,
};
use skam::regression::{nadaraya_watson, polynomial_order, recover_bandwidth, KeyValueCache};
use skam::rng::seeded;
use skam::tasks::{TaskKind, TaskSpec, SEQ_VOCAB};
use skam::transforms::{Transform, TransformSpec};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed, 21);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn small_config(transform: Transform) -> MosaicConfig {
    MosaicConfig {
        depth: 1,
        d_model: 16,
        heads: 2,
        vocab: 12,
        seq_len: 8,
        persistent_slots: 4,
        transform,
        gamma: None,
        lambda_init: 0.5,
        optimizer: OptimizerConfig::default(),
        seed: 7,
    }
}

fn all_transforms() -> Vec<Transform> {
    vec![
        Transform::Softmax,
        Transform::Sparsemax,
        Transform::Entmax { alpha: 1.5 },
        Transform::NormRelu { b: 0.1 },
        Transform::Relumax { b: 0.2 },
        Transform::TopkUniform { k: 2 },
        Transform::TopkSoftmax { k: 3 },
    ]
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed, 5);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

fn row_norms(t: &Tensor<f64>, group: usize) -> Vec<f64> {
    t.data().chunks(group).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

#[test]
fn keys_without_leak_are_normalized_projections() {
    let x = randn(&[5, 4], 1);
    let w = randn(&[4, 6], 2);
    let k = compute_keys(&x, &w, &[0.0, 0.0]).unwrap();
    for t in 0..5 {
        for h in 0..2 {
            let proj: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|i| x.row(t)[i] * w.data()[i * 6 + h * 3 + j]).sum())
                .collect();
            let n = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..3 {
                assert!((k.row(t)[h * 3 + j] - proj[j] / n).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn keys_follow_the_leaky_recurrence() {
    let x = randn(&[7, 3], 3);
    let w = randn(&[3, 4], 4);
    let lam = [0.3, 0.8];
    let k = compute_keys(&x, &w, &lam).unwrap();
    // explicit weighted sum over the past: kbar_t = sum_s lam^(t-s) W x_s
    for t in 0..7 {
        for h in 0..2 {
            let mut acc = [0.0; 2];
            for s in 0..=t {
                let c = lam[h].powi((t - s) as i32);
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += c * (0..3).map(|i| x.row(s)[i] * w.data()[i * 4 + h * 2 + j]).sum::<f64>();
                }
            }
            let n = (acc[0] * acc[0] + acc[1] * acc[1]).sqrt();
            for j in 0..2 {
                assert!((k.row(t)[h * 2 + j] - acc[j] / n).abs() < 1e-12);
            }
        }
    }
    assert!(row_norms(&k, 2).iter().all(|n| (n - 1.0).abs() < 1e-6));
}

#[test]
fn constant_input_keys_converge_in_direction() {
    let row = randn(&[1, 4], 5);
    let x = Tensor::new(vec![60, 4], row.data().repeat(60)).unwrap();
    let w = randn(&[4, 4], 6);
    let k = compute_keys(&x, &w, &[0.9]).unwrap();
    // geometric sum (1 - lam^t)/(1 - lam) only rescales W x
    let proj: Vec<f64> = (0..4).map(|j| (0..4).map(|i| row.data()[i] * w.data()[i * 4 + j]).sum()).collect();
    let n = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
    for j in 0..4 {
        assert!((k.row(50)[j] - proj[j] / n).abs() < 1e-4);
    }
}

#[test]
fn values_peek_one_step_ahead() {
    let x = randn(&[4, 3], 7);
    let w = randn(&[3, 3], 8);
    let lam = 0.4;
    let v = compute_values(&x, &w, &[lam]).unwrap();
    let proj = |t: usize| -> Vec<f64> { (0..3).map(|j| (0..3).map(|i| x.row(t)[i] * w.data()[i * 3 + j]).sum()).collect() };
    for t in 0..4 {
        let mut raw = proj(t);
        if t + 1 < 4 {
            for (r, n) in raw.iter_mut().zip(proj(t + 1)) {
                *r += lam * n;
            }
        }
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..3 {
            assert!((v.row(t)[j] - raw[j] / n).abs() < 1e-12, "t={t}");
        }
    }
    let v0 = compute_values(&x, &w, &[0.0]).unwrap();
    let p = proj(2);
    let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((v0.row(2)[0] - p[0] / n).abs() < 1e-12);
}

#[test]
fn two_positions_copy_the_first_value() {
    let keys = compute_keys(&randn(&[2, 4], 9), &randn(&[4, 4], 10), &[0.5, 0.5]).unwrap();
    let values = compute_values(&randn(&[2, 4], 11), &randn(&[4, 4], 12), &[0.5, 0.5]).unwrap();
    for tr in all_transforms() {
        let spec = TransformSpec::new(tr.clone(), 0.7);
        let out = contextual_forward(&keys, &values, 2, &spec).unwrap();
        assert!(out.row(0).iter().all(|&x| x == 0.0), "{tr:?}");
        for (a, b) in out.row(1).iter().zip(values.row(0)) {
            assert!((a - b).abs() < 1e-12, "{tr:?}");
        }
    }
}

#[test]
fn persistent_memory_edge_cases() {
    let keys = compute_keys(&randn(&[5, 4], 13), &randn(&[4, 4], 14), &[0.5, 0.5]).unwrap();
    let spec = TransformSpec::new(Transform::Sparsemax, 1.0);
    let one_slot = randn(&[1, 2], 15);
    let out = persistent_forward(&keys, &randn(&[1, 2], 16), &one_slot, 2, &spec).unwrap();
    for t in 0..5 {
        for h in 0..2 {
            assert!((out.row(t)[2 * h] - one_slot.data()[0]).abs() < 1e-12);
            assert!((out.row(t)[2 * h + 1] - one_slot.data()[1]).abs() < 1e-12);
        }
    }
    let zeros = Tensor::zeros(&[3, 2]);
    let out = persistent_forward(&keys, &randn(&[3, 2], 17), &zeros, 2, &spec).unwrap();
    assert!(out.data().iter().all(|&x| x == 0.0));
}

#[test]
fn model_matches_the_standalone_units() {
    let cfg = small_config(Transform::Sparsemax);
    let model = MosaicModel::<f64>::new(cfg.clone()).unwrap();
    let tokens = random_tokens(8, cfg.vocab, 1);
    let trace = model.trace(&tokens, 8).unwrap();
    let x = Tensor::new(
        vec![8, 16],
        tokens.iter().flat_map(|&t| model.params["embed"].row(t).to_vec()).collect(),
    )
    .unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let lam_phi: Vec<f64> = model.params["layers.0.lambda_phi"].data().iter().map(|&v| sig(v)).collect();
    let lam_psi: Vec<f64> = model.params["layers.0.lambda_psi"].data().iter().map(|&v| sig(v)).collect();
    let k = compute_keys(&x, &model.params["layers.0.w_phi"], &lam_phi).unwrap();
    let v = compute_values(&x, &model.params["layers.0.w_psi"], &lam_psi).unwrap();
    let c = contextual_forward(&k, &v, 2, &cfg.transform_spec()).unwrap();
    let p = persistent_forward(
        &k,
        &model.params["layers.0.slot_keys"],
        &model.params["layers.0.slot_values"],
        2,
        &cfg.transform_spec(),
    )
    .unwrap();
    for (a, b) in [(&k, &trace[0].keys), (&v, &trace[0].values), (&c, &trace[0].contextual), (&p, &trace[0].persistent)] {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn logits_are_causal_for_every_transform() {
    for tr in all_transforms() {
        let mut cfg = small_config(tr.clone());
        cfg.depth = 2;
        let model = MosaicModel::<f64>::new(cfg.clone()).unwrap();
        let tokens = random_tokens(8, cfg.vocab, 2);
        let base = model.logits(&tokens, 8).unwrap();
        for j in 0..8 {
            let mut pert = tokens.clone();
            pert[j] = (pert[j] + 1) % cfg.vocab;
            let out = model.logits(&pert, 8).unwrap();
            for t in 0..j {
                assert_eq!(base.row(t), out.row(t), "{tr:?}: position {t} saw token {j}");
            }
            assert_ne!(base.row(j), out.row(j), "{tr:?}");
        }
    }
}

#[test]
fn contextual_memory_matches_kernel_regression_on_the_f32_path() {
    for (tr, alpha) in [(Transform::Sparsemax, 2.0), (Transform::Entmax { alpha: 1.5 }, 1.5)] {
        let mut cfg = small_config(tr);
        cfg.depth = 2;
        cfg.gamma = Some(0.5);
        let model = MosaicModel::<f32>::new(cfg.clone()).unwrap();
        let tokens = random_tokens(3 * 8, cfg.vocab, 3);
        let r = polynomial_order(alpha).unwrap();
        let spec = cfg.transform_spec();
        let d = cfg.head_dim();
        let mut worst = 0.0f64;
        for layer in model.trace(&tokens, 8).unwrap() {
            for b in 0..3 {
                for h in 0..cfg.heads {
                    let block = |t: &Tensor<f32>, i: usize| -> Vec<f64> {
                        t.row(b * 8 + i)[h * d..(h + 1) * d].iter().map(|&x| x as f64).collect()
                    };
                    for t in 1..8 {
                        let keys = (0..t).map(|i| block(&layer.keys, i)).collect();
                        let values = (0..t).map(|i| block(&layer.values, i)).collect();
                        let cache = KeyValueCache::new(keys, values, block(&layer.keys, t)).unwrap();
                        let tau = spec.apply(&cache.scores()).unwrap().threshold.unwrap();
                        let bw = recover_bandwidth(tau, cfg.gamma(), r).unwrap();
                        let nw = nadaraya_watson(&cache, &KernelSpec::new(KernelKind::RectPoly { order: r }, bw)).unwrap();
                        for (a, e) in block(&layer.contextual, t).iter().zip(&nw) {
                            worst = worst.max((a - e).abs());
                        }
                    }
                }
            }
        }
        assert!(worst <= 1e-6, "alpha {alpha}: {worst}");
    }
}

#[test]
fn logits_shape_depth_zero_and_longer_inputs() {
    let cfg = small_config(Transform::Sparsemax);
    let model = MosaicModel::<f32>::new(cfg.clone()).unwrap();
    let logits = model.logits(&random_tokens(16, cfg.vocab, 4), 8).unwrap();
    assert_eq!(logits.shape(), &[16, 12]);
    assert!(model.logits(&random_tokens(32, cfg.vocab, 4), 32).is_ok());

    let mut cfg0 = cfg.clone();
    cfg0.depth = 0;
    let m0 = MosaicModel::<f64>::new(cfg0).unwrap();
    assert_eq!(m0.params.len(), 2);
    let l = m0.logits(&[3, 5], 2).unwrap();
    for (i, &tok) in [3usize, 5].iter().enumerate() {
        for v in 0..12 {
            let e: f64 = (0..16).map(|j| m0.params["embed"].row(tok)[j] * m0.params["unembed"].data()[j * 12 + v]).sum();
            assert!((l.row(i)[v] - e).abs() < 1e-12);
        }
    }

    assert!(matches!(
        model.logits(&[0, 12], 2),
        Err(MosaicError::InvalidToken { token: 12, vocab: 12 })
    ));
}

#[test]
fn trailing_padding_does_not_change_earlier_outputs() {
    let cfg = small_config(Transform::Entmax { alpha: 1.5 });
    let model = MosaicModel::<f32>::new(cfg.clone()).unwrap();
    let tokens = random_tokens(6, cfg.vocab, 5);
    let mut padded = tokens.clone();
    padded.extend([11, 11, 11]);
    let a = model.logits(&tokens, 6).unwrap();
    let b = model.logits(&padded, 9).unwrap();
    for t in 0..6 {
        for (x, y) in a.row(t).iter().zip(b.row(t)) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

fn grad_check_model(tr: Transform) -> f64 {
    let mut cfg = small_config(tr);
    cfg.gamma = Some(0.5);
    let model = MosaicModel::<f64>::new(cfg.clone()).unwrap();
    let names: Vec<String> = model.params.keys().cloned().collect();
    let params: Vec<Tensor<f64>> = model.params.values().cloned().collect();
    let tokens = random_tokens(2 * 8, cfg.vocab, 6);
    let targets = random_tokens(2 * 8, cfg.vocab, 7);
    let mask: Vec<bool> = (0..16).map(|i| i % 8 != 7).collect();
    let rep = grad_check(
        &params,
        |tape: &mut Tape<f64>, vars: &[Var]| {
            let map: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
            let logits = model.forward_on(tape, &map, &tokens, 8, None).map_err(|e| match e {
                MosaicError::Autodiff(a) => a,
                other => panic!("{other}"),
            })?;
            tape.masked_cross_entropy(logits, &targets, &mask)
        },
        1e-6,
        80,
        11,
    )
    .unwrap();
    assert!(rep.checked >= 50, "{rep:?}");
    rep.max_rel_error
}

#[test]
fn one_layer_gradient_check_per_transform() {
    for tr in all_transforms() {
        let tol = if tr == Transform::Softmax { 1e-4 } else { 1e-3 };
        let err = grad_check_model(tr.clone());
        assert!(err <= tol, "{tr:?}: {err}");
    }
}

fn sort_batch(seed: u64, count: usize) -> Batch {
    let spec = TaskSpec::new(TaskKind::Sort, 4, seed, count);
    let samples = spec.generate().unwrap();
    let seq_len = samples[0].len();
    Batch {
        tokens: samples.iter().flat_map(|s| s.input.clone()).collect(),
        targets: samples.iter().flat_map(|s| s.target.clone()).collect(),
        mask: samples.iter().flat_map(|s| s.mask.clone()).collect(),
        seq_len,
    }
}

fn sort_config(tr: Transform) -> MosaicConfig {
    MosaicConfig {
        depth: 2,
        d_model: 32,
        heads: 4,
        vocab: SEQ_VOCAB,
        seq_len: 11,
        persistent_slots: 16,
        transform: tr,
        gamma: None,
        lambda_init: 0.5,
        optimizer: OptimizerConfig {
            lr: 3e-3,
            min_lr: 3e-3,
            weight_decay: 0.0,
            warmup_iters: 10,
            max_iters: 200,
            ..OptimizerConfig::default()
        },
        seed: 3,
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    let model = MosaicModel::<f32>::new(sort_config(Transform::Sparsemax)).unwrap();
    let loss = model.loss(&sort_batch(0, 16)).unwrap();
    let ln_v = (SEQ_VOCAB as f64).ln();
    assert!((loss - ln_v).abs() <= 0.1 * ln_v, "{loss} vs {ln_v}");
}

#[test]
fn overfits_a_fixed_sort_batch() {
    let cfg = sort_config(Transform::Sparsemax);
    let mut model = MosaicModel::<f32>::new(cfg.clone()).unwrap();
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let batch = sort_batch(1, 32);
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = model.train_step(&mut opt, &batch).unwrap().0;
    }
    let final_loss = model.loss(&batch).unwrap();
    assert!(final_loss < 0.05, "loss {final_loss} (last step {last})");
}

#[test]
fn identical_seeds_give_identical_loss_traces() {
    let run = || {
        let mut cfg = sort_config(Transform::Entmax { alpha: 1.5 });
        cfg.d_model = 16;
        let mut model = MosaicModel::<f32>::new(cfg.clone()).unwrap();
        let mut opt = AdamW::new(cfg.optimizer.clone());
        (0..100)
            .map(|i| model.train_step(&mut opt, &sort_batch(i, 4)).unwrap().0.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_and_bad_magic() {
    let model = MosaicModel::<f32>::new(small_config(Transform::Relumax { b: 0.2 })).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"SKAM");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.params, model.params);

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(bad.as_slice()), Err(MosaicError::BadMagic)));
    assert!(matches!(
        read_checkpoint(&buf[..buf.len() - 3]),
        Err(MosaicError::Checkpoint(_))
    ));
}

#[test]
fn config_json_round_trip() {
    let cfg = small_config(Transform::Entmax { alpha: 1.5 });
    let s = serde_json::to_string(&cfg).unwrap();
    assert!(s.contains(r#""transform":{"kind":"entmax","alpha":1.5}"#), "{s}");
    let back: MosaicConfig = serde_json::from_str(&s).unwrap();
    assert_eq!(back, cfg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn keys_and_values_are_unit_norm(seed in 0u64..500, t in 1usize..12, lam in 0.0f64..0.99) {
        let x = randn(&[t, 6], seed);
        let w = randn(&[6, 6], seed + 1);
        for out in [compute_keys(&x, &w, &[lam, lam]).unwrap(), compute_values(&x, &w, &[lam, lam]).unwrap()] {
            for n in row_norms(&out, 3) {
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn contextual_rows_are_convex_combinations(seed in 0u64..500, t in 2usize..10) {
        let keys = compute_keys(&randn(&[t, 3], seed), &randn(&[3, 3], seed + 2), &[0.5]).unwrap();
        let values = compute_values(&randn(&[t, 3], seed + 3), &randn(&[3, 3], seed + 4), &[0.5]).unwrap();
        let out = contextual_forward(&keys, &values, 1, &TransformSpec::new(Transform::Sparsemax, 1.0)).unwrap();
        // unit-norm values: every convex combination has norm <= 1
        for n in row_norms(&out, 3) {
            prop_assert!(n <= 1.0 + 1e-9);
        }
    }
}
