use mspt::data::{gen_darcy, DarcyParams, Dataset, Group, SampleRecord};
use mspt::model::{load_checkpoint, ModelConfig};
use mspt::numerics::{Tape, Tensor};
use mspt::pmsa::PoolingMode;
use mspt::training::*;
use mspt::Error;
use mspt_oracle as oracle;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_and_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let p = tape.input(Tensor::from_vec(&[pred.len(), 1], pred.to_vec()).unwrap());
    let t = Tensor::from_vec(&[target.len(), 1], target.to_vec()).unwrap();
    let l = relative_l2_loss(&mut tape, p, &t).unwrap();
    let g = tape.backward(l).unwrap();
    (tape.value(l).data()[0], g.wrt(p).unwrap().data().to_vec())
}

#[test]
fn relative_l2_loss_examples() {
    assert_eq!(loss_and_grad(&[1.0, 2.0], &[1.0, 2.0]).0, 0.0);
    assert_eq!(loss_and_grad(&[0.0, 0.0], &[3.0, 4.0]).0, 1.0);
    assert_eq!(loss_and_grad(&[0.0, 1.0], &[1.0, 0.0]).0, 2f64.sqrt());
    let (v, _) = loss_and_grad(&[1e-12, 0.0], &[0.0, 0.0]);
    assert!((v - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relative_l2_gradient_matches_fd(
        p in prop::collection::vec(-2.0f64..2.0, 6),
        t in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        prop_assume!(t.iter().map(|x| x * x).sum::<f64>() > 0.1);
        prop_assume!(p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() > 0.01);
        let (v, g) = loss_and_grad(&p, &t);
        prop_assert!((v - oracle::relative_l2(&p, &t)).abs() < 1e-14);
        let fd = oracle::fd_gradient(|x| oracle::relative_l2(x, &t), &p, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            prop_assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn adamw_without_decay_is_adam(
        p0 in -3.0f64..3.0,
        grads in prop::collection::vec(-5.0f64..5.0, 1..20),
        lr in 1e-4f64..1e-1,
    ) {
        let mut params = vec![Tensor::scalar(p0)];
        let mut state = OptimizerState::new(OptimizerKind::Adamw, &params);
        let cfg = OptimizerConfig::adamw(0.0);
        for &g in &grads {
            adamw_step(&mut params, &[Tensor::scalar(g)], &mut state, lr, &cfg).unwrap();
        }
        let expect = oracle::adam_scalar(p0, &grads, lr, 0.9, 0.999, 1e-8);
        prop_assert!((params[0].data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn lion_moves_each_coordinate_by_lr(
        g in prop::collection::vec(prop_oneof![-3.0f64..-1e-3, 1e-3f64..3.0], 1..8),
        lr in 1e-4f64..1e-1,
    ) {
        let n = g.len();
        let mut params = vec![Tensor::from_vec(&[n], vec![0.5; n]).unwrap()];
        let mut state = OptimizerState::new(OptimizerKind::Lion, &params);
        let grads = [Tensor::from_vec(&[n], g.clone()).unwrap()];
        lion_step(&mut params, &grads, &mut state, lr, &OptimizerConfig::lion(0.0)).unwrap();
        for (p, gi) in params[0].data().iter().zip(&g) {
            prop_assert!(((0.5 - p).abs() - lr).abs() < 1e-15);
            prop_assert_eq!((0.5 - p).signum(), gi.signum());
        }
    }
}

#[test]
fn optimizer_examples() {
    let mut params = vec![Tensor::scalar(1.0f64)];
    let mut state = OptimizerState::new(OptimizerKind::Adamw, &params);
    adamw_step(&mut params, &[Tensor::scalar(1.0)], &mut state, 0.1, &OptimizerConfig::adamw(0.0)).unwrap();
    assert!((params[0].data()[0] - 0.9).abs() < 1e-8);
    assert_eq!(state.step, 1);

    for kind in [OptimizerKind::Adamw, OptimizerKind::Lion] {
        let init = Tensor::from_vec(&[3], vec![0.3f64, -1.0, 2.0]).unwrap();
        let mut params = vec![init.clone()];
        let mut state = OptimizerState::new(kind, &params);
        let zero = [Tensor::zeros(&[3])];
        for _ in 0..3 {
            match kind {
                OptimizerKind::Adamw => adamw_step(&mut params, &zero, &mut state, 0.1, &OptimizerConfig::adamw(0.0)),
                OptimizerKind::Lion => lion_step(&mut params, &zero, &mut state, 0.1, &OptimizerConfig::lion(0.0)),
            }
            .unwrap();
        }
        assert!(params[0].bit_eq(&init));
    }

    let mut params = vec![Tensor::scalar(1.0f64)];
    let mut state = OptimizerState::new(OptimizerKind::Adamw, &params);
    let err = adamw_step(&mut params, &[Tensor::scalar(f64::NAN)], &mut state, 0.1, &OptimizerConfig::adamw(0.0));
    assert!(matches!(err, Err(Error::Numeric(_))));
    assert_eq!((params[0].data()[0], state.step), (1.0, 0));
}

#[test]
fn schedule_endpoints_follow_training_recipe() {
    let cfg = TrainConfig::default();
    let lr = |s| lr_schedule(s, 2000, cfg.peak_lr, cfg.final_lr, cfg.warmup_fraction);
    assert_eq!(lr(0), 0.0);
    assert_eq!(lr(100), 5e-5);
    assert!((lr(2000) - 1e-6).abs() < 1e-21);
}

#[test]
fn gradient_regularizer_examples() {
    let ramp: Vec<f64> = (0..9).map(|i| (i % 3) as f64 / 2.0).collect();
    let shifted: Vec<f64> = ramp.iter().map(|v| v + 3.0).collect();
    assert_eq!(gradient_regularizer_value(&ramp, &ramp, (3, 3), 1).unwrap(), 0.0);
    assert_eq!(gradient_regularizer_value(&shifted, &ramp, (3, 3), 1).unwrap(), 0.0);
    // Centre node of a 3×3 ramp u = x: ∂x = (1 − 0)/(2·½) = 1, ∂y = 0; a flat
    // target has no gradient, so the zero-norm denominator applies.
    let v = gradient_regularizer_value(&ramp, &[0.7; 9], (3, 3), 1).unwrap();
    assert!((v - 1e12).abs() < 1.0);
    // Against u = 2x the gradient error is 1 out of 2.
    let steep: Vec<f64> = ramp.iter().map(|v| 2.0 * v).collect();
    assert!((gradient_regularizer_value(&ramp, &steep, (3, 3), 1).unwrap() - 0.5).abs() < 1e-15);
    assert!(matches!(gradient_regularizer_value(&ramp, &ramp, (2, 3), 1), Err(Error::Config(_))));

    let mut tape = Tape::<f64>::new();
    let p = tape.input(Tensor::zeros(&[9, 1]));
    assert!(matches!(
        gradient_regularizer(&mut tape, p, &Tensor::zeros(&[9, 1]), None),
        Err(Error::Config(_))
    ));
}

#[test]
fn gradient_regularizer_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (4, 5);
    let pred: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let p = tape.input(Tensor::from_vec(&[h * w, 1], pred.clone()).unwrap());
    let t = Tensor::from_vec(&[h * w, 1], target.clone()).unwrap();
    let l = gradient_regularizer(&mut tape, p, &t, Some((h, w))).unwrap();
    let g = tape.backward(l).unwrap();
    let fd = oracle::fd_gradient(
        |x| gradient_regularizer_value(x, &target, (h, w), 1).unwrap(),
        &pred,
        1e-6,
    );
    for (a, b) in g.wrt(p).unwrap().data().iter().zip(&fd) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
}

#[test]
fn group_loss_weights_volume_and_surface() {
    let target = Tensor::from_vec(&[4, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
    let pred = vec![0.0, 2.0, 3.0, 0.0];
    let groups = [Group::Volume, Group::Volume, Group::Surface, Group::Surface];
    let mut tape = Tape::new();
    let p = tape.input(Tensor::from_vec(&[4, 1], pred).unwrap());
    let l = group_loss(&mut tape, p, &target, &groups, 1.0, 0.5).unwrap();
    let expect = (1.0f64 / 5.0).sqrt() + 0.5 * (16.0f64 / 25.0).sqrt();
    assert!((tape.value(l).data()[0] - expect).abs() < 1e-15);
}

#[test]
fn gradcheck_passes_on_default_config_and_linear_model() {
    let report = gradcheck(&default_gradcheck_config(), 0).unwrap();
    assert!(report.passed, "{:?}", report.tensors);
    assert_eq!(report.tensors.len(), 4 + 2 * 12 + 4);

    // f(w) = Σ w·x is linear, so central differences are exact up to rounding.
    let x = [0.3, -1.2, 2.0];
    let w = vec![Tensor::from_vec(&[3], vec![1.0, 2.0, -0.5]).unwrap()];
    let g = vec![Tensor::from_vec(&[3], x.to_vec()).unwrap()];
    let r = check_gradients(
        &["w".to_string()],
        &w,
        &g,
        |p| Ok(p[0].data().iter().zip(&x).map(|(a, b)| a * b).sum()),
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-10);
}

#[test]
fn gradcheck_detects_corrupted_adjoint() {
    let cfg = ModelConfig { blocks: 1, ..default_gradcheck_config() };
    let mut model = mspt::model::Mspt::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    model.params.tensors_mut().iter_mut().for_each(|t| {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1))
    });
    let (coords, raw, target) = gradcheck_instance(&cfg, 3);
    let layout = model.layout(&coords, 2, false).unwrap();
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, &raw, &layout).unwrap();
    let loss = relative_l2_loss(&mut tape, rec.pred, &target).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut analytic: Vec<Tensor<f64>> = (0..model.params.len()).map(|i| grads.param(i).unwrap()).collect();
    let names = model.params.names().to_vec();
    let params = model.params.tensors().to_vec();
    let mut probe = model.clone();
    let mut run = |analytic: &[Tensor<f64>]| {
        check_gradients(&names, &params, analytic, |p| {
            probe.params.tensors_mut().clone_from_slice(p);
            let pred = probe.forward(&raw, &layout)?;
            mspt::metrics::relative_l2(pred.data(), target.data())
        }, GRADCHECK_STEP)
        .unwrap()
    };
    assert!(run(&analytic).passed);
    // Drop the transpose in the adjoint of the attention output projection.
    let wo = names.iter().position(|n| n == "block0.attn.w_o").unwrap();
    analytic[wo] = analytic[wo].transpose();
    assert!(!run(&analytic).passed);
}

fn constant_dataset(n_samples: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples = (0..n_samples)
        .map(|_| {
            let n = 32;
            let coords: Vec<f32> = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let field: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            SampleRecord {
                coords,
                in_fields: field,
                targets: vec![2.5; n],
                coord_dim: 2,
                in_dim: 1,
                out_dim: 1,
                groups: Vec::new(),
                grid: None,
            }
        })
        .collect();
    Dataset { samples, provenance: None }
}

fn small_model(out_dim: usize) -> ModelConfig {
    ModelConfig {
        blocks: 1,
        width: 16,
        heads: 2,
        patches: 2,
        supernodes: 1,
        pooling: PoolingMode::Mean,
        ffn_expansion: 2,
        in_dim: 0,
        out_dim,
        persistent_supernodes: false,
        patch_size: None,
        leaf_capacity: None,
    }
}

#[test]
fn learns_constant_target() {
    let cfg = TrainConfig { peak_lr: 3e-3, final_lr: 1e-5, epochs: 50, weight_decay: 0.0, ..Default::default() };
    let out = train::<f32>(&small_model(1), &cfg, &constant_dataset(20), None).unwrap();
    assert!(out.best_val < 1e-2, "{}", out.best_val);
}

#[test]
fn learns_identity_task() {
    let mut data = constant_dataset(40);
    for s in &mut data.samples {
        s.targets = s.in_fields.clone();
    }
    let cfg = TrainConfig { peak_lr: 3e-3, final_lr: 1e-5, epochs: 100, weight_decay: 0.0, ..Default::default() };
    let out = train::<f32>(&small_model(1), &cfg, &data, None).unwrap();
    assert!(out.best_val < 5e-2, "{}", out.best_val);
}

#[test]
fn training_is_bitwise_reproducible() {
    let data = gen_darcy(&DarcyParams::new(8, 8), 12, 3).unwrap();
    let model = ModelConfig { patches: 2, ..small_model(0) };
    let cfg = TrainConfig {
        peak_lr: 1e-3,
        final_lr: 1e-5,
        epochs: 3,
        batch_size: 2,
        loss: LossWeights { grad_reg: 0.1, ..Default::default() },
        ..Default::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train::<f32>(&model, &cfg, &data, Some(d.path())).unwrap();
    }
    let strip = |d: &tempfile::TempDir| -> Vec<String> {
        std::fs::read_to_string(d.path().join(METRICS_FILE))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip(&dirs[0]), strip(&dirs[1]));
    assert_eq!(strip(&dirs[0]).len(), 4);
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        assert_eq!(a, std::fs::read(dirs[1].path().join(f)).unwrap());
    }
    let ck = load_checkpoint::<f32>(dirs[0].path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(ck.model.config.in_dim, 3);
    assert_ne!(ck.model.normalizer.out_std, vec![1.0]);
}

#[test]
fn invalid_train_configs() {
    let bad = [
        TrainConfig { warmup_fraction: 1.0, ..Default::default() },
        TrainConfig { final_lr: 1e-3, peak_lr: 1e-4, ..Default::default() },
        TrainConfig { final_lr: 0.0, ..Default::default() },
        TrainConfig { epochs: 0, ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
    let (tr, va) = split_indices(450, 1.0 / 9.0, 0);
    assert_eq!((tr.len(), va.len()), (400, 50));
}
