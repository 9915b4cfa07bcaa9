use super::*;
use crate::detector::{build_detector, DetectorConfig, GraphOptions, SpikingModel};
use rand::Rng;
use proptest::prelude::*;

fn small(cfg: DetectorConfig) -> SpikingModel {
    let cfg = DetectorConfig {
        input_size: 16,
        grid: 4,
        channels: [4, 6, 6, 5],
        ..cfg
    };
    build_detector("m", &cfg).unwrap()
}

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[3, 16, 16], (0..768).map(|_| rng.gen_range(0..=255u32) as f64 / 255.0).collect()).unwrap()
}

fn head(fill: impl Fn(usize) -> f64) -> RawHeadOutput {
    let t = Tensor::from_vec(&[8, 4, 4], (0..128).map(fill).collect()).unwrap();
    RawHeadOutput::new(t, 4, 3).unwrap()
}

#[test]
fn det_sum_of_zero_logits_is_half_per_cell() {
    assert_eq!(det_sum_loss(&head(|_| 0.0)), 16.0 * 0.5);
    assert_eq!(det_sum_loss(&head(|_| -1e4)), 0.0);
}

#[test]
fn det_sum_matches_cellwise_recomputation_and_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vals: Vec<f64> = (0..128).map(|_| rng.gen_range(-6.0..6.0)).collect();
    let raw = head(|i| vals[i]);
    let mut expect = 0.0;
    for v in &vals[..16] {
        expect += 1.0 / (1.0 + (-v).exp());
    }
    assert!((det_sum_loss(&raw) - expect).abs() < 1e-12);

    let m = small(DetectorConfig::ann());
    let img = image(1);
    let (raw, _) = m.infer(&img, false).unwrap();
    for (kind, f) in [(LossKind::DetSum, det_sum_loss as fn(&RawHeadOutput) -> f64), (LossKind::CwMargin, cw_margin_loss)] {
        let mut fwd = m.forward(&img, GraphOptions::default()).unwrap();
        let out = detection_objective(&mut fwd, kind).unwrap();
        assert!((fwd.graph.value(out).item() - f(&raw)).abs() < 1e-12);
    }
}

#[test]
fn cw_margin_floor_and_unit_contribution() {
    let tau = cw_tau();
    assert!((tau - (1.0f64 / 3.0).ln()).abs() < 1e-15);
    assert_eq!(cw_margin_loss(&head(|_| -50.0)), 0.0);
    let raw = head(|i| if i == 5 { tau + 1.0 } else { -50.0 });
    assert!((cw_margin_loss(&raw) - 1.0).abs() < 1e-12);
}

#[test]
fn config_validation_and_hash() {
    let cfg = AttackConfig::default();
    assert!(cfg.validate().is_ok());
    assert_eq!(cfg.alpha(), cfg.eps / 4.0);
    assert_eq!(cfg.describe(), "pgd-linf-8/255-10");
    assert_eq!(cfg.hash(), cfg.clone().hash());
    assert_ne!(cfg.hash(), AttackConfig::linf(4.0, 10).hash());
    assert!(AttackConfig { eps: 0.0, ..cfg.clone() }.validate().is_err());
    assert!(AttackConfig { steps: 0, ..cfg.clone() }.validate().is_err());
    assert!(AttackConfig { fmp_lambda: -1.0, ..cfg }.validate().is_err());
    assert!(assert_constant_config([("a", "x"), ("b", "x")]).is_ok());
    assert!(assert_constant_config([("a", "x"), ("b", "y")]).is_err());
}

#[test]
fn checkpoint_schedule() {
    assert_eq!(checkpoints(100), vec![22, 41, 57, 70, 80, 87, 93, 99]);
    assert!(checkpoints(1).is_empty());
}

#[test]
fn perturbation_round_trips() {
    let p = Perturbation {
        delta: image(2).map(|v| v / 100.0 - 0.005),
        crafted_on: "src".into(),
        config: AttackConfig::l2(0.5, 3),
        loss_history: vec![3.0, 2.5, 1.0 / 3.0],
    };
    assert_eq!(Perturbation::from_bytes(&p.to_bytes()).unwrap(), p);
    assert!(Perturbation::from_bytes(b"nope").is_err());
}

#[test]
fn zero_step_size_leaves_the_image_alone() {
    let m = small(DetectorConfig::ann());
    let cfg = AttackConfig {
        step_size: Some(0.0),
        ..AttackConfig::linf(8.0, 5)
    };
    let p = pgd(&m, &image(3), &cfg).unwrap();
    assert!(p.delta.data().iter().all(|&v| v == 0.0));
    assert_eq!(m.gradient_queries(), 5);
}

#[test]
fn pgd_is_deterministic_and_norm_checked() {
    let m = small(DetectorConfig::default());
    let cfg = AttackConfig::linf(8.0, 4);
    let a = pgd(&m, &image(4), &cfg).unwrap();
    let b = pgd(&m, &image(4), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.loss_history.len(), 5);
    assert!(pgd(&m, &image(4), &AttackConfig::l2(1.0, 2)).is_err());
    assert!(pgd_l2(&m, &image(4), &cfg).is_err());
}

#[test]
fn fmp_with_zero_lambda_is_pgd() {
    let m = small(DetectorConfig::default());
    let cfg = AttackConfig::linf(8.0, 4);
    let a = pgd(&m, &image(5), &cfg).unwrap();
    let b = fmp(&m, &image(5), &cfg).unwrap();
    assert_eq!(a.delta, b.delta);
}

#[test]
fn fmp_on_ann_falls_back_to_pgd() {
    let m = small(DetectorConfig::ann());
    let cfg = AttackConfig {
        fmp_lambda: 0.5,
        ..AttackConfig::linf(8.0, 3)
    };
    let a = fmp(&m, &image(6), &cfg).unwrap();
    let b = pgd(&m, &image(6), &cfg).unwrap();
    assert_eq!(a.delta, b.delta);
}

#[test]
fn degenerate_apgd_follows_pgd() {
    let m = small(DetectorConfig::default());
    for cfg in [AttackConfig::linf(8.0, 6), AttackConfig::l2(0.5, 6)] {
        let a = apgd(&m, &image(7), &cfg, ApgdParams::degenerate(&cfg)).unwrap();
        let p = run_attack(&m, &image(7), &cfg).unwrap();
        assert_eq!(a.last, p.delta);
        assert_eq!(a.best.loss_history, p.loss_history);
    }
}

#[test]
fn apgd_best_is_lowest_loss() {
    let m = small(DetectorConfig::ann());
    let cfg = AttackConfig {
        method: Method::Apgd,
        ..AttackConfig::linf(8.0, 20)
    };
    let out = apgd(&m, &image(8), &cfg, ApgdParams::default()).unwrap();
    let h = &out.best.loss_history;
    let min = h.iter().copied().fold(f64::INFINITY, f64::min);
    let adv = out.best.apply(&image(8)).unwrap();
    let (raw, _) = m.infer(&adv, false).unwrap();
    assert!((det_sum_loss(&raw) - min).abs() < 1e-12);
    assert!(out.best.delta.norm_linf() <= cfg.eps);
}

#[test]
fn transfer_never_queries_the_target() {
    let source = small(DetectorConfig::ann());
    let target = {
        let mut t = small(DetectorConfig::default());
        t.id = "target".into();
        t
    };
    let samples: Vec<_> = (0..3)
        .map(|i| crate::detector::Sample {
            image_id: i,
            image: image(i),
            gts: vec![crate::eval::GroundTruth {
                bbox: crate::eval::BBox::new(2.0, 2.0, 6.0, 6.0),
                class_id: 0,
                image_id: i,
            }],
        })
        .collect();
    let cfg = AttackConfig::linf(8.0, 2);
    let r = transfer(&source, &target, &samples, &cfg).unwrap();
    assert_eq!(r.target_queries, 0);
    assert_eq!(target.gradient_queries(), 0);
    assert_eq!(source.gradient_queries(), 6);
    assert_eq!(r.cell.model_id, "target<-m");
    assert!(transfer(&source, &source, &samples, &cfg).is_err());
}

#[test]
fn random_noise_fills_the_budget() {
    let x = image(9);
    let linf = random_noise(&x, &AttackConfig::linf(8.0, 1), 1);
    assert!(linf.norm_linf() <= 8.0 / 255.0);
    let l2 = random_noise(&x, &AttackConfig::l2(0.5, 1), 1);
    assert!(l2.norm_l2() <= 0.5 * (1.0 + 1e-12));
}

proptest! {
    #[test]
    fn linf_projection_is_exact(seed in 0u64..10_000, eps in 1e-4f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(&[64], (0..64).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut d = Tensor::from_vec(&[64], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        project_linf(&x, &mut d, eps);
        for (xi, di) in x.data().iter().zip(d.data()) {
            prop_assert!(di.abs() <= eps);
            prop_assert!((0.0..=1.0).contains(&(xi + di)));
        }
    }

    #[test]
    fn l2_projection_is_within_tolerance(seed in 0u64..10_000, eps in 1e-3f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(&[64], (0..64).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut d = Tensor::from_vec(&[64], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        project_l2(&x, &mut d, eps);
        prop_assert!(d.norm_l2() <= eps * (1.0 + 1e-5));
        for (xi, di) in x.data().iter().zip(d.data()) {
            prop_assert!((0.0..=1.0).contains(&(xi + di)));
        }
    }

    #[test]
    fn sign_is_odd_with_zero_fixed(v in -1e6f64..1e6) {
        prop_assert_eq!(sign(-v), -sign(v));
        prop_assert_eq!(sign(0.0), 0.0);
        prop_assert_eq!(sign(-0.0), 0.0);
    }
}
