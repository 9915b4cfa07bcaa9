use super::*;
use crate::eval::BBox;
use rand::Rng;

fn small(cfg: DetectorConfig) -> DetectorConfig {
    DetectorConfig {
        input_size: 16,
        grid: 4,
        channels: [4, 6, 6, 5],
        ..cfg
    }
}

fn random_image(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[3, n, n], (0..3 * n * n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// Straight nested-loop convolution, independent of the autodiff kernels.
fn naive_conv(x: &[f64], c: usize, h: usize, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> (Vec<f64>, usize) {
    let (oc, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; oc * oh * oh];
    for o in 0..oc {
        for i in 0..oh {
            for j in 0..oh {
                let mut acc = b.data()[o];
                for ci in 0..c {
                    for di in 0..k {
                        for dj in 0..k {
                            let (r, q) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                            if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < h {
                                acc += w.data()[((o * c + ci) * k + di) * k + dj] * x[(ci * h + r as usize) * h + q as usize];
                            }
                        }
                    }
                }
                out[(o * oh + i) * oh + j] = acc;
            }
        }
    }
    (out, oh)
}

/// Reference forward pass for ReLU and LIF backbones.
fn reference_head(model: &SpikingModel, image: &Tensor) -> Vec<f64> {
    let cfg = model.config();
    let p = model.params();
    let strides = cfg.strides();
    let steps = cfg.timesteps();
    let mut per_step: Vec<Vec<f64>> = vec![image.data().to_vec(); steps];
    let (mut c, mut h) = (3, cfg.input_size);
    for layer in 0..4 {
        let mut u = vec![0.0; 0];
        let mut next = Vec::new();
        let mut oh = 0;
        for x in &per_step {
            let (cur, o) = naive_conv(x, c, h, &p[2 * layer], &p[2 * layer + 1], strides[layer], 1);
            oh = o;
            let out: Vec<f64> = match model.activation() {
                Activation::Relu => cur.iter().map(|v| v.max(0.0)).collect(),
                Activation::Neuron(n) => {
                    if u.is_empty() {
                        u = vec![0.0; cur.len()];
                    }
                    cur.iter()
                        .zip(u.iter_mut())
                        .map(|(x, u)| {
                            let v = n.beta * *u + x;
                            let s = if v > n.v_th { 1.0 } else { 0.0 };
                            *u = v * (1.0 - s);
                            s
                        })
                        .collect()
                }
                Activation::Threshold { .. } => unreachable!(),
            };
            next.push(out);
        }
        per_step = next;
        c = cfg.channels[layer];
        h = oh;
    }
    let mut mean = vec![0.0; per_step[0].len()];
    for s in &per_step {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / steps as f64;
        }
    }
    naive_conv(&mean, c, h, &p[8], &p[9], 1, 0).0
}

#[test]
fn ann_twin_has_no_spiking_layers() {
    let m = build_detector("ann", &DetectorConfig::ann()).unwrap();
    assert_eq!(m.spiking_layer_count(), 0);
    let (_, trace) = m.infer(&Tensor::zeros(&[3, 64, 64]), true).unwrap();
    assert!(trace.is_none());
}

#[test]
fn default_spiking_model_has_four_spiking_layers() {
    let m = build_detector("lif", &DetectorConfig::default()).unwrap();
    assert_eq!(m.spiking_layer_count(), 4);
    let (_, trace) = m.infer(&random_image(64, 1), true).unwrap();
    let trace = trace.unwrap();
    assert_eq!(trace.num_layers(), 4);
    assert!(trace.layers.iter().all(|l| l.len() == 4));
}

#[test]
fn strides_reach_the_grid() {
    let cfg = DetectorConfig::default();
    assert_eq!(cfg.strides(), [2, 2, 2, 1]);
    let (raw, _) = build_detector("m", &cfg).unwrap().infer(&Tensor::zeros(&[3, 64, 64]), false).unwrap();
    assert_eq!(raw.tensor().shape(), &[8, 8, 8]);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = DetectorConfig {
        grid: 7,
        ..DetectorConfig::default()
    };
    assert!(build_detector("m", &cfg).is_err());
    cfg.grid = 2;
    cfg.input_size = 64;
    assert!(build_detector("m", &cfg).is_err(), "ratio 32 needs five stride-2 stages");
    let cfg = DetectorConfig {
        classes: 0,
        ..DetectorConfig::default()
    };
    assert!(build_detector("m", &cfg).is_err());
}

#[test]
fn t1_lif_equals_threshold_twin_bitwise() {
    let cfg = small(DetectorConfig::spiking(SubstrateSpec::deployable_lif(1)));
    let m = build_detector("lif1", &cfg).unwrap();
    let twin = m.threshold_twin();
    for seed in 0..10 {
        let img = random_image(16, seed);
        let a = m.infer(&img, false).unwrap().0;
        let b = twin.infer(&img, false).unwrap().0;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.tensor()), bits(b.tensor()));
    }
}

#[test]
fn inference_is_deterministic_and_capture_is_passive() {
    let m = build_detector("lif", &small(DetectorConfig::default())).unwrap();
    let img = random_image(16, 3);
    let (a, ta) = m.infer(&img, true).unwrap();
    let (b, tb) = m.infer(&img, false).unwrap();
    let (c, _) = m.infer(&img, false).unwrap();
    assert!(ta.is_some() && tb.is_none());
    assert_eq!(a, b);
    assert_eq!(b, c);
}

#[test]
fn zero_image_matches_reference_forward() {
    for cfg in [DetectorConfig::ann(), DetectorConfig::default()] {
        let m = build_detector("m", &small(cfg)).unwrap();
        let img = Tensor::zeros(&[3, 16, 16]);
        let got = m.infer(&img, false).unwrap().0;
        let want = reference_head(&m, &img);
        for (g, w) in got.tensor().data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn random_images_match_reference_forward() {
    for cfg in [DetectorConfig::ann(), DetectorConfig::default()] {
        let m = build_detector("m", &small(cfg)).unwrap();
        for seed in 0..3 {
            let img = random_image(16, seed);
            let got = m.infer(&img, false).unwrap().0;
            let want = reference_head(&m, &img);
            for (g, w) in got.tensor().data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "{g} vs {w}");
            }
        }
    }
}

#[test]
fn input_gradient_counts_queries_and_is_nonzero() {
    let m = build_detector("ann", &small(DetectorConfig::ann())).unwrap();
    assert_eq!(m.gradient_queries(), 0);
    let (_, g) = m
        .input_gradient(&random_image(16, 9), false, |f| {
            let s = f.graph.sigmoid(f.head)?;
            f.graph.sum(s)
        })
        .unwrap();
    assert_eq!(m.gradient_queries(), 1);
    assert!(g.norm_l2() > 0.0);
    assert_eq!(m.clone().gradient_queries(), 0);
}

#[test]
fn bad_images_are_rejected() {
    let m = build_detector("m", &small(DetectorConfig::ann())).unwrap();
    assert!(matches!(m.infer(&Tensor::zeros(&[3, 8, 8]), false), Err(Error::ShapeMismatch { .. })));
    assert!(m.infer(&Tensor::full(&[3, 16, 16], 1.5), false).is_err());
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let mut m = build_detector("m", &small(DetectorConfig::ann())).unwrap();
    let before = m.params().to_vec();
    let data = vec![Sample {
        image_id: 0,
        image: random_image(16, 0),
        gts: vec![GroundTruth {
            bbox: BBox::new(2.0, 2.0, 5.0, 5.0),
            class_id: 0,
            image_id: 0,
        }],
    }];
    let hyper = TrainHyper {
        epochs: 0,
        ..TrainHyper::default()
    };
    let report = train(&mut m, &data, None, &hyper).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(m.params(), before.as_slice());
}

#[test]
fn training_reduces_loss_on_a_tiny_set() {
    let mut m = build_detector("m", &small(DetectorConfig::ann())).unwrap();
    let data: Vec<Sample> = (0..4)
        .map(|i| Sample {
            image_id: i,
            image: random_image(16, i),
            gts: vec![GroundTruth {
                bbox: BBox::new(1.0 + i as f64, 2.0, 5.0, 6.0),
                class_id: (i % 3) as usize,
                image_id: i,
            }],
        })
        .collect();
    let hyper = TrainHyper {
        epochs: 40,
        batch_size: 4,
        lr: 1e-2,
        ..TrainHyper::default()
    };
    let report = train(&mut m, &data, None, &hyper).unwrap();
    let first = report.epochs.first().unwrap().loss;
    let last = report.epochs.last().unwrap().loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = build_detector("lif", &small(DetectorConfig::default())).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.id, "lif");
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params(), m.params());
    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
}

#[test]
fn substrate_labels() {
    assert_eq!(substrate_label(&DetectorConfig::ann()), "ANN");
    assert_eq!(substrate_label(&DetectorConfig::default()), "LIF T=4");
}
