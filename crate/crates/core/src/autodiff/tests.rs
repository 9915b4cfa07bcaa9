use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn conv_of_zero_image_is_bias() {
    let mut g = Graph::new(SurrogateSpec::default());
    let x = g.constant(Tensor::zeros(&[2, 4, 4])).unwrap();
    let w = g.constant(Tensor::full(&[3, 2, 3, 3], 0.7)).unwrap();
    let b = g.constant(t(&[3], vec![0.5, -1.0, 2.0])).unwrap();
    let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[3, 4, 4]);
    for (c, &bias) in [0.5, -1.0, 2.0].iter().enumerate() {
        assert!(out.data()[c * 16..(c + 1) * 16].iter().all(|&v| v == bias));
    }
}

#[test]
fn identity_pointwise_conv() {
    let mut g = Graph::new(SurrogateSpec::default());
    let img: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 * 0.1).collect();
    let x = g.constant(t(&[2, 3, 3], img.clone())).unwrap();
    let w = g.constant(t(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), img.as_slice());
}

#[test]
fn conv_on_ramp_matches_hand_table() {
    // 5x5 ramp x[i][j] = 5i + j, kernel k[a][b] = a - b (a, b in 0..3),
    // no padding, stride 1. Each output is
    // sum_{a,b} (a-b) * (5(i+a) + (j+b)) = sum (a-b)(5a + b) + 0
    // (the terms in 5i + j vanish since sum(a-b) = 0)
    // = 5*sum(a^2) - 5*sum(ab) + sum(ab) - sum(b^2) over a,b in 0..3
    // = 5*15 - 5*9 + 9 - 15 = 24 for every output position.
    // A bias of 1 and a second channel with kernel all ones give
    // 9*(5(i+1) + (j+1)) + 1 = 45i + 9j + 55.
    let mut g = Graph::new(SurrogateSpec::default());
    let ramp: Vec<f64> = (0..25).map(|v| v as f64).collect();
    let x = g.constant(t(&[1, 5, 5], ramp)).unwrap();
    let mut kern = Vec::new();
    for a in 0..3 {
        for b in 0..3 {
            kern.push(a as f64 - b as f64);
        }
    }
    kern.extend(std::iter::repeat_n(1.0, 9));
    let w = g.constant(t(&[2, 1, 3, 3], kern)).unwrap();
    let b = g.constant(t(&[2], vec![0.0, 1.0])).unwrap();
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    let out = g.value(y).data();
    assert!(out[..9].iter().all(|&v| v == 24.0));
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(out[9 + i * 3 + j], 45.0 * i as f64 + 9.0 * j as f64 + 55.0);
        }
    }
}

#[test]
fn grad_of_sum_is_ones() {
    let mut g = Graph::new(SurrogateSpec::default());
    let x = g.input(t(&[2, 3], vec![1.0, -2.0, 3.0, 0.0, 5.0, 6.0])).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s, None).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::full(&[2, 3], 1.0));
}

#[test]
fn spike_forward_is_strict() {
    let mut g = Graph::new(SurrogateSpec::default());
    let u = g.input(t(&[3], vec![1.0 + 1e-9, 1.0, -1e30])).unwrap();
    let s = g.spike(u, 1.0).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn spike_backward_uses_surrogate() {
    let width = 0.5;
    let sur = SurrogateSpec::new(SurrogateKind::Rectangular, width).unwrap();
    let mut g = Graph::new(sur);
    let v_th = 1.0;
    let u = g
        .input(t(&[3], vec![v_th, v_th + 2.0 * width, v_th - 2.0 * width]))
        .unwrap();
    let s = g.spike(u, v_th).unwrap();
    let total = g.sum(s).unwrap();
    let grads = g.backward(total, None).unwrap();
    assert_eq!(grads.get(u).unwrap().data(), &[1.0 / width, 0.0, 0.0]);
}

#[test]
fn backward_on_foreign_var_errors() {
    let g = Graph::new(SurrogateSpec::default());
    let bogus = Var { node: 3, slot: 0 };
    assert!(matches!(
        g.backward(bogus, None),
        Err(Error::BackwardBeforeForward(3))
    ));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new(SurrogateSpec::default());
    let x = g.input(t(&[2], vec![1e300, 1.0])).unwrap();
    assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite("scale"))));
    assert!(matches!(
        g.leaf(t(&[1], vec![f64::NAN]), false),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn shape_mismatch_is_error() {
    let mut g = Graph::new(SurrogateSpec::default());
    let a = g.input(Tensor::zeros(&[2])).unwrap();
    let b = g.input(Tensor::zeros(&[3])).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    let img = g.input(Tensor::zeros(&[2, 4, 4])).unwrap();
    let w = g.input(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
    assert!(g.conv2d(img, w, None, 1, 1).is_err());
}

#[test]
fn neuron_gradient_flows_through_time() {
    // Two relaxed LIF steps, loss = sum of second potential.
    let mut g = Graph::with_mode(SurrogateSpec::default(), FireMode::Relaxed);
    let x = g.input(t(&[1], vec![0.8])).unwrap();
    let p = NeuronParams::lif();
    let n1 = g.neuron(None, x, p).unwrap();
    let n2 = g.neuron(Some(n1.membrane), x, p).unwrap();
    let loss = g.sum(n2.potential).unwrap();
    let grads = g.backward(loss, None).unwrap();
    // v1 = x, s1 = x - 0.5 (ramp), u1 = x(1 - s1) = x(1.5 - x)
    // v2 = beta*u1 + x, dv2/dx = beta*(1.5 - 2x) + 1 = 0.5*(-0.1) + 1
    assert!((grads.get(x).unwrap().item() - 0.95).abs() < 1e-12);
}

// ---------------------------------------------------------------------
// Random graphs checked against central finite differences.

const IN_SHAPE: [usize; 3] = [2, 5, 5];

/// Builds a random graph of depth <= 4 over `x`, deterministic in `seed`.
fn random_graph(seed: u64, x: &Tensor) -> (Graph, Var, Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::with_mode(SurrogateSpec::default(), FireMode::Relaxed);
    let input = g.input(x.clone()).unwrap();
    let mut cur = input;
    let depth = rng.gen_range(1..=4);
    let rand_t = |rng: &mut ChaCha8Rng, shape: &[usize], scale: f64| {
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
    };
    for _ in 0..depth {
        let shape = g.value(cur).shape().to_vec();
        cur = match rng.gen_range(0..11) {
            0 if shape.len() == 3 => {
                let co = rng.gen_range(1..=3);
                let w = g.input(rand_t(&mut rng, &[co, shape[0], 3, 3], 0.6)).unwrap();
                let b = g.input(rand_t(&mut rng, &[co], 0.3)).unwrap();
                g.conv2d(cur, w, Some(b), rng.gen_range(1..=2), 1).unwrap()
            }
            1 => g.relu(cur).unwrap(),
            2 => g.sigmoid(cur).unwrap(),
            3 => g.scale(cur, rng.gen_range(-2.0..2.0)).unwrap(),
            4 => {
                let c = g.input(rand_t(&mut rng, &shape, 1.0)).unwrap();
                g.mul(cur, c).unwrap()
            }
            5 => {
                let c = g.input(rand_t(&mut rng, &shape, 1.0)).unwrap();
                let s = g.sigmoid(cur).unwrap();
                g.add(s, c).unwrap()
            }
            6 => g.clamp(cur, -0.4, 0.6).unwrap(),
            7 => g.maximum(cur, 0.1).unwrap(),
            8 => g.spike(cur, 0.2).unwrap(),
            9 => {
                let kind = [
                    crate::substrate::NeuronKind::Lif,
                    crate::substrate::NeuronKind::ILif,
                    crate::substrate::NeuronKind::SignedIf,
                ][rng.gen_range(0..3)];
                let p = NeuronParams::for_kind(kind);
                let a = g.scale(cur, 2.0).unwrap();
                let n1 = g.neuron(None, a, p).unwrap();
                let n2 = g.neuron(Some(n1.membrane), a, p).unwrap();
                let s = g.add(n1.spikes, n2.spikes).unwrap();
                g.add(s, n2.potential).unwrap()
            }
            _ => {
                let n = g.value(cur).len();
                let m = rng.gen_range(1..=4);
                let w = g.input(rand_t(&mut rng, &[m, n], 0.5)).unwrap();
                let b = g.input(rand_t(&mut rng, &[m], 0.5)).unwrap();
                g.linear(cur, w, Some(b)).unwrap()
            }
        };
    }
    let out = match rng.gen_range(0..3) {
        0 => g.sum(cur).unwrap(),
        1 => g.mean(cur).unwrap(),
        _ => {
            let shape = g.value(cur).shape().to_vec();
            let target = g.constant(rand_t(&mut rng, &shape, 1.0)).unwrap();
            g.mse(cur, target).unwrap()
        }
    };
    (g, input, out)
}

fn check_random_graph(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let n: usize = IN_SHAPE.iter().product();
    let x = t(&IN_SHAPE, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (g, input, out) = random_graph(seed, &x);
    let grads = g.backward(out, None).unwrap();
    let analytic = grads.get(input).unwrap().clone();
    let base_sig = g.kink_signature();
    let h = 1e-6;
    let mut checked = 0;
    for _ in 0..10 {
        let i = rng.gen_range(0..n);
        let eval = |delta: f64| {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            let (g, _, out) = random_graph(seed, &xp);
            (g.value(out).item(), g.kink_signature())
        };
        let (fp, sp) = eval(h);
        let (fm, sm) = eval(-h);
        if sp != base_sig || sm != base_sig {
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-6);
        assert!(err < 1e-3, "seed {seed} coord {i}: autodiff {a} vs fd {fd}");
        checked += 1;
    }
    checked
}

#[test]
fn random_graphs_match_finite_differences() {
    let mut total = 0;
    for seed in 0..150 {
        total += check_random_graph(seed);
    }
    assert!(total > 600, "only {total} coordinates were checkable");
}

#[test]
fn backward_is_linear() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = IN_SHAPE.iter().product();
        let x = t(&IN_SHAPE, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        // Two differentiable heads on a shared conv trunk.
        let mut g = Graph::new(SurrogateSpec::default());
        let xi = g.input(x.clone()).unwrap();
        let w = g
            .constant(t(&[2, 2, 3, 3], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .unwrap();
        let c = g.conv2d(xi, w, None, 1, 1).unwrap();
        let s = g.sigmoid(c).unwrap();
        let f = g.sum(s).unwrap();
        let sq = g.mul(c, c).unwrap();
        let gm = g.mean(sq).unwrap();
        let fa = g.scale(f, a).unwrap();
        let gb = g.scale(gm, b).unwrap();
        let combo = g.add(fa, gb).unwrap();
        let gc = g.backward(combo, None).unwrap().take(xi).unwrap();
        let gf = g.backward(f, None).unwrap().take(xi).unwrap();
        let gg = g.backward(gm, None).unwrap().take(xi).unwrap();
        for i in 0..n {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn identical_inputs_give_identical_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n: usize = IN_SHAPE.iter().product();
    let x = t(&IN_SHAPE, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    for seed in 0..20 {
        let (g1, i1, o1) = random_graph(seed, &x);
        let (g2, i2, o2) = random_graph(seed, &x);
        assert_eq!(g1.value(o1).item().to_bits(), g2.value(o2).item().to_bits());
        let a = g1.backward(o1, None).unwrap().take(i1).unwrap();
        let b = g2.backward(o2, None).unwrap().take(i2).unwrap();
        assert_eq!(a, b);
    }
}
