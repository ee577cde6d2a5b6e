#![allow(dead_code)]

use matchbox::audio::{AudioClip, SAMPLE_RATE_HZ};
use matchbox::nn::{BatchNorm1d, Mode, Tape, Tensor, Var};
use matchbox::seed;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], rng: &mut seed::Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central-difference check of `f` w.r.t. every input. The output is
/// reduced to a scalar with fixed random weights unless it already is one.
/// Returns the worst relative error over inputs.
pub fn grad_check<F>(inputs: &[Tensor<f64>], rng: &mut seed::Rng, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let probe_seed: u64 = rng.random();
    let run = |ins: &[Tensor<f64>], grads: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let out = f(&mut tape, &vars);
        let loss = if tape.value(out).numel() == 1 && tape.value(out).shape().is_empty() {
            out
        } else {
            let mut prng = seed::rng(probe_seed);
            let n = tape.value(out).numel();
            let w: Vec<f64> = (0..n).map(|_| prng.random_range(-1.0..1.0)).collect();
            tape.weighted_sum(out, &w).unwrap()
        };
        let value = tape.value(loss).item();
        let g = if grads {
            tape.backward(loss).unwrap();
            vars.iter()
                .zip(ins)
                .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect()
        } else {
            Vec::new()
        };
        (value, g)
    };

    let (_, analytic) = run(inputs, true);
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (run(&plus, false).0 - run(&minus, false).0) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(a, &numeric));
    }
    worst
}

/// Train-mode batch norm check covering the input, gamma and beta. The
/// layer binds gamma and beta itself, so their gradients are read back
/// from the layer's parameters.
pub fn bn_grad_check(x: &Tensor<f64>, rng: &mut seed::Rng) -> f64 {
    let c = x.shape()[1];
    let gamma = random_tensor(&[c], rng);
    let beta = random_tensor(&[c], rng);
    let probe: Vec<f64> = (0..x.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();

    // inputs: [x, gamma, beta]
    let run = |ins: &[Tensor<f64>], grads: bool| {
        let mut bn = BatchNorm1d::<f64>::new("bn", c);
        bn.gamma.value = ins[1].clone().with_grad();
        bn.beta.value = ins[2].clone().with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(ins[0].clone().with_grad());
        let y = tape.batch_norm1d(xv, &mut bn, Mode::Train).unwrap();
        let loss = tape.weighted_sum(y, &probe).unwrap();
        let value = tape.value(loss).item();
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        bn.gamma.pull_grad(&tape);
        bn.beta.pull_grad(&tape);
        let gx = tape.grad(xv).unwrap().to_vec();
        (value, vec![gx, bn.gamma.value.grad.clone().unwrap(), bn.beta.value.grad.clone().unwrap()])
    };
    let inputs = [x.clone(), gamma, beta];
    let (_, analytic) = run(&inputs, true);
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric: Vec<f64> = (0..a.len())
            .map(|j| {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= FD_STEP;
                (run(&plus, false).0 - run(&minus, false).0) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(relative_error(a, &numeric));
    }
    worst
}

pub fn sine(freq_hz: f32, amp: f32, seconds: f32) -> AudioClip {
    let n = (seconds * SAMPLE_RATE_HZ as f32) as usize;
    let samples = (0..n)
        .map(|i| amp * (2.0 * std::f32::consts::PI * freq_hz * i as f32 / SAMPLE_RATE_HZ as f32).sin())
        .collect();
    AudioClip::new(samples, SAMPLE_RATE_HZ)
}

pub fn white_noise(rms: f32, seconds: f32, seed_value: u64) -> AudioClip {
    let n = (seconds * SAMPLE_RATE_HZ as f32) as usize;
    let mut rng = seed::rng(seed_value);
    let normal = Normal::new(0.0f32, rms).unwrap();
    AudioClip::new((0..n).map(|_| normal.sample(&mut rng).clamp(-1.0, 1.0)).collect(), SAMPLE_RATE_HZ)
}

/// Worst relative finite-difference error per layer type over `cases`
/// random small shapes each.
pub fn gradient_suite(cases: usize, seed_value: u64) -> Vec<(&'static str, f64)> {
    let mut rng = seed::rng(seed_value);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = w.max(e),
        None => worst.push((name, e)),
    };
    for case in 0..cases {
        let n = rng.random_range(1..=3);
        let c = rng.random_range(1..=4);
        let t = rng.random_range(2..=10);
        let k = [1, 3, 5, 7][rng.random_range(0..4)];
        let x = random_tensor(&[n, c, t], &mut rng);

        for dilation in [1, 2] {
            let w = random_tensor(&[c, k], &mut rng);
            let b = random_tensor(&[c], &mut rng);
            let with_bias = case % 2 == 0;
            let ins = if with_bias { vec![x.clone(), w, b] } else { vec![x.clone(), w] };
            let e = grad_check(&ins, &mut rng, |tape, v| {
                tape.depthwise_conv1d(v[0], v[1], v.get(2).copied(), dilation).unwrap()
            });
            record(if dilation == 1 { "depthwise conv" } else { "depthwise conv (dilation 2)" }, e);
        }

        let cout = rng.random_range(1..=4);
        let w = random_tensor(&[cout, c], &mut rng);
        let b = random_tensor(&[cout], &mut rng);
        let e = grad_check(&[x.clone(), w, b], &mut rng, |tape, v| tape.pointwise_conv1d(v[0], v[1], Some(v[2])).unwrap());
        record("pointwise conv", e);

        record("batch norm (train)", bn_grad_check(&x, &mut rng));

        // keep inputs away from the kink
        let mut xr = x.clone();
        xr.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 1e-3 {
                *v += 2e-3
            }
        });
        record("relu", grad_check(&[xr], &mut rng, |tape, v| tape.relu(v[0])));

        let e = grad_check(&[x.clone()], &mut rng, |tape, v| {
            tape.dropout(v[0], 0.5, Mode::Eval, &mut seed::rng(0))
        });
        let e2 = grad_check(&[x.clone()], &mut rng, |tape, v| tape.dropout(v[0], 0.0, Mode::Train, &mut seed::rng(0)));
        record("dropout (off)", e.max(e2));

        let mask_seed: u64 = rng.random();
        let e = grad_check(&[x.clone()], &mut rng, |tape, v| {
            tape.dropout(v[0], 0.3, Mode::Train, &mut seed::rng(mask_seed))
        });
        record("dropout (fixed mask)", e);

        record("global avg pool", grad_check(&[x.clone()], &mut rng, |tape, v| tape.global_avg_pool(v[0]).unwrap()));

        let y = random_tensor(&[n, c, t], &mut rng);
        record("residual add", grad_check(&[x.clone(), y], &mut rng, |tape, v| tape.add(v[0], v[1]).unwrap()));

        let classes = rng.random_range(2..=5);
        let logits = random_tensor(&[n, classes], &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let e = grad_check(&[logits], &mut rng, |tape, v| tape.softmax_cross_entropy(v[0], &labels).unwrap());
        record("softmax cross-entropy", e);
    }
    worst
}
