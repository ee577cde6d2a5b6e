mod common;

use matchbox::model::{ModelConfig, Network};
use matchbox::nn::{Mode, Tape};
use matchbox::seed;
use rand::Rng;

use common::{gradient_suite, random_tensor, relative_error, FD_STEP};

#[test]
fn every_layer_matches_finite_differences() {
    let results = gradient_suite(20, 2024);
    assert_eq!(results.len(), 10);
    for (layer, err) in results {
        println!("{layer}: {err:e}");
        assert!(err < 1e-4, "{layer}: relative error {err:e}");
    }
}

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(2, 2, 3, 3);
    cfg.n_feat = 4;
    cfg.prologue_channels = 3;
    cfg.prologue_kernel = 3;
    cfg.block_kernels = vec![3, 5];
    cfg.epilogue_channels = 4;
    cfg.epilogue_kernel = 5;
    cfg.dropout_p = 0.0;
    cfg
}

fn network_loss(net: &mut Network<f64>, x: &matchbox::nn::Tensor<f64>, labels: &[usize], grads: bool) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let logits = net.forward(&mut tape, xv, Mode::Train, &mut seed::rng(0)).unwrap();
    let loss = tape.softmax_cross_entropy(logits, labels).unwrap();
    let value = tape.value(loss).item();
    if grads {
        tape.backward(loss).unwrap();
        net.pull_grads(&tape);
    }
    value
}

#[test]
fn whole_network_parameter_gradients() {
    let cfg = tiny_config();
    let mut rng = seed::rng(7);
    for trial in 0..3 {
        let mut net = Network::<f64>::build(&cfg, trial).unwrap();
        let x = random_tensor(&[3, cfg.n_feat, 9], &mut rng);
        let labels = [0, 2, 1];
        network_loss(&mut net, &x, &labels, true);
        let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.value.grad.clone().unwrap()).collect();

        for (pi, a) in analytic.iter().enumerate() {
            // every entry of small tensors, a sample of larger ones
            let idx: Vec<usize> = if a.len() <= 12 {
                (0..a.len()).collect()
            } else {
                (0..12).map(|_| rng.random_range(0..a.len())).collect()
            };
            let mut an = Vec::new();
            let mut nu = Vec::new();
            for j in idx {
                let eval = |delta: f64| {
                    let mut probe = net.clone();
                    probe.params_mut()[pi].value.data_mut()[j] += delta;
                    network_loss(&mut probe, &x, &labels, false)
                };
                nu.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
                an.push(a[j]);
            }
            let err = relative_error(&an, &nu);
            let name = &net.params()[pi].name;
            assert!(err < 1e-4, "trial {trial} {name}: relative error {err:e}");
        }
    }
}

#[test]
fn gradients_are_thread_count_invariant() {
    let cfg = tiny_config();
    let mut rng = seed::rng(3);
    let x = random_tensor(&[4, cfg.n_feat, 33], &mut rng);
    let grads = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut net = Network::<f64>::build(&cfg, 1).unwrap();
            network_loss(&mut net, &x, &[0, 1, 2, 0], true);
            net.params().iter().map(|p| p.value.grad.clone().unwrap()).collect::<Vec<_>>()
        })
    };
    assert_eq!(grads(1), grads(4));
}
