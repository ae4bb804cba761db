//! Central finite differences against the analytic backward pass, in f64
//! with dropout masks frozen by reseeding the mask generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vibra::model::{Batch, SepCnn, SepCnnConfig};

const H: f64 = 1e-3;

fn loss(model: &SepCnn<f64>, x: &Batch<f64>, labels: &[usize], mask_seed: u64) -> f64 {
    model
        .loss_and_grad(x, labels, &mut ChaCha8Rng::seed_from_u64(mask_seed))
        .unwrap()
        .loss
}

/// Largest relative error over every parameter of `cfg`.
fn max_relative_error(cfg: SepCnnConfig, seed: u64, batch: usize) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SepCnn::<f64>::new(cfg.clone(), seed).unwrap();
    // move batch norm and biases away from their trivial initial values
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let data = (0..batch * cfg.in_channels * cfg.input_len)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x = Batch::new(batch, cfg.in_channels, cfg.input_len, data).unwrap();
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    let mask_seed = seed ^ 0xD0;

    let analytic = model
        .loss_and_grad(&x, &labels, &mut ChaCha8Rng::seed_from_u64(mask_seed))
        .unwrap()
        .grads;

    let mut worst = (0.0f64, String::new());
    let names: Vec<String> = model.layout().iter().map(|p| p.name.clone()).collect();
    for (ti, name) in names.iter().enumerate() {
        for j in 0..model.params()[ti].len() {
            let orig = model.params()[ti][j];
            model.params_mut()[ti][j] = orig + H;
            let up = loss(&model, &x, &labels, mask_seed);
            model.params_mut()[ti][j] = orig - H;
            let down = loss(&model, &x, &labels, mask_seed);
            model.params_mut()[ti][j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.tensors[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{j}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

fn random_tiny_config(seed: u64) -> SepCnnConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SepCnnConfig {
        in_channels: rng.random_range(1..=3),
        input_len: rng.random_range(12..=24),
        num_blocks: rng.random_range(1..=2),
        block_width: rng.random_range(2..=4),
        kernel_size: [1, 3, 5][rng.random_range(0..3)],
        dropout_p: [0.0, 0.2, 0.3][rng.random_range(0..3)],
        pool_out: rng.random_range(1..=2),
        classifier_hidden: rng.random_range(2..=5),
        num_classes: rng.random_range(2..=4),
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in [11u64, 23, 37, 41] {
        let cfg = random_tiny_config(seed);
        let (err, at) = max_relative_error(cfg.clone(), seed, 4);
        println!("seed {seed}: {cfg:?} max rel err {err:.2e} at {at}");
        assert!(err < 1e-4, "seed {seed}: {err:e} at {at}");
    }
}
