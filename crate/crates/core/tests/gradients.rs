use hierlearn::contrastive::{StageSchedule, TrainConfig, Trainer};
use hierlearn::embedder::{Encoder, EncoderConfig, ModelPair};
use hierlearn::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            input_size: 16,
            channel_widths: vec![4, 8],
            embedding_dim: 8,
            projection_hidden_dim: 8,
            projection_out_dim: 8,
        },
        bank_capacity: 20,
        batch_size: 3,
        prune_enabled: false,
        schedule: StageSchedule::new([(0, 1)]),
        ..TrainConfig::default()
    }
}

fn random_image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(16, 16, |_, _| rng.random::<f32>()).unwrap()
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

struct Fixture {
    queries: Vec<Image>,
    keys: Vec<Image>,
    bank: Vec<Vec<f64>>,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    Fixture {
        queries: (0..3).map(random_image).collect(),
        keys: (10..13).map(random_image).collect(),
        bank: (0..20).map(|_| unit_vector(&mut rng, 8)).collect(),
    }
}

fn trainer_f64(pair: ModelPair<f64>, fx: &Fixture) -> Trainer<f64> {
    let mut t = Trainer::with_pair(tiny_config(), pair).unwrap();
    for k in &fx.bank {
        t.bank.enqueue(k).unwrap();
    }
    t
}

fn loss_f64(t: &Trainer<f64>, fx: &Fixture) -> f64 {
    let q: Vec<&Image> = fx.queries.iter().collect();
    let k: Vec<&Image> = fx.keys.iter().collect();
    t.loss_and_grad(&q, &k, 0).unwrap().loss.loss
}

/// (tensor index, element index) pairs covering every trainable tensor.
fn sampled_coordinates(pair: &ModelPair<f64>, per_tensor: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = Vec::new();
    for (ti, t) in pair.query.tensors().iter().enumerate() {
        if t.is_buffer() {
            continue;
        }
        for _ in 0..per_tensor {
            out.push((ti, rng.random_range(0..t.data.len())));
        }
    }
    out
}

fn central_difference(pair: &ModelPair<f64>, fx: &Fixture, ti: usize, ei: usize, eps: f64) -> f64 {
    let mut plus = pair.clone();
    plus.query.tensors_mut()[ti].data[ei] += eps;
    let mut minus = pair.clone();
    minus.query.tensors_mut()[ti].data[ei] -= eps;
    (loss_f64(&trainer_f64(plus, fx), fx) - loss_f64(&trainer_f64(minus, fx), fx)) / (2.0 * eps)
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn initial_pair() -> ModelPair<f64> {
    let cfg = tiny_config();
    let enc = Encoder::<f64>::new(cfg.encoder.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut query = enc.init_params(&mut rng);
    // move normalization scales and shifts off their trivial values
    for t in query.tensors_mut() {
        if t.name.contains(".bn") && !t.is_buffer() {
            t.data.iter_mut().for_each(|v| *v += 0.3 * (rng.random::<f64>() - 0.5));
        }
    }
    // the key twin differs from the query twin so positives are not trivial
    let key = enc.init_params(&mut rng);
    ModelPair { query, key, momentum: 0.99 }
}

#[test]
fn end_to_end_gradient_matches_finite_differences_f64() {
    let fx = fixture();
    let pair = initial_pair();
    let t = trainer_f64(pair.clone(), &fx);
    let q: Vec<&Image> = fx.queries.iter().collect();
    let k: Vec<&Image> = fx.keys.iter().collect();
    let step = t.loss_and_grad(&q, &k, 0).unwrap();
    assert!(step.loss.loss > 0.0);
    let mut worst: f64 = 0.0;
    for (ti, ei) in sampled_coordinates(&pair, 4) {
        let analytic = step.grads.tensors()[ti].data[ei];
        let numeric = central_difference(&pair, &fx, ti, ei, 1e-5);
        let e = rel_error(analytic, numeric);
        assert!(
            e < 1e-5,
            "{}[{ei}]: analytic {analytic} vs numeric {numeric} (rel {e})",
            pair.query.tensors()[ti].name
        );
        worst = worst.max(e);
    }
    assert!(worst.is_finite());
}

#[test]
fn end_to_end_gradient_f32_matches_finite_differences() {
    let fx = fixture();
    let pair = initial_pair();
    let pair32 = ModelPair {
        query: pair.query.cast::<f32>(),
        key: pair.key.cast::<f32>(),
        momentum: 0.99f32,
    };
    // the 64-bit reference uses exactly the 32-bit parameter values
    let pair_ref = ModelPair {
        query: pair32.query.cast::<f64>(),
        key: pair32.key.cast::<f64>(),
        momentum: 0.99,
    };
    let mut t32 = Trainer::<f32>::with_pair(tiny_config(), pair32).unwrap();
    for kv in &fx.bank {
        let v: Vec<f32> = kv.iter().map(|&x| x as f32).collect();
        t32.bank.enqueue(&v).unwrap();
    }
    let q: Vec<&Image> = fx.queries.iter().collect();
    let k: Vec<&Image> = fx.keys.iter().collect();
    let step = t32.loss_and_grad(&q, &k, 0).unwrap();
    for (ti, ei) in sampled_coordinates(&pair_ref, 4) {
        let analytic = step.grads.tensors()[ti].data[ei] as f64;
        let numeric = central_difference(&pair_ref, &fx, ti, ei, 1e-5);
        let e = rel_error(analytic, numeric);
        assert!(e < 1e-3, "{}[{ei}]: {analytic} vs {numeric}", pair_ref.query.tensors()[ti].name);
    }
}

#[test]
fn head_jacobian_matches_finite_differences() {
    let cfg = tiny_config().encoder;
    let enc = Encoder::<f64>::new(cfg).unwrap();
    let params = enc.init_params(&mut ChaCha8Rng::seed_from_u64(11));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let features: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0).collect();
    let out_dim = 8;
    let cache = enc.head_forward(&params, &features, 1);
    for o in 0..out_dim {
        // row o of the Jacobian via backprop of a one-hot output gradient
        let mut d_out = vec![0.0; out_dim];
        d_out[o] = 1.0;
        let mut grads = params.zeros_like();
        let row = enc.head_backward(&params, &cache, &d_out, &mut grads);
        for i in 0..8 {
            let eps = 1e-6;
            let mut fp = features.clone();
            fp[i] += eps;
            let mut fm = features.clone();
            fm[i] -= eps;
            let yp = enc.head_forward(&params, &fp, 1).outputs()[o];
            let ym = enc.head_forward(&params, &fm, 1).outputs()[o];
            let numeric = (yp - ym) / (2.0 * eps);
            assert!(rel_error(row[i], numeric) < 1e-4, "J[{o}][{i}]: {} vs {numeric}", row[i]);
        }
    }
}
