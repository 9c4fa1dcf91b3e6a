use hierlearn::contrastive::{StageSchedule, TrainConfig, Trainer};
use hierlearn::embedder::EncoderConfig;
use hierlearn::synthdata::{render_image, SynthConfig};

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            input_size: 32,
            channel_widths: vec![8, 16, 32],
            embedding_dim: 32,
            projection_hidden_dim: 32,
            projection_out_dim: 32,
        },
        batch_size: 16,
        bank_capacity: 16,
        learning_rate: 0.03,
        schedule: StageSchedule::new([(0, 200)]),
        seed,
        ..TrainConfig::default()
    }
}

/// Loss at the first step that sees a full bank versus the loss at step 200,
/// training on one fixed image.
fn overfit_run(seed: u64) -> (f64, f64) {
    let (img, _) = render_image(&SynthConfig::default(), 0);
    let mut trainer = Trainer::<f32>::new(small_config(seed)).unwrap();
    let batch = vec![&img; 16];
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let stats = trainer.train_step(&batch, 0, 0.03).unwrap();
        if first.is_none() && stats.bank_size == 16 {
            first = Some(stats.loss);
        }
        last = stats.loss;
    }
    (first.expect("bank fills after one step"), last)
}

#[test]
fn single_image_overfit_reduces_loss() {
    let runs: Vec<(f64, f64)> = (0..3).map(overfit_run).collect();
    let wins = runs.iter().filter(|(a, b)| b < a).count();
    assert!(wins >= 2, "{runs:?}");
}

#[test]
fn first_step_with_empty_bank_has_zero_loss() {
    let (img, _) = render_image(&SynthConfig::default(), 0);
    let mut trainer = Trainer::<f64>::new(small_config(0)).unwrap();
    let stats = trainer.train_step(&[&img, &img], 0, 0.03).unwrap();
    assert_eq!(stats.bank_size, 0);
    assert!(stats.loss.abs() < 1e-12);
    assert_eq!(trainer.bank.len(), 2);
}

#[test]
fn identical_seeds_reproduce_the_training_log() {
    let data: Vec<_> = (0..6).map(|i| render_image(&SynthConfig::default(), i).0).collect();
    let run = || {
        let mut cfg = small_config(5);
        cfg.batch_size = 4;
        cfg.schedule = StageSchedule::new([(0, 3), (2, 3)]);
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        t.run_schedule(&data, None, |_| {}).unwrap().to_jsonl()
    };
    assert_eq!(run(), run());
}
