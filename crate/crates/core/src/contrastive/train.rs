//! Training step and the coarse-to-fine stage loop.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomposer::sample_instance;
use crate::embedder::{save_checkpoint, BackboneCache, Encoder, ModelPair, NormMode, ParamSet};
use crate::image::{augment, resize, Image};
use crate::scalar::Scalar;

use super::bank::MemoryBank;
use super::config::TrainConfig;
use super::loss::{batch_info_nce, BatchLoss};
use super::ContrastError;

const INIT_STREAM: u64 = 1;
/// Weight of the newest batch in the running normalization statistics.
const RUNNING_STATS_MOMENTUM: f64 = 0.1;
const DATA_STREAM: u64 = 2;

/// Deterministic initial twin pair for a config: key is a copy of query.
pub fn init_pair<T: Scalar>(cfg: &TrainConfig) -> Result<ModelPair<T>, ContrastError> {
    let encoder = Encoder::<T>::new(cfg.encoder.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    let query = encoder.init_params(&mut rng);
    Ok(ModelPair::from_query(query, T::lit(cfg.momentum)))
}

/// Gradient of one batch plus what the update needs besides it.
#[derive(Debug, Clone)]
pub struct StepGradient<T> {
    /// Query-twin gradient; zero for running statistics.
    pub grads: ParamSet<T>,
    /// Normalized key projections, `[B, D]`.
    pub keys: Vec<T>,
    pub loss: BatchLoss<T>,
    /// Query backbone cache holding this batch's normalization statistics.
    pub cache: BackboneCache<T>,
}

/// Bookkeeping for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Bank size before this step's enqueue.
    pub bank_size: usize,
    pub k_prime: Vec<usize>,
    pub removed: Vec<usize>,
    /// Anchors whose every negative was pruned.
    pub empty_anchors: usize,
    pub lr: f64,
}

impl StepStats {
    pub fn mean_k_prime(&self) -> f64 {
        mean_usize(&self.k_prime)
    }

    pub fn mean_removed(&self) -> f64 {
        mean_usize(&self.removed)
    }
}

fn mean_usize(v: &[usize]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<usize>() as f64 / v.len() as f64
    }
}

/// One JSON-lines training-log record. `K_prime` and `removed_count` are
/// per-anchor means over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage_n: u32,
    pub step: usize,
    pub loss: f64,
    pub bank_size: usize,
    #[serde(rename = "K_prime")]
    pub k_prime: f64,
    pub removed_count: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_n: u32,
    pub steps: usize,
    pub mean_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub mean_k_prime: Option<f64>,
    pub empty_anchor_events: usize,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub stages: Vec<StageRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.steps {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), ContrastError> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| ContrastError::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| ContrastError::io(path, e))
    }
}

/// Cosine decay from `base` over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Owns the twin pair, the memory bank and the optimizer state; the only
/// writer of all three.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    encoder: Encoder<T>,
    pub pair: ModelPair<T>,
    pub bank: MemoryBank<T>,
    velocity: ParamSet<T>,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self, ContrastError> {
        let pair = init_pair(&cfg)?;
        Self::with_pair(cfg, pair)
    }

    pub fn with_pair(cfg: TrainConfig, pair: ModelPair<T>) -> Result<Self, ContrastError> {
        cfg.validate().map_err(ContrastError::InvalidConfig)?;
        let encoder = Encoder::new(cfg.encoder.clone())?;
        encoder.check_params(&pair.query)?;
        pair.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self {
            bank: MemoryBank::new(cfg.bank_capacity, cfg.encoder.projection_out_dim),
            velocity: pair.query.zeros_like(),
            encoder,
            pair,
            cfg,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder<T> {
        &self.encoder
    }

    /// Two augmented, resized views of one random instance of `img`.
    fn make_views(&mut self, img: &Image, n: u32) -> Result<(Image, Image), ContrastError> {
        let x = sample_instance(img, n, &mut self.rng)?;
        let s = self.cfg.encoder.input_size;
        let xq = resize(&augment(&x, &self.cfg.augmentation, &mut self.rng), s, s)?;
        let xk = resize(&augment(&x, &self.cfg.augmentation, &mut self.rng), s, s)?;
        Ok((xq, xk))
    }

    /// Loss and query-parameter gradient for prepared views, against the
    /// current bank snapshot. Both twins normalize with batch statistics.
    /// Does not mutate anything.
    pub fn loss_and_grad(
        &self,
        query_views: &[&Image],
        key_views: &[&Image],
        n: u32,
    ) -> Result<StepGradient<T>, ContrastError> {
        let batch = query_views.len();
        let enc = &self.encoder;
        let (q_feat, q_cache) = enc.backbone_forward(&self.pair.query, query_views, NormMode::Batch)?;
        let q_head = enc.head_forward(&self.pair.query, &q_feat, batch);
        let keys = enc.project(&self.pair.key, key_views, NormMode::Batch)?;
        let threshold = T::lit(self.cfg.prune_threshold);
        let level = if self.cfg.prune_enabled { n } else { 0 };
        let out = batch_info_nce(
            q_head.outputs(),
            &keys,
            &self.bank,
            threshold,
            level,
            T::lit(self.cfg.temperature),
        )?;
        let mut grads = self.pair.query.zeros_like();
        let d_feat = enc.head_backward(&self.pair.query, &q_head, &out.d_queries, &mut grads);
        enc.backbone_backward(&self.pair.query, &q_cache, &d_feat, &mut grads);
        Ok(StepGradient {
            grads,
            keys,
            loss: out,
            cache: q_cache,
        })
    }

    /// One step on a batch of source images (one anchor per image): sample
    /// instances at level `n`, build views, prune against the bank snapshot,
    /// SGD update of the query twin, EMA of the key twin, then enqueue keys.
    pub fn train_step(&mut self, images: &[&Image], n: u32, lr: f64) -> Result<StepStats, ContrastError> {
        if images.is_empty() {
            return Err(ContrastError::EmptyDataset);
        }
        let mut q_views = Vec::with_capacity(images.len());
        let mut k_views = Vec::with_capacity(images.len());
        for img in images {
            let (xq, xk) = self.make_views(img, n)?;
            q_views.push(xq);
            k_views.push(xk);
        }
        let q_refs: Vec<&Image> = q_views.iter().collect();
        let k_refs: Vec<&Image> = k_views.iter().collect();
        let bank_size = self.bank.len();
        let step = self.loss_and_grad(&q_refs, &k_refs, n)?;

        self.sgd_update(&step.grads, lr);
        self.encoder
            .update_running_stats(&mut self.pair.query, &step.cache, T::lit(RUNNING_STATS_MOMENTUM));
        self.pair.ema_update()?;
        let d = self.bank.dim();
        for k in step.keys.chunks(d) {
            self.bank.enqueue(k)?;
        }
        self.step += 1;
        let out = step.loss;
        let empty_anchors = out.k_prime.iter().filter(|&&k| k == 0).count();
        Ok(StepStats {
            loss: out.loss.as_f64(),
            bank_size,
            k_prime: out.k_prime,
            removed: out.removed,
            empty_anchors,
            lr,
        })
    }

    /// SGD with momentum and coupled weight decay:
    /// `v <- μ v + (g + λ θ)`, `θ <- θ - lr v`.
    fn sgd_update(&mut self, grads: &ParamSet<T>, lr: f64) {
        let lr = T::lit(lr);
        let mu = T::lit(self.cfg.sgd_momentum);
        let wd = T::lit(self.cfg.weight_decay);
        let params = self.pair.query.tensors_mut();
        let vel = self.velocity.tensors_mut();
        for ((p, v), g) in params.iter_mut().zip(vel.iter_mut()).zip(grads.tensors()) {
            if p.is_buffer() {
                continue;
            }
            for ((pv, vv), gv) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
                *vv = mu * *vv + *gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }

    fn sample_batch<'a>(&mut self, dataset: &'a [Image]) -> Vec<&'a Image> {
        (0..self.cfg.batch_size)
            .map(|_| &dataset[self.rng.random_range(0..dataset.len())])
            .collect()
    }

    /// Runs every stage in order, keeping the model and the bank across
    /// stage boundaries. Writes `stage_<i>_n<n>.edn` into `checkpoint_dir`
    /// after each stage when given. `on_step` sees every record as it is
    /// produced.
    pub fn run_schedule(
        &mut self,
        dataset: &[Image],
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<TrainingLog, ContrastError> {
        if dataset.is_empty() {
            return Err(ContrastError::EmptyDataset);
        }
        let mut log = TrainingLog::default();
        let schedule = self.cfg.schedule.clone();
        for (idx, stage) in schedule.stages.iter().enumerate() {
            if idx > 0 && self.cfg.reset_bank_per_stage {
                self.bank.clear();
            }
            let mut losses = Vec::with_capacity(stage.steps);
            let mut k_primes = Vec::with_capacity(stage.steps);
            let mut empty_events = 0;
            for t in 0..stage.steps {
                let lr = cosine_lr(self.cfg.learning_rate, t, stage.steps);
                let batch = self.sample_batch(dataset);
                let stats = self.train_step(&batch, stage.granularity, lr)?;
                let record = StepRecord {
                    stage_n: stage.granularity,
                    step: self.step - 1,
                    loss: stats.loss,
                    bank_size: stats.bank_size,
                    k_prime: stats.mean_k_prime(),
                    removed_count: stats.mean_removed(),
                    lr,
                };
                on_step(&record);
                losses.push(stats.loss);
                k_primes.push(record.k_prime);
                empty_events += stats.empty_anchors;
                log.steps.push(record);
            }
            let checkpoint = match checkpoint_dir {
                Some(dir) => {
                    let path = dir.join(format!("stage_{idx}_n{}.edn", stage.granularity));
                    save_checkpoint(&self.pair, &self.cfg, &path)?;
                    Some(path)
                }
                None => None,
            };
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            log.stages.push(StageRecord {
                stage_n: stage.granularity,
                steps: stage.steps,
                mean_loss: mean(&losses),
                final_loss: losses.last().copied(),
                mean_k_prime: mean(&k_primes),
                empty_anchor_events: empty_events,
                checkpoint,
            });
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::StageSchedule;
    use crate::embedder::EncoderConfig;
    use crate::image::AugmentationConfig;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            bank_capacity: 64,
            batch_size: 4,
            learning_rate: 0.03,
            momentum: 0.99,
            encoder: EncoderConfig {
                input_size: 16,
                channel_widths: vec![4, 8],
                embedding_dim: 8,
                projection_hidden_dim: 8,
                projection_out_dim: 8,
            },
            schedule: StageSchedule::new([(0, 3), (2, 3)]),
            ..TrainConfig::default()
        }
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(24, 24, |r, c| {
            let base = ((r / 6 + c / 6) % 2) as f32 * 0.6;
            base + rng.random::<f32>() * 0.3
        })
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_cfg()
        };
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        let before = t.pair.clone();
        let img = image(1);
        t.train_step(&[&img, &img], 0, 0.0).unwrap();
        // trainable tensors stay put; only normalization statistics move
        assert_eq!(t.pair.query.max_abs_param_diff(&before.query), Some(0.0));
        assert_eq!(t.pair.key.max_abs_param_diff(&before.key), Some(0.0));
        assert_ne!(t.pair.query, before.query);
    }

    #[test]
    fn k_prime_bookkeeping_and_no_self_negatives() {
        let mut t = Trainer::<f32>::new(tiny_cfg()).unwrap();
        let img = image(2);
        let imgs = [&img, &img, &img];
        let s0 = t.train_step(&imgs, 2, 0.01).unwrap();
        assert_eq!(s0.bank_size, 0);
        assert!(s0.k_prime.iter().all(|&k| k == 0));
        for _ in 0..30 {
            let s = t.train_step(&imgs, 2, 0.01).unwrap();
            for (k, r) in s.k_prime.iter().zip(&s.removed) {
                assert_eq!(k + r, s.bank_size);
            }
        }
        assert_eq!(t.bank.len(), 64);
        assert!(t.bank.iter().all(|e| (crate::scalar::l2_norm(e) - 1.0).abs() < 1e-5));
    }

    #[test]
    fn identity_views_with_empty_bank_give_finite_loss() {
        let cfg = TrainConfig {
            augmentation: AugmentationConfig::identity(),
            ..tiny_cfg()
        };
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        let img = image(3);
        let s = t.train_step(&[&img], 0, 0.01).unwrap();
        assert!(s.loss.is_finite() && s.loss >= 0.0);
    }

    #[test]
    fn empty_stages_leave_model_at_initialization() {
        let cfg = TrainConfig {
            schedule: StageSchedule::new([(0, 0), (2, 0), (4, 0)]),
            ..tiny_cfg()
        };
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let init = init_pair::<f32>(&cfg).unwrap();
        let log = t.run_schedule(&[image(4)], None, |_| {}).unwrap();
        assert_eq!(t.pair, init);
        assert_eq!(log.stages.len(), 3);
        assert!(log.steps.is_empty());
        assert!(log.stages.iter().all(|s| s.mean_loss.is_none()));
    }

    #[test]
    fn runs_are_reproducible() {
        let data = [image(5), image(6)];
        let run = || {
            let mut t = Trainer::<f32>::new(tiny_cfg()).unwrap();
            let log = t.run_schedule(&data, None, |_| {}).unwrap();
            (log.to_jsonl(), t.pair)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.lines().count(), 6);
    }

    #[test]
    fn level_zero_schedule_never_prunes() {
        let cfg = TrainConfig {
            schedule: StageSchedule::new([(0, 12)]),
            ..tiny_cfg()
        };
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let log = t.run_schedule(&[image(7)], None, |_| {}).unwrap();
        assert!(log.steps.iter().all(|r| r.removed_count == 0.0));
    }

    #[test]
    fn disabled_pruning_never_removes() {
        let cfg = TrainConfig {
            prune_enabled: false,
            prune_threshold: -0.5,
            schedule: StageSchedule::new([(2, 12)]),
            ..tiny_cfg()
        };
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let log = t.run_schedule(&[image(8)], None, |_| {}).unwrap();
        assert!(log.steps.iter().all(|r| r.removed_count == 0.0));
        assert!(log.steps.last().unwrap().k_prime > 0.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 9, 10) > 0.0);
    }
}
