use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hierlearn::contrastive::{StageSchedule, Trainer};
use hierlearn::embedder::{load_checkpoint, save_checkpoint};
use hierlearn::image::{load_image, Image};
use hierlearn::probes::{
    landmark_features, linear_probe_features, locality_from_features, probe_compositionality, probe_correspondence,
    probe_multires, probe_shift_correspondence, BackboneEmbedder, CellMatch, LinearProbeReport,
};
use hierlearn::synthdata::{generate_corpus, load_corpus, Corpus, LandmarkAnnotation};
use serde::{Deserialize, Serialize};

use crate::config::{synth_cache_key, RunConfig};
use crate::report;
use crate::{Cli, Command, GenDataArgs, GlobalArgs, PretrainArgs, ProbeArgs, ProbeKind, UsageError};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT_FILE: &str = "final.edn";

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p).map_err(|e| UsageError(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.global.out {
        cfg.out = Some(out.clone());
    }
    if let Some(w) = cli.global.workers {
        cfg.train.workers = w;
    }
    match cli.command {
        Command::GenData(args) => gen_data(cfg, &cli.global, args),
        Command::Pretrain(args) => pretrain(cfg, &cli.global, args),
        Command::Probe(args) => probe(cfg, &cli.global, args),
        Command::Report(args) => {
            let out = require_out(&cfg)?;
            report::run(&args.runs, args.labels.as_deref(), &out)
        }
    }
}

fn require_out(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| UsageError("the --out <DIR> flag is required".into()).into())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(mut cfg: RunConfig, global: &GlobalArgs, args: GenDataArgs) -> anyhow::Result<()> {
    let out = require_out(&cfg)?;
    let s = &mut cfg.synth;
    if let Some(v) = args.images {
        s.num_images = v;
    }
    if let Some(v) = args.classes {
        s.num_structure_classes = v;
    }
    if let Some(v) = args.size {
        s.image_size = v;
    }
    if let Some(v) = args.jitter {
        s.jitter_px = v;
    }
    if let Some(v) = args.noise {
        s.intensity_noise = v;
    }
    if let Some(seed) = global.seed {
        s.seed = seed;
    }
    s.validate().map_err(|e| UsageError(e.to_string()))?;
    cfg.command = Some("gen-data".into());
    let manifest = generate_corpus(&cfg.synth, &out)?;
    cfg.write(&out.join(RUN_CONFIG_FILE))?;
    println!("{}", manifest.display());
    Ok(())
}

/// Manifest from the config, or a corpus generated once into the cache
/// directory (`HIERLEARN_CACHE`, default `.hierlearn-cache`).
fn resolve_corpus(cfg: &mut RunConfig, data: Option<PathBuf>) -> anyhow::Result<Corpus> {
    if let Some(d) = data {
        cfg.data = Some(d);
    }
    let manifest = match &cfg.data {
        Some(p) => p.clone(),
        None => {
            cfg.synth.validate().map_err(|e| UsageError(e.to_string()))?;
            let root = std::env::var_os("HIERLEARN_CACHE")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(".hierlearn-cache"));
            let dir = root.join(synth_cache_key(&cfg.synth));
            let manifest = dir.join(MANIFEST_FILE);
            if !manifest.exists() {
                eprintln!("generating corpus into {}", dir.display());
                generate_corpus(&cfg.synth, &dir)?;
            }
            cfg.data = Some(manifest.clone());
            manifest
        }
    };
    Ok(load_corpus(&manifest)?)
}

fn pretrain(mut cfg: RunConfig, global: &GlobalArgs, args: PretrainArgs) -> anyhow::Result<()> {
    let out = require_out(&cfg)?;
    let t = &mut cfg.train;
    if let Some(s) = args.schedule {
        t.schedule = s;
    }
    if let Some(n) = args.fixed_n {
        t.schedule = StageSchedule::new([(n, t.schedule.total_steps())]);
    }
    if args.no_prune {
        t.prune_enabled = false;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.bank {
        t.bank_capacity = v;
    }
    if let Some(seed) = global.seed {
        t.seed = seed;
    }
    let errors = t.validation_errors();
    if !errors.is_empty() {
        let list: Vec<String> = errors.iter().map(|e| format!("  - {e}")).collect();
        return Err(UsageError(format!("invalid training config:\n{}", list.join("\n"))).into());
    }
    cfg.command = Some("pretrain".into());
    let corpus = resolve_corpus(&mut cfg, args.data)?;
    let images = corpus.load_images()?;
    if images.is_empty() {
        bail!("corpus contains no images");
    }

    create_dir(&out)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    cfg.write(&out.join(RUN_CONFIG_FILE))?;

    let mut trainer = Trainer::<f32>::new(cfg.train.clone())?;
    let total = cfg.train.schedule.total_steps();
    let log = trainer.run_schedule(&images, Some(&ckpt_dir), |r| {
        if (r.step + 1) % 100 == 0 {
            eprintln!(
                "step {}/{} n={} loss {:.4} K' {:.1} removed {:.1}",
                r.step + 1,
                total,
                r.stage_n,
                r.loss,
                r.k_prime,
                r.removed_count
            );
        }
    })?;
    log.write_jsonl(out.join(TRAIN_LOG_FILE))?;
    write_json(&out.join("stages.json"), &log.stages)?;
    let final_path = out.join(FINAL_CHECKPOINT_FILE);
    save_checkpoint(&trainer.pair, &cfg.train, &final_path)?;
    for s in &log.stages {
        println!(
            "stage n={} steps={} mean_loss={} checkpoint={}",
            s.stage_n,
            s.steps,
            s.mean_loss.map_or("-".into(), |v| format!("{v:.4}")),
            s.checkpoint.as_ref().map_or("-".into(), |p| p.display().to_string())
        );
    }
    println!("{}", final_path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearReportFile {
    pub patch_px: usize,
    pub results: Vec<LinearProbeReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSummary {
    pub image_a: String,
    pub image_b: String,
    pub matches: usize,
    pub correct: Option<usize>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrespondenceReportFile {
    pub grid_size: usize,
    pub threshold: f64,
    /// Ground-truth shift in cells when matching images against shifted copies.
    pub shift: Option<(isize, isize)>,
    pub noise_std: Option<f64>,
    pub pairs: Vec<PairSummary>,
    pub total_matches: usize,
    pub correct: Option<usize>,
    /// Fraction of reported matches on the ground-truth cell.
    pub accuracy: Option<f64>,
}

fn probe_inputs(corpus: &Corpus, limit: Option<usize>) -> anyhow::Result<(Vec<(String, Image)>, Vec<LandmarkAnnotation>)> {
    let n = limit.unwrap_or(corpus.images.len()).min(corpus.images.len());
    let mut images = Vec::with_capacity(n);
    for r in &corpus.images[..n] {
        images.push((r.id.clone(), r.load()?));
    }
    let landmarks = corpus
        .landmarks
        .iter()
        .filter(|l| images.iter().any(|(id, _)| *id == l.image_id))
        .cloned()
        .collect();
    Ok((images, landmarks))
}

fn probe(mut cfg: RunConfig, global: &GlobalArgs, args: ProbeArgs) -> anyhow::Result<()> {
    let out = require_out(&cfg)?;
    let p = &mut cfg.probes;
    if let Some(v) = args.patch_px {
        p.patch_px = v;
    }
    if args.max_images.is_some() {
        p.max_images = args.max_images;
    }
    if let Some(v) = args.shots {
        p.shots = v;
    }
    if let Some(v) = args.arities {
        p.compositionality.arities = v;
    }
    if let Some(v) = args.num_patches {
        p.compositionality.num_patches = v;
    }
    if let Some(v) = args.grid {
        p.correspondence.grid = v;
    }
    if let Some(v) = args.threshold {
        p.correspondence.threshold = v;
    }
    if let Some(v) = args.pairs {
        p.correspondence.pairs = v;
    }
    if args.image_a.is_some() || args.image_b.is_some() {
        p.correspondence.image_a = args.image_a;
        p.correspondence.image_b = args.image_b;
    }
    if let Some(v) = args.levels {
        p.multires_levels = v;
    }
    if let Some(seed) = global.seed {
        p.seed = seed;
    }
    p.linear.seed = p.seed;
    p.compositionality.seed = p.seed;
    if let Some(c) = args.ckpt {
        cfg.checkpoint = Some(c);
    }
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| UsageError("the --ckpt <FILE> flag is required".into()))?;
    if let Some(bad) = cfg.probes.compositionality.arities.iter().find(|a| !(2..=4).contains(*a)) {
        return Err(UsageError(format!("split arity {bad} is not one of 2, 3, 4")).into());
    }
    let kind = args.kind;
    cfg.command = Some(format!("probe {}", kind.name()));

    let ckpt = load_checkpoint::<f32>(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let embedder = BackboneEmbedder::from_checkpoint(&ckpt)?;
    let explicit_pair = kind == ProbeKind::Correspondence && cfg.probes.correspondence.image_a.is_some();
    let corpus = if explicit_pair {
        None
    } else {
        Some(resolve_corpus(&mut cfg, args.data)?)
    };
    create_dir(&out)?;
    let probes = cfg.probes.clone();
    let name = kind.name();
    match kind {
        ProbeKind::Locality => {
            let (images, landmarks) = probe_inputs(corpus.as_ref().unwrap(), probes.max_images)?;
            let feats = landmark_features(&embedder, &images, &landmarks, probes.patch_px)?;
            let rep = locality_from_features(&feats, probes.patch_px)?;
            write_json(&out.join("locality.json"), &rep)?;
            write_text(&out.join("locality_embeddings.tsv"), &rep.embeddings.to_tsv())?;
            println!(
                "silhouette {:.4} nearest_centroid_accuracy {:.4}",
                rep.silhouette, rep.nearest_centroid_accuracy
            );
        }
        ProbeKind::Compositionality => {
            let (images, _) = probe_inputs(corpus.as_ref().unwrap(), probes.max_images)?;
            let rep = probe_compositionality(&embedder, &images, &probes.compositionality)?;
            write_json(&out.join("compositionality.json"), &rep)?;
            write_text(&out.join("compositionality_samples.tsv"), &rep.samples_tsv())?;
            write_text(&out.join("compositionality_kde.tsv"), &rep.kde_tsv())?;
            println!("mean {:.4} std {:.4}", rep.mean, rep.std);
        }
        ProbeKind::Correspondence => {
            let c = &probes.correspondence;
            let mut pairs = Vec::new();
            let mut all: Vec<(usize, CellMatch)> = Vec::new();
            let (shift, noise) = if explicit_pair {
                let (pa, pb) = match (&c.image_a, &c.image_b) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(UsageError("--image-a and --image-b must be given together".into()).into()),
                };
                let res = probe_correspondence(&embedder, &load_image(pa)?, &load_image(pb)?, c.grid, c.threshold)?;
                pairs.push(PairSummary {
                    image_a: pa.display().to_string(),
                    image_b: pb.display().to_string(),
                    matches: res.matches.len(),
                    correct: None,
                    accuracy: None,
                });
                all.extend(res.matches.into_iter().map(|m| (0, m)));
                (None, None)
            } else {
                let (images, _) = probe_inputs(corpus.as_ref().unwrap(), Some(c.pairs))?;
                for (i, (id, img)) in images.iter().enumerate() {
                    let rep = probe_shift_correspondence(
                        &embedder,
                        img,
                        c.grid,
                        c.threshold,
                        c.shift,
                        c.noise_std,
                        probes.seed.wrapping_add(i as u64),
                    )?;
                    pairs.push(PairSummary {
                        image_a: id.clone(),
                        image_b: format!("{id}+shift"),
                        matches: rep.result.matches.len(),
                        correct: Some(rep.correct),
                        accuracy: rep.accuracy,
                    });
                    all.extend(rep.result.matches.into_iter().map(|m| (i, m)));
                }
                (Some(c.shift), Some(c.noise_std))
            };
            let total_matches = all.len();
            let correct = shift.map(|_| pairs.iter().filter_map(|p| p.correct).sum::<usize>());
            let accuracy = correct.and_then(|k| (total_matches > 0).then(|| k as f64 / total_matches as f64));
            let rep = CorrespondenceReportFile {
                grid_size: c.grid,
                threshold: c.threshold,
                shift,
                noise_std: noise,
                pairs,
                total_matches,
                correct,
                accuracy,
            };
            write_json(&out.join("correspondence.json"), &rep)?;
            let mut tsv = String::from("pair\tcell_a\tcell_b\tsimilarity\n");
            for (i, m) in &all {
                tsv.push_str(&format!("{i}\t{}\t{}\t{}\n", m.cell_a, m.cell_b, m.similarity));
            }
            write_text(&out.join("correspondence_matches.tsv"), &tsv)?;
            println!(
                "matches {} accuracy {}",
                total_matches,
                accuracy.map_or("-".into(), |a| format!("{a:.4}"))
            );
        }
        ProbeKind::Multires => {
            let (images, landmarks) = probe_inputs(corpus.as_ref().unwrap(), probes.max_images)?;
            let rep = probe_multires(&embedder, &images, &landmarks, &probes.multires_levels)?;
            write_json(&out.join("multires.json"), &rep)?;
            println!(
                "cross_level_same_landmark {:.4} same_level_cross_landmark {:.4} success {}",
                rep.cross_level_same_landmark, rep.same_level_cross_landmark, rep.success
            );
        }
        ProbeKind::Linear => {
            let (images, landmarks) = probe_inputs(corpus.as_ref().unwrap(), probes.max_images)?;
            let feats = landmark_features(&embedder, &images, &landmarks, probes.patch_px)?;
            let mut results = Vec::new();
            for &s in &probes.shots {
                results.push(linear_probe_features(&feats, s, &probes.linear)?);
            }
            let mut tsv = String::from("shots_per_class\tmean_accuracy\taccuracies\n");
            for r in &results {
                let accs: Vec<String> = r.accuracies.iter().map(|a| a.to_string()).collect();
                tsv.push_str(&format!("{}\t{}\t{}\n", r.shots_per_class, r.mean_accuracy, accs.join(",")));
                println!("shots {} accuracy {:.4}", r.shots_per_class, r.mean_accuracy);
            }
            write_json(
                &out.join("linear.json"),
                &LinearReportFile {
                    patch_px: probes.patch_px,
                    results,
                },
            )?;
            write_text(&out.join("linear.tsv"), &tsv)?;
        }
    }
    cfg.write(&out.join(format!("run_config.{name}.json")))?;
    Ok(())
}
