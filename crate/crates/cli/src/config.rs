use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use hierlearn::contrastive::TrainConfig;
use hierlearn::probes::{CompositionalityConfig, LinearProbeConfig};
use hierlearn::synthdata::SynthConfig;
use serde::{Deserialize, Serialize};

/// Correspondence probe settings. Without explicit images, each of the
/// first `pairs` corpus images is matched against its own shifted copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrespondenceSettings {
    pub grid: usize,
    pub threshold: f64,
    pub pairs: usize,
    /// Shift in grid cells, `(rows, cols)`.
    pub shift: (isize, isize),
    pub noise_std: f64,
    pub image_a: Option<PathBuf>,
    pub image_b: Option<PathBuf>,
}

impl Default for CorrespondenceSettings {
    fn default() -> Self {
        Self {
            grid: 8,
            threshold: 0.8,
            pairs: 5,
            shift: (0, 1),
            noise_std: 0.02,
            image_a: None,
            image_b: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    /// Side of the landmark-centered patch.
    pub patch_px: usize,
    /// Probe only the first N corpus images; all when absent.
    pub max_images: Option<usize>,
    pub shots: Vec<usize>,
    pub linear: LinearProbeConfig,
    pub compositionality: CompositionalityConfig,
    pub correspondence: CorrespondenceSettings,
    pub multires_levels: Vec<usize>,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            patch_px: 16,
            max_images: None,
            shots: vec![3, 6, 12, 24],
            linear: LinearProbeConfig::default(),
            compositionality: CompositionalityConfig::default(),
            correspondence: CorrespondenceSettings::default(),
            multires_levels: vec![12, 16, 20],
            seed: 0,
        }
    }
}

/// Everything a command needs, with every default spelled out.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub probes: ProbeSettings,
    /// Corpus manifest consumed by `pretrain` and `probe`.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// FNV-1a over the serialized corpus config; names cache entries.
pub fn synth_cache_key(cfg: &SynthConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("corpus-{h:016x}")
}
