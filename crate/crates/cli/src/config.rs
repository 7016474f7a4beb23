//! Run configuration: a sectioned TOML file with documented defaults.
//! Command-line flags override file values; every path below is resolved
//! against `output_dir`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use infomap_core::data::DatasetConfig;
use infomap_core::nn::EncoderConfig;
use infomap_core::probe::ProbeConfig;
use infomap_core::protonet::ProtonetConfig;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its streams from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub protonet: ProtonetSection,
    pub milr: MilrSection,
    pub viz: VizSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            output_dir: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            encoder: EncoderSection::default(),
            protonet: ProtonetSection::default(),
            milr: MilrSection::default(),
            viz: VizSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise_level: f64,
    /// Dataset file, produced by `synth-data` and read by the training
    /// commands.
    pub file: PathBuf,
    /// When set, `synth-data` ingests this `class_name/*.png` folder
    /// instead of generating synthetic samples.
    pub image_folder: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        DatasetSection {
            n_classes: d.n_classes,
            samples_per_class: d.samples_per_class,
            image_size: d.image_size,
            noise_level: d.noise_level,
            file: PathBuf::from("dataset.bin"),
            image_folder: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub input_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub tap_index: usize,
    pub repr_dim: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncoderSection {
            input_channels: e.input_channels,
            input_size: e.input_size,
            stem_channels: e.stem_channels,
            block_channels: e.block_channels,
            tap_index: e.tap_index,
            repr_dim: e.repr_dim,
            checkpoint: PathBuf::from("encoder.ckpt"),
            log: PathBuf::from("backbone_log.csv"),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtonetSection {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub lr: f64,
}

impl Default for ProtonetSection {
    fn default() -> Self {
        let p = ProtonetConfig::default();
        ProtonetSection { episodes: p.episodes, n_way: p.n_way, k_shot: p.k_shot, n_query: p.n_query, lr: p.lr }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilrSection {
    pub alpha_weight: f64,
    pub beta_weight: f64,
    pub episodes: usize,
    pub lr: f64,
    pub score_dim: usize,
    pub bottleneck_dim: usize,
    pub critic_hidden: usize,
    pub mask_hidden: usize,
    pub nll_weight: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl Default for MilrSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        MilrSection {
            alpha_weight: p.alpha_weight,
            beta_weight: p.beta_weight,
            episodes: p.episodes,
            lr: p.lr,
            score_dim: p.score_dim,
            bottleneck_dim: p.bottleneck_dim,
            critic_hidden: p.critic_hidden,
            mask_hidden: p.mask_hidden,
            nll_weight: p.nll_weight,
            checkpoint: PathBuf::from("probe.ckpt"),
            log: PathBuf::from("milr_log.csv"),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizSection {
    /// Heat/original blend weight.
    pub lambda: f64,
    /// Contrast batches averaged into each total-information map.
    pub contrast_batches: usize,
    /// Samples per contrast batch (including the explained one).
    pub contrast_size: usize,
    /// Run directory name under `output_dir`; defaults to `run-<seed>`.
    pub run_id: Option<String>,
}

impl Default for VizSection {
    fn default() -> Self {
        VizSection { lambda: 0.5, contrast_batches: 8, contrast_size: 16, run_id: None }
    }
}

impl RunConfig {
    /// Read a TOML config file; a missing file is an error naming the
    /// path.
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("cannot parse config file {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.encoder.input_size != self.dataset.image_size {
            bail!(
                "encoder input size {} must match dataset image size {}",
                self.encoder.input_size,
                self.dataset.image_size
            );
        }
        if !(0.0..=1.0).contains(&self.viz.lambda) {
            bail!("viz.lambda {} outside [0,1]", self.viz.lambda);
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n_classes: self.dataset.n_classes,
            samples_per_class: self.dataset.samples_per_class,
            image_size: self.dataset.image_size,
            noise_level: self.dataset.noise_level,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_channels: self.encoder.input_channels,
            input_size: self.encoder.input_size,
            stem_channels: self.encoder.stem_channels,
            block_channels: self.encoder.block_channels.clone(),
            tap_index: self.encoder.tap_index,
            repr_dim: self.encoder.repr_dim,
        }
    }

    pub fn protonet_config(&self) -> ProtonetConfig {
        ProtonetConfig {
            episodes: self.protonet.episodes,
            n_way: self.protonet.n_way,
            k_shot: self.protonet.k_shot,
            n_query: self.protonet.n_query,
            lr: self.protonet.lr,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            score_dim: self.milr.score_dim,
            bottleneck_dim: self.milr.bottleneck_dim,
            critic_hidden: self.milr.critic_hidden,
            mask_hidden: self.milr.mask_hidden,
            alpha_weight: self.milr.alpha_weight,
            beta_weight: self.milr.beta_weight,
            episodes: self.milr.episodes,
            lr: self.milr.lr,
            nll_weight: self.milr.nll_weight,
        }
    }

    pub fn run_id(&self) -> String {
        self.viz.run_id.clone().unwrap_or_else(|| format!("run-{}", self.seed))
    }

    /// Resolve a configured path against the output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_dir.join(p)
        }
    }
}
