//! The five pipeline commands. Each one writes its artifacts plus a
//! manifest (config copy, seed, version, artifact list) into the output
//! directory and returns the paths it produced.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use infomap_core::data::{generate_dataset, load_dataset, load_image_folder, sample_episode, save_dataset, Dataset};
use infomap_core::estimators::{analytic_gaussian_mi, train_critic_on_pairs, CalibrationConfig};
use infomap_core::nn::{Encoder, FrozenEncoder};
use infomap_core::probe::{
    decision_information_map, redundancy_map, stage1_collect, total_information_map, train_milr, ContrastConfig,
    MaskMode, MilrStat, ProbeState,
};
use infomap_core::protonet::{train_protonet, training_log_csv, EpisodeStat};
use infomap_core::viz::{render_sample, write_maps_csv};

use crate::config::RunConfig;

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn write_manifest(cfg: &RunConfig, command: &str, artifacts: &[PathBuf]) -> anyhow::Result<PathBuf> {
    let path = cfg.output_dir.join(format!("manifest-{command}.txt"));
    let mut text = String::new();
    text.push_str(&format!("command: {command}\nversion: {VERSION}\nseed: {}\n", cfg.seed));
    text.push_str("artifacts:\n");
    for a in artifacts {
        text.push_str(&format!("  {}\n", a.display()));
    }
    text.push_str("config:\n");
    let toml = toml::to_string_pretty(cfg).context("serializing config for manifest")?;
    for line in toml.lines() {
        text.push_str(&format!("  {line}\n"));
    }
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Generate (or ingest) the dataset and persist it.
pub fn cmd_synth_data(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dataset = match &cfg.dataset.image_folder {
        Some(folder) => load_image_folder(folder, cfg.dataset.image_size)?,
        None => generate_dataset(&cfg.dataset_config(), cfg.seed)?,
    };
    let path = cfg.resolve(&cfg.dataset.file);
    save_dataset(&dataset, &path)?;
    let manifest = write_manifest(cfg, "synth-data", std::slice::from_ref(&path))?;
    Ok(vec![path, manifest])
}

fn load_dataset_for(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let path = cfg.resolve(&cfg.dataset.file);
    if !path.exists() {
        bail!("dataset file {} not found; run `synth-data` first", path.display());
    }
    Ok(load_dataset(&path)?)
}

/// Episodic training of the prototype classifier; persists the checkpoint
/// and per-episode log.
pub fn cmd_train_backbone(cfg: &RunConfig) -> anyhow::Result<(Vec<PathBuf>, Vec<EpisodeStat>)> {
    cfg.validate()?;
    let dataset = load_dataset_for(cfg)?;
    let (encoder, stats) = train_protonet(&dataset, &cfg.encoder_config(), &cfg.protonet_config(), cfg.seed)?;
    let ckpt = cfg.resolve(&cfg.encoder.checkpoint);
    encoder.save(&ckpt)?;
    let log = cfg.resolve(&cfg.encoder.log);
    write_text(&log, &training_log_csv(&stats))?;
    let manifest = write_manifest(cfg, "train-backbone", &[ckpt.clone(), log.clone()])?;
    Ok((vec![ckpt, log, manifest], stats))
}

/// Attach the probe to the frozen backbone and train it against the
/// stage-1 cache.
pub fn cmd_train_milr(cfg: &RunConfig, mask_mode: MaskMode) -> anyhow::Result<(Vec<PathBuf>, Vec<MilrStat>)> {
    cfg.validate()?;
    let dataset = load_dataset_for(cfg)?;
    let enc_path = cfg.resolve(&cfg.encoder.checkpoint);
    if !enc_path.exists() {
        bail!("encoder checkpoint {} not found; run `train-backbone` first", enc_path.display());
    }
    let frozen = Encoder::load(&enc_path)?.freeze();
    let cache = stage1_collect(&frozen, &dataset)?;
    let (state, stats) = train_milr(
        &dataset,
        &frozen,
        &cache,
        &cfg.probe_config(),
        &cfg.protonet_config(),
        cfg.seed,
        mask_mode,
    )?;
    let ckpt = cfg.resolve(&cfg.milr.checkpoint);
    state.save(&ckpt)?;
    let log = cfg.resolve(&cfg.milr.log);
    write_text(&log, &infomap_core::probe::milr_log_csv(&stats))?;
    let manifest = write_manifest(cfg, "train-milr", &[ckpt.clone(), log.clone()])?;
    Ok((vec![ckpt, log, manifest], stats))
}

/// Sample one episode, compute the three maps for every sample in it, and
/// render heatmaps plus `maps.csv` under `out/<run_id>/`.
pub fn cmd_explain(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dataset = load_dataset_for(cfg)?;
    let enc_path = cfg.resolve(&cfg.encoder.checkpoint);
    let probe_path = cfg.resolve(&cfg.milr.checkpoint);
    for (p, cmd) in [(&enc_path, "train-backbone"), (&probe_path, "train-milr")] {
        if !p.exists() {
            bail!("checkpoint {} not found; run `{cmd}` first", p.display());
        }
    }
    let frozen = FrozenEncoder::load(&enc_path)?;
    let state = ProbeState::load(&probe_path)?;
    let cache = stage1_collect(&frozen, &dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6578706c61696e);
    let episode = sample_episode(
        &dataset,
        cfg.protonet.n_way,
        cfg.protonet.k_shot,
        cfg.protonet.n_query,
        &mut rng,
    )?;
    let run_dir = cfg.output_dir.join(cfg.run_id());
    let contrast = ContrastConfig {
        batches: cfg.viz.contrast_batches,
        size: cfg.viz.contrast_size.min(cache.len()),
        seed: cfg.seed,
    };
    let mut artifacts = Vec::new();
    let mut all_maps = Vec::new();
    for id in episode.all_ids() {
        let total = total_information_map(&state, &cache, id, &contrast)?;
        let decision = decision_information_map(&state, &cache, id)?;
        let redundant = redundancy_map(&total, &decision)?;
        let dir = run_dir.join(id.to_string());
        let files = render_sample(&dir, &dataset.samples[id].image, &total, &decision, &redundant, cfg.viz.lambda)?;
        artifacts.extend(files);
        all_maps.extend([total, decision, redundant]);
    }
    let csv_path = run_dir.join("maps.csv");
    write_maps_csv(&csv_path, &all_maps)?;
    artifacts.push(csv_path);
    let manifest = write_manifest(cfg, "explain", &artifacts)?;
    artifacts.push(manifest);
    Ok(artifacts)
}

/// Train the contrastive critic against the Gaussian pair oracle for each
/// correlation and emit `rho, analytic MI, estimated bound, steps` rows.
pub fn cmd_calibrate(cfg: &RunConfig, rhos: &[f64], steps: usize, batch: usize) -> anyhow::Result<Vec<PathBuf>> {
    let cal = CalibrationConfig { steps, batch, ..CalibrationConfig::default() };
    let mut csv = String::from("rho,analytic_mi,estimated_bound,steps\n");
    for &rho in rhos {
        let (_, bound) = train_critic_on_pairs(rho, &cal, cfg.seed)?;
        csv.push_str(&format!("{},{},{},{}\n", rho, analytic_gaussian_mi(rho), bound, steps));
    }
    let path = cfg.output_dir.join("calibration.csv");
    write_text(&path, &csv)?;
    let manifest = write_manifest(cfg, "calibrate", std::slice::from_ref(&path))?;
    Ok(vec![path, manifest])
}
