//! Experiment configuration and command-level entry points.
//!
//! The configuration file is TOML with strict parsing: unknown keys are
//! fatal, so a misspelled hyperparameter never silently falls back to a
//! default. Omitted training fields fill in with the reference defaults
//! (batch size 4, Adam 0.5/0.999, learning rate 2e-4, lambda_rec 100, and a
//! `200 * N`-epoch schedule).
//!
//! Overrides are dotted-path `key=value` pairs (`--train.total_epochs=4`);
//! precedence is flag > file > default. Each training run writes a resolved
//! snapshot (`config.resolved.toml`) that reproduces the run byte-for-byte
//! when fed back in deterministic mode.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineSpec, BaselineVariant, CganMcdConfig, ProbeConfig};
use crate::data::{self, mnist, toy, AugmentSpec, DomainDataset};
use crate::domain::{DomainRegistry, LabelVector};
use crate::error::{Error, Result};
use crate::infer;
use crate::losses::DecAdvMode;
use crate::networks;
use crate::report::{self, LossColumn, ParamReportEntry};
use crate::train::{self, LossMode, RunResult, TrainConfig, Trainer};

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrySection {
    pub domains: Vec<String>,
    pub pairs: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Root directory holding one folder per registered domain. The
    /// `CERFGAN_DATA_ROOT` environment variable supplies a default.
    pub root: Option<PathBuf>,
    pub crop: Option<usize>,
    pub jitter: Option<usize>,
    pub mirror_prob: f64,
    pub cache: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { root: None, crop: None, jitter: None, mirror_prob: 0.5, cache: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub resolution: usize,
    pub batch_size: usize,
    /// Defaults to `200 * N`.
    pub total_epochs: Option<usize>,
    pub iters_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub lambda_rec: f64,
    pub seed: u64,
    pub checkpoint_every_epochs: usize,
    pub check_freeze: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            resolution: 128,
            batch_size: 4,
            total_epochs: None,
            iters_per_epoch: None,
            base_lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_rec: 100.0,
            seed: 0,
            checkpoint_every_epochs: 50,
            check_freeze: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantSection {
    pub loss_mode: LossMode,
    pub adv_mode: DecAdvMode,
    pub depth: usize,
    pub base_channels: usize,
    /// Defaults to `depth - 1` (every concatenation kept).
    pub skip_depth: Option<usize>,
    pub n_critic: usize,
    pub lambda_gp: f64,
}

impl Default for VariantSection {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::Standard,
            adv_mode: DecAdvMode::NonSaturating,
            depth: 6,
            base_channels: 64,
            skip_depth: None,
            n_critic: 5,
            lambda_gp: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub sample_grids: bool,
    pub grid_sources: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: None, sample_grids: true, grid_sources: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub channel_mult: f64,
    pub resblocks: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { lambda_cls: 10.0, lambda_rec: 10.0, channel_mult: 0.5, resblocks: 6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnistSection {
    /// Directory with the standard IDX files. Errors when absent unless
    /// `synthesize` is set.
    pub data_dir: Option<PathBuf>,
    /// Generate a procedural digit corpus in the artifact directory when no
    /// data_dir is given.
    pub synthesize: bool,
    pub synth_train: usize,
    pub synth_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub grid_cols: usize,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    pub fidelity_draws: usize,
    pub seed: u64,
}

impl Default for MnistSection {
    fn default() -> Self {
        Self {
            data_dir: None,
            synthesize: false,
            synth_train: 12_000,
            synth_test: 2_000,
            epochs: 20,
            batch_size: 64,
            z_dim: 100,
            hidden: 256,
            lr: 2e-4,
            grid_cols: 10,
            classifier_epochs: 3,
            classifier_batch: 64,
            classifier_lr: 1e-3,
            fidelity_draws: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub n_pairs: usize,
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_cls_grid: Vec<f64>,
    pub lambda_rec: f64,
    pub channel_mult: f64,
    pub resblocks: usize,
    pub eval_count: usize,
    pub cerfgan_iters: usize,
    pub stability_seeds: Vec<u64>,
    pub stability_iters: usize,
    pub include_stargan_mcd: bool,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            n_pairs: 160,
            iters: 600,
            batch_size: 4,
            lr: 2e-4,
            lambda_cls_grid: vec![0.0, 10.0],
            lambda_rec: 10.0,
            channel_mult: 0.25,
            resblocks: 6,
            eval_count: 24,
            cerfgan_iters: 600,
            stability_seeds: vec![11, 12, 13],
            stability_iters: 250,
            include_stargan_mcd: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkipSweepSection {
    pub skip_depths: Vec<usize>,
    pub iters: usize,
    pub grid_sources: usize,
}

impl Default for SkipSweepSection {
    fn default() -> Self {
        Self { skip_depths: vec![1, 3, 5], iters: 200, grid_sources: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub registry: RegistrySection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub variant: VariantSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub mnist: MnistSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub skip_sweep: SkipSweepSection,
}

impl ExperimentConfig {
    pub fn registry(&self) -> Result<DomainRegistry> {
        DomainRegistry::new(
            self.registry.domains.clone(),
            self.registry.pairs.iter().map(|p| (p[0], p[1])).collect(),
        )
    }

    pub fn train_config(&self, registry: &DomainRegistry) -> Result<TrainConfig> {
        let depth = self.variant.depth;
        let cfg = TrainConfig {
            resolution: self.train.resolution,
            batch_size: self.train.batch_size,
            total_epochs: self.train.total_epochs.unwrap_or(200 * registry.n()),
            iters_per_epoch: self.train.iters_per_epoch,
            base_lr: self.train.base_lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            lambda_rec: self.train.lambda_rec,
            loss_mode: self.variant.loss_mode,
            adv_mode: self.variant.adv_mode,
            depth,
            base_channels: self.variant.base_channels,
            skip_depth: self.variant.skip_depth.unwrap_or(depth - 1),
            seed: self.train.seed,
            checkpoint_every_epochs: self.train.checkpoint_every_epochs,
            check_freeze: self.train.check_freeze,
            n_critic: self.variant.n_critic,
            lambda_gp: self.variant.lambda_gp,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment_spec(&self) -> Result<AugmentSpec> {
        let crop = self.data.crop.unwrap_or(self.train.resolution);
        let jitter = self.data.jitter.unwrap_or((crop * 143 + 64) / 128);
        let spec = AugmentSpec { crop, jitter, mirror_prob: self.data.mirror_prob };
        spec.validate()?;
        Ok(spec)
    }

    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(root) = &self.data.root {
            return Ok(root.clone());
        }
        if let Ok(env) = std::env::var("CERFGAN_DATA_ROOT") {
            return Ok(PathBuf::from(env));
        }
        Err(Error::Config(
            "no data root configured: set [data].root or CERFGAN_DATA_ROOT".into(),
        ))
    }

    /// Load one dataset per registered domain from `<root>/<name>/`.
    pub fn load_datasets(&self, registry: &DomainRegistry) -> Result<Vec<DomainDataset>> {
        let root = self.data_root()?;
        let mut datasets = Vec::with_capacity(registry.n());
        for (idx, name) in registry.names().iter().enumerate() {
            let mut ds = data::scan_domain_folder(&root.join(name), idx)?;
            if self.data.cache {
                ds.load_cache()?;
            }
            datasets.push(ds);
        }
        Ok(datasets)
    }

    /// Fill optional fields with their resolved values so the snapshot is
    /// self-contained.
    pub fn resolved(&self, registry: &DomainRegistry, run_dir: &Path) -> Result<Self> {
        let mut out = self.clone();
        let tc = self.train_config(registry)?;
        let aug = self.augment_spec()?;
        out.train.total_epochs = Some(tc.total_epochs);
        out.variant.skip_depth = Some(tc.skip_depth);
        out.data.crop = Some(aug.crop);
        out.data.jitter = Some(aug.jitter);
        out.data.root = Some(self.data_root()?);
        out.output.dir = Some(run_dir.to_path_buf());
        Ok(out)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Loading and overrides
// ---------------------------------------------------------------------------

/// Parse a dotted-path override like `train.total_epochs=4` (an optional
/// leading `--` is stripped). The value is parsed as TOML when possible and
/// falls back to a string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let spec = spec.strip_prefix("--").unwrap_or(spec);
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override '{}' is not of the form key.path=value", spec))
    })?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {}", raw)) {
        Ok(table) => table["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override path '{}' is malformed", path)));
    }
    let mut cursor = root;
    for key in &keys[..keys.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{}' crosses a non-table", path)))?;
        cursor = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path '{}' crosses a non-table", path)))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Parse a config from TOML text, apply overrides, then deserialize strictly
/// (unknown keys anywhere are fatal).
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value: toml::Value = toml::from_str(text)
        .map_err(|e| Error::Config(format!("config parse error: {}", e)))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    value
        .try_into()
        .map_err(|e| Error::Config(format!("config error: {}", e)))
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
    parse_config(&text, overrides)
}

fn default_run_dir(config_path: &Path, suffix: &str) -> PathBuf {
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
    PathBuf::from("runs").join(format!("{}{}", stem, suffix))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Prepare an evaluation image at the training resolution (resize shorter
/// side, center crop).
fn eval_image(img: &RgbImage, resolution: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let shorter = w.min(h).max(1);
    let scale = resolution as f64 / shorter as f64;
    let resized = if (w, h) == (resolution as u32, resolution as u32) {
        img.clone()
    } else {
        image::imageops::resize(
            img,
            ((w as f64 * scale).round() as u32).max(resolution as u32),
            ((h as f64 * scale).round() as u32).max(resolution as u32),
            image::imageops::FilterType::Triangle,
        )
    };
    let x0 = (resized.width() - resolution as u32) / 2;
    let y0 = (resized.height() - resolution as u32) / 2;
    image::imageops::crop_imm(&resized, x0, y0, resolution as u32, resolution as u32).to_image()
}

fn checkpoint_grid(
    trainer: &Trainer,
    datasets: &[DomainDataset],
    registry: &DomainRegistry,
    resolution: usize,
    grid_sources: usize,
) -> Result<RgbImage> {
    let sources: Vec<RgbImage> = (0..grid_sources.min(datasets[0].len()))
        .map(|i| datasets[0].image(i).map(|img| eval_image(&img, resolution)))
        .collect::<Result<_>>()?;
    let mut captions = vec!["input".to_string()];
    captions.extend(registry.names().iter().cloned());
    let mut cells = Vec::new();
    for src in &sources {
        let mut row = vec![src.clone()];
        let x = {
            let t = data::normalize_rgb(src);
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            t.into_shape((1, c, h, w)).expect("contiguous").to_owned()
        };
        for target in 0..registry.n() {
            let label = LabelVector::one_hot(target, registry.n())?;
            let y = networks::translate(&trainer.mcd, &trainer.decoder, &x, &label)?;
            row.push(data::denormalize_rgb(&y.index_axis(ndarray::Axis(0), 0)));
        }
        cells.push(row);
    }
    infer::compose_grid(&cells, &captions)
}

/// `train`: run a full training from a config file. Returns the run
/// directory and result.
pub fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<RunResult> {
    let cfg = load_config(config_path, overrides)?;
    let registry = cfg.registry()?;
    let train_cfg = cfg.train_config(&registry)?;
    let augment = cfg.augment_spec()?;
    let datasets = cfg.load_datasets(&registry)?;
    let run_dir =
        cfg.output.dir.clone().unwrap_or_else(|| default_run_dir(config_path, ""));
    std::fs::create_dir_all(&run_dir)?;
    let resolved = cfg.resolved(&registry, &run_dir)?;
    std::fs::write(run_dir.join("config.resolved.toml"), resolved.to_toml())?;
    let sample_grids = cfg.output.sample_grids;
    let grid_sources = cfg.output.grid_sources.max(1);
    let resolution = train_cfg.resolution;
    let registry_for_grid = registry.clone();
    let datasets_ref = &datasets;
    let mut on_checkpoint = |blob: &Path, trainer: &Trainer| -> Result<()> {
        if sample_grids {
            let grid = checkpoint_grid(
                trainer,
                datasets_ref,
                &registry_for_grid,
                resolution,
                grid_sources,
            )?;
            let stem = blob.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            grid.save(blob.with_file_name(format!("{}_grid.png", stem)))?;
        }
        Ok(())
    };
    train::run_training(
        &train_cfg,
        &registry,
        &datasets,
        &augment,
        &run_dir,
        Some(&mut on_checkpoint),
    )
}

/// `translate`: file-level translation through a checkpoint.
pub fn cmd_translate(
    checkpoint: &Path,
    inputs: &[PathBuf],
    target: &str,
    out_dir: &Path,
    highres: bool,
) -> Result<Vec<PathBuf>> {
    let model = infer::load_cerfgan_checkpoint(checkpoint)?;
    infer::translate_files(&model, inputs, target, out_dir, highres)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    MnistCganMcd,
    StarganProbe,
    SkipDepth,
}

impl AblationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist-cgan-mcd" => Ok(Self::MnistCganMcd),
            "stargan-probe" => Ok(Self::StarganProbe),
            "skip-depth" => Ok(Self::SkipDepth),
            other => Err(Error::Config(format!(
                "unknown ablation kind '{}' (expected mnist-cgan-mcd, stargan-probe, or skip-depth)",
                other
            ))),
        }
    }
}

/// Results of the digit-GAN ablation.
#[derive(Debug)]
pub struct MnistAblationResult {
    pub dir: PathBuf,
    pub classifier_accuracy: f64,
    pub fidelity: f64,
}

pub fn run_mnist_ablation(cfg: &ExperimentConfig, dir: &Path) -> Result<MnistAblationResult> {
    std::fs::create_dir_all(dir)?;
    let m = &cfg.mnist;
    let (train_ds, test_ds) = match &m.data_dir {
        Some(d) => mnist::load_idx_dir(d)?,
        None if m.synthesize => {
            let mut rng = ChaCha12Rng::seed_from_u64(m.seed.wrapping_add(1));
            let train_ds = mnist::generate_digit_corpus(m.synth_train, &mut rng);
            let test_ds = mnist::generate_digit_corpus(m.synth_test, &mut rng);
            mnist::write_idx_dir(&dir.join("data"), &train_ds, &test_ds)?;
            (train_ds, test_ds)
        }
        None => {
            return Err(Error::Data(
                "digit dataset missing: set [mnist].data_dir or [mnist].synthesize = true".into(),
            ))
        }
    };
    let oracle = baselines::train_digit_classifier(
        &train_ds,
        m.classifier_epochs,
        m.classifier_batch,
        m.classifier_lr,
        m.seed,
    )?;
    let accuracy = oracle.accuracy(&test_ds);
    let gan_cfg = CganMcdConfig {
        epochs: m.epochs,
        batch_size: m.batch_size,
        z_dim: m.z_dim,
        hidden: m.hidden,
        lr: m.lr,
        seed: m.seed,
    };
    let art = baselines::train_cgan_mcd(&train_ds, &gan_cfg)?;
    let grid = baselines::cgan_sample_grid(
        &art.generator,
        cfg.mnist.grid_cols,
        (train_ds.rows, train_ds.cols),
        m.seed,
    );
    grid.save(dir.join("grid.png"))?;
    let (fidelity, per_class) =
        baselines::conditional_fidelity(&art.generator, &oracle, m.fidelity_draws, m.seed + 7);
    let mut metrics = String::new();
    metrics.push_str(&format!("classifier_accuracy: {:.4}\n", accuracy));
    metrics.push_str(&format!("conditional_fidelity: {:.4}\n", fidelity));
    metrics.push_str(&format!("fidelity_draws: {}\n", m.fidelity_draws));
    for (c, hits) in per_class.iter().enumerate() {
        metrics.push_str(&format!(
            "class_{}_hits: {}/{}\n",
            c,
            hits,
            m.fidelity_draws / 10
        ));
    }
    std::fs::write(dir.join("metrics.txt"), metrics)?;
    Ok(MnistAblationResult { dir: dir.to_path_buf(), classifier_accuracy: accuracy, fidelity })
}

pub fn run_probe_ablation(cfg: &ExperimentConfig, dir: &Path) -> Result<baselines::ProbeReport> {
    std::fs::create_dir_all(dir)?;
    let p = &cfg.probe;
    let resolution = cfg.train.resolution;
    if resolution % 64 != 0 {
        return Err(Error::Config(format!(
            "probe resolution {} must be a multiple of 64 for the baseline discriminator",
            resolution
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(p.seed.wrapping_add(42));
    let pairs = toy::make_toy_translation_dataset(
        toy::ToyKind::ColorInversion,
        p.n_pairs,
        resolution as u32,
        &mut rng,
    )?;
    let names = toy::ToyKind::ColorInversion.domain_names();
    let registry =
        DomainRegistry::new(vec![names.0.into(), names.1.into()], vec![(0, 1)])?;
    let mut cerf_cfg = cfg.train_config(&registry)?;
    cerf_cfg.total_epochs = 1;
    cerf_cfg.iters_per_epoch = Some(p.cerfgan_iters);
    cerf_cfg.seed = p.seed;
    cerf_cfg.checkpoint_every_epochs = 1;
    let probe_cfg = ProbeConfig {
        resolution,
        lambda_cls_grid: p.lambda_cls_grid.clone(),
        lambda_rec: p.lambda_rec,
        channel_mult: p.channel_mult,
        resblocks: p.resblocks,
        iters: p.iters,
        batch_size: p.batch_size,
        lr: p.lr,
        seed: p.seed,
        eval_count: p.eval_count,
        cerfgan: cerf_cfg,
        stability_seeds: p.stability_seeds.clone(),
        stability_iters: p.stability_iters,
        include_stargan_mcd: p.include_stargan_mcd,
    };
    baselines::run_stargan_failure_probe(&pairs, names, &probe_cfg, dir)
}

pub fn run_skip_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let registry = cfg.registry()?;
    let augment = cfg.augment_spec()?;
    let datasets = cfg.load_datasets(&registry)?;
    let mut grids = Vec::new();
    for &s in &cfg.skip_sweep.skip_depths {
        let mut train_cfg = cfg.train_config(&registry)?;
        train_cfg.skip_depth = s;
        train_cfg.total_epochs = 1;
        train_cfg.iters_per_epoch = Some(cfg.skip_sweep.iters);
        train_cfg.checkpoint_every_epochs = 1;
        let run_dir = dir.join(format!("skip{}", s));
        let result =
            train::run_training(&train_cfg, &registry, &datasets, &augment, &run_dir, None)?;
        let ckpt = result
            .checkpoints
            .last()
            .ok_or_else(|| Error::Training("sweep run produced no checkpoint".into()))?;
        let model = infer::load_cerfgan_checkpoint(ckpt)?;
        let sources: Vec<RgbImage> = (0..cfg.skip_sweep.grid_sources.min(datasets[0].len()))
            .map(|i| datasets[0].image(i).map(|img| eval_image(&img, train_cfg.resolution)))
            .collect::<Result<_>>()?;
        let grid = infer::sample_grid(&model, &sources, &registry.names().to_vec())?;
        let path = dir.join(format!("skip{}_grid.png", s));
        grid.save(&path)?;
        grids.push(path);
    }
    Ok(grids)
}

/// `ablate`: run one of the ablation suites; returns the artifact directory.
pub fn cmd_ablate(kind: &str, config_path: &Path, overrides: &[String]) -> Result<PathBuf> {
    let kind = AblationKind::parse(kind)?;
    let cfg = load_config(config_path, overrides)?;
    let suffix = match kind {
        AblationKind::MnistCganMcd => "-mnist-cgan-mcd",
        AblationKind::StarganProbe => "-stargan-probe",
        AblationKind::SkipDepth => "-skip-depth",
    };
    let dir = cfg
        .output
        .dir
        .clone()
        .unwrap_or_else(|| default_run_dir(config_path, suffix));
    match kind {
        AblationKind::MnistCganMcd => {
            run_mnist_ablation(&cfg, &dir)?;
        }
        AblationKind::StarganProbe => {
            run_probe_ablation(&cfg, &dir)?;
        }
        AblationKind::SkipDepth => {
            run_skip_sweep(&cfg, &dir)?;
        }
    }
    Ok(dir)
}

/// `report`: parameter tables and/or stability analytics over run
/// directories. Returns the written report files.
pub fn cmd_report(
    run_dirs: &[PathBuf],
    params: bool,
    stability: bool,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::Config("at least one run directory required".into()));
    }
    if !params && !stability {
        return Err(Error::Config("nothing to report: pass --params and/or --stability".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    if stability {
        let mut logs = Vec::new();
        for dir in run_dirs {
            let log = dir.join("metrics.csv");
            if !log.exists() {
                return Err(Error::Data(format!("missing metric log {}", log.display())));
            }
            logs.push(log);
        }
        for (column, stem) in
            [(LossColumn::McdLoss, "stability_mcd"), (LossColumn::Total, "stability_decoder")]
        {
            let (_, csv, png) =
                report::analyze_stability(&logs, column, 10.0, &out_dir.join(stem))?;
            written.push(csv);
            written.push(png);
        }
    }
    if params {
        let mut entries = Vec::new();
        for dir in run_dirs {
            if let Some(ckpt) = latest_checkpoint(dir)? {
                let mut model = infer::load_cerfgan_checkpoint(&ckpt)?;
                entries.push(ParamReportEntry {
                    name: format!(
                        "cerfgan[{}]",
                        dir.file_name().and_then(|s| s.to_str()).unwrap_or("run")
                    ),
                    parts: vec![
                        ("mcd".into(), crate::nn::param_count(&mut model.mcd)),
                        ("decoder".into(), crate::nn::param_count(&mut model.decoder)),
                    ],
                });
            }
        }
        entries.extend(full_scale_reference_entries()?);
        let text = report::report_parameters(&entries);
        let path = out_dir.join("parameters.txt");
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

/// The reference comparison at full scale: CerfGAN and StarGAN at N=16,
/// 128x128.
pub fn full_scale_reference_entries() -> Result<Vec<ParamReportEntry>> {
    let names: Vec<String> = (0..16).map(|i| format!("domain{:02}", i)).collect();
    let registry = DomainRegistry::new(names, vec![(0, 1)])?;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut mcd = networks::Mcd::new(networks::McdConfig::paper_128(16), &mut rng);
    let mut dec = networks::Decoder::new(networks::DecoderConfig::paper_128(5), &mut rng);
    let spec = BaselineSpec {
        variant: BaselineVariant::Stargan,
        lambda_cls: 10.0,
        lambda_rec: 10.0,
        channel_mult: 1.0,
        resblocks: 6,
    };
    let (mut g, mut d) = baselines::build_stargan(&registry, 128, &spec, &mut rng)?;
    Ok(vec![
        ParamReportEntry {
            name: "cerfgan-n16-full".into(),
            parts: vec![
                ("mcd".into(), crate::nn::param_count(&mut mcd)),
                ("decoder".into(), crate::nn::param_count(&mut dec)),
            ],
        },
        ParamReportEntry {
            name: "stargan-n16-full".into(),
            parts: vec![
                ("generator".into(), crate::nn::param_count(&mut g)),
                ("discriminator".into(), crate::nn::param_count(&mut d)),
            ],
        },
    ])
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<PathBuf> = None;
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if name.starts_with("checkpoint_") && name.ends_with(".bin") {
            if best.as_ref().map(|b| name > b.file_name().unwrap().to_str().unwrap()).unwrap_or(true)
            {
                best = Some(path);
            }
        }
    }
    Ok(best)
}

/// `make-toy`: generate a toy translation corpus in the folder layout the
/// trainer consumes.
pub fn cmd_make_toy(kind: &str, n: usize, size: u32, seed: u64, out: &Path) -> Result<(String, String)> {
    let kind = toy::ToyKind::parse(kind)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let pairs = toy::make_toy_translation_dataset(kind, n, size, &mut rng)?;
    toy::write_toy_dataset(kind, &pairs, out)?;
    let (a, b) = kind.domain_names();
    Ok((a.to_string(), b.to_string()))
}
