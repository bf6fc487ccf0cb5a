//! The alternating two-phase training loop.
//!
//! Each iteration samples a directed translation task (target domain `i`,
//! source domain `k`), trains the MCD for one step with the decoder frozen,
//! then trains the decoder for one step with the MCD frozen. Exactly one of
//! the two networks receives gradient updates in any single step; in
//! checked mode this is asserted every step by hashing the frozen network's
//! full state (parameters and normalization statistics) before and after.
//!
//! Normalization modes during training:
//! - the network being optimized runs on batch statistics and updates its
//!   running statistics;
//! - a frozen MCD runs on running statistics, so the decoder's input
//!   distribution does not shift within a decoder update;
//! - a frozen decoder generates fakes from batch statistics without updating
//!   anything, which keeps its state bit-identical while behaving like the
//!   generator the decoder step will train.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{self, Manifest};
use crate::data::{load_batch, AugmentSpec, DomainDataset};
use crate::domain::{pad_label_to_block, tile_label_block, DomainRegistry, LabelVector};
use crate::error::{Error, Result};
use crate::losses::{self, DecAdvMode, LossReport};
use crate::networks::{Decoder, DecoderConfig, Mcd, McdConfig};
use crate::nn::{self, Adam, NormMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Standard,
    WganGp,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossMode::Standard => write!(f, "standard"),
            LossMode::WganGp => write!(f, "wgan-gp"),
        }
    }
}

/// All hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub resolution: usize,
    pub batch_size: usize,
    pub total_epochs: usize,
    /// One epoch defaults to `ceil(max domain size / batch_size)` iterations.
    pub iters_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub lambda_rec: f64,
    pub loss_mode: LossMode,
    pub adv_mode: DecAdvMode,
    pub depth: usize,
    pub base_channels: usize,
    pub skip_depth: usize,
    pub seed: u64,
    /// Checkpoint cadence in epochs (also fires on the final epoch).
    pub checkpoint_every_epochs: usize,
    /// Assert the freeze invariants by state hash on every step.
    pub check_freeze: bool,
    /// Critic steps per decoder step in the WGAN-GP variant.
    pub n_critic: usize,
    pub lambda_gp: f64,
}

impl TrainConfig {
    /// Reference defaults for `n` domains at 128x128; `total_epochs` follows
    /// the `200 * N` schedule.
    pub fn defaults_for(n_domains: usize) -> Self {
        Self {
            resolution: 128,
            batch_size: 4,
            total_epochs: 200 * n_domains,
            iters_per_epoch: None,
            base_lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_rec: losses::DEFAULT_LAMBDA_REC,
            loss_mode: LossMode::Standard,
            adv_mode: DecAdvMode::NonSaturating,
            depth: 6,
            base_channels: 64,
            skip_depth: 5,
            seed: 0,
            checkpoint_every_epochs: 50,
            check_freeze: true,
            n_critic: 5,
            lambda_gp: losses::DEFAULT_LAMBDA_GP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_epochs == 0 || self.checkpoint_every_epochs == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.lambda_rec < 0.0 || self.lambda_gp < 0.0 {
            return Err(Error::Config("lambda values must be non-negative".into()));
        }
        if self.resolution % (1 << self.depth) != 0 || self.resolution < (1 << (self.depth + 1)) {
            return Err(Error::Config(format!(
                "resolution {} incompatible with depth {} (must be a multiple of {} and at least {})",
                self.resolution,
                self.depth,
                1 << self.depth,
                1 << (self.depth + 1)
            )));
        }
        if self.loss_mode == LossMode::WganGp && self.n_critic == 0 {
            return Err(Error::Config("n_critic must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise learning-rate schedule: constant for the first half of training,
/// then linear to exactly 0 at `epoch == total`.
pub fn lr_schedule(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if epoch > total_epochs {
        return Err(Error::Config(format!(
            "epoch {} out of range (total {})",
            epoch, total_epochs
        )));
    }
    let half = total_epochs as f64 / 2.0;
    let e = epoch as f64;
    Ok(if e <= half {
        base_lr
    } else {
        base_lr * (total_epochs as f64 - e) / (total_epochs as f64 - half)
    })
}

/// Sample a directed task: uniform over allowed pairs, then uniform
/// direction. Returns `(target, source)`.
pub fn sample_domain_pair(registry: &DomainRegistry, rng: &mut impl Rng) -> (usize, usize) {
    let pairs = registry.pairs();
    assert!(!pairs.is_empty(), "registry invariant: at least one pair");
    let (a, b) = pairs[rng.gen_range(0..pairs.len())];
    if rng.gen_bool(0.5) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Per-domain shuffled index stream; reshuffles when exhausted.
struct IndexStream {
    order: Vec<usize>,
    pos: usize,
}

impl IndexStream {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn next_batch(&mut self, count: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.pos >= self.order.len() {
                for i in (1..self.order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    self.order.swap(i, j);
                }
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Freeze-discipline bookkeeping: how many steps were verified and how many
/// violated bit-exactness of the frozen network.
#[derive(Debug, Clone, Copy, Default)]
pub struct FreezeAudit {
    pub mcd_steps_checked: usize,
    pub decoder_steps_checked: usize,
    pub violations: usize,
}

/// One metric-log row.
#[derive(Debug, Clone, Copy)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub task_i: usize,
    pub task_k: usize,
    pub mcd_loss: f64,
    pub decoder_adv: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub lr: f64,
}

pub const METRIC_HEADER: &str =
    "step,epoch,task_i,task_k,mcd_loss,decoder_adv,reconstruction,total,lr";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.task_i,
            self.task_k,
            self.mcd_loss,
            self.decoder_adv,
            self.reconstruction,
            self.total,
            self.lr
        )
    }
}

/// The CerfGAN trainer: both networks, their separate optimizers, and the
/// seeded random streams. A single logical writer owns all mutable state.
pub struct Trainer {
    pub mcd: Mcd,
    pub decoder: Decoder,
    pub cfg: TrainConfig,
    pub registry: DomainRegistry,
    opt_mcd: Adam,
    opt_dec: Adam,
    rng_task: ChaCha12Rng,
    rng_data: ChaCha12Rng,
    rng_interp: ChaCha12Rng,
    pub audit: FreezeAudit,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, registry: DomainRegistry) -> Result<Self> {
        cfg.validate()?;
        let n = registry.n();
        let mut rng_model = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
        let mcd = Mcd::new(
            McdConfig {
                in_channels: 3,
                base_channels: cfg.base_channels,
                depth: cfg.depth,
                n_domains: n,
                with_norm: cfg.loss_mode == LossMode::Standard,
            },
            &mut rng_model,
        );
        let decoder = Decoder::new(
            DecoderConfig {
                out_channels: 3,
                base_channels: cfg.base_channels,
                depth: cfg.depth,
                skip_depth: cfg.skip_depth,
            },
            &mut rng_model,
        );
        Ok(Self {
            opt_mcd: Adam::new(cfg.beta1, cfg.beta2),
            opt_dec: Adam::new(cfg.beta1, cfg.beta2),
            rng_task: ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(101)),
            rng_data: ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(202)),
            rng_interp: ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(303)),
            mcd,
            decoder,
            cfg,
            registry,
            audit: FreezeAudit::default(),
            step: 0,
        })
    }

    fn batch_labels(&self, domain: usize, batch: usize) -> Vec<LabelVector> {
        let l = LabelVector::one_hot(domain, self.registry.n()).expect("validated index");
        vec![l; batch]
    }

    fn label_block_for(&self, domain: usize, bshape: &[usize]) -> Result<Array4<f32>> {
        let label = LabelVector::one_hot(domain, self.registry.n())?;
        let block = pad_label_to_block(&label, (bshape[1], bshape[2], bshape[3]))?;
        Ok(tile_label_block(&block, bshape[0]))
    }

    /// One MCD update: the decoder is frozen (verified bit-exactly in checked
    /// mode) and only produces the fake batch, without gradient tracking.
    pub fn train_mcd_step(
        &mut self,
        x_real_i: &Array4<f32>,
        x_src_k: &Array4<f32>,
        i: usize,
        k: usize,
        lr: f64,
    ) -> Result<f64> {
        let _ = k;
        let dec_pre = self.cfg.check_freeze.then(|| nn::state_hash(&mut self.decoder));
        nn::zero_grads(&mut self.mcd);
        let batch = x_src_k.shape()[0];
        let labels_i = self.batch_labels(i, batch);

        // Fake batch: frozen encoder (running stats), frozen decoder on batch
        // statistics without updates.
        let (feats_src, _) = self.mcd.encode(x_src_k, NormMode::Running, false)?;
        let block_i = self.label_block_for(i, feats_src.bottleneck().shape())?;
        let (fake, _) = self.decoder.decode(&feats_src, &block_i, NormMode::Batch, false)?;

        let loss = match self.cfg.loss_mode {
            LossMode::Standard => self.mcd_step_standard(x_real_i, &fake, &labels_i)?,
            LossMode::WganGp => self.mcd_step_wgan(x_real_i, &fake, &labels_i)?,
        };
        self.opt_mcd.step(&mut self.mcd, lr as f32);

        if let Some(pre) = dec_pre {
            self.audit.mcd_steps_checked += 1;
            if pre != nn::state_hash(&mut self.decoder) {
                self.audit.violations += 1;
                return Err(Error::Training(
                    "freeze violation: decoder state changed during an MCD step".into(),
                ));
            }
        }
        Ok(loss)
    }

    fn mcd_step_standard(
        &mut self,
        x_real: &Array4<f32>,
        fake: &Array4<f32>,
        labels_i: &[LabelVector],
    ) -> Result<f64> {
        let (feats_real, cache_real) = self.mcd.encode_train(x_real, true)?;
        let d_real = self.mcd.head_fwd(feats_real.bottleneck());
        let (feats_fake, cache_fake) = self.mcd.encode_train(fake, true)?;
        let d_fake = self.mcd.head_fwd(feats_fake.bottleneck());

        let sel_r = losses::select_adversarial(&d_real, labels_i)?;
        let sel_f = losses::select_adversarial(&d_fake, labels_i)?;
        let (loss, gr, gf) =
            losses::mcd_loss_grad(&losses::sel_values(&sel_r), &losses::sel_values(&sel_f))?;

        let dims = crate::ops::dims4(&d_real);
        let sshape = (sel_r.shape()[0], sel_r.shape()[1], sel_r.shape()[2]);
        let gd_real =
            losses::select_adversarial_grad(dims, labels_i, &losses::sel_grad(sshape, &gr));
        let gd_fake =
            losses::select_adversarial_grad(dims, labels_i, &losses::sel_grad(sshape, &gf));

        self.mcd.head_bwd_param(feats_real.bottleneck(), &gd_real);
        let gb_real = self.mcd.head_bwd_input(&gd_real, feats_real.bottleneck_hw());
        let mut gfeats = self.mcd.empty_feature_grads();
        *gfeats.last_mut().unwrap() = Some(gb_real);
        self.mcd.encode_bwd(x_real, &feats_real, &cache_real.unwrap(), gfeats, true);

        self.mcd.head_bwd_param(feats_fake.bottleneck(), &gd_fake);
        let gb_fake = self.mcd.head_bwd_input(&gd_fake, feats_fake.bottleneck_hw());
        let mut gfeats = self.mcd.empty_feature_grads();
        *gfeats.last_mut().unwrap() = Some(gb_fake);
        self.mcd.encode_bwd(fake, &feats_fake, &cache_fake.unwrap(), gfeats, true);
        Ok(loss)
    }

    fn mcd_step_wgan(
        &mut self,
        x_real: &Array4<f32>,
        fake: &Array4<f32>,
        labels_i: &[LabelVector],
    ) -> Result<f64> {
        let batch = x_real.shape()[0];
        // Critic terms: mean(fake_sel) - mean(real_sel).
        let (feats_real, cache_real) = self.mcd.encode(x_real, NormMode::Running, true)?;
        let d_real = self.mcd.head_fwd(feats_real.bottleneck());
        let (feats_fake, cache_fake) = self.mcd.encode(fake, NormMode::Running, true)?;
        let d_fake = self.mcd.head_fwd(feats_fake.bottleneck());
        let sel_r = losses::select_adversarial(&d_real, labels_i)?;
        let sel_f = losses::select_adversarial(&d_fake, labels_i)?;
        let vr = losses::sel_values(&sel_r);
        let vf = losses::sel_values(&sel_f);
        let n = vr.len() as f64;
        let mean_r = vr.iter().sum::<f64>() / n;
        let mean_f = vf.iter().sum::<f64>() / n;

        let dims = crate::ops::dims4(&d_real);
        let sshape = (sel_r.shape()[0], sel_r.shape()[1], sel_r.shape()[2]);
        let gr = vec![-1.0 / n; vr.len()];
        let gf = vec![1.0 / n; vf.len()];
        let gd_real =
            losses::select_adversarial_grad(dims, labels_i, &losses::sel_grad(sshape, &gr));
        let gd_fake =
            losses::select_adversarial_grad(dims, labels_i, &losses::sel_grad(sshape, &gf));
        self.mcd.head_bwd_param(feats_real.bottleneck(), &gd_real);
        let gb = self.mcd.head_bwd_input(&gd_real, feats_real.bottleneck_hw());
        let mut gfeats = self.mcd.empty_feature_grads();
        *gfeats.last_mut().unwrap() = Some(gb);
        self.mcd.encode_bwd(x_real, &feats_real, &cache_real.unwrap(), gfeats, true);
        self.mcd.head_bwd_param(feats_fake.bottleneck(), &gd_fake);
        let gb = self.mcd.head_bwd_input(&gd_fake, feats_fake.bottleneck_hw());
        let mut gfeats = self.mcd.empty_feature_grads();
        *gfeats.last_mut().unwrap() = Some(gb);
        self.mcd.encode_bwd(fake, &feats_fake, &cache_fake.unwrap(), gfeats, true);

        // Gradient penalty on interpolated samples.
        let mut x_hat = Array4::<f32>::zeros(x_real.raw_dim());
        for b in 0..batch {
            let eps: f32 = self.rng_interp.gen_range(0.0..1.0);
            let xr = x_real.index_axis(Axis(0), b);
            let xf = fake.index_axis(Axis(0), b);
            let mut xh = x_hat.index_axis_mut(Axis(0), b);
            ndarray::Zip::from(&mut xh).and(&xr).and(&xf).for_each(|h, &r, &f| {
                *h = eps * r + (1.0 - eps) * f;
            });
        }
        let penalty =
            self.mcd.gradient_penalty(&x_hat, labels_i, self.cfg.lambda_gp, true)?;
        Ok(mean_f - mean_r + penalty)
    }

    /// One decoder update with the MCD frozen: parameters and normalization
    /// statistics fixed, running-statistics mode, gradients flowing through
    /// but never accumulating into the MCD.
    pub fn train_decoder_step(
        &mut self,
        x_src_k: &Array4<f32>,
        i: usize,
        k: usize,
        lr: f64,
    ) -> Result<LossReport> {
        let mcd_pre = self.cfg.check_freeze.then(|| nn::state_hash(&mut self.mcd));
        nn::zero_grads(&mut self.decoder);
        let batch = x_src_k.shape()[0];
        let labels_i = self.batch_labels(i, batch);

        // fake_i = DE(M_en(x_k), c_i); rec = DE(M_en(fake_i), c_k).
        let (feats_src, _) = self.mcd.encode(x_src_k, NormMode::Running, false)?;
        let bshape = feats_src.bottleneck().shape().to_vec();
        let block_i = self.label_block_for(i, &bshape)?;
        let block_k = self.label_block_for(k, &bshape)?;
        let (fake, dcache1) = self.decoder.decode_train(&feats_src, &block_i, true)?;
        let (feats_fake, mcache) = self.mcd.encode(&fake, NormMode::Running, true)?;
        let d_fake = self.mcd.head_fwd(feats_fake.bottleneck());
        let (rec, dcache2) = self.decoder.decode_train(&feats_fake, &block_k, true)?;

        let sel = losses::select_adversarial(&d_fake, &labels_i)?;
        let vals = losses::sel_values(&sel);
        let (adv, g_adv) = match self.cfg.loss_mode {
            LossMode::Standard => losses::decoder_adv_loss_grad(&vals, self.cfg.adv_mode)?,
            LossMode::WganGp => {
                let n = vals.len() as f64;
                (-vals.iter().sum::<f64>() / n, vec![-1.0 / n; vals.len()])
            }
        };
        let (rec_loss, _gx, g_rec) = losses::reconstruction_loss_grad(x_src_k, &rec)?;
        let report = LossReport {
            mcd_loss: f64::NAN, // filled by the caller from the MCD step
            decoder_adv: adv,
            reconstruction: rec_loss,
            total_decoder: adv + self.cfg.lambda_rec * rec_loss,
            classification: None,
            gradient_penalty: None,
        };

        // Reconstruction path backward (dominant term first).
        let g_rec_scaled = g_rec.mapv(|v| v * self.cfg.lambda_rec as f32);
        let (mut gfeats, _glabel_k) = self.decoder.decode_bwd(dcache2.as_ref().unwrap(), &g_rec_scaled);

        // Adversarial path into the frozen head and bottleneck.
        let dims = crate::ops::dims4(&d_fake);
        let sshape = (sel.shape()[0], sel.shape()[1], sel.shape()[2]);
        let gd = losses::select_adversarial_grad(dims, &labels_i, &losses::sel_grad(sshape, &g_adv));
        let gb = self.mcd.head_bwd_input(&gd, feats_fake.bottleneck_hw());
        match gfeats.last_mut().unwrap() {
            Some(acc) => *acc += &gb,
            slot @ None => *slot = Some(gb),
        }

        // Through the frozen MCD into the fake image, then the first decode.
        let g_fake = self.mcd.encode_bwd(&fake, &feats_fake, &mcache.unwrap(), gfeats, false);
        let _ = self.decoder.decode_bwd(dcache1.as_ref().unwrap(), &g_fake);

        self.opt_dec.step(&mut self.decoder, lr as f32);

        if let Some(pre) = mcd_pre {
            self.audit.decoder_steps_checked += 1;
            if pre != nn::state_hash(&mut self.mcd) {
                self.audit.violations += 1;
                return Err(Error::Training(
                    "freeze violation: MCD state changed during a decoder step".into(),
                ));
            }
        }
        Ok(report)
    }
}

/// Artifacts produced by [`run_training`].
#[derive(Debug)]
pub struct RunResult {
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub audit: FreezeAudit,
    pub final_step: u64,
    pub rows: Vec<MetricRow>,
}

/// Full training: iterate epochs, log every step, checkpoint on the cadence,
/// abort with a diagnostic checkpoint on non-finite losses.
pub fn run_training(
    cfg: &TrainConfig,
    registry: &DomainRegistry,
    datasets: &[DomainDataset],
    augment: &AugmentSpec,
    run_dir: &Path,
    mut on_checkpoint: Option<&mut dyn FnMut(&Path, &Trainer) -> Result<()>>,
) -> Result<RunResult> {
    if datasets.len() != registry.n() {
        return Err(Error::Data(format!(
            "{} datasets for {} registered domains",
            datasets.len(),
            registry.n()
        )));
    }
    if augment.crop != cfg.resolution {
        return Err(Error::Config(format!(
            "augment crop {} must equal training resolution {}",
            augment.crop, cfg.resolution
        )));
    }
    for (idx, ds) in datasets.iter().enumerate() {
        if ds.is_empty() {
            return Err(Error::Data(format!(
                "dataset missing for domain '{}'",
                registry.name(idx)
            )));
        }
    }
    std::fs::create_dir_all(run_dir)?;
    let metrics_path = run_dir.join("metrics.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(log, "{}", METRIC_HEADER)?;

    let mut trainer = Trainer::new(cfg.clone(), registry.clone())?;
    let iters_per_epoch = cfg
        .iters_per_epoch
        .unwrap_or_else(|| {
            let largest = datasets.iter().map(|d| d.len()).max().unwrap_or(1);
            largest.div_ceil(cfg.batch_size)
        })
        .max(1);

    let mut streams: Vec<IndexStream> = datasets.iter().map(|d| IndexStream::new(d.len())).collect();
    let mut checkpoints = Vec::new();
    let mut rows = Vec::new();

    let manifest_for = |trainer: &Trainer, step: u64| Manifest {
        format_version: 1,
        model: "cerfgan".into(),
        step,
        domains: registry.names().to_vec(),
        resolution: cfg.resolution,
        depth: cfg.depth,
        base_channels: cfg.base_channels,
        skip_depth: cfg.skip_depth,
        loss_mode: cfg.loss_mode.to_string(),
        adv_mode: match trainer.cfg.adv_mode {
            DecAdvMode::Saturating => "saturating".to_string(),
            DecAdvMode::NonSaturating => "non-saturating".to_string(),
        },
    };

    for epoch in 0..cfg.total_epochs {
        let lr = lr_schedule(epoch, cfg.total_epochs, cfg.base_lr)?;
        for _ in 0..iters_per_epoch {
            let (i, k) = sample_domain_pair(&trainer.registry, &mut trainer.rng_task);
            let critic_steps = match cfg.loss_mode {
                LossMode::Standard => 1,
                LossMode::WganGp => cfg.n_critic,
            };
            let mut mcd_loss = 0.0;
            let mut src_batch = None;
            for _ in 0..critic_steps {
                let real_idx = streams[i].next_batch(cfg.batch_size, &mut trainer.rng_data);
                let src_idx = streams[k].next_batch(cfg.batch_size, &mut trainer.rng_data);
                let x_real = load_batch(&datasets[i], &real_idx, augment, &mut trainer.rng_data)?;
                let x_src = load_batch(&datasets[k], &src_idx, augment, &mut trainer.rng_data)?;
                mcd_loss = trainer.train_mcd_step(&x_real, &x_src, i, k, lr)?;
                src_batch = Some(x_src);
            }
            // The decoder step reuses the last source batch of the iteration.
            let x_src = src_batch.expect("at least one critic step");
            let mut report = trainer.train_decoder_step(&x_src, i, k, lr)?;
            report.mcd_loss = mcd_loss;
            trainer.step += 1;

            if let Err(e) = report.validate(cfg.lambda_rec) {
                let stem = run_dir.join(format!("diagnostic_{:08}", trainer.step));
                let manifest = manifest_for(&trainer, trainer.step);
                let _ = checkpoint::save(
                    &stem,
                    &manifest,
                    &mut [&mut trainer.mcd, &mut trainer.decoder],
                );
                return Err(Error::Training(format!(
                    "aborted at step {}: {} (diagnostic checkpoint written)",
                    trainer.step, e
                )));
            }
            let row = MetricRow {
                step: trainer.step,
                epoch,
                task_i: i,
                task_k: k,
                mcd_loss: report.mcd_loss,
                decoder_adv: report.decoder_adv,
                reconstruction: report.reconstruction,
                total: report.total_decoder,
                lr,
            };
            writeln!(log, "{}", row.to_csv())?;
            rows.push(row);
        }
        let last = epoch + 1 == cfg.total_epochs;
        if (epoch + 1) % cfg.checkpoint_every_epochs == 0 || last {
            let stem = run_dir.join(format!("checkpoint_{:08}", trainer.step));
            let manifest = manifest_for(&trainer, trainer.step);
            let blob =
                checkpoint::save(&stem, &manifest, &mut [&mut trainer.mcd, &mut trainer.decoder])?;
            if let Some(cb) = on_checkpoint.as_deref_mut() {
                cb(&blob, &trainer)?;
            }
            checkpoints.push(blob);
        }
    }
    log.flush()?;
    Ok(RunResult {
        run_dir: run_dir.to_path_buf(),
        metrics_path,
        checkpoints,
        audit: trainer.audit,
        final_step: trainer.step,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{scan_domain_folder, toy};

    #[test]
    fn lr_schedule_reference_points() {
        assert_eq!(lr_schedule(0, 400, 2e-4).unwrap(), 2e-4);
        assert_eq!(lr_schedule(200, 400, 2e-4).unwrap(), 2e-4);
        assert!((lr_schedule(300, 400, 2e-4).unwrap() - 1e-4).abs() < 1e-12);
        assert_eq!(lr_schedule(400, 400, 2e-4).unwrap(), 0.0);
        assert!(lr_schedule(401, 400, 2e-4).is_err());
    }

    #[test]
    fn lr_schedule_is_continuous_and_non_increasing() {
        let total = 137;
        let base = 2e-4;
        let max_drop = base / (total as f64 / 2.0) + 1e-12;
        let mut prev = lr_schedule(0, total, base).unwrap();
        for e in 1..=total {
            let cur = lr_schedule(e, total, base).unwrap();
            assert!(cur <= prev + 1e-15, "non-increasing at {}", e);
            assert!(prev - cur <= max_drop, "jump at {}: {}", e, prev - cur);
            prev = cur;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn pair_sampling_single_pair_is_balanced() {
        let reg =
            DomainRegistry::new(vec!["a".into(), "b".into()], vec![(0, 1)]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            let (i, k) = sample_domain_pair(&reg, &mut rng);
            assert!((i, k) == (0, 1) || (i, k) == (1, 0));
            counts[i] += 1;
        }
        let p = counts[0] as f64 / 10_000.0;
        assert!((p - 0.5).abs() < 0.02, "{p}");
    }

    #[test]
    fn pair_sampling_chi_squared_uniform_over_directed_tasks() {
        // 3 pairs -> 6 directed tasks, each with probability 1/6. Chi-squared
        // with 5 degrees of freedom: critical value 15.086 at p = 0.01.
        let reg = DomainRegistry::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![(0, 1), (1, 2), (2, 3)],
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let tasks = reg.directed_tasks();
        let mut counts = std::collections::HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let t = sample_domain_pair(&reg, &mut rng);
            *counts.entry(t).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), tasks.len(), "support is exactly the directed tasks");
        let expected = draws as f64 / tasks.len() as f64;
        let chi2: f64 = tasks
            .iter()
            .map(|t| {
                let o = *counts.get(t).unwrap_or(&0) as f64;
                (o - expected) * (o - expected) / expected
            })
            .sum();
        assert!(chi2 < 15.086, "chi-squared statistic {}", chi2);
    }

    #[test]
    fn excluded_pair_never_sampled() {
        let reg = DomainRegistry::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1)],
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let (i, k) = sample_domain_pair(&reg, &mut rng);
            assert!(!(i == 2 || k == 2), "domain 2 has no registered pair");
        }
    }

    fn tiny_toy_setup(
        dir: &Path,
    ) -> (DomainRegistry, Vec<DomainDataset>, AugmentSpec, TrainConfig) {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let pairs =
            toy::make_toy_translation_dataset(toy::ToyKind::ColorInversion, 16, 16, &mut rng)
                .unwrap();
        toy::write_toy_dataset(toy::ToyKind::ColorInversion, &pairs, dir).unwrap();
        let reg = DomainRegistry::new(
            vec!["plain".into(), "inverted".into()],
            vec![(0, 1)],
        )
        .unwrap();
        let mut datasets = Vec::new();
        for (idx, name) in reg.names().iter().enumerate() {
            let mut ds = scan_domain_folder(&dir.join(name), idx).unwrap();
            ds.load_cache().unwrap();
            datasets.push(ds);
        }
        let spec = AugmentSpec { crop: 16, jitter: 16, mirror_prob: 0.5 };
        let cfg = TrainConfig {
            resolution: 16,
            batch_size: 2,
            total_epochs: 2,
            iters_per_epoch: Some(2),
            depth: 3,
            base_channels: 8,
            skip_depth: 2,
            checkpoint_every_epochs: 1,
            seed: 5,
            ..TrainConfig::defaults_for(2)
        };
        (reg, datasets, spec, cfg)
    }

    #[test]
    fn tiny_run_trains_checkpoints_and_audits_freeze() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let (reg, datasets, spec, cfg) = tiny_toy_setup(&data_dir);
        let run_dir = dir.path().join("run");
        let result = run_training(&cfg, &reg, &datasets, &spec, &run_dir, None).unwrap();
        assert_eq!(result.final_step, 4);
        assert_eq!(result.rows.len(), 4);
        assert!(result.checkpoints.len() >= 2);
        assert_eq!(result.audit.violations, 0);
        assert_eq!(result.audit.mcd_steps_checked, 4);
        assert_eq!(result.audit.decoder_steps_checked, 4);
        let log = std::fs::read_to_string(&result.metrics_path).unwrap();
        assert!(log.starts_with(METRIC_HEADER));
        assert_eq!(log.lines().count(), 5, "header plus one row per iteration");
        // MCD loss at fresh initialization sits near 2 log 2.
        assert!((result.rows[0].mcd_loss - 1.386).abs() < 0.5, "{}", result.rows[0].mcd_loss);
        // Reconstruction at initialization is O(mean |x|) for mean-zero data.
        assert!(
            result.rows[0].reconstruction > 0.1 && result.rows[0].reconstruction < 1.5,
            "{}",
            result.rows[0].reconstruction
        );
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let (reg, datasets, spec, cfg) = tiny_toy_setup(&data_dir);
        let r1 = run_training(&cfg, &reg, &datasets, &spec, &dir.path().join("run1"), None).unwrap();
        let r2 = run_training(&cfg, &reg, &datasets, &spec, &dir.path().join("run2"), None).unwrap();
        let a = std::fs::read(&r1.metrics_path).unwrap();
        let b = std::fs::read(&r2.metrics_path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wgan_variant_runs_and_stays_finite() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let (reg, datasets, spec, mut cfg) = tiny_toy_setup(&data_dir);
        cfg.loss_mode = LossMode::WganGp;
        cfg.n_critic = 2;
        cfg.total_epochs = 1;
        let result =
            run_training(&cfg, &reg, &datasets, &spec, &dir.path().join("runw"), None).unwrap();
        assert_eq!(result.audit.violations, 0);
        assert!(result.rows.iter().all(|r| r.mcd_loss.is_finite() && r.total.is_finite()));
    }

    #[test]
    fn nesting_fidelity_two_encodes_two_decodes_per_decoder_step() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let (reg, datasets, spec, cfg) = tiny_toy_setup(&data_dir);
        let mut trainer = Trainer::new(cfg.clone(), reg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let x_src = load_batch(&datasets[1], &[0, 1], &spec, &mut rng).unwrap();
        let enc0 = trainer.mcd.encode_calls();
        let dec0 = trainer.decoder.decode_calls();
        trainer.train_decoder_step(&x_src, 0, 1, 1e-4).unwrap();
        assert_eq!(trainer.mcd.encode_calls() - enc0, 2, "M_en applied exactly twice");
        assert_eq!(trainer.decoder.decode_calls() - dec0, 2, "DE applied exactly twice");
    }

    #[test]
    fn optimizer_separation() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let (reg, datasets, spec, cfg) = tiny_toy_setup(&data_dir);
        let mut trainer = Trainer::new(cfg, reg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let x_real = load_batch(&datasets[0], &[0, 1], &spec, &mut rng).unwrap();
        let x_src = load_batch(&datasets[1], &[0, 1], &spec, &mut rng).unwrap();
        trainer.train_mcd_step(&x_real, &x_src, 0, 1, 1e-4).unwrap();
        assert_eq!(trainer.opt_mcd.steps_taken(), 1);
        assert_eq!(trainer.opt_dec.steps_taken(), 0);
        trainer.train_decoder_step(&x_src, 0, 1, 1e-4).unwrap();
        assert_eq!(trainer.opt_mcd.steps_taken(), 1);
        assert_eq!(trainer.opt_dec.steps_taken(), 1);
    }
}
