use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use gatedgan::data::load_images;
use gatedgan::model::{ArchConfig, ImageTensor, NoiseGateConfig};
use gatedgan::training::{train, LrDecay, TrainConfig};

#[derive(Args)]
pub struct TrainArgs {
    /// Packed dataset file or directory of square images at `--res`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    res: usize,
    /// Noise gates, e.g. `off:4-32`, `coarse-off`, `on`.
    #[arg(long, default_value = "coarse-off")]
    gates: String,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Training length in thousands of real images shown.
    #[arg(long)]
    total_kimg: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Steps between snapshots; 0 writes only `final.ckpt`.
    #[arg(long, default_value_t = 0)]
    snapshot_interval: u64,
    #[arg(long, default_value_t = 0.002)]
    lr: f32,
    /// Cosine decay to this learning rate, starting at `--decay-start`
    /// (fraction of the run).
    #[arg(long)]
    lr_final: Option<f32>,
    #[arg(long, default_value_t = 0.5)]
    decay_start: f32,
    #[arg(long, default_value_t = 10.0)]
    r1_gamma: f32,
    /// EMA half-life in kimg; 0 disables EMA.
    #[arg(long, default_value_t = 10.0)]
    ema_kimg: f32,
    /// Fixed augmentation probability instead of the adaptive controller.
    #[arg(long)]
    aug_p: Option<f32>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    channel_base: Option<usize>,
    #[arg(long)]
    channel_max: Option<usize>,
    #[arg(long)]
    noise_strength_init: Option<f32>,
    /// Path-length regularization weight (off by default).
    #[arg(long, default_value_t = 0.0)]
    pl_weight: f32,
    /// Samples averaged into the checkpoint's `w_mean`.
    #[arg(long, default_value_t = 10_000)]
    w_mean_samples: usize,
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig> {
        let mut arch = ArchConfig::toy(self.res);
        if let Some(d) = self.latent_dim {
            arch.latent_dim = d;
        }
        if let Some(b) = self.channel_base {
            arch.channel_base = b;
        }
        if let Some(m) = self.channel_max {
            arch.channel_max = m;
        }
        if let Some(s) = self.noise_strength_init {
            arch.noise_strength_init = s;
        }
        arch.validate()?;
        let gates = NoiseGateConfig::parse(&self.gates, &arch)?;
        let mut cfg = TrainConfig::new(arch, gates);
        cfg.seed = self.seed;
        cfg.batch_size = self.batch;
        cfg.total_images = (self.total_kimg * 1000.0).round() as u64;
        cfg.snapshot_interval = self.snapshot_interval;
        cfg.lr_initial = self.lr;
        if let Some(lr_final) = self.lr_final {
            cfg.lr_decay = LrDecay::Cosine {
                start_images: (self.decay_start as f64 * cfg.total_images as f64).round() as u64,
                lr_final,
            };
        }
        cfg.r1_gamma = self.r1_gamma;
        cfg.ema_halflife_kimg = self.ema_kimg;
        cfg.ada.fixed_p = self.aug_p;
        cfg.pl_weight = self.pl_weight;
        cfg.w_mean_samples = self.w_mean_samples;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(args: TrainArgs) -> Result<()> {
    let cfg = args.config()?;
    let images = load_images(&args.data, args.res).with_context(|| format!("loading {}", args.data.display()))?;
    tracing::info!(
        images = images.len(),
        steps = cfg.total_steps(),
        gates = %cfg.gates.describe(),
        "training"
    );
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    let batch = ImageTensor::batch(&images)?;
    let every = (cfg.total_steps() / 20).max(1);
    let out = train(&cfg, &batch, Some(&args.out), |m| {
        if m.step % every == 0 {
            tracing::info!(
                step = m.step,
                kimg = m.images_seen as f64 / 1000.0,
                g_loss = m.g_loss,
                d_loss = m.d_loss,
                p = m.p,
                rt = m.rt,
                lr = m.lr,
                "progress"
            );
        }
    })?;
    for p in &out.checkpoints {
        println!("{}", p.display());
    }
    Ok(())
}
