use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ada::{ada_update, AdaConfig, AdaState};
use super::augment::{AugmentPlan, AugmentationPipelineConfig};
use super::loss::softplus_mean_on_tape;
use super::r1::r1_param_grads;
use super::schedule::{lr_at, LrDecay};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Discriminator, Generator, GeneratorCheckpoint, NoiseGateConfig};
use crate::params::{Adam, AdamConfig};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub gates: NoiseGateConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub lr_initial: f32,
    pub lr_decay: LrDecay,
    pub r1_gamma: f32,
    /// Lazy regularization: R1 runs every this many steps.
    pub r1_interval: u64,
    pub ada: AdaConfig,
    pub augment: AugmentationPipelineConfig,
    /// Generator EMA half-life in thousands of images; `0` disables EMA.
    pub ema_halflife_kimg: f32,
    /// EMA half-life ramp as a fraction of images seen.
    pub ema_rampup: Option<f32>,
    pub style_mixing_prob: f32,
    /// Path-length regularization weight; `0` disables it.
    pub pl_weight: f32,
    pub pl_interval: u64,
    pub total_images: u64,
    /// Steps between checkpoints; `0` writes only the final one.
    pub snapshot_interval: u64,
    /// Samples used to estimate `w_mean` when writing a checkpoint.
    pub w_mean_samples: usize,
}

impl TrainConfig {
    /// Defaults for a run at `arch` with the given gates.
    pub fn new(arch: ArchConfig, gates: NoiseGateConfig) -> Self {
        Self {
            arch,
            gates,
            seed: 0,
            batch_size: 8,
            lr_initial: 0.002,
            lr_decay: LrDecay::Constant,
            r1_gamma: 10.0,
            r1_interval: 16,
            ada: AdaConfig::default(),
            augment: AugmentationPipelineConfig::default(),
            ema_halflife_kimg: 10.0,
            ema_rampup: Some(0.05),
            style_mixing_prob: 0.9,
            pl_weight: 0.0,
            pl_interval: 4,
            total_images: 25_000,
            snapshot_interval: 0,
            w_mean_samples: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.gates.validate(&self.arch)?;
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return bad("lr_initial must be a non-negative number");
        }
        if let LrDecay::Cosine { lr_final, .. } = self.lr_decay {
            if !(lr_final >= 0.0 && lr_final <= self.lr_initial) {
                return bad("lr_final must lie in [0, lr_initial]");
            }
        }
        if !(self.r1_gamma >= 0.0) || self.r1_interval == 0 {
            return bad("r1_gamma must be non-negative and r1_interval positive");
        }
        if !(self.ada.target > 0.0 && self.ada.target < 1.0) {
            return bad("ada target must lie in (0, 1)");
        }
        if self.ada.adjust_interval == 0 || !(self.ada.speed_images > 0.0) {
            return bad("ada adjust_interval and speed must be positive");
        }
        if let Some(p) = self.ada.fixed_p {
            if !(0.0..=1.0).contains(&p) {
                return bad("fixed augmentation probability must lie in [0, 1]");
            }
        }
        if !(self.ema_halflife_kimg >= 0.0) || !(0.0..=1.0).contains(&self.style_mixing_prob) {
            return bad("ema half-life must be non-negative and style_mixing_prob in [0, 1]");
        }
        if self.pl_weight < 0.0 || self.pl_interval == 0 {
            return bad("pl_weight must be non-negative and pl_interval positive");
        }
        if self.total_images == 0 || self.w_mean_samples == 0 {
            return bad("total_images and w_mean_samples must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.total_images.div_ceil(self.batch_size as u64)
    }
}

/// Scalars logged after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub images_seen: u64,
    pub g_loss: f32,
    pub d_loss: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pl: Option<f32>,
    pub rt: f32,
    pub p: f32,
    pub lr: f32,
}

/// Everything a run mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub images_seen: u64,
    pub g: Generator,
    pub d: Discriminator,
    pub g_ema: Generator,
    pub ada: AdaState,
    g_opt: Adam,
    d_opt: Adam,
    pending_real_scores: Vec<f32>,
    pl_mean: f32,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let g = Generator::new(&cfg.arch, derive_seed(cfg.seed, 1))?;
        let d = Discriminator::new(&cfg.arch, derive_seed(cfg.seed, 2))?;
        let adam = AdamConfig {
            lr: cfg.lr_initial,
            ..AdamConfig::default()
        };
        Ok(Self {
            step: 0,
            images_seen: 0,
            g_opt: Adam::new(adam, g.params()),
            d_opt: Adam::new(adam, d.params()),
            g_ema: g.clone(),
            g,
            d,
            ada: AdaState {
                p: cfg.ada.fixed_p.unwrap_or(0.0),
                rt_estimate: 0.0,
            },
            pending_real_scores: Vec::new(),
            pl_mean: 0.0,
        })
    }

    fn ema_beta(&self, cfg: &TrainConfig) -> f32 {
        if cfg.ema_halflife_kimg == 0.0 {
            return 0.0;
        }
        let mut half = cfg.ema_halflife_kimg as f64 * 1000.0;
        if let Some(r) = cfg.ema_rampup {
            half = half.min(self.images_seen as f64 * r as f64);
        }
        if half <= 0.0 {
            return 0.0;
        }
        0.5f64.powf(cfg.batch_size as f64 / half) as f32
    }

    /// Checkpoint of the EMA generator plus the discriminator, with `w_mean`
    /// estimated from `cfg.w_mean_samples` mapped latents.
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<GeneratorCheckpoint> {
        let mut ck = GeneratorCheckpoint::new(self.g_ema.clone(), cfg.gates.clone())?;
        ck.discriminator = Some(self.d.clone());
        ck.w_mean = Some(self.g_ema.estimate_w_mean(cfg.w_mean_samples, derive_seed(cfg.seed, 7))?);
        ck.ema_decay = self.ema_beta(cfg);
        ck.info = serde_json::json!({
            "step": self.step,
            "images_seen": self.images_seen,
            "ada_p": self.ada.p,
            "seed": cfg.seed,
            "batch_size": cfg.batch_size,
        });
        Ok(ck)
    }
}

/// Latents, mixing cutoffs and noise for one generator batch.
struct GenInputs {
    z1: Tensor,
    z2: Tensor,
    cutoffs: Vec<usize>,
    noise: Vec<Option<Tensor>>,
}

fn normalized_rows(rng: &mut SeededRng, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row = rng.normals(d);
        let ms = row.iter().map(|x| x * x).sum::<f32>() / d as f32;
        let k = 1.0 / (ms + 1e-8).sqrt();
        data.extend(row.iter().map(|x| x * k));
    }
    Tensor::new(vec![n, d], data).expect("sized")
}

impl GenInputs {
    fn sample(cfg: &TrainConfig, n: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let d = cfg.arch.latent_dim;
        let l = cfg.arch.num_ws();
        let z1 = normalized_rows(&mut rng, n, d);
        let z2 = normalized_rows(&mut rng, n, d);
        let cutoffs = (0..n)
            .map(|_| {
                let mix = rng.uniform() < cfg.style_mixing_prob;
                let cut = 1 + rng.below(l - 1);
                if mix {
                    cut
                } else {
                    l
                }
            })
            .collect();
        let noise = cfg
            .arch
            .noise_sites()
            .iter()
            .map(|s| {
                let r = s.resolution;
                cfg.gates
                    .is_enabled(r)
                    .then(|| Tensor::new(vec![n, 1, r, r], rng.normals(n * r * r)).expect("sized"))
            })
            .collect();
        Self { z1, z2, cutoffs, noise }
    }

    fn ws(&self, t: &mut Tape, g: &Generator, gp: &[Var]) -> Var {
        let z1 = t.constant(self.z1.clone());
        let z2 = t.constant(self.z2.clone());
        let w1 = g.layout().mapping(t, gp, z1);
        let w2 = g.layout().mapping(t, gp, z2);
        t.mix_layers(w1, w2, self.cutoffs.clone(), g.num_ws())
    }

    fn noise_vars(&self, t: &mut Tape) -> Vec<Var> {
        self.noise
            .iter()
            .map(|n| match n {
                Some(x) => t.constant(x.clone()),
                // never read by the synthesis graph
                None => t.constant(Tensor::zeros(&[1, 1, 1, 1])),
            })
            .collect()
    }

    fn images(&self, t: &mut Tape, g: &Generator, gp: &[Var], gates: &NoiseGateConfig) -> Var {
        let ws = self.ws(t, g, gp);
        let noise = self.noise_vars(t);
        g.synthesis_on_tape(t, gp, ws, &noise, gates)
    }
}

fn finite_scalar(t: &Tape, v: Var, what: &str, step: u64) -> Result<f32> {
    let x = t.value(v).item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::numeric(format!("{what} is non-finite at step {step}")))
    }
}

fn finite_grads(grads: &[Tensor], what: &str, step: u64) -> Result<()> {
    if grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {what} gradient at step {step}")))
    }
}

/// Path-length penalty and its synthesis-parameter gradient, by the same
/// pattern-frozen central difference as R1, taken in W+ space with the
/// mapping held fixed. Demodulation keeps the synthesis nonlinear, so the
/// difference is second-order accurate rather than exact.
fn pl_param_grads(g: &Generator, inputs: &GenInputs, cfg: &TrainConfig, pl_mean: &mut f32, seed: u64) -> Result<(f32, Vec<Tensor>)> {
    let n = inputs.z1.dim(0);
    let res = cfg.arch.resolution;
    let ws_val = {
        let mut t = Tape::new();
        let gp = g.params().bind(&mut t, false);
        let ws = inputs.ws(&mut t, g, &gp);
        t.value(ws).clone()
    };
    let probe = {
        let k = 1.0 / res as f32;
        Tensor::new(vec![n, 3, res, res], SeededRng::new(seed).normals(n * 3 * res * res).iter().map(|v| v * k).collect())?
    };
    let run = |mut t: Tape, ws: Tensor, trainable_params: bool, trainable_ws: bool| {
        let gp = g.params().bind(&mut t, trainable_params);
        let wv = if trainable_ws { t.input(ws) } else { t.constant(ws) };
        let noise = inputs.noise_vars(&mut t);
        let img = g.synthesis_on_tape(&mut t, &gp, wv, &noise, &cfg.gates);
        let pr = t.constant(probe.clone());
        let prod = t.mul(img, pr);
        let s = t.sum(prod);
        let mut grads = t.backward(s);
        let wg = grads.take(wv);
        let pg = trainable_params.then(|| g.params().collect_grads(&gp, &mut grads));
        (wg, pg, t.activation_pattern())
    };
    let (wg, _, pattern) = run(Tape::recording(), ws_val.clone(), false, true);
    let wg = wg.ok_or_else(|| Error::numeric("missing path-length gradient"))?;
    let l = cfg.arch.num_ws();
    let per = l * cfg.arch.latent_dim;
    let lengths: Vec<f64> = (0..n)
        .map(|i| (wg.data()[i * per..(i + 1) * per].iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / l as f64).sqrt())
        .collect();
    let mean_len = lengths.iter().sum::<f64>() / n as f64;
    *pl_mean += 0.01 * (mean_len as f32 - *pl_mean);
    let a = *pl_mean as f64;
    let w = cfg.pl_weight as f64;
    let penalty = w * lengths.iter().map(|x| (x - a).powi(2)).sum::<f64>() / n as f64;
    // direction u_i = 2w(ℓ_i − a)/(N·ℓ_i·L)·g_i
    let mut u = vec![0.0f64; n * per];
    for i in 0..n {
        if lengths[i] == 0.0 {
            continue;
        }
        let k = 2.0 * w * (lengths[i] - a) / (n as f64 * lengths[i] * l as f64);
        for j in 0..per {
            u[i * per + j] = k * wg.data()[i * per + j] as f64;
        }
    }
    let urms = (u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64).sqrt();
    if urms == 0.0 {
        return Ok((penalty as f32, g.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()));
    }
    let eps = 1e-3 / urms;
    let shifted = |sign: f64| {
        let mut x = ws_val.clone();
        for (v, d) in x.data_mut().iter_mut().zip(&u) {
            *v += (sign * eps * d) as f32;
        }
        run(Tape::replaying(pattern.clone()), x, true, false).1.expect("parameter gradients requested")
    };
    let plus = shifted(1.0);
    let minus = shifted(-1.0);
    let grads = plus
        .into_iter()
        .zip(minus)
        .map(|(a, b)| {
            let d = a.data().iter().zip(b.data()).map(|(x, y)| ((*x as f64 - *y as f64) / (2.0 * eps)) as f32).collect();
            Tensor::new(a.shape().to_vec(), d).expect("same shape")
        })
        .collect();
    Ok((penalty as f32, grads))
}

/// One alternating generator/discriminator update on `real_batch`
/// (`[n, 3, R, R]` in `[-1, 1]`).
pub fn train_step(state: &mut TrainState, real_batch: &Tensor, cfg: &TrainConfig) -> Result<StepMetrics> {
    let res = cfg.arch.resolution;
    let s = real_batch.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != res || s[3] != res || s[0] == 0 {
        return Err(Error::invalid(format!("real batch must be [n,3,{res},{res}], got {s:?}")));
    }
    let n = s[0];
    let step = state.step;
    let lr = lr_at(cfg.lr_initial, &cfg.lr_decay, state.images_seen, cfg.total_images);
    let base = derive_seed(cfg.seed, 1000 + step);
    let p = state.ada.p;

    // generator: non-saturating loss through the augmented discriminator
    let g_inputs = GenInputs::sample(cfg, n, derive_seed(base, 0));
    let g_plan = AugmentPlan::new(n, res, p, &cfg.augment, derive_seed(base, 1));
    let (g_loss, mut g_grads) = {
        let mut t = Tape::new();
        let gp = state.g.params().bind(&mut t, true);
        let dp = state.d.params().bind(&mut t, false);
        let img = g_inputs.images(&mut t, &state.g, &gp, &cfg.gates);
        let aug = g_plan.apply(&mut t, img);
        let logits = state.d.layout().forward(&mut t, &dp, aug);
        let loss = softplus_mean_on_tape(&mut t, logits, -1.0);
        let value = finite_scalar(&t, loss, "generator loss", step)?;
        let mut grads = t.backward(loss);
        (value, state.g.params().collect_grads(&gp, &mut grads))
    };
    let mut pl = None;
    if cfg.pl_weight > 0.0 && step % cfg.pl_interval == 0 {
        let pl_inputs = GenInputs::sample(cfg, n.div_ceil(2).max(1), derive_seed(base, 2));
        let (pen, grads) = pl_param_grads(&state.g, &pl_inputs, cfg, &mut state.pl_mean, derive_seed(base, 3))?;
        for (a, b) in g_grads.iter_mut().zip(&grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += cfg.pl_interval as f32 * y;
            }
        }
        pl = Some(pen);
    }
    finite_grads(&g_grads, "generator", step)?;
    state.g_opt.step(state.g.params_mut(), &g_grads, lr);

    // discriminator: logistic loss on augmented reals and fakes
    let fake = {
        let d_inputs = GenInputs::sample(cfg, n, derive_seed(base, 4));
        let mut t = Tape::new();
        let gp = state.g.params().bind(&mut t, false);
        let img = d_inputs.images(&mut t, &state.g, &gp, &cfg.gates);
        t.value(img).clone()
    };
    let fake_plan = AugmentPlan::new(n, res, p, &cfg.augment, derive_seed(base, 5));
    let real_plan = AugmentPlan::new(n, res, p, &cfg.augment, derive_seed(base, 6));
    let (d_loss, real_scores, mut d_grads) = {
        let mut t = Tape::new();
        let dp = state.d.params().bind(&mut t, true);
        let f = t.constant(fake);
        let fa = fake_plan.apply(&mut t, f);
        let lf = state.d.layout().forward(&mut t, &dp, fa);
        let r = t.constant(real_batch.clone());
        let ra = real_plan.apply(&mut t, r);
        let lr_ = state.d.layout().forward(&mut t, &dp, ra);
        let a = softplus_mean_on_tape(&mut t, lf, 1.0);
        let b = softplus_mean_on_tape(&mut t, lr_, -1.0);
        let loss = t.add(a, b);
        let value = finite_scalar(&t, loss, "discriminator loss", step)?;
        let scores = t.value(lr_).data().to_vec();
        let mut grads = t.backward(loss);
        (value, scores, state.d.params().collect_grads(&dp, &mut grads))
    };
    let mut r1 = None;
    if cfg.r1_gamma > 0.0 && step % cfg.r1_interval == 0 {
        let gamma = cfg.r1_gamma * cfg.r1_interval as f32;
        let (pen, grads) = r1_param_grads(&state.d, &real_plan, real_batch, gamma)?;
        for (a, b) in d_grads.iter_mut().zip(&grads) {
            a.add_assign(b);
        }
        r1 = Some(pen / cfg.r1_interval as f32);
    }
    finite_grads(&d_grads, "discriminator", step)?;
    state.d_opt.step(state.d.params_mut(), &d_grads, lr);

    state.step += 1;
    state.images_seen += n as u64;
    let beta = state.ema_beta(cfg);
    let g_now = state.g.params().clone();
    state.g_ema.params_mut().lerp_towards(&g_now, beta);

    state.pending_real_scores.extend_from_slice(&real_scores);
    if state.step % cfg.ada.adjust_interval == 0 {
        let scores = std::mem::take(&mut state.pending_real_scores);
        state.ada = ada_update(state.ada, &scores, &cfg.ada, n);
    }
    Ok(StepMetrics {
        step,
        images_seen: state.images_seen,
        g_loss,
        d_loss,
        r1,
        pl,
        rt: state.ada.rt_estimate,
        p: state.ada.p,
        lr,
    })
}

/// Epoch-wise shuffled minibatches over an NCHW image set.
pub struct BatchSampler {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            seed,
            n,
            epoch: 0,
            order: SeededRng::derive(seed, 0).permutation(n),
            pos: 0,
        }
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.n {
                    self.epoch += 1;
                    self.order = SeededRng::derive(self.seed, self.epoch).permutation(self.n);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

pub fn gather(images: &Tensor, idx: &[usize]) -> Tensor {
    let s = images.shape();
    let data = idx.iter().flat_map(|&i| images.item_slice(i).to_vec()).collect();
    Tensor::new(vec![idx.len(), s[1], s[2], s[3]], data).expect("sized")
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `cfg.total_images` worth of steps on `images` (`[N, 3, R, R]`).
///
/// With an output directory, metrics are appended to `metrics.jsonl`,
/// snapshots are written every `snapshot_interval` steps, and a final
/// `final.ckpt` is written. A numeric failure writes `failure.ckpt` and
/// `failure.json` before returning the error.
pub fn train(
    cfg: &TrainConfig,
    images: &Tensor,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let s = images.shape();
    let res = cfg.arch.resolution;
    if s.len() != 4 || s[0] == 0 || s[1] != 3 || s[2] != res || s[3] != res {
        return Err(Error::invalid(format!("training images must be [N,3,{res},{res}], got {s:?}")));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let mut state = TrainState::new(cfg)?;
    let mut sampler = BatchSampler::new(s[0], derive_seed(cfg.seed, 3));
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let total = cfg.total_steps();
    while state.step < total {
        let batch = gather(images, &sampler.next_indices(cfg.batch_size));
        let m = match train_step(&mut state, &batch, cfg) {
            Ok(m) => m,
            Err(e) => {
                if let (Some(dir), Error::NumericFailure(msg)) = (out_dir, &e) {
                    write_failure(dir, &state, cfg, msg)?;
                }
                return Err(e);
            }
        };
        if let Some((w, p)) = log.as_mut() {
            let line = serde_json::to_string(&m)?;
            writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        on_step(&m);
        metrics.push(m);
        if let Some(dir) = out_dir {
            if cfg.snapshot_interval > 0 && state.step % cfg.snapshot_interval == 0 && state.step < total {
                let p = dir.join(format!("snapshot-{:06}.ckpt", state.step));
                state.checkpoint(cfg)?.save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    if let Some(dir) = out_dir {
        let p = dir.join("final.ckpt");
        state.checkpoint(cfg)?.save(&p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome {
        state,
        metrics,
        checkpoints,
    })
}

fn write_failure(dir: &Path, state: &TrainState, cfg: &TrainConfig, msg: &str) -> Result<()> {
    let mut ck = GeneratorCheckpoint::new(state.g.clone(), cfg.gates.clone())?;
    ck.discriminator = Some(state.d.clone());
    ck.info = serde_json::json!({ "step": state.step, "error": msg });
    ck.save(&dir.join("failure.ckpt"))?;
    let p = dir.join("failure.json");
    let body = serde_json::json!({
        "step": state.step,
        "images_seen": state.images_seen,
        "ada": state.ada,
        "error": msg,
    });
    fs::write(&p, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&p, e))
}
