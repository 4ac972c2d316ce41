use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::RandomCnn;
use crate::model::{GeneratorCheckpoint, ImageTensor, LatentWPlus, NoiseBuffers};
use crate::params::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Seed of the perceptual network used by projection (shared with the
/// `randcnn` extractor).
pub const PERCEPTUAL_SEED: u64 = 0xc0ffee;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectOptions {
    pub steps: usize,
    pub lr: f32,
    /// Fractions of the run spent ramping the learning rate up and down.
    pub lr_rampup: f32,
    pub lr_rampdown: f32,
    pub perceptual_weight: f32,
    pub mse_weight: f32,
    /// Also optimize the noise buffers at gated-on sites.
    pub optimize_noise: bool,
    /// Divergence: loss above `divergence_factor`× the initial loss for
    /// `divergence_patience` consecutive steps.
    pub divergence_factor: f32,
    pub divergence_patience: usize,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.05,
            lr_rampup: 0.05,
            lr_rampdown: 0.25,
            perceptual_weight: 1.0,
            mse_weight: 0.1,
            optimize_noise: true,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

impl ProjectOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..=1.0).contains(&self.lr_rampup)
            && (0.0..=1.0).contains(&self.lr_rampdown)
            && self.perceptual_weight >= 0.0
            && self.mse_weight >= 0.0
            && self.perceptual_weight + self.mse_weight > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("projection options out of range"))
        }
    }

    fn lr_at(&self, step: usize) -> f32 {
        let t = step as f32 / self.steps.max(1) as f32;
        let mut ramp = if self.lr_rampdown > 0.0 {
            ((1.0 - t) / self.lr_rampdown).min(1.0)
        } else {
            1.0
        };
        ramp = 0.5 - 0.5 * (ramp * std::f32::consts::PI).cos();
        if self.lr_rampup > 0.0 {
            ramp *= (t / self.lr_rampup).min(1.0);
        }
        self.lr * ramp
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub w_plus: LatentWPlus,
    pub noise: NoiseBuffers,
    /// `(step, loss)` before each update, then after the last one.
    pub loss_trace: Vec<(usize, f32)>,
    pub best_step: usize,
    pub final_image: ImageTensor,
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(trace: &[(usize, f32)], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0f64;
    for (i, (_, v)) in trace.iter().enumerate() {
        acc += *v as f64;
        if i >= w {
            acc -= trace[i - w].1 as f64;
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Finds the W+ latent (and optionally fine noise) whose rendering best
/// matches `target`. Starts from the broadcast `w_mean` with zero noise and
/// returns the best iterate.
pub fn project(target: &ImageTensor, ckpt: &GeneratorCheckpoint, opts: &ProjectOptions) -> Result<ProjectionResult> {
    opts.validate()?;
    let g = &ckpt.generator;
    let arch = g.arch();
    if target.size() != arch.resolution {
        return Err(Error::invalid(format!(
            "target is {0}x{0}, model renders {1}x{1}",
            target.size(),
            arch.resolution
        )));
    }
    let w_mean = ckpt.require_w_mean()?;
    let (l, d) = (g.num_ws(), arch.latent_dim);
    let sites = arch.noise_sites();
    let free_sites: Vec<usize> = if opts.optimize_noise {
        sites.iter().filter(|s| ckpt.gates.is_enabled(s.resolution)).map(|s| s.index).collect()
    } else {
        Vec::new()
    };

    // vars[0] is W+, then one buffer per free site
    let mut vars = vec![Tensor::from_parts(vec![1, l, d], w_mean.values().repeat(l))];
    let mut noise = NoiseBuffers::zeros(arch);
    for &i in &free_sites {
        let r = sites[i].resolution;
        vars.push(Tensor::zeros(&[1, 1, r, r]));
    }
    let target_t = ImageTensor::batch(std::slice::from_ref(target))?;
    let cnn = RandomCnn::new(PERCEPTUAL_SEED);
    let mut adam = Adam::for_tensors(
        AdamConfig {
            lr: opts.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &vars,
    );

    let mut trace = Vec::with_capacity(opts.steps + 1);
    let mut best: Option<(f32, usize, Vec<Tensor>)> = None;
    let mut initial = None;
    let mut over = 0usize;
    for step in 0..=opts.steps {
        let mut t = Tape::new();
        let p = g.params().bind(&mut t, false);
        let ws = t.input(vars[0].clone());
        let mut free_vars = Vec::new();
        let noise_vars: Vec<Var> = sites
            .iter()
            .map(|s| {
                if let Some(k) = free_sites.iter().position(|&i| i == s.index) {
                    let v = t.input(vars[1 + k].clone());
                    free_vars.push(v);
                    v
                } else if ckpt.gates.is_enabled(s.resolution) {
                    let b = noise.buffers[s.index].clone();
                    t.constant(b.reshape(&[1, 1, s.resolution, s.resolution]).expect("site shape"))
                } else {
                    t.constant(Tensor::zeros(&[1, 1, 1, 1]))
                }
            })
            .collect();
        let raw = g.synthesis_on_tape(&mut t, &p, ws, &noise_vars, &ckpt.gates);
        // compare what is displayed: rendered images are clamped
        let img = t.clamp(raw, -1.0, 1.0);
        let tgt = t.constant(target_t.clone());
        let diff = t.sub(img, tgt);
        let sq = t.square(diff);
        let mse = t.mean(sq);
        let perc = cnn.perceptual_distance(&mut t, img, tgt);
        let a = t.scale(perc, opts.perceptual_weight);
        let b = t.scale(mse, opts.mse_weight);
        let loss = t.add(a, b);
        let value = t.value(loss).item();
        if !value.is_finite() {
            return Err(Error::numeric(format!("projection loss became non-finite at step {step}")));
        }
        trace.push((step, value));
        let init = *initial.get_or_insert(value);
        if value > opts.divergence_factor * init {
            over += 1;
            if over >= opts.divergence_patience {
                return Err(Error::numeric(format!(
                    "projection diverged: loss {value} exceeded {}x the initial {init} for {over} steps",
                    opts.divergence_factor
                )));
            }
        } else {
            over = 0;
        }
        if best.as_ref().is_none_or(|(b, _, _)| value < *b) {
            best = Some((value, step, vars.clone()));
        }
        if step == opts.steps {
            break;
        }
        let mut grads = t.backward(loss);
        let mut gs = vec![grads.take(ws).unwrap_or_else(|| Tensor::zeros(vars[0].shape()))];
        for (k, v) in free_vars.iter().enumerate() {
            gs.push(grads.take(*v).unwrap_or_else(|| Tensor::zeros(vars[1 + k].shape())));
        }
        adam.step_tensors(&mut vars, &gs, opts.lr_at(step));
    }

    let (_, best_step, best_vars) = best.expect("at least one evaluation");
    let w_plus = LatentWPlus::from_tensor(&best_vars[0])?;
    for (k, &i) in free_sites.iter().enumerate() {
        let r = sites[i].resolution;
        noise.buffers[i] = best_vars[1 + k].clone().reshape(&[r, r])?;
    }
    let final_image = g.synthesize(&w_plus, &noise, &ckpt.gates)?;
    Ok(ProjectionResult {
        w_plus,
        noise,
        loss_trace: trace,
        best_step,
        final_image,
    })
}
