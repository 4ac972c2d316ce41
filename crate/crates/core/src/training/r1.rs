//! R1 gradient penalty on real images.
//!
//! The tape is first-order only, so the parameter gradient of the penalty is
//! taken as a central difference of parameter gradients along the input
//! gradient direction:
//!
//! `∇θ ½Σ‖g‖² = ∂/∂ε ∇θ ΣD(x + ε·g)`, with `g = ∇x ΣD(x)` held fixed.
//!
//! Both perturbed passes replay the leaky-ReLU sign pattern of the
//! unperturbed pass. The discriminator is then exactly linear in its input,
//! the difference is exact up to rounding, and the result is the almost-
//! everywhere derivative that double backpropagation would give.

use crate::autodiff::{ActivationPattern, Tape};
use crate::error::{Error, Result};
use crate::model::Discriminator;
use crate::tensor::Tensor;

use super::augment::AugmentPlan;

/// Anything that scores an NCHW batch and can differentiate the summed
/// score with respect to its input.
pub trait Critic {
    fn logits_and_input_grad(&self, batch: &Tensor) -> Result<(Vec<f32>, Tensor)>;
}

/// A discriminator seen through a fixed augmentation plan.
pub struct AugmentedCritic<'a> {
    pub d: &'a Discriminator,
    pub plan: &'a AugmentPlan,
}

impl AugmentedCritic<'_> {
    fn input_grad_on(&self, mut t: Tape, batch: &Tensor) -> Result<(Vec<f32>, Tensor, ActivationPattern)> {
        let p = self.d.params().bind(&mut t, false);
        let x = t.input(batch.clone());
        let xa = self.plan.apply(&mut t, x);
        let y = self.d.layout().forward(&mut t, &p, xa);
        let logits = t.value(y).data().to_vec();
        let s = t.sum(y);
        let mut g = t.backward(s);
        let grad = g.take(x).unwrap_or_else(|| Tensor::zeros(batch.shape()));
        if !grad.is_finite() || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite discriminator gradient"));
        }
        Ok((logits, grad, t.activation_pattern()))
    }
}

impl Critic for AugmentedCritic<'_> {
    fn logits_and_input_grad(&self, batch: &Tensor) -> Result<(Vec<f32>, Tensor)> {
        let (l, g, _) = self.input_grad_on(Tape::new(), batch)?;
        Ok((l, g))
    }
}

impl Critic for Discriminator {
    fn logits_and_input_grad(&self, batch: &Tensor) -> Result<(Vec<f32>, Tensor)> {
        AugmentedCritic {
            d: self,
            plan: &AugmentPlan::identity(),
        }
        .logits_and_input_grad(batch)
    }
}

fn per_item_sq_norm_mean(grad: &Tensor) -> f64 {
    let n = grad.dim(0);
    (0..n)
        .map(|i| grad.item_slice(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

/// `(γ/2)·mean_i ‖∇x D(x_i)‖²` over the batch.
pub fn r1_penalty(critic: &impl Critic, real_batch: &Tensor, gamma: f32) -> Result<f32> {
    if real_batch.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid("R1 penalty needs a non-empty batch"));
    }
    let (_, grad) = critic.logits_and_input_grad(real_batch)?;
    Ok((0.5 * gamma as f64 * per_item_sq_norm_mean(&grad)) as f32)
}

/// Perturbation size, as an RMS pixel displacement.
const FD_STEP: f64 = 0.1;

/// Penalty value and its gradient with respect to every discriminator
/// parameter, for `D∘plan` at `real_batch`.
pub fn r1_param_grads(
    d: &Discriminator,
    plan: &AugmentPlan,
    real_batch: &Tensor,
    gamma: f32,
) -> Result<(f32, Vec<Tensor>)> {
    let critic = AugmentedCritic { d, plan };
    let (_, g, pattern) = critic.input_grad_on(Tape::recording(), real_batch)?;
    let n = real_batch.dim(0);
    let penalty = (0.5 * gamma as f64 * per_item_sq_norm_mean(&g)) as f32;
    let rms = (g.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / g.numel() as f64).sqrt();
    if rms == 0.0 {
        let zeros = d.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        return Ok((penalty, zeros));
    }
    let eps = FD_STEP / rms;
    let theta_grad = |sign: f64| -> Result<Vec<Tensor>> {
        let mut x = real_batch.clone();
        for (v, gv) in x.data_mut().iter_mut().zip(g.data()) {
            *v += (sign * eps * *gv as f64) as f32;
        }
        let mut t = Tape::replaying(pattern.clone());
        let p = d.params().bind(&mut t, true);
        let xv = t.constant(x);
        let xa = plan.apply(&mut t, xv);
        let y = d.layout().forward(&mut t, &p, xa);
        let s = t.sum(y);
        let mut grads = t.backward(s);
        Ok(d.params().collect_grads(&p, &mut grads))
    };
    let plus = theta_grad(1.0)?;
    let minus = theta_grad(-1.0)?;
    let k = gamma as f64 / (n as f64 * 2.0 * eps);
    let out: Vec<Tensor> = plus
        .into_iter()
        .zip(minus)
        .map(|(a, b)| {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| ((*x as f64 - *y as f64) * k) as f32).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        })
        .collect();
    if out.iter().any(|t| !t.is_finite()) {
        return Err(Error::numeric("non-finite R1 parameter gradient"));
    }
    Ok((penalty, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use crate::rng::SeededRng;

    struct Linear(Vec<f32>);

    impl Critic for Linear {
        fn logits_and_input_grad(&self, batch: &Tensor) -> Result<(Vec<f32>, Tensor)> {
            let n = batch.dim(0);
            let logits = (0..n)
                .map(|i| batch.item_slice(i).iter().zip(&self.0).map(|(x, a)| x * a).sum())
                .collect();
            let grad = Tensor::new(batch.shape().to_vec(), (0..n).flat_map(|_| self.0.clone()).collect())?;
            Ok((logits, grad))
        }
    }

    struct Constant;

    impl Critic for Constant {
        fn logits_and_input_grad(&self, batch: &Tensor) -> Result<(Vec<f32>, Tensor)> {
            Ok((vec![1.5; batch.dim(0)], Tensor::zeros(batch.shape())))
        }
    }

    fn tiny() -> (Discriminator, Tensor) {
        let arch = ArchConfig {
            latent_dim: 8,
            channel_base: 64,
            channel_max: 8,
            ..ArchConfig::toy(8)
        };
        let d = Discriminator::new(&arch, 3).unwrap();
        let x = Tensor::new(vec![2, 3, 8, 8], SeededRng::new(4).normals(384)).unwrap();
        (d, x)
    }

    #[test]
    fn constant_and_linear_critics() {
        let x = Tensor::new(vec![2, 3, 2, 2], SeededRng::new(1).normals(24)).unwrap();
        assert_eq!(r1_penalty(&Constant, &x, 10.0).unwrap(), 0.0);
        let a = SeededRng::new(2).normals(12);
        let norm2: f64 = a.iter().map(|v| (*v as f64).powi(2)).sum();
        let got = r1_penalty(&Linear(a), &x, 10.0).unwrap() as f64;
        assert!((got - 5.0 * norm2).abs() <= 1e-6 * got.abs().max(1.0));
    }

    #[test]
    fn matches_finite_differences_on_tiny_discriminator() {
        let (d, x) = tiny();
        let gamma = 10.0;
        let got = r1_penalty(&d, &x, gamma).unwrap() as f64;
        let h = 2e-3f32;
        let mut sq = 0.0f64;
        for j in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[j] += h;
            let mut m = x.clone();
            m.data_mut()[j] -= h;
            let item = j / (3 * 64);
            let fp = d.logits(&p).unwrap()[item] as f64;
            let fm = d.logits(&m).unwrap()[item] as f64;
            sq += ((fp - fm) / (2.0 * h as f64)).powi(2);
        }
        let fd = 0.5 * gamma as f64 * sq / 2.0;
        assert!((got - fd).abs() <= 1e-3 * fd, "{got} vs {fd}");
    }

    /// Penalty with the activation pattern frozen at the unperturbed
    /// parameters: smooth in the parameters, so central differences are
    /// a faithful oracle for the almost-everywhere gradient.
    fn frozen_penalty(d: &Discriminator, pattern: &ActivationPattern, x: &Tensor, gamma: f32) -> f64 {
        let critic = AugmentedCritic { d, plan: &AugmentPlan::identity() };
        let (_, g, _) = critic.input_grad_on(Tape::replaying(pattern.clone()), x).unwrap();
        0.5 * gamma as f64 * per_item_sq_norm_mean(&g)
    }

    #[test]
    fn parameter_gradient_matches_penalty_differences() {
        let (d, x) = tiny();
        let gamma = 10.0;
        let plan = AugmentPlan::identity();
        let (pen, grads) = r1_param_grads(&d, &plan, &x, gamma).unwrap();
        assert!((pen - r1_penalty(&d, &x, gamma).unwrap()).abs() < 1e-6 * pen.max(1.0));
        let mut t = Tape::recording();
        let p = d.params().bind(&mut t, false);
        let xv = t.constant(x.clone());
        d.layout().forward(&mut t, &p, xv);
        let pattern = t.activation_pattern();
        assert!((frozen_penalty(&d, &pattern, &x, gamma) - pen as f64).abs() < 1e-6);
        let mut checked = 0;
        for (pi, g) in grads.iter().enumerate() {
            for j in [0, g.numel() / 2, g.numel() - 1] {
                let an = g.data()[j] as f64;
                let h = 1e-2f32;
                let eval = |delta: f32| {
                    let mut dd = d.clone();
                    dd.params_mut().get_mut(pi).data_mut()[j] += delta;
                    frozen_penalty(&dd, &pattern, &x, gamma)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
                assert!((fd - an).abs() <= 1e-2 * an.abs().max(fd.abs()).max(1e-3), "param {pi}[{j}]: {an} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }
}
