use serde::{Deserialize, Serialize};

/// Adaptive augmentation controller state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaState {
    /// Augmentation probability, always in `[0, 1]`.
    pub p: f32,
    /// Mean sign of the discriminator on reals over the last interval.
    pub rt_estimate: f32,
}

impl Default for AdaState {
    fn default() -> Self {
        Self { p: 0.0, rt_estimate: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaConfig {
    pub target: f32,
    /// Steps between controller updates.
    pub adjust_interval: u64,
    /// Images needed to sweep `p` across the full `[0, 1]` range.
    pub speed_images: f32,
    /// When set, `p` stays at this value and the controller only tracks `rt`.
    pub fixed_p: Option<f32>,
}

impl Default for AdaConfig {
    fn default() -> Self {
        Self {
            target: 0.6,
            adjust_interval: 4,
            speed_images: 100_000.0,
            fixed_p: None,
        }
    }
}

/// One controller update from the real-image logits gathered over the
/// last `adjust_interval` steps of `batch_size` images.
pub fn ada_update(state: AdaState, real_scores: &[f32], cfg: &AdaConfig, batch_size: usize) -> AdaState {
    if real_scores.is_empty() {
        return state;
    }
    let sign = |s: f32| if s > 0.0 { 1.0 } else if s < 0.0 { -1.0 } else { 0.0 };
    let rt = (real_scores.iter().map(|&s| sign(s)).sum::<f64>() / real_scores.len() as f64) as f32;
    let p = match cfg.fixed_p {
        Some(p) => p.clamp(0.0, 1.0),
        None => {
            let step = (batch_size as f64 * cfg.adjust_interval as f64 / cfg.speed_images as f64) as f32;
            let dir = if rt > cfg.target {
                1.0
            } else if rt < cfg.target {
                -1.0
            } else {
                0.0
            };
            (state.p + dir * step).clamp(0.0, 1.0)
        }
    };
    AdaState { p, rt_estimate: rt }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controller_direction_and_clamp() {
        let cfg = AdaConfig::default();
        let s = AdaState { p: 0.5, rt_estimate: 0.0 };
        let up = ada_update(s, &[1.0, 2.0, 0.5], &cfg, 8);
        assert!(up.p > 0.5);
        assert_eq!(up.rt_estimate, 1.0);
        let mut down = AdaState { p: 0.001, rt_estimate: 0.0 };
        for _ in 0..20 {
            let next = ada_update(down, &[-1.0; 4], &cfg, 8);
            assert!(next.p < down.p || next.p == 0.0);
            down = next;
        }
        assert_eq!(down.p, 0.0);
    }

    #[test]
    fn equilibrium_keeps_p() {
        let cfg = AdaConfig { target: 0.5, ..Default::default() };
        // three positive, one negative: rt = 0.5
        let s = ada_update(AdaState { p: 0.3, rt_estimate: 0.0 }, &[1.0, 1.0, 1.0, -1.0], &cfg, 8);
        assert_eq!(s.p, 0.3);
    }

    #[test]
    fn saturates_at_one() {
        let cfg = AdaConfig { speed_images: 10.0, ..Default::default() };
        let s = ada_update(AdaState { p: 0.9, rt_estimate: 0.0 }, &[1.0], &cfg, 8);
        assert_eq!(s.p, 1.0);
    }
}
