use serde::{Deserialize, Serialize};

/// Learning-rate decay form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Constant until `start_images`, then half-cosine down to `lr_final`
    /// at the end of training.
    Cosine { start_images: u64, lr_final: f32 },
}

/// Learning rate after `images_seen` of `total_images`.
pub fn lr_at(lr_initial: f32, decay: &LrDecay, images_seen: u64, total_images: u64) -> f32 {
    match *decay {
        LrDecay::Constant => lr_initial,
        LrDecay::Cosine { start_images, lr_final } => {
            if images_seen <= start_images {
                return lr_initial;
            }
            if images_seen >= total_images || total_images <= start_images {
                return lr_final;
            }
            let phase = (images_seen - start_images) as f64 / (total_images - start_images) as f64;
            let c = 0.5 * (1.0 + (std::f64::consts::PI * phase).cos());
            (lr_final as f64 + (lr_initial - lr_final) as f64 * c) as f32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const COS: LrDecay = LrDecay::Cosine { start_images: 1000, lr_final: 0.0002 };

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(lr_at(0.002, &COS, 0, 5000), 0.002);
        assert_eq!(lr_at(0.002, &COS, 5000, 5000), 0.0002);
        assert_eq!(lr_at(0.002, &COS, 9000, 5000), 0.0002);
        let mid = lr_at(0.002, &COS, 3000, 5000);
        assert!((mid - 0.0011).abs() < 1e-7, "{mid}");
        assert_eq!(lr_at(0.002, &LrDecay::Constant, 123, 5000), 0.002);
    }

    #[test]
    fn non_increasing() {
        let mut prev = f32::INFINITY;
        for s in (0..6000).step_by(7) {
            let lr = lr_at(0.002, &COS, s, 5000);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
