//! Latent vectors and the pure latent-space manipulations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

fn check_finite(v: &[f32], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite entries")))
    }
}

/// Input latent `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentZ(Vec<f32>);

impl LatentZ {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_finite(&values, "latent z")?;
        Ok(Self(values))
    }

    /// Standard-normal latent drawn from `seed` (first `dim` normals of the
    /// seed's stream).
    pub fn from_seed(seed: u64, dim: usize) -> Self {
        Self(SeededRng::new(seed).normals(dim))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Rescales onto the sphere of radius `sqrt(dim)`.
    pub fn normalized(&self) -> Vec<f32> {
        normalize_2nd_moment(&self.0)
    }
}

fn normalize_2nd_moment(v: &[f32]) -> Vec<f32> {
    let ms = v.iter().map(|x| x * x).sum::<f32>() / v.len() as f32;
    let k = 1.0 / (ms + 1e-8).sqrt();
    v.iter().map(|x| x * k).collect()
}

/// Mapped latent `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentW(Vec<f32>);

impl LatentW {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_finite(&values, "latent w")?;
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Element-wise mean of a non-empty set of latents.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a LatentW>) -> Result<Self> {
        let mut acc: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for w in items {
            if acc.is_empty() {
                acc = vec![0.0; w.dim()];
            } else if acc.len() != w.dim() {
                return Err(Error::invalid("latent dimensions differ"));
            }
            for (a, v) in acc.iter_mut().zip(&w.0) {
                *a += *v as f64;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("mean of an empty latent set"));
        }
        Ok(Self(acc.into_iter().map(|a| (a / n as f64) as f32).collect()))
    }
}

/// Per-layer stack of `w` vectors; index 0 feeds the 4×4 layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentWPlus {
    layers: Vec<Vec<f32>>,
}

impl LatentWPlus {
    pub fn new(layers: Vec<Vec<f32>>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::invalid("W+ latent needs at least one layer"));
        };
        let d = first.len();
        for (i, l) in layers.iter().enumerate() {
            if l.len() != d {
                return Err(Error::invalid(format!("W+ layer {i} has dim {} != {d}", l.len())));
            }
            check_finite(l, "W+ latent")?;
        }
        Ok(Self { layers })
    }

    pub fn broadcast(w: &LatentW, num_layers: usize) -> Self {
        Self {
            layers: vec![w.0.clone(); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].len()
    }

    pub fn layer(&self, i: usize) -> &[f32] {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.layers[i]
    }

    pub fn layers(&self) -> &[Vec<f32>] {
        &self.layers
    }

    /// `[1, L, D]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.layers.concat();
        Tensor::from_parts(vec![1, self.num_layers(), self.dim()], data)
    }

    /// Accepts `[L, D]` or `[1, L, D]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (l, d) = match t.shape() {
            [l, d] | [1, l, d] => (*l, *d),
            s => return Err(Error::invalid(format!("W+ tensor has shape {s:?}"))),
        };
        Self::new(t.data().chunks(d).take(l).map(<[f32]>::to_vec).collect())
    }
}

/// Moves layers `0..cutoff_layers` towards `w_mean`:
/// `out[i] = w_mean + psi·(w[i] − w_mean)`, evaluated as
/// `(1−psi)·w_mean + psi·w[i]` so that `psi ∈ {0, 1}` is exact.
pub fn truncate(w: &LatentWPlus, psi: f32, w_mean: &LatentW, cutoff_layers: usize) -> Result<LatentWPlus> {
    if !psi.is_finite() {
        return Err(Error::invalid("truncation psi must be finite"));
    }
    if cutoff_layers > w.num_layers() {
        return Err(Error::invalid(format!(
            "truncation cutoff {cutoff_layers} exceeds {} layers",
            w.num_layers()
        )));
    }
    if w_mean.dim() != w.dim() {
        return Err(Error::invalid("w_mean dimension differs from latent"));
    }
    let mut out = w.clone();
    for layer in out.layers.iter_mut().take(cutoff_layers) {
        for (v, m) in layer.iter_mut().zip(w_mean.values()) {
            *v = (1.0 - psi) * m + psi * *v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleMixSpec {
    pub cutoff: usize,
    pub strength: f32,
    pub mix_seed: u64,
}

impl StyleMixSpec {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.cutoff > num_layers {
            return Err(Error::invalid(format!(
                "style-mix cutoff {} outside [0, {num_layers}]",
                self.cutoff
            )));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::invalid(format!(
                "style-mix strength {} outside [0, 1]",
                self.strength
            )));
        }
        Ok(())
    }
}

/// Keeps `identity` below the cutoff and blends towards `style` from the
/// cutoff on: `(1−strength)·identity[i] + strength·style[i]`.
pub fn style_mix(identity: &LatentWPlus, style: &LatentWPlus, spec: &StyleMixSpec) -> Result<LatentWPlus> {
    if identity.num_layers() != style.num_layers() || identity.dim() != style.dim() {
        return Err(Error::invalid(format!(
            "style-mix inputs differ: {}x{} vs {}x{}",
            identity.num_layers(),
            identity.dim(),
            style.num_layers(),
            style.dim()
        )));
    }
    spec.validate(identity.num_layers())?;
    let s = spec.strength;
    let mut out = identity.clone();
    for (layer, src) in out.layers.iter_mut().zip(&style.layers).skip(spec.cutoff) {
        for (v, t) in layer.iter_mut().zip(src) {
            *v = (1.0 - s) * *v + s * t;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wplus(seed: u64, l: usize, d: usize) -> LatentWPlus {
        let mut rng = SeededRng::new(seed);
        LatentWPlus::new((0..l).map(|_| rng.normals(d)).collect()).unwrap()
    }

    #[test]
    fn truncation_examples() {
        let w = wplus(1, 6, 8);
        let m = LatentW::new(SeededRng::new(2).normals(8)).unwrap();
        assert_eq!(truncate(&w, 1.0, &m, 6).unwrap(), w);
        let collapsed = truncate(&w, 0.0, &m, 6).unwrap();
        assert!(collapsed.layers().iter().all(|l| l == m.values()));
        // w = m + v, psi = 0.5 -> m + v/2
        let v = SeededRng::new(3).normals(8);
        let shifted: Vec<f32> = m.values().iter().zip(&v).map(|(a, b)| a + b).collect();
        let w2 = LatentWPlus::broadcast(&LatentW::new(shifted).unwrap(), 2);
        let half = truncate(&w2, 0.5, &m, 2).unwrap();
        for i in 0..8 {
            assert!((half.layer(0)[i] - (m.values()[i] + 0.5 * v[i])).abs() < 1e-6);
        }
        // layers at and above the cutoff untouched
        let partial = truncate(&w, 0.0, &m, 2).unwrap();
        assert_eq!(partial.layer(2), w.layer(2));
        assert!(truncate(&w, f32::NAN, &m, 2).is_err());
        assert!(truncate(&w, 0.5, &m, 7).is_err());
    }

    #[test]
    fn style_mix_length_mismatch() {
        let spec = StyleMixSpec { cutoff: 1, strength: 1.0, mix_seed: 0 };
        assert!(style_mix(&wplus(1, 4, 3), &wplus(2, 5, 3), &spec).is_err());
    }

    proptest! {
        #[test]
        fn style_mix_boundary_identities(seed in any::<u64>(), cutoff in 0usize..=8, strength in 0.0f32..=1.0) {
            let a = wplus(seed, 8, 5);
            let b = wplus(seed.wrapping_add(1), 8, 5);
            let none = style_mix(&a, &b, &StyleMixSpec { cutoff, strength: 0.0, mix_seed: 0 }).unwrap();
            prop_assert_eq!(&none, &a);
            let full = style_mix(&a, &b, &StyleMixSpec { cutoff: 0, strength: 1.0, mix_seed: 0 }).unwrap();
            prop_assert_eq!(&full, &b);
            let empty = style_mix(&a, &b, &StyleMixSpec { cutoff: 8, strength, mix_seed: 0 }).unwrap();
            prop_assert_eq!(&empty, &a);
        }

        #[test]
        fn truncation_composes_multiplicatively(seed in any::<u64>(), p1 in -2.0f32..2.0, p2 in -2.0f32..2.0, cut in 0usize..=6) {
            let w = wplus(seed, 6, 7);
            let m = LatentW::new(SeededRng::new(seed ^ 1).normals(7)).unwrap();
            let twice = truncate(&truncate(&w, p1, &m, cut).unwrap(), p2, &m, cut).unwrap();
            let once = truncate(&w, p1 * p2, &m, cut).unwrap();
            for i in 0..6 {
                for j in 0..7 {
                    prop_assert!((twice.layer(i)[j] - once.layer(i)[j]).abs() < 1e-4);
                }
            }
        }
    }
}
