//! Discriminator-side augmentation: blit, geometric and colour transforms,
//! each drawn independently with probability `p` per image.
//!
//! Geometric transforms compose into one output→input pixel mapping that is
//! resampled bilinearly with mirror padding; blit transforms alone land on
//! integer coordinates and are exact copies. Colour transforms compose into
//! one affine map on RGB.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, WarpPlan};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlitTransform {
    XFlip,
    /// Rotation by a uniformly chosen non-zero multiple of 90°.
    Rotate90,
    /// Whole-pixel shift, up to `max` of the image size per axis.
    IntTranslate { max: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometricTransform {
    /// Scale `2^N(0, std)`.
    IsoScale { std: f32 },
    /// Angle uniform in `±max_turns·π`.
    Rotate { max_turns: f32 },
    /// Scales `(s, 1/s)` with `s = 2^N(0, std)`.
    AnisoScale { std: f32 },
    /// Shift `N(0, std)` times the image size per axis.
    FracTranslate { std: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColorTransform {
    /// Adds `N(0, std)` to every channel.
    Brightness { std: f32 },
    /// Multiplies by `2^N(0, std)`.
    Contrast { std: f32 },
    /// Reflects colours through the plane orthogonal to the luma axis.
    LumaFlip,
    /// Rotates about the luma axis by an angle uniform in `±max_turns·π`.
    HueRotate { max_turns: f32 },
    /// Scales chroma by `2^N(0, std)`.
    Saturation { std: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPipelineConfig {
    pub blit: Vec<BlitTransform>,
    pub geometric: Vec<GeometricTransform>,
    pub color: Vec<ColorTransform>,
    /// Clamp results to `[-1, 1]`.
    #[serde(default)]
    pub clamp_output: bool,
}

impl Default for AugmentationPipelineConfig {
    fn default() -> Self {
        Self {
            blit: vec![
                BlitTransform::XFlip,
                BlitTransform::Rotate90,
                BlitTransform::IntTranslate { max: 0.125 },
            ],
            geometric: vec![
                GeometricTransform::IsoScale { std: 0.2 },
                GeometricTransform::Rotate { max_turns: 1.0 },
                GeometricTransform::AnisoScale { std: 0.2 },
                GeometricTransform::FracTranslate { std: 0.125 },
            ],
            color: vec![
                ColorTransform::Brightness { std: 0.2 },
                ColorTransform::Contrast { std: 0.5 },
                ColorTransform::LumaFlip,
                ColorTransform::HueRotate { max_turns: 1.0 },
                ColorTransform::Saturation { std: 1.0 },
            ],
            clamp_output: false,
        }
    }
}

impl AugmentationPipelineConfig {
    pub fn disabled() -> Self {
        Self {
            blit: Vec::new(),
            geometric: Vec::new(),
            color: Vec::new(),
            clamp_output: false,
        }
    }
}

type Mat3 = [[f64; 3]; 3];
type Mat4 = [[f64; 4]; 4];

fn mul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

fn mul4(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut o = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            o[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

const I3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
const I4: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

fn scale2(sx: f64, sy: f64) -> Mat3 {
    [[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]]
}

fn translate2(tx: f64, ty: f64) -> Mat3 {
    [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]
}

fn rotate2(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Exact integer rotation by `k·90°`.
fn rotate90(k: usize) -> Mat3 {
    let (c, s) = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][k % 4];
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn luma_outer() -> [[f64; 3]; 3] {
    let v = 1.0 / 3f64.sqrt();
    [[v * v; 3]; 3]
}

fn embed3(m: [[f64; 3]; 3]) -> Mat4 {
    let mut o = I4;
    for i in 0..3 {
        o[i][..3].copy_from_slice(&m[i]);
    }
    o
}

/// Rodrigues rotation about the unit luma axis.
fn hue_rotation(a: f64) -> Mat4 {
    let v = 1.0 / 3f64.sqrt();
    let (s, c) = a.sin_cos();
    let k = [[0.0, -v, v], [v, 0.0, -v], [-v, v, 0.0]];
    let vv = luma_outer();
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            m[i][j] = c * id + s * k[i][j] + (1.0 - c) * vv[i][j];
        }
    }
    embed3(m)
}

/// Transforms sampled for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAugment {
    /// Output→input pixel mapping in centred pixel units.
    pub geometry: [[f64; 3]; 3],
    /// Homogeneous RGB transform.
    pub color: [[f64; 4]; 4],
}

impl ImageAugment {
    pub fn is_identity_geometry(&self) -> bool {
        self.geometry == I3
    }

    pub fn is_identity_color(&self) -> bool {
        self.color == I4
    }
}

/// Draws per-image transforms. Every transform consumes the same number of
/// random draws whether or not it fires, so streams stay aligned across `p`.
pub fn sample_augments(n: usize, size: usize, p: f32, cfg: &AugmentationPipelineConfig, seed: u64) -> Vec<ImageAugment> {
    let mut rng = SeededRng::new(seed);
    let size_f = size as f64;
    let hit = |rng: &mut SeededRng| rng.uniform() < p;
    (0..n)
        .map(|_| {
            let mut g = I3;
            for t in &cfg.blit {
                let on = hit(&mut rng);
                let (u, v) = (rng.uniform() as f64, rng.uniform() as f64);
                if !on {
                    continue;
                }
                let m = match *t {
                    BlitTransform::XFlip => scale2(-1.0, 1.0),
                    BlitTransform::Rotate90 => rotate90(1 + ((u * 3.0) as usize).min(2)),
                    BlitTransform::IntTranslate { max } => {
                        let m = max as f64;
                        let tx = ((u * 2.0 - 1.0) * m * size_f).round();
                        let ty = ((v * 2.0 - 1.0) * m * size_f).round();
                        translate2(tx, ty)
                    }
                };
                g = mul3(&g, &m);
            }
            for t in &cfg.geometric {
                let on = hit(&mut rng);
                let (u, n1, n2) = (rng.uniform() as f64, rng.normal_f64(), rng.normal_f64());
                if !on {
                    continue;
                }
                let m = match *t {
                    GeometricTransform::IsoScale { std } => {
                        let s = (n1 * std as f64).exp2();
                        scale2(1.0 / s, 1.0 / s)
                    }
                    GeometricTransform::Rotate { max_turns } => rotate2(-(u * 2.0 - 1.0) * PI * max_turns as f64),
                    GeometricTransform::AnisoScale { std } => {
                        let s = (n1 * std as f64).exp2();
                        scale2(1.0 / s, s)
                    }
                    GeometricTransform::FracTranslate { std } => {
                        let k = std as f64 * size_f;
                        translate2(-n1 * k, -n2 * k)
                    }
                };
                g = mul3(&g, &m);
            }
            let mut c = I4;
            for t in &cfg.color {
                let on = hit(&mut rng);
                let (u, n1) = (rng.uniform() as f64, rng.normal_f64());
                if !on {
                    continue;
                }
                let m = match *t {
                    ColorTransform::Brightness { std } => {
                        let b = n1 * std as f64;
                        let mut m = I4;
                        for row in m.iter_mut().take(3) {
                            row[3] = b;
                        }
                        m
                    }
                    ColorTransform::Contrast { std } => {
                        let s = (n1 * std as f64).exp2();
                        embed3([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]])
                    }
                    ColorTransform::LumaFlip => {
                        let vv = luma_outer();
                        let mut m = [[0.0; 3]; 3];
                        for i in 0..3 {
                            for j in 0..3 {
                                m[i][j] = if i == j { 1.0 } else { 0.0 } - 2.0 * vv[i][j];
                            }
                        }
                        embed3(m)
                    }
                    ColorTransform::HueRotate { max_turns } => hue_rotation((u * 2.0 - 1.0) * PI * max_turns as f64),
                    ColorTransform::Saturation { std } => {
                        let s = (n1 * std as f64).exp2();
                        let vv = luma_outer();
                        let mut m = [[0.0; 3]; 3];
                        for i in 0..3 {
                            for j in 0..3 {
                                let id = if i == j { 1.0 } else { 0.0 };
                                m[i][j] = vv[i][j] + (id - vv[i][j]) * s;
                            }
                        }
                        embed3(m)
                    }
                };
                c = mul4(&m, &c);
            }
            ImageAugment { geometry: g, color: c }
        })
        .collect()
}

/// Mirror padding without edge repetition.
fn reflect(i: i64, n: usize) -> u32 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as u32
}

fn warp_taps(g: &Mat3, size: usize) -> Vec<([u32; 4], [f32; 4])> {
    let half = size as f64 / 2.0;
    let mut taps = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (qx, qy) = (x as f64 + 0.5 - half, y as f64 + 0.5 - half);
            let px = g[0][0] * qx + g[0][1] * qy + g[0][2] + half - 0.5;
            let py = g[1][0] * qx + g[1][1] * qy + g[1][2] + half - 0.5;
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = ((px - x0) as f32, (py - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let xs = [reflect(x0, size), reflect(x0 + 1, size)];
            let ys = [reflect(y0, size), reflect(y0 + 1, size)];
            let s = size as u32;
            taps.push((
                [ys[0] * s + xs[0], ys[0] * s + xs[1], ys[1] * s + xs[0], ys[1] * s + xs[1]],
                [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            ));
        }
    }
    taps
}

/// A batch's sampled augmentation, ready to record on a tape. The same plan
/// can be replayed on several inputs.
#[derive(Debug, Clone)]
pub struct AugmentPlan {
    warp: Option<Arc<WarpPlan>>,
    color: Option<Arc<Vec<[f32; 12]>>>,
    clamp: bool,
}

impl AugmentPlan {
    pub fn new(n: usize, size: usize, p: f32, cfg: &AugmentationPipelineConfig, seed: u64) -> Self {
        if p <= 0.0 {
            return Self::identity();
        }
        let augs = sample_augments(n, size, p, cfg, seed);
        let warp = (!augs.iter().all(ImageAugment::is_identity_geometry)).then(|| {
            Arc::new(WarpPlan {
                taps: augs.iter().map(|a| warp_taps(&a.geometry, size)).collect(),
            })
        });
        let color = (!augs.iter().all(ImageAugment::is_identity_color)).then(|| {
            Arc::new(
                augs.iter()
                    .map(|a| {
                        let mut m = [0.0f32; 12];
                        for r in 0..3 {
                            for c in 0..4 {
                                m[r * 4 + c] = a.color[r][c] as f32;
                            }
                        }
                        m
                    })
                    .collect(),
            )
        });
        Self {
            warp,
            color,
            clamp: cfg.clamp_output,
        }
    }

    pub fn identity() -> Self {
        Self {
            warp: None,
            color: None,
            clamp: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.warp.is_none() && self.color.is_none() && !self.clamp
    }

    pub fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let mut y = x;
        if let Some(w) = &self.warp {
            y = t.warp(y, w.clone());
        }
        if let Some(c) = &self.color {
            y = t.color_affine(y, c.clone());
        }
        if self.clamp {
            y = t.clamp(y, -1.0, 1.0);
        }
        y
    }
}

/// Augments an NCHW batch of RGB images.
pub fn apply_augmentations(batch: &Tensor, p: f32, cfg: &AugmentationPipelineConfig, seed: u64) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
        return Err(Error::invalid(format!("expected [n,3,r,r] batch, got {s:?}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("augmentation probability {p} outside [0, 1]")));
    }
    let plan = AugmentPlan::new(s[0], s[2], p, cfg, seed);
    if p == 0.0 || plan.is_identity() {
        return Ok(batch.clone());
    }
    let mut t = Tape::new();
    let x = t.constant(batch.clone());
    let y = plan.apply(&mut t, x);
    Ok(t.value(y).clone())
}
