//! Mapping network, noise-gated synthesis network and residual
//! discriminator, expressed as tape computations over a [`ParamStore`].
//!
//! Weights use the equalized learning-rate parametrization: stored as
//! `N(0,1)/lr_mult` and scaled by `lr_mult/sqrt(fan_in)` at run time.
//! Modulated convolutions scale activations by the layer style, convolve
//! with the shared weight, then demodulate per output channel.

use std::f32::consts::SQRT_2;

use super::config::ArchConfig;
use super::noise::NoiseGateConfig;
use crate::autodiff::{Tape, Var};
use crate::params::{Init, ParamSpec, ParamStore};

const LRELU_SLOPE: f32 = 0.2;
const DEMOD_EPS: f32 = 1e-8;

#[derive(Debug, Clone)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    lr_mult: f32,
}

impl Dense {
    fn specs(specs: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize, lr_mult: f32, bias_init: f32) -> Self {
        let w = specs.len();
        specs.push(ParamSpec::new(format!("{name}.weight"), &[fan_out, fan_in], Init::Normal(1.0 / lr_mult)));
        specs.push(ParamSpec::new(format!("{name}.bias"), &[fan_out], Init::Constant(bias_init / lr_mult)));
        Self {
            w,
            b: w + 1,
            fan_in,
            lr_mult,
        }
    }

    fn forward(&self, t: &mut Tape, p: &[Var], x: Var) -> Var {
        let gain = self.lr_mult / (self.fan_in as f32).sqrt();
        t.linear(x, p[self.w], Some(p[self.b]), gain, self.lr_mult)
    }
}

#[derive(Debug, Clone)]
struct ModConv {
    affine: Dense,
    weight: usize,
    bias: usize,
    noise_strength: Option<usize>,
    c_in: usize,
    k: usize,
    up: bool,
    demodulate: bool,
    w_index: usize,
    noise_site: Option<usize>,
    resolution: usize,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    fn specs(
        specs: &mut Vec<ParamSpec>,
        name: &str,
        arch: &ArchConfig,
        c_in: usize,
        c_out: usize,
        k: usize,
        up: bool,
        w_index: usize,
        noise_site: Option<usize>,
        resolution: usize,
    ) -> Self {
        let affine = Dense::specs(specs, &format!("{name}.affine"), arch.latent_dim, c_in, 1.0, 1.0);
        let weight = specs.len();
        specs.push(ParamSpec::new(format!("{name}.weight"), &[c_out, c_in, k, k], Init::Normal(1.0)));
        let bias = specs.len();
        specs.push(ParamSpec::new(format!("{name}.bias"), &[c_out], Init::Constant(0.0)));
        let noise_strength = noise_site.map(|_| {
            specs.push(ParamSpec::new(
                format!("{name}.noise_strength"),
                &[c_out],
                Init::Constant(arch.noise_strength_init),
            ));
            specs.len() - 1
        });
        Self {
            affine,
            weight,
            bias,
            noise_strength,
            c_in,
            k,
            up,
            demodulate: noise_site.is_some(),
            w_index,
            noise_site,
            resolution,
        }
    }

    /// Style-modulated convolution. `noise` is `None` when the site's gate is
    /// off; the noise term is then absent from the graph.
    fn forward(&self, t: &mut Tape, p: &[Var], x: Var, ws: Var, noise: Option<Var>) -> Var {
        let w_layer = t.select_layer(ws, self.w_index);
        let mut styles = self.affine.forward(t, p, w_layer);
        let gain = 1.0 / ((self.c_in * self.k * self.k) as f32).sqrt();
        let x = if self.up { t.upsample2x(x) } else { x };
        if !self.demodulate {
            // toRGB: fold the weight gain into the styles, no demodulation
            styles = t.scale(styles, gain);
            let xs = t.scale_nc(x, styles);
            let y = t.conv2d(xs, p[self.weight], 1.0);
            return t.add_bias(y, p[self.bias], 1.0);
        }
        let xs = t.scale_nc(x, styles);
        let mut y = t.conv2d(xs, p[self.weight], gain);

        // d[n,o] = rsqrt(Σ_i s[n,i]² · Σ_k (gain·W[o,i,k])²)
        let c_out = t.shape(p[self.weight])[0];
        let scaled = t.scale(p[self.weight], gain);
        let r = t.reshape(scaled, &[c_out, self.c_in, self.k * self.k]);
        let sq = t.square(r);
        let wsq = t.reduce_last(sq);
        let wsq_t = t.transpose(wsq);
        let s2 = t.square(styles);
        let m = t.matmul(s2, wsq_t);
        let d = t.rsqrt(m, DEMOD_EPS);
        y = t.scale_nc(y, d);

        if let (Some(nz), Some(strength)) = (noise, self.noise_strength) {
            y = t.add_noise(y, nz, p[strength]);
        }
        let y = t.add_bias(y, p[self.bias], 1.0);
        t.leaky_relu(y, LRELU_SLOPE, SQRT_2)
    }
}

#[derive(Debug, Clone)]
struct SynthBlock {
    resolution: usize,
    conv0: Option<ModConv>,
    conv1: ModConv,
    torgb: ModConv,
}

/// Parameter layout of the generator (mapping + synthesis).
#[derive(Debug, Clone)]
pub struct GeneratorLayout {
    pub arch: ArchConfig,
    specs: Vec<ParamSpec>,
    mapping: Vec<Dense>,
    const_input: usize,
    blocks: Vec<SynthBlock>,
}

impl GeneratorLayout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut specs = Vec::new();
        let d = arch.latent_dim;
        let mapping = (0..arch.mapping_layers)
            .map(|i| Dense::specs(&mut specs, &format!("mapping.fc{i}"), d, d, arch.mapping_lr_mult, 0.0))
            .collect();
        let c4 = arch.channels(4);
        let const_input = specs.len();
        specs.push(ParamSpec::new("synthesis.b4.const", &[c4, 4, 4], Init::Normal(1.0)));

        let mut blocks = Vec::new();
        let mut site = 0usize;
        let mut w_idx = 0usize;
        let mut c_prev = c4;
        for res in arch.resolutions() {
            let c = arch.channels(res);
            let name = format!("synthesis.b{res}");
            let conv0 = (res > 4).then(|| {
                let m = ModConv::specs(&mut specs, &format!("{name}.conv0"), arch, c_prev, c, 3, true, w_idx, Some(site), res);
                site += 1;
                w_idx += 1;
                m
            });
            let conv1 = ModConv::specs(&mut specs, &format!("{name}.conv1"), arch, c, c, 3, false, w_idx, Some(site), res);
            site += 1;
            w_idx += 1;
            let torgb = ModConv::specs(&mut specs, &format!("{name}.torgb"), arch, c, 3, 1, false, w_idx, None, res);
            blocks.push(SynthBlock {
                resolution: res,
                conv0,
                conv1,
                torgb,
            });
            c_prev = c;
        }
        debug_assert_eq!(w_idx + 1, arch.num_ws());
        debug_assert_eq!(site, arch.noise_sites().len());
        Self {
            arch: arch.clone(),
            specs,
            mapping,
            const_input,
            blocks,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Index range of the mapping-network parameters in the store.
    pub fn num_mapping_params(&self) -> usize {
        2 * self.mapping.len()
    }

    /// `z_normalized: [n, D]` to `w: [n, D]`.
    pub fn mapping(&self, t: &mut Tape, p: &[Var], z_normalized: Var) -> Var {
        let mut x = z_normalized;
        for layer in &self.mapping {
            x = layer.forward(t, p, x);
            x = t.leaky_relu(x, LRELU_SLOPE, SQRT_2);
        }
        x
    }

    /// `ws: [n, L, D]` to an image `[n, 3, R, R]` (unclamped).
    ///
    /// `noise[i]` is the `[n or 1, 1, r, r]` buffer of site `i`; buffers at
    /// sites whose resolution is gated off are never read.
    pub fn synthesis(&self, t: &mut Tape, p: &[Var], ws: Var, noise: &[Var], gates: &NoiseGateConfig) -> Var {
        let n = t.shape(ws)[0];
        let mut x = t.broadcast_batch(p[self.const_input], n);
        let mut img: Option<Var> = None;
        for block in &self.blocks {
            let gated = |conv: &ModConv| {
                conv.noise_site
                    .filter(|_| gates.is_enabled(conv.resolution))
                    .map(|s| noise[s])
            };
            if let Some(c0) = &block.conv0 {
                let nz = gated(c0);
                x = c0.forward(t, p, x, ws, nz);
            }
            let nz = gated(&block.conv1);
            x = block.conv1.forward(t, p, x, ws, nz);
            let rgb = block.torgb.forward(t, p, x, ws, None);
            img = Some(match img {
                Some(prev) => {
                    let up = t.upsample2x(prev);
                    t.add(up, rgb)
                }
                None => rgb,
            });
            debug_assert_eq!(t.shape(x)[2], block.resolution);
        }
        img.expect("at least one synthesis block")
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: usize,
    b: Option<usize>,
    fan_in: usize,
    act: bool,
}

impl ConvLayer {
    fn specs(specs: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool, act: bool) -> Self {
        let w = specs.len();
        specs.push(ParamSpec::new(format!("{name}.weight"), &[c_out, c_in, k, k], Init::Normal(1.0)));
        let b = bias.then(|| {
            specs.push(ParamSpec::new(format!("{name}.bias"), &[c_out], Init::Constant(0.0)));
            specs.len() - 1
        });
        Self {
            w,
            b,
            fan_in: c_in * k * k,
            act,
        }
    }

    fn forward(&self, t: &mut Tape, p: &[Var], x: Var, gain_out: f32) -> Var {
        let mut y = t.conv2d(x, p[self.w], 1.0 / (self.fan_in as f32).sqrt());
        if let Some(b) = self.b {
            y = t.add_bias(y, p[b], 1.0);
        }
        if self.act {
            y = t.leaky_relu(y, LRELU_SLOPE, SQRT_2 * gain_out);
        } else if gain_out != 1.0 {
            y = t.scale(y, gain_out);
        }
        y
    }
}

#[derive(Debug, Clone)]
struct DiscBlock {
    conv0: ConvLayer,
    conv1: ConvLayer,
    skip: ConvLayer,
}

/// Parameter layout of the residual discriminator.
#[derive(Debug, Clone)]
pub struct DiscriminatorLayout {
    pub arch: ArchConfig,
    specs: Vec<ParamSpec>,
    from_rgb: ConvLayer,
    blocks: Vec<DiscBlock>,
    epilogue_conv: ConvLayer,
    fc: Dense,
    out: Dense,
}

impl DiscriminatorLayout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut specs = Vec::new();
        let top = arch.resolution;
        let from_rgb = ConvLayer::specs(&mut specs, &format!("disc.b{top}.fromrgb"), 3, arch.channels(top), 1, true, true);
        let mut blocks = Vec::new();
        let mut res = top;
        while res > 4 {
            let (c, c_next) = (arch.channels(res), arch.channels(res / 2));
            let name = format!("disc.b{res}");
            blocks.push(DiscBlock {
                conv0: ConvLayer::specs(&mut specs, &format!("{name}.conv0"), c, c, 3, true, true),
                conv1: ConvLayer::specs(&mut specs, &format!("{name}.conv1"), c, c_next, 3, true, true),
                skip: ConvLayer::specs(&mut specs, &format!("{name}.skip"), c, c_next, 1, false, false),
            });
            res /= 2;
        }
        let c4 = arch.channels(4);
        let epilogue_conv = ConvLayer::specs(&mut specs, "disc.b4.conv", c4, c4, 3, true, true);
        let fc = Dense::specs(&mut specs, "disc.b4.fc", c4 * 16, c4, 1.0, 0.0);
        let out = Dense::specs(&mut specs, "disc.b4.out", c4, 1, 1.0, 0.0);
        Self {
            arch: arch.clone(),
            specs,
            from_rgb,
            blocks,
            epilogue_conv,
            fc,
            out,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// `img: [n, 3, R, R]` to logits `[n]`.
    pub fn forward(&self, t: &mut Tape, p: &[Var], img: Var) -> Var {
        let n = t.shape(img)[0];
        let mut x = self.from_rgb.forward(t, p, img, 1.0);
        let half = std::f32::consts::FRAC_1_SQRT_2;
        for b in &self.blocks {
            let skip_in = t.downsample2x(x);
            let skip = b.skip.forward(t, p, skip_in, half);
            let y = b.conv0.forward(t, p, x, 1.0);
            let y = b.conv1.forward(t, p, y, half);
            let y = t.downsample2x(y);
            x = t.add(skip, y);
        }
        let x = self.epilogue_conv.forward(t, p, x, 1.0);
        let c4 = t.shape(x)[1];
        let flat = t.reshape(x, &[n, c4 * 16]);
        let h = self.fc.forward(t, p, flat);
        let h = t.leaky_relu(h, LRELU_SLOPE, SQRT_2);
        let o = self.out.forward(t, p, h);
        t.reshape(o, &[n])
    }
}

/// Fresh generator parameters.
pub fn init_generator(layout: &GeneratorLayout, seed: u64) -> ParamStore {
    ParamStore::init(layout.specs(), seed)
}

pub fn init_discriminator(layout: &DiscriminatorLayout, seed: u64) -> ParamStore {
    ParamStore::init(layout.specs(), seed)
}
