//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants or differentiable inputs (parameters, latents, images);
//! [`Tape::backward`] walks the tape in reverse and returns the gradient of a
//! scalar with respect to every node that depends on a differentiable leaf.

use std::sync::Arc;

use crate::tensor::{self, ConvGeom, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-image bilinear resampling plan: for every output pixel, four source
/// pixel indices within the same plane and their weights.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    pub taps: Vec<Vec<([u32; 4], [f32; 4])>>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Square(Var),
    Softplus(Var),
    LeakyRelu { x: Var, slope: f32, gain: f32, mask: Option<Arc<Vec<bool>>> },
    Rsqrt { x: Var, eps: f32 },
    Clamp { x: Var, lo: f32, hi: f32 },
    Sum(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    ReduceLast(Var),
    Linear { x: Var, w: Var, b: Option<Var>, w_gain: f32, b_gain: f32 },
    Conv2d { x: Var, w: Var, gain: f32 },
    AddBiasC { x: Var, b: Var, gain: f32 },
    ScaleNC { x: Var, s: Var },
    AddNoise { x: Var, noise: Var, strength: Var },
    Upsample2x(Var),
    Downsample2x(Var),
    BroadcastBatch { x: Var, n: usize },
    SelectLayer { x: Var, layer: usize },
    MixLayers { a: Var, b: Var, cutoffs: Vec<usize>, layers: usize },
    Warp { x: Var, plan: Arc<WarpPlan> },
    ColorAffine { x: Var, mats: Arc<Vec<[f32; 12]>> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Activation sign patterns of every leaky ReLU on a tape, in call order.
pub type ActivationPattern = Vec<Arc<Vec<bool>>>;

#[derive(Default)]
enum MaskMode {
    #[default]
    Free,
    Record(ActivationPattern),
    Replay(ActivationPattern, usize),
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    masks: MaskMode,
}

/// Gradients indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn nchw(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that remembers which side of zero every leaky-ReLU input fell
    /// on; read them back with [`Tape::activation_pattern`].
    pub fn recording() -> Self {
        Self {
            nodes: Vec::new(),
            masks: MaskMode::Record(Vec::new()),
        }
    }

    /// A tape whose leaky ReLUs use the given sign patterns instead of the
    /// signs of their inputs. The network is then linear in its input for
    /// fixed parameters.
    pub fn replaying(pattern: ActivationPattern) -> Self {
        Self {
            nodes: Vec::new(),
            masks: MaskMode::Replay(pattern, 0),
        }
    }

    pub fn activation_pattern(&self) -> ActivationPattern {
        match &self.masks {
            MaskMode::Record(p) | MaskMode::Replay(p, _) => p.clone(),
            MaskMode::Free => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows to it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let t = self.value(x).map(|v| v * k);
        self.push(t, Op::Scale(x, k), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32, gain: f32) -> Var {
        let mask = match &mut self.masks {
            MaskMode::Free => None,
            MaskMode::Record(all) => {
                let m = Arc::new(self.nodes[x.0].value.data().iter().map(|v| *v >= 0.0).collect::<Vec<_>>());
                all.push(m.clone());
                Some(m)
            }
            MaskMode::Replay(all, next) => {
                let m = all.get(*next).expect("activation pattern shorter than the network").clone();
                *next += 1;
                assert_eq!(m.len(), self.nodes[x.0].value.numel(), "activation pattern shape");
                Some(m)
            }
        };
        let t = match &mask {
            None => self
                .value(x)
                .map(|v| if v >= 0.0 { v * gain } else { v * slope * gain }),
            Some(m) => {
                let v = self.value(x);
                let data = v
                    .data()
                    .iter()
                    .zip(m.iter())
                    .map(|(v, pos)| if *pos { v * gain } else { v * slope * gain })
                    .collect();
                Tensor::from_parts(v.shape().to_vec(), data)
            }
        };
        self.push(t, Op::LeakyRelu { x, slope, gain, mask }, &[x])
    }

    /// `1/sqrt(x + eps)`.
    pub fn rsqrt(&mut self, x: Var, eps: f32) -> Var {
        let t = self.value(x).map(|v| 1.0 / (v + eps).sqrt());
        self.push(t, Op::Rsqrt { x, eps }, &[x])
    }

    /// Clamps to `[lo, hi]`; the gradient passes only where the input is
    /// strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f32;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape element count mismatch");
        self.push(t, Op::Reshape(x), &[x])
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.dim(0), va.dim(1));
        assert_eq!(vb.dim(0), k, "matmul inner dimension mismatch");
        let n = vb.dim(1);
        let mut out = vec![0.0; m * n];
        tensor::gemm(m, k, n, va.data(), false, vb.data(), false, 0.0, &mut out);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (r, c) = (v.dim(0), v.dim(1));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x])
    }

    /// Sums over the last axis.
    pub fn reduce_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let last = *v.shape().last().expect("reduce_last on a scalar");
        let out: Vec<f32> = v.data().chunks(last).map(|c| c.iter().sum()).collect();
        let shape = v.shape()[..v.shape().len() - 1].to_vec();
        self.push(Tensor::from_parts(shape, out), Op::ReduceLast(x), &[x])
    }

    /// `y = x·(w·w_gain)ᵀ + b·b_gain` with `x: [n,i]`, `w: [o,i]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, w_gain: f32, b_gain: f32) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, i) = (vx.dim(0), vx.dim(1));
        let o = vw.dim(0);
        assert_eq!(vw.dim(1), i, "linear input width mismatch");
        let mut out = vec![0.0; n * o];
        tensor::gemm(n, i, o, vx.data(), false, vw.data(), true, 0.0, &mut out);
        if w_gain != 1.0 {
            out.iter_mut().for_each(|v| *v *= w_gain);
        }
        if let Some(b) = b {
            let vb = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (r, bv) in row.iter_mut().zip(vb) {
                    *r += bv * b_gain;
                }
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            Tensor::from_parts(vec![n, o], out),
            Op::Linear { x, w, b, w_gain, b_gain },
            &parents,
        )
    }

    fn conv_geom(&self, x: Var, w: Var) -> ConvGeom {
        let (n, c, h, wd) = nchw(self.value(x));
        let ws = self.value(w).shape();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c, "conv input channel mismatch");
        assert_eq!(ws[2], ws[3]);
        ConvGeom {
            n,
            c_in: c,
            c_out: ws[0],
            h,
            w: wd,
            k: ws[2],
        }
    }

    /// Stride-1 same-padded convolution with weight `w·gain`.
    pub fn conv2d(&mut self, x: Var, w: Var, gain: f32) -> Var {
        let g = self.conv_geom(x, w);
        let scaled: Vec<f32> = self.value(w).data().iter().map(|v| v * gain).collect();
        let y = tensor::conv2d_forward(g, self.value(x).data(), &scaled);
        self.push(
            Tensor::from_parts(vec![g.n, g.c_out, g.h, g.w], y),
            Op::Conv2d { x, w, gain },
            &[x, w],
        )
    }

    /// Adds `b·gain` per channel; `x` is `[n,c,...]`.
    pub fn add_bias(&mut self, x: Var, b: Var, gain: f32) -> Var {
        let vx = self.value(x);
        let c = vx.dim(1);
        let inner = vx.numel() / (vx.dim(0) * c);
        let vb = self.value(b).data();
        assert_eq!(vb.len(), c, "bias width mismatch");
        let mut out = vx.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = vb[i % c] * gain;
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(t, Op::AddBiasC { x, b, gain }, &[x, b])
    }

    /// Multiplies `x: [n,c,...]` by `s: [n,c]`.
    pub fn scale_nc(&mut self, x: Var, s: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.dim(0), vx.dim(1));
        let inner = vx.numel() / (n * c);
        let vs = self.value(s);
        assert_eq!(vs.shape(), [n, c], "per-channel scale shape mismatch");
        let mut out = vx.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let k = vs.data()[i];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(t, Op::ScaleNC { x, s }, &[x, s])
    }

    /// `x + strength[c]·noise` with `noise: [n or 1, 1, h, w]`.
    pub fn add_noise(&mut self, x: Var, noise: Var, strength: Var) -> Var {
        let (n, c, h, w) = nchw(self.value(x));
        let vn = self.value(noise);
        assert!(
            vn.shape() == [n, 1, h, w] || vn.shape() == [1, 1, h, w],
            "noise shape {:?} does not fit activation [{n},{c},{h},{w}]",
            vn.shape()
        );
        let vs = self.value(strength).data();
        assert_eq!(vs.len(), c);
        let shared = vn.dim(0) == 1;
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            let nz = vn.item_slice(if shared { 0 } else { i });
            for ch in 0..c {
                let k = vs[ch];
                let dst = &mut out[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (d, z) in dst.iter_mut().zip(nz) {
                    *d += k * z;
                }
            }
        }
        let t = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(t, Op::AddNoise { x, noise, strength }, &[x, noise, strength])
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.value(x));
        let y = tensor::upsample2x(self.value(x).data(), n * c, h, w);
        self.push(Tensor::from_parts(vec![n, c, 2 * h, 2 * w], y), Op::Upsample2x(x), &[x])
    }

    pub fn downsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.value(x));
        let y = tensor::downsample2x(self.value(x).data(), n * c, h, w);
        self.push(Tensor::from_parts(vec![n, c, h / 2, w / 2], y), Op::Downsample2x(x), &[x])
    }

    /// Repeats `x` (any shape) `n` times along a new leading axis.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(n);
        self.push(Tensor::from_parts(shape, data), Op::BroadcastBatch { x, n }, &[x])
    }

    /// `x[:, layer, :]` for `x: [n, l, d]`.
    pub fn select_layer(&mut self, x: Var, layer: usize) -> Var {
        let v = self.value(x);
        let (n, l, d) = (v.dim(0), v.dim(1), v.dim(2));
        assert!(layer < l);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend_from_slice(&v.data()[(i * l + layer) * d..(i * l + layer + 1) * d]);
        }
        self.push(Tensor::from_parts(vec![n, d], out), Op::SelectLayer { x, layer }, &[x])
    }

    /// Builds `[n, layers, d]` from `a, b: [n, d]`: sample `i` takes `a` for
    /// layers below `cutoffs[i]` and `b` from there on.
    pub fn mix_layers(&mut self, a: Var, b: Var, cutoffs: Vec<usize>, layers: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let (n, d) = (va.dim(0), va.dim(1));
        assert_eq!(cutoffs.len(), n);
        let mut out = Vec::with_capacity(n * layers * d);
        for (i, &cut) in cutoffs.iter().enumerate() {
            for l in 0..layers {
                let src = if l < cut { va } else { vb };
                out.extend_from_slice(&src.data()[i * d..(i + 1) * d]);
            }
        }
        let t = Tensor::from_parts(vec![n, layers, d], out);
        self.push(t, Op::MixLayers { a, b, cutoffs, layers }, &[a, b])
    }

    pub fn warp(&mut self, x: Var, plan: Arc<WarpPlan>) -> Var {
        let (n, c, h, w) = nchw(self.value(x));
        assert_eq!(plan.taps.len(), n);
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * hw];
        for i in 0..n {
            let taps = &plan.taps[i];
            for ch in 0..c {
                let plane = &src[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let dst = &mut out[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (d, (idx, wt)) in dst.iter_mut().zip(taps) {
                    *d = wt[0] * plane[idx[0] as usize]
                        + wt[1] * plane[idx[1] as usize]
                        + wt[2] * plane[idx[2] as usize]
                        + wt[3] * plane[idx[3] as usize];
                }
            }
        }
        let t = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(t, Op::Warp { x, plan }, &[x])
    }

    /// Per-image affine colour transform: `out_c = Σ_j m[c][j]·x_j + m[c][3]`
    /// with `m` row-major 3×4.
    pub fn color_affine(&mut self, x: Var, mats: Arc<Vec<[f32; 12]>>) -> Var {
        let (n, c, h, w) = nchw(self.value(x));
        assert_eq!(c, 3, "colour transform expects RGB input");
        assert_eq!(mats.len(), n);
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * 3 * hw];
        for (i, m) in mats.iter().enumerate() {
            let base = i * 3 * hw;
            for p in 0..hw {
                let (r, g, b) = (src[base + p], src[base + hw + p], src[base + 2 * hw + p]);
                for ch in 0..3 {
                    out[base + ch * hw + p] =
                        m[ch * 4] * r + m[ch * 4 + 1] * g + m[ch * 4 + 2] * b + m[ch * 4 + 3];
                }
            }
        }
        let t = Tensor::from_parts(vec![n, 3, h, w], out);
        self.push(t, Op::ColorAffine { x, mats }, &[x])
    }

    /// Gradients of the scalar `loss` with respect to every dependent node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f32>| Tensor::from_parts(self.value(v).shape().to_vec(), data);

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    acc(*a, like(*a, d), grads);
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    acc(*b, like(*b, d), grads);
                }
            }
            Op::Scale(x, k) => acc(*x, g.map(|v| v * k), grads),
            Op::Square(x) => {
                let d = gd.iter().zip(self.value(*x).data()).map(|(g, x)| 2.0 * g * x).collect();
                acc(*x, like(*x, d), grads);
            }
            Op::Softplus(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, x)| g * sigmoid(*x))
                    .collect();
                acc(*x, like(*x, d), grads);
            }
            Op::LeakyRelu { x, slope, gain, mask } => {
                let d = match mask {
                    None => gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, x)| if *x >= 0.0 { g * gain } else { g * slope * gain })
                        .collect(),
                    Some(m) => gd
                        .iter()
                        .zip(m.iter())
                        .map(|(g, pos)| if *pos { g * gain } else { g * slope * gain })
                        .collect(),
                };
                acc(*x, like(*x, d), grads);
            }
            Op::Rsqrt { x, eps } => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, x)| -0.5 * g * (x + eps).powf(-1.5))
                    .collect();
                acc(*x, like(*x, d), grads);
            }
            Op::Clamp { x, lo, hi } => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, x)| if *x > *lo && *x < *hi { *g } else { 0.0 })
                    .collect();
                acc(*x, like(*x, d), grads);
            }
            Op::Sum(x) => {
                let v = self.value(*x);
                acc(*x, Tensor::full(v.shape(), gd[0]), grads);
            }
            Op::Reshape(x) => acc(*x, like(*x, gd.to_vec()), grads),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                if self.needs(*a) {
                    let mut d = vec![0.0; m * k];
                    tensor::gemm(m, n, k, gd, false, vb.data(), true, 0.0, &mut d);
                    acc(*a, like(*a, d), grads);
                }
                if self.needs(*b) {
                    let mut d = vec![0.0; k * n];
                    tensor::gemm(k, m, n, va.data(), true, gd, false, 0.0, &mut d);
                    acc(*b, like(*b, d), grads);
                }
            }
            Op::Transpose(x) => {
                let v = self.value(*x);
                let (r, c) = (v.dim(0), v.dim(1));
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = gd[j * r + i];
                    }
                }
                acc(*x, like(*x, d), grads);
            }
            Op::ReduceLast(x) => {
                let v = self.value(*x);
                let last = *v.shape().last().unwrap();
                let d = gd.iter().flat_map(|&g| std::iter::repeat_n(g, last)).collect();
                acc(*x, like(*x, d), grads);
            }
            Op::Linear { x, w, b, w_gain, b_gain } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, i, o) = (vx.dim(0), vx.dim(1), vw.dim(0));
                if self.needs(*x) {
                    let mut d = vec![0.0; n * i];
                    tensor::gemm(n, o, i, gd, false, vw.data(), false, 0.0, &mut d);
                    d.iter_mut().for_each(|v| *v *= w_gain);
                    acc(*x, like(*x, d), grads);
                }
                if self.needs(*w) {
                    let mut d = vec![0.0; o * i];
                    tensor::gemm(o, n, i, gd, true, vx.data(), false, 0.0, &mut d);
                    d.iter_mut().for_each(|v| *v *= w_gain);
                    acc(*w, like(*w, d), grads);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut d = vec![0.0; o];
                        for row in gd.chunks(o) {
                            for (dv, gv) in d.iter_mut().zip(row) {
                                *dv += gv;
                            }
                        }
                        d.iter_mut().for_each(|v| *v *= b_gain);
                        acc(*b, like(*b, d), grads);
                    }
                }
            }
            Op::Conv2d { x, w, gain } => {
                let geom = self.conv_geom(*x, *w);
                if self.needs(*x) {
                    let scaled: Vec<f32> = self.value(*w).data().iter().map(|v| v * gain).collect();
                    let d = tensor::conv2d_backward_input(geom, gd, &scaled);
                    acc(*x, like(*x, d), grads);
                }
                if self.needs(*w) {
                    let mut d = tensor::conv2d_backward_weight(geom, gd, self.value(*x).data());
                    d.iter_mut().for_each(|v| *v *= gain);
                    acc(*w, like(*w, d), grads);
                }
            }
            Op::AddBiasC { x, b, gain } => {
                acc(*x, g.clone(), grads);
                if self.needs(*b) {
                    let v = self.value(*x);
                    let c = v.dim(1);
                    let inner = v.numel() / (v.dim(0) * c);
                    let mut d = vec![0.0; c];
                    for (i, chunk) in gd.chunks(inner).enumerate() {
                        d[i % c] += chunk.iter().sum::<f32>() * gain;
                    }
                    acc(*b, like(*b, d), grads);
                }
            }
            Op::ScaleNC { x, s } => {
                let vx = self.value(*x);
                let (n, c) = (vx.dim(0), vx.dim(1));
                let inner = vx.numel() / (n * c);
                let vs = self.value(*s).data();
                if self.needs(*x) {
                    let mut d = gd.to_vec();
                    for (i, chunk) in d.chunks_mut(inner).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= vs[i]);
                    }
                    acc(*x, like(*x, d), grads);
                }
                if self.needs(*s) {
                    let d = gd
                        .chunks(inner)
                        .zip(vx.data().chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*s, like(*s, d), grads);
                }
            }
            Op::AddNoise { x, noise, strength } => {
                acc(*x, g.clone(), grads);
                let (n, c, h, w) = nchw(self.value(*x));
                let hw = h * w;
                let vn = self.value(*noise);
                let shared = vn.dim(0) == 1;
                let vs = self.value(*strength).data();
                if self.needs(*strength) {
                    let mut d = vec![0.0; c];
                    for i in 0..n {
                        let nz = vn.item_slice(if shared { 0 } else { i });
                        for (ch, dv) in d.iter_mut().enumerate() {
                            let gc = &gd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                            *dv += gc.iter().zip(nz).map(|(a, b)| a * b).sum::<f32>();
                        }
                    }
                    acc(*strength, like(*strength, d), grads);
                }
                if self.needs(*noise) {
                    let mut d = vec![0.0; vn.numel()];
                    for i in 0..n {
                        let dst = &mut d[if shared { 0 } else { i * hw }..][..hw];
                        for (ch, k) in vs.iter().enumerate() {
                            let gc = &gd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                            for (dv, gv) in dst.iter_mut().zip(gc) {
                                *dv += k * gv;
                            }
                        }
                    }
                    acc(*noise, like(*noise, d), grads);
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = nchw(self.value(*x));
                acc(*x, like(*x, tensor::upsample2x_backward(gd, n * c, h, w)), grads);
            }
            Op::Downsample2x(x) => {
                let (n, c, h, w) = nchw(self.value(*x));
                acc(*x, like(*x, tensor::downsample2x_backward(gd, n * c, h, w)), grads);
            }
            Op::BroadcastBatch { x, n } => {
                let m = self.value(*x).numel();
                let mut d = vec![0.0; m];
                for i in 0..*n {
                    for (dv, gv) in d.iter_mut().zip(&gd[i * m..(i + 1) * m]) {
                        *dv += gv;
                    }
                }
                acc(*x, like(*x, d), grads);
            }
            Op::SelectLayer { x, layer } => {
                let v = self.value(*x);
                let (n, l, d) = (v.dim(0), v.dim(1), v.dim(2));
                let mut out = vec![0.0; v.numel()];
                for i in 0..n {
                    out[(i * l + layer) * d..(i * l + layer + 1) * d]
                        .copy_from_slice(&gd[i * d..(i + 1) * d]);
                }
                acc(*x, like(*x, out), grads);
            }
            Op::MixLayers { a, b, cutoffs, layers } => {
                let d = self.value(*a).dim(1);
                let n = cutoffs.len();
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * d];
                for (i, &cut) in cutoffs.iter().enumerate() {
                    for l in 0..*layers {
                        let src = &gd[(i * layers + l) * d..(i * layers + l + 1) * d];
                        let dst = if l < cut { &mut da } else { &mut db };
                        for (dv, gv) in dst[i * d..(i + 1) * d].iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
                acc(*a, like(*a, da), grads);
                acc(*b, like(*b, db), grads);
            }
            Op::Warp { x, plan } => {
                let (n, c, h, w) = nchw(self.value(*x));
                let hw = h * w;
                let mut d = vec![0.0; n * c * hw];
                for i in 0..n {
                    let taps = &plan.taps[i];
                    for ch in 0..c {
                        let gp = &gd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                        let dst = &mut d[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                        for (gv, (idx, wt)) in gp.iter().zip(taps) {
                            for t in 0..4 {
                                dst[idx[t] as usize] += wt[t] * gv;
                            }
                        }
                    }
                }
                acc(*x, like(*x, d), grads);
            }
            Op::ColorAffine { x, mats } => {
                let (_, _, h, w) = nchw(self.value(*x));
                let hw = h * w;
                let mut d = vec![0.0; gd.len()];
                for (i, m) in mats.iter().enumerate() {
                    let base = i * 3 * hw;
                    for p in 0..hw {
                        let gs = [gd[base + p], gd[base + hw + p], gd[base + 2 * hw + p]];
                        for j in 0..3 {
                            d[base + j * hw + p] =
                                m[j] * gs[0] + m[4 + j] * gs[1] + m[8 + j] * gs[2];
                        }
                    }
                }
                acc(*x, like(*x, d), grads);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Checks the tape gradient of `sum(r ⊙ f(x))` against central finite
    /// differences for every entry of every listed input.
    fn check_grad(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = SeededRng::new(99);
        let probe = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let y = f(&mut t, &vars);
            rng.normals(t.value(y).numel())
        };
        let eval = |xs: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let y = f(&mut t, &vars);
            t.value(y).data().iter().zip(&probe).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
        let y = f(&mut t, &vars);
        let r = t.constant(Tensor::new(t.value(y).shape().to_vec(), probe.clone()).unwrap());
        let prod = t.mul(y, r);
        let loss = t.sum(prod);
        let grads = t.backward(loss);
        let eps = 1e-2f32;
        for (k, v) in vars.iter().enumerate() {
            let g = grads.get(*v).expect("missing gradient");
            for j in 0..inputs[k].numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[j] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[j] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps as f64);
                let an = g.data()[j] as f64;
                assert!(
                    (fd - an).abs() <= 2e-2 * fd.abs().max(1.0),
                    "input {k} entry {j}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), SeededRng::new(seed).normals(n)).unwrap()
    }

    #[test]
    fn elementwise_grads() {
        check_grad(vec![randn(&[2, 3], 1), randn(&[2, 3], 2)], |t, v| {
            let a = t.mul(v[0], v[1]);
            let b = t.sub(a, v[1]);
            let c = t.square(b);
            let d = t.softplus(c);
            t.scale(d, 0.5)
        });
        check_grad(vec![randn(&[7], 3)], |t, v| {
            let s = t.square(v[0]);
            t.rsqrt(s, 0.5)
        });
        let x = Tensor::new(vec![5], vec![-2.0, -0.3, 0.1, 0.7, 1.5]).unwrap();
        check_grad(vec![x], |t, v| t.clamp(v[0], -1.0, 1.0));
    }

    #[test]
    fn linear_and_matmul_grads() {
        check_grad(
            vec![randn(&[3, 4], 4), randn(&[5, 4], 5), randn(&[5], 6)],
            |t, v| t.linear(v[0], v[1], Some(v[2]), 0.5, 2.0),
        );
        check_grad(vec![randn(&[3, 4], 7), randn(&[4, 2], 8)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let tr = t.transpose(m);
            t.reduce_last(tr)
        });
    }

    #[test]
    fn conv_and_channel_grads() {
        check_grad(
            vec![randn(&[2, 3, 4, 4], 9), randn(&[2, 3, 3, 3], 10), randn(&[2], 11)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], 0.3);
                t.add_bias(y, v[2], 1.0)
            },
        );
        check_grad(vec![randn(&[2, 3, 2, 2], 12), randn(&[2, 3], 13)], |t, v| {
            t.scale_nc(v[0], v[1])
        });
        check_grad(
            vec![randn(&[2, 3, 4, 4], 14), randn(&[1, 1, 4, 4], 15), randn(&[3], 16)],
            |t, v| t.add_noise(v[0], v[1], v[2]),
        );
        check_grad(
            vec![randn(&[2, 3, 4, 4], 17), randn(&[2, 1, 4, 4], 18), randn(&[3], 19)],
            |t, v| t.add_noise(v[0], v[1], v[2]),
        );
    }

    #[test]
    fn resampling_and_layout_grads() {
        check_grad(vec![randn(&[1, 2, 4, 4], 20)], |t, v| {
            let u = t.upsample2x(v[0]);
            let d = t.downsample2x(u);
            t.leaky_relu(d, 0.2, 1.4)
        });
        check_grad(vec![randn(&[3, 2], 21), randn(&[3, 2], 22)], |t, v| {
            let m = t.mix_layers(v[0], v[1], vec![0, 2, 4], 4);
            let s = t.select_layer(m, 1);
            let b = t.broadcast_batch(s, 2);
            t.reshape(b, &[12])
        });
    }

    #[test]
    fn warp_and_color_grads() {
        let plan = Arc::new(WarpPlan {
            taps: vec![
                (0..9).map(|p| ([p as u32, ((p + 1) % 9) as u32, 0, 4], [0.4, 0.3, 0.2, 0.1])).collect(),
            ],
        });
        let mats = Arc::new(vec![[0.9, 0.1, 0.0, 0.2, -0.1, 1.1, 0.3, 0.0, 0.0, 0.2, 0.7, -0.3]]);
        check_grad(vec![randn(&[1, 3, 3, 3], 23)], move |t, v| {
            let w = t.warp(v[0], plan.clone());
            t.color_affine(w, mats.clone())
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full(&[2], 1.0));
        let b = t.input(Tensor::full(&[2], 2.0));
        let c = t.mul(a, b);
        let s = t.sum(c);
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
