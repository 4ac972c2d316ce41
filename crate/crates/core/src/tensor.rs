//! Dense row-major `f32` tensors and the numeric kernels the autodiff tape
//! is built on.
//!
//! Kernels are single-threaded and process batch items independently, so a
//! sample's result never depends on what else is in the batch.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panicking constructor for internal call sites whose sizes are known.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    /// Slice of the `i`-th item along the leading axis.
    pub fn item_slice(&self, i: usize) -> &[f32] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }
}

/// `c = a·b + beta·c` with optional transposes; all operands row-major.
///
/// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe row-major layouts
    // of exactly those extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `c×h×w` image into `(c·k·k)×(h·w)` columns for a stride-1,
/// zero-padded "same" convolution.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    let out = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize || x0 >= x1 {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    let sx0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, x: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let sx0 = (x0 as isize + dx) as usize;
                    for (d, s) in dst[sx0..sx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[oy * w + x0..oy * w + x1])
                    {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Geometry of a stride-1 "same" convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// `y[n] = weight · im2col(x[n])`, weight laid out `c_out × c_in × k × k`.
pub fn conv2d_forward(g: ConvGeom, x: &[f32], weight: &[f32]) -> Vec<f32> {
    let hw = g.h * g.w;
    let mut y = vec![0.0; g.n * g.c_out * hw];
    let mut cols = if g.k == 1 { Vec::new() } else { vec![0.0; g.ckk() * hw] };
    for i in 0..g.n {
        let xi = &x[i * g.c_in * hw..(i + 1) * g.c_in * hw];
        let yi = &mut y[i * g.c_out * hw..(i + 1) * g.c_out * hw];
        let b = if g.k == 1 {
            xi
        } else {
            im2col(xi, g.c_in, g.h, g.w, g.k, &mut cols);
            &cols
        };
        gemm(g.c_out, g.ckk(), hw, weight, false, b, false, 0.0, yi);
    }
    y
}

pub fn conv2d_backward_input(g: ConvGeom, dy: &[f32], weight: &[f32]) -> Vec<f32> {
    let hw = g.h * g.w;
    let mut dx = vec![0.0; g.n * g.c_in * hw];
    let mut cols = vec![0.0; g.ckk() * hw];
    for i in 0..g.n {
        let dyi = &dy[i * g.c_out * hw..(i + 1) * g.c_out * hw];
        let dxi = &mut dx[i * g.c_in * hw..(i + 1) * g.c_in * hw];
        if g.k == 1 {
            gemm(g.c_in, g.c_out, hw, weight, true, dyi, false, 0.0, dxi);
        } else {
            gemm(g.ckk(), g.c_out, hw, weight, true, dyi, false, 0.0, &mut cols);
            col2im(&cols, g.c_in, g.h, g.w, g.k, dxi);
        }
    }
    dx
}

pub fn conv2d_backward_weight(g: ConvGeom, dy: &[f32], x: &[f32]) -> Vec<f32> {
    let hw = g.h * g.w;
    let mut dw = vec![0.0; g.c_out * g.ckk()];
    let mut cols = if g.k == 1 { Vec::new() } else { vec![0.0; g.ckk() * hw] };
    for i in 0..g.n {
        let xi = &x[i * g.c_in * hw..(i + 1) * g.c_in * hw];
        let dyi = &dy[i * g.c_out * hw..(i + 1) * g.c_out * hw];
        let b = if g.k == 1 {
            xi
        } else {
            im2col(xi, g.c_in, g.h, g.w, g.k, &mut cols);
            &cols
        };
        gemm(g.c_out, hw, g.ckk(), dyi, false, b, true, 1.0, &mut dw);
    }
    dw
}

/// Bilinear 2× upsampling of `planes` independent `h×w` planes
/// (half-pixel centers, edge clamped).
pub fn upsample2x(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (ya, yb, wa, wb) = up_taps(oy, h);
            for ox in 0..ow {
                let (xa, xb, va, vb) = up_taps(ox, w);
                dst[oy * ow + ox] = wa * (va * src[ya * w + xa] + vb * src[ya * w + xb])
                    + wb * (va * src[yb * w + xa] + vb * src[yb * w + xb]);
            }
        }
    }
    y
}

pub fn upsample2x_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (ya, yb, wa, wb) = up_taps(oy, h);
            for ox in 0..ow {
                let (xa, xb, va, vb) = up_taps(ox, w);
                let d = g[oy * ow + ox];
                dst[ya * w + xa] += wa * va * d;
                dst[ya * w + xb] += wa * vb * d;
                dst[yb * w + xa] += wb * va * d;
                dst[yb * w + xb] += wb * vb * d;
            }
        }
    }
    dx
}

/// Source taps and weights for output coordinate `o` of a 2× upsample.
#[inline]
fn up_taps(o: usize, n: usize) -> (usize, usize, f32, f32) {
    let i = o / 2;
    if o % 2 == 0 {
        (i, i.saturating_sub(1), 0.75, 0.25)
    } else {
        (i, (i + 1).min(n - 1), 0.75, 0.25)
    }
}

/// 2×2 box downsampling of `planes` planes of size `h×w` (h, w even).
pub fn downsample2x(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let a = src[2 * oy * w + 2 * ox] + src[2 * oy * w + 2 * ox + 1];
                let b = src[(2 * oy + 1) * w + 2 * ox] + src[(2 * oy + 1) * w + 2 * ox + 1];
                dst[oy * ow + ox] = 0.25 * (a + b);
            }
        }
    }
    y
}

pub fn downsample2x_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * g[(y / 2) * ow + x / 2];
            }
        }
    }
    dx
}

/// Box-average `planes` planes from `h×w` down to `oh×ow` (integer factor).
pub fn box_downsample(x: &[f32], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let (fy, fx) = (h / oh, w / ow);
    let norm = 1.0 / (fy * fx) as f32;
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..fy {
                    let row = &src[(oy * fy + dy) * w + ox * fx..(oy * fy + dy) * w + (ox + 1) * fx];
                    acc += row.iter().sum::<f32>();
                }
                y[p * oh * ow + oy * ow + ox] = acc * norm;
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Direct 6-loop convolution.
    fn conv_naive(g: ConvGeom, x: &[f32], wt: &[f32]) -> Vec<f32> {
        let pad = (g.k / 2) as isize;
        let mut y = vec![0.0; g.n * g.c_out * g.h * g.w];
        for n in 0..g.n {
            for o in 0..g.c_out {
                for oy in 0..g.h {
                    for ox in 0..g.w {
                        let mut acc = 0.0f64;
                        for c in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = oy as isize + ky as isize - pad;
                                    let ix = ox as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize];
                                    let wv = wt[((o * g.c_in + c) * g.k + ky) * g.k + kx];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        y[((n * g.c_out + o) * g.h + oy) * g.w + ox] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    }

    #[test]
    fn conv_matches_naive_and_adjoints_hold() {
        for k in [1, 3] {
            let g = ConvGeom { n: 2, c_in: 3, c_out: 4, h: 5, w: 6, k };
            let mut rng = SeededRng::new(11);
            let x = rng.normals(g.n * g.c_in * g.h * g.w);
            let wt = rng.normals(g.c_out * g.c_in * k * k);
            let y = conv2d_forward(g, &x, &wt);
            let y_ref = conv_naive(g, &x, &wt);
            for (a, b) in y.iter().zip(&y_ref) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
            // <conv(x), dy> = <x, conv_T(dy)> = <w, conv_W(dy, x)>
            let dy = rng.normals(y.len());
            let lhs = dot(&y, &dy);
            let dx = conv2d_backward_input(g, &dy, &wt);
            let dw = conv2d_backward_weight(g, &dy, &x);
            assert!((lhs - dot(&x, &dx)).abs() < 1e-3 * lhs.abs().max(1.0));
            assert!((lhs - dot(&wt, &dw)).abs() < 1e-3 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn resample_adjoints_hold() {
        let mut rng = SeededRng::new(5);
        let x = rng.normals(2 * 4 * 6);
        let up = upsample2x(&x, 2, 4, 6);
        let g = rng.normals(up.len());
        let back = upsample2x_backward(&g, 2, 4, 6);
        assert!((dot(&up, &g) - dot(&x, &back)).abs() < 1e-4);

        let down = downsample2x(&up, 2, 8, 12);
        let g2 = rng.normals(down.len());
        let back2 = downsample2x_backward(&g2, 2, 8, 12);
        assert!((dot(&down, &g2) - dot(&up, &back2)).abs() < 1e-4);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = vec![0.3f32; 9];
        assert!(upsample2x(&x, 1, 3, 3).iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c2, c);
    }
}
