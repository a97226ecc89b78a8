// SPDX-License-Identifier: Apache-2.0

//! Channel-first tensor kernels with explicit backward passes.

/// `c × h × w` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    /// Converts pixel-major `h × w × c` data to channel-first.
    pub fn from_hwc(h: usize, w: usize, c: usize, hwc: &[f64]) -> Self {
        let mut t = Tensor::zeros(c, h, w);
        let n = h * w;
        for p in 0..n {
            for ch in 0..c {
                t.data[ch * n + p] = hwc[p * c + ch];
            }
        }
        t
    }

    pub fn to_hwc(&self) -> Vec<f64> {
        let n = self.h * self.w;
        let mut out = vec![0.0; n * self.c];
        for ch in 0..self.c {
            for p in 0..n {
                out[p * self.c + ch] = self.data[ch * n + p];
            }
        }
        out
    }
}

/// `c = a · b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`; transposes via flags.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked below against the strides passed in.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
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

/// Same-padded square convolution. Weights are `cout × (cin·k·k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let (h, w, k) = (x.h, x.w, self.k);
        let pad = (k / 2) as isize;
        let n = h * w;
        let mut col = vec![0.0; self.cin * k * k * n];
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst_row = &mut dst[y * w..(y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        for xx in x0..x1 {
                            dst_row[xx] = src_row[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize) -> Tensor {
        let k = self.k;
        let pad = (k / 2) as isize;
        let n = h * w;
        let mut out = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut out.data[ci * n..(ci + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        for xx in x0..x1 {
                            plane[sy as usize * w + (xx as isize + dx) as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the output and the column buffer needed by `backward`.
    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, Vec<f64>) {
        debug_assert_eq!(x.c, self.cin);
        let n = x.h * x.w;
        let col = if self.k == 1 {
            x.data.clone()
        } else {
            self.im2col(x)
        };
        let weight = &params[self.w_off..self.w_off + self.weight_len()];
        let bias = &params[self.b_off..self.b_off + self.cout];
        let mut out = Tensor::zeros(self.cout, x.h, x.w);
        for (co, b) in bias.iter().enumerate() {
            out.data[co * n..(co + 1) * n].fill(*b);
        }
        gemm(
            self.cout,
            self.cin * self.k * self.k,
            n,
            weight,
            false,
            &col,
            false,
            &mut out.data,
            true,
        );
        (out, col)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &[f64],
        col: &[f64],
        dout: &Tensor,
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let n = dout.h * dout.w;
        let kk = self.cin * self.k * self.k;
        gemm(
            self.cout,
            n,
            kk,
            &dout.data,
            false,
            col,
            true,
            &mut grad[self.w_off..self.w_off + self.weight_len()],
            true,
        );
        for co in 0..self.cout {
            grad[self.b_off + co] += dout.data[co * n..(co + 1) * n].iter().sum::<f64>();
        }
        if !need_input_grad {
            return None;
        }
        let weight = &params[self.w_off..self.w_off + self.weight_len()];
        let mut dcol = vec![0.0; kk * n];
        gemm(
            kk, self.cout, n, weight, true, &dout.data, false, &mut dcol, false,
        );
        if self.k == 1 {
            Some(Tensor {
                c: self.cin,
                h: dout.h,
                w: dout.w,
                data: dcol,
            })
        } else {
            Some(self.col2im(&dcol, dout.h, dout.w))
        }
    }
}

pub(crate) fn relu_inplace(t: &mut Tensor) {
    for v in t.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` where the post-activation output is not positive.
pub(crate) fn relu_backward(out: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling; returns the output and flat argmax indices into the input.
pub(crate) fn maxpool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    let mut idx = vec![0; x.c * h2 * w2];
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for y in 0..h2 {
            for xx in 0..w2 {
                let mut best = base + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (c * h2 + y) * w2 + xx;
                out.data[o] = x.data[best];
                idx[o] = best;
            }
        }
    }
    (out, idx)
}

pub(crate) fn maxpool2_backward(dout: &Tensor, idx: &[usize], c: usize, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(c, h, w);
    for (g, &i) in dout.data.iter().zip(idx) {
        dx.data[i] += g;
    }
    dx
}

pub(crate) fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest2_backward(dout: &Tensor) -> Tensor {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut dx = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        for y in 0..dout.h {
            for xx in 0..dout.w {
                dx.data[(c * h + y / 2) * w + xx / 2] += dout.data[(c * dout.h + y) * dout.w + xx];
            }
        }
    }
    dx
}

pub(crate) fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub(crate) fn split(t: Tensor, first: usize) -> (Tensor, Tensor) {
    let n = t.h * t.w;
    let mut data = t.data;
    let rest = data.split_off(first * n);
    (
        Tensor {
            c: first,
            h: t.h,
            w: t.w,
            data,
        },
        Tensor {
            c: t.c - first,
            h: t.h,
            w: t.w,
            data: rest,
        },
    )
}

/// Separable bilinear resampling along one axis (half-pixel centers, edge clamped).
#[derive(Clone, Debug)]
pub(crate) struct Axis {
    taps: Vec<(usize, usize, f64)>,
}

impl Axis {
    /// Plain resize of `src` samples to `dst` samples.
    pub fn resize(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        Axis::affine(src, dst, scale, 0.0)
    }

    /// Output coordinate `o` samples input coordinate `(o + 0.5)·scale − 0.5 + shift`.
    pub fn affine(src: usize, dst: usize, scale: f64, shift: f64) -> Self {
        let taps = (0..dst)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5 + shift).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect();
        Axis { taps }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    /// Mirrors the output order.
    pub fn reversed(mut self) -> Self {
        self.taps.reverse();
        self
    }
}

/// Bilinear map from a `sh × sw` grid onto a `dh × dw` grid.
#[derive(Clone, Debug)]
pub(crate) struct Bilinear {
    pub sh: usize,
    pub sw: usize,
    rows: Axis,
    cols: Axis,
}

impl Bilinear {
    pub fn new(sh: usize, sw: usize, rows: Axis, cols: Axis) -> Self {
        Bilinear { sh, sw, rows, cols }
    }

    pub fn resize(sh: usize, sw: usize, dh: usize, dw: usize) -> Self {
        Bilinear::new(sh, sw, Axis::resize(sh, dh), Axis::resize(sw, dw))
    }

    pub fn out_h(&self) -> usize {
        self.rows.len()
    }

    pub fn out_w(&self) -> usize {
        self.cols.len()
    }

    /// Resamples one plane.
    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        let dw = self.out_w();
        for (y, &(y0, y1, fy)) in self.rows.taps.iter().enumerate() {
            let r0 = &src[y0 * self.sw..(y0 + 1) * self.sw];
            let r1 = &src[y1 * self.sw..(y1 + 1) * self.sw];
            for (x, &(x0, x1, fx)) in self.cols.taps.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst[y * dw + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }

    /// Adjoint of `apply`: accumulates `dst`-grid values back onto the source grid.
    pub fn adjoint(&self, ddst: &[f64], dsrc: &mut [f64]) {
        let dw = self.out_w();
        for (y, &(y0, y1, fy)) in self.rows.taps.iter().enumerate() {
            for (x, &(x0, x1, fx)) in self.cols.taps.iter().enumerate() {
                let g = ddst[y * dw + x];
                dsrc[y0 * self.sw + x0] += g * (1.0 - fy) * (1.0 - fx);
                dsrc[y0 * self.sw + x1] += g * (1.0 - fy) * fx;
                dsrc[y1 * self.sw + x0] += g * fy * (1.0 - fx);
                dsrc[y1 * self.sw + x1] += g * fy * fx;
            }
        }
    }

    /// Resamples every channel of a pixel-major map.
    pub fn apply_hwc(&self, c: usize, src: &[f64]) -> Vec<f64> {
        let dw = self.out_w();
        let mut dst = vec![0.0; self.out_h() * dw * c];
        for (y, &(y0, y1, fy)) in self.rows.taps.iter().enumerate() {
            for (x, &(x0, x1, fx)) in self.cols.taps.iter().enumerate() {
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                let p00 = (y0 * self.sw + x0) * c;
                let p01 = (y0 * self.sw + x1) * c;
                let p10 = (y1 * self.sw + x0) * c;
                let p11 = (y1 * self.sw + x1) * c;
                let o = (y * dw + x) * c;
                for ch in 0..c {
                    dst[o + ch] = src[p00 + ch] * w00
                        + src[p01 + ch] * w01
                        + src[p10 + ch] * w10
                        + src[p11 + ch] * w11;
                }
            }
        }
        dst
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(t.c, self.out_h(), self.out_w());
        let n = self.out_h() * self.out_w();
        for c in 0..t.c {
            self.apply(t.plane(c), &mut out.data[c * n..(c + 1) * n]);
        }
        out
    }

    pub fn adjoint_tensor(&self, dt: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(dt.c, self.sh, self.sw);
        let n = self.sh * self.sw;
        for c in 0..dt.c {
            self.adjoint(dt.plane(c), &mut out.data[c * n..(c + 1) * n]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn naive_conv(conv: &Conv, params: &[f64], x: &Tensor) -> Tensor {
        let k = conv.k as isize;
        let pad = k / 2;
        let mut out = Tensor::zeros(conv.cout, x.h, x.w);
        for co in 0..conv.cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = params[conv.b_off + co];
                    for ci in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y + ky - pad;
                                let sx = xx + kx - pad;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wi = conv.w_off
                                    + ((co * conv.cin + ci) * conv.k + ky as usize) * conv.k
                                    + kx as usize;
                                acc += params[wi]
                                    * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out.data[(co * x.h + y as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv {
            cin: 3,
            cout: 4,
            k: 3,
            w_off: 0,
            b_off: 108,
        };
        let params = random(&mut rng, conv.param_len());
        let x = Tensor {
            c: 3,
            h: 5,
            w: 6,
            data: random(&mut rng, 90),
        };
        let (y, _) = conv.forward(&params, &x);
        let want = naive_conv(&conv, &params, &x);
        for (a, b) in y.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x)> linear in x and w: check input and weight gradients by inner products.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [1, 3] {
            let conv = Conv {
                cin: 2,
                cout: 3,
                k,
                w_off: 0,
                b_off: 6 * k * k,
            };
            let params = random(&mut rng, conv.param_len());
            let x = Tensor {
                c: 2,
                h: 4,
                w: 4,
                data: random(&mut rng, 32),
            };
            let dy = Tensor {
                c: 3,
                h: 4,
                w: 4,
                data: random(&mut rng, 48),
            };
            let (y, col) = conv.forward(&params, &x);
            let mut grad = vec![0.0; params.len()];
            let dx = conv.backward(&params, &col, &dy, &mut grad, true).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let eps = 1e-6;
            let i = 7;
            let mut xp = x.clone();
            xp.data[i] += eps;
            let (yp, _) = conv.forward(&params, &xp);
            let fd = (dot(&yp.data, &dy.data) - dot(&y.data, &dy.data)) / eps;
            assert!((fd - dx.data[i]).abs() < 1e-6);
            let j = 4;
            let mut pp = params.clone();
            pp[j] += eps;
            let (yp, _) = conv.forward(&pp, &x);
            let fd = (dot(&yp.data, &dy.data) - dot(&y.data, &dy.data)) / eps;
            assert!((fd - grad[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = Bilinear::resize(4, 5, 16, 20);
        let x = random(&mut rng, 20);
        let g = random(&mut rng, 320);
        let mut y = vec![0.0; 320];
        b.apply(&x, &mut y);
        let mut gx = vec![0.0; 20];
        b.adjoint(&g, &mut gx);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let b = Bilinear::resize(3, 3, 12, 12);
        let mut out = vec![0.0; 144];
        b.apply(&[2.5; 9], &mut out);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn maxpool_routes_gradient_to_max() {
        let x = Tensor {
            c: 1,
            h: 2,
            w: 2,
            data: vec![0.1, 0.9, 0.3, 0.2],
        };
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data, vec![0.9]);
        let dx = maxpool2_backward(&Tensor { c: 1, h: 1, w: 1, data: vec![2.0] }, &idx, 1, 2, 2);
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }
}
