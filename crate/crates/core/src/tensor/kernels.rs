//! Forward and backward kernels on raw row-major buffers. Shapes are validated
//! by the graph before these are called.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

/// Unfolds one image `[Cin,H,W]` into `[Cin·kh·kw, H·W]` with zero padding.
fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], col: &mut [T]) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.plane();
    for c in 0..g.cin {
        let src = &img[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kj as isize - pw as isize;
                    // valid x range: 0 <= x + shift < w
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    out_row[..x_lo.min(w)].fill(T::zero());
                    if x_lo < x_hi {
                        let s0 = (x_lo as isize + shift) as usize;
                        out_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                    }
                    out_row[x_hi.max(x_lo).min(w)..].fill(T::zero());
                }
            }
        }
    }
}

/// Folds `[Cin·kh·kw, H·W]` columns back, accumulating into `img`.
fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], img: &mut [T]) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.plane();
    for c in 0..g.cin {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let shift = kj as isize - pw as isize;
                let x_lo = (-shift).max(0) as usize;
                let x_hi = (w as isize - shift).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + shift) as usize;
                    let d = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    let s = &src[y * w + x_lo..y * w + x_hi];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let plane = g.plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.cout * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for b in 0..g.batch {
        let img = &input[b * g.cin * plane..(b + 1) * g.cin * plane];
        let dst = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        for (co, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut col);
            &col
        };
        T::gemm(g.cout, patch, plane, weight, false, cols, false, T::one(), dst);
    }
    out
}

/// Gradients of a convolution. `grad_input` is only computed when requested.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
) -> ConvGrads<T> {
    let plane = g.plane();
    let patch = g.patch();
    let mut gw = vec![T::zero(); g.cout * patch];
    let mut gb = vec![T::zero(); g.cout];
    let mut gi = want_input.then(|| vec![T::zero(); g.batch * g.cin * plane]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcol = vec![T::zero(); if want_input { patch * plane } else { 0 }];
    for b in 0..g.batch {
        let img = &input[b * g.cin * plane..(b + 1) * g.cin * plane];
        let dout = &grad_out[b * g.cout * plane..(b + 1) * g.cout * plane];
        for (co, chunk) in dout.chunks(plane).enumerate() {
            gb[co] += chunk.iter().fold(T::zero(), |s, &v| s + v);
        }
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut col);
            &col
        };
        // dW += dout · colsᵀ
        T::gemm(g.cout, plane, patch, dout, false, cols, true, T::one(), &mut gw);
        if let Some(gi) = gi.as_mut() {
            let gimg = &mut gi[b * g.cin * plane..(b + 1) * g.cin * plane];
            if g.is_pointwise() {
                // dX = Wᵀ · dout directly
                T::gemm(patch, g.cout, plane, weight, true, dout, false, T::one(), gimg);
            } else {
                T::gemm(patch, g.cout, plane, weight, true, dout, false, T::zero(), &mut dcol);
                col2im_add(g, &dcol, gimg);
            }
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// 2×2 stride-2 max pooling. Returns values and, per output, the flat input
/// index that won (first maximum in row-major scan order).
pub(crate) fn maxpool2_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> (Vec<T>, Vec<usize>) {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for bc in 0..b * c {
        let base = bc * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let cands = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let src = &input[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dims: [usize; 4], grad_out: &[T]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let ow = 2 * w;
    let mut gi = vec![T::zero(); b * c * h * w];
    for bc in 0..b * c {
        let src = &grad_out[bc * 4 * h * w..(bc + 1) * 4 * h * w];
        let dst = &mut gi[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let r0 = 2 * y * ow + 2 * x;
                let r1 = r0 + ow;
                dst[y * w + x] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
            }
        }
    }
    gi
}

pub(crate) fn concat_forward<T: Scalar>(
    b: usize,
    plane: usize,
    c1: usize,
    a: &[T],
    c2: usize,
    bb: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(b * (c1 + c2) * plane);
    for bi in 0..b {
        out.extend_from_slice(&a[bi * c1 * plane..(bi + 1) * c1 * plane]);
        out.extend_from_slice(&bb[bi * c2 * plane..(bi + 1) * c2 * plane]);
    }
    out
}

pub(crate) fn concat_backward<T: Scalar>(
    b: usize,
    plane: usize,
    c1: usize,
    c2: usize,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut ga = Vec::with_capacity(b * c1 * plane);
    let mut gb = Vec::with_capacity(b * c2 * plane);
    let stride = (c1 + c2) * plane;
    for bi in 0..b {
        let row = &grad_out[bi * stride..(bi + 1) * stride];
        ga.extend_from_slice(&row[..c1 * plane]);
        gb.extend_from_slice(&row[c1 * plane..]);
    }
    (ga, gb)
}

/// Mean pixelwise cross-entropy. Returns the loss and the softmax
/// probabilities (same layout as the logits) for the backward pass.
pub(crate) fn softmax_ce_forward<T: Scalar>(
    dims: [usize; 4],
    logits: &[T],
    target: &[u8],
) -> (T, Vec<T>) {
    let [b, k, h, w] = dims;
    let plane = h * w;
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for bi in 0..b {
        let base = bi * k * plane;
        for p in 0..plane {
            let mut mx = logits[base + p];
            for c in 1..k {
                mx = mx.max(logits[base + c * plane + p]);
            }
            let mut denom = T::zero();
            for c in 0..k {
                let e = (logits[base + c * plane + p] - mx).exp();
                probs[base + c * plane + p] = e;
                denom += e;
            }
            for c in 0..k {
                probs[base + c * plane + p] /= denom;
            }
            let t = target[bi * plane + p] as usize;
            // -log softmax = log(denom) - (z_t - max)
            total += denom.ln() - (logits[base + t * plane + p] - mx);
        }
    }
    let count = T::from_usize(b * plane).expect("pixel count fits");
    (total / count, probs)
}

pub(crate) fn softmax_ce_backward<T: Scalar>(
    dims: [usize; 4],
    probs: &[T],
    target: &[u8],
    upstream: T,
) -> Vec<T> {
    let [b, k, h, w] = dims;
    let plane = h * w;
    let scale = upstream / T::from_usize(b * plane).expect("pixel count fits");
    let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for bi in 0..b {
        for p in 0..plane {
            let t = target[bi * plane + p] as usize;
            g[(bi * k + t) * plane + p] -= scale;
        }
    }
    g
}
