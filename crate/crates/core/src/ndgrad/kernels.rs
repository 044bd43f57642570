//! Slice-level forward and backward kernels behind the tape ops.
//!
//! Layout conventions: the last axis is the feature axis. Sequence kernels
//! (`conv1d`, `upsample2`) view their input as `[sequences, steps, channels]`;
//! attention views its inputs as `[objects, steps, channels]` and mixes along
//! the object axis only.

use super::scalar::{gemm, Layout};
use super::Scalar;

#[inline]
fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

pub fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Column sums of a row-major `[rows, cols]` buffer added into `out`.
pub fn col_sum_into<T: Scalar>(x: &[T], cols: usize, out: &mut [T]) {
    for row in x.chunks_exact(cols) {
        add_into(out, row);
    }
}

// ---------------------------------------------------------------- affine

/// `y[n, dout] = x[n, din] W^T + b`.
pub fn affine_fwd<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, din: usize, dout: usize) -> Vec<T> {
    let n = x.len() / din;
    let mut y = vec![T::zero(); n * dout];
    if let Some(b) = b {
        for row in y.chunks_exact_mut(dout) {
            row.copy_from_slice(b);
        }
        gemm(n, din, dout, x, Layout::N, w, Layout::T, T::one(), &mut y);
    } else {
        gemm(n, din, dout, x, Layout::N, w, Layout::T, T::zero(), &mut y);
    }
    y
}

/// Returns `(dx, dW)`; the bias gradient is the column sum of `dy`.
pub fn affine_bwd<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    din: usize,
    dout: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = x.len() / din;
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * din];
        gemm(n, dout, din, dy, Layout::N, w, Layout::N, T::zero(), &mut dx);
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); dout * din];
        gemm(dout, n, din, dy, Layout::T, x, Layout::N, T::zero(), &mut dw);
        dw
    });
    (dx, dw)
}

// ---------------------------------------------------------------- conv1d

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub seqs: usize,
    pub len: usize,
    pub out_len: usize,
    pub cin: usize,
    pub cout: usize,
    pub width: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(seqs: usize, len: usize, cin: usize, cout: usize, width: usize, stride: usize) -> Self {
        Self {
            seqs,
            len,
            out_len: len.div_ceil(stride),
            cin,
            cout,
            width,
            stride,
        }
    }

    fn half(&self) -> isize {
        (self.width / 2) as isize
    }

    fn cols(&self) -> usize {
        self.width * self.cin
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let mut col = vec![T::zero(); g.seqs * g.out_len * cols];
    let k = g.half();
    for s in 0..g.seqs {
        let xs = &x[s * g.len * g.cin..(s + 1) * g.len * g.cin];
        for j in 0..g.out_len {
            let row = &mut col[(s * g.out_len + j) * cols..(s * g.out_len + j + 1) * cols];
            for tap in 0..g.width {
                let src = (j * g.stride) as isize + tap as isize - k;
                if src >= 0 && (src as usize) < g.len {
                    let src = src as usize;
                    row[tap * g.cin..(tap + 1) * g.cin]
                        .copy_from_slice(&xs[src * g.cin..(src + 1) * g.cin]);
                }
            }
        }
    }
    col
}

fn col2im_add<T: Scalar>(dcol: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.cols();
    let k = g.half();
    for s in 0..g.seqs {
        let dxs = &mut dx[s * g.len * g.cin..(s + 1) * g.len * g.cin];
        for j in 0..g.out_len {
            let row = &dcol[(s * g.out_len + j) * cols..(s * g.out_len + j + 1) * cols];
            for tap in 0..g.width {
                let src = (j * g.stride) as isize + tap as isize - k;
                if src >= 0 && (src as usize) < g.len {
                    let src = src as usize;
                    add_into(
                        &mut dxs[src * g.cin..(src + 1) * g.cin],
                        &row[tap * g.cin..(tap + 1) * g.cin],
                    );
                }
            }
        }
    }
}

/// Kernel `[width, cout, cin]` rearranged to `[width * cin, cout]`.
fn kernel_matrix<T: Scalar>(kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let mut m = vec![T::zero(); g.cols() * g.cout];
    for tap in 0..g.width {
        for co in 0..g.cout {
            for ci in 0..g.cin {
                m[(tap * g.cin + ci) * g.cout + co] = kernel[(tap * g.cout + co) * g.cin + ci];
            }
        }
    }
    m
}

pub fn conv1d_fwd<T: Scalar>(x: &[T], kernel: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let col = im2col(x, g);
    let km = kernel_matrix(kernel, g);
    let rows = g.seqs * g.out_len;
    let mut y = vec![T::zero(); rows * g.cout];
    for row in y.chunks_exact_mut(g.cout) {
        row.copy_from_slice(bias);
    }
    gemm(rows, g.cols(), g.cout, &col, Layout::N, &km, Layout::N, T::one(), &mut y);
    y
}

/// Returns `(dx, dkernel)`; the bias gradient is the column sum of `dy`.
pub fn conv1d_bwd<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = g.seqs * g.out_len;
    let cols = g.cols();
    let dx = need_dx.then(|| {
        let km = kernel_matrix(kernel, g);
        let mut dcol = vec![T::zero(); rows * cols];
        gemm(rows, g.cout, cols, dy, Layout::N, &km, Layout::T, T::zero(), &mut dcol);
        let mut dx = vec![T::zero(); g.seqs * g.len * g.cin];
        col2im_add(&dcol, g, &mut dx);
        dx
    });
    let dk = need_dk.then(|| {
        let col = im2col(x, g);
        let mut dkm = vec![T::zero(); cols * g.cout];
        gemm(cols, rows, g.cout, &col, Layout::T, dy, Layout::N, T::zero(), &mut dkm);
        let mut dk = vec![T::zero(); g.width * g.cout * g.cin];
        for tap in 0..g.width {
            for co in 0..g.cout {
                for ci in 0..g.cin {
                    dk[(tap * g.cout + co) * g.cin + ci] = dkm[(tap * g.cin + ci) * g.cout + co];
                }
            }
        }
        dk
    });
    (dx, dk)
}

// ---------------------------------------------------------------- group norm

pub struct GroupNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_fwd<T: Scalar>(
    x: &[T],
    d: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, GroupNormSaved<T>) {
    let gs = d / groups;
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n * groups];
    let inv = c::<T>(1.0 / gs as f64);
    for p in 0..n {
        for gi in 0..groups {
            let lo = p * d + gi * gs;
            let xs = &x[lo..lo + gs];
            let mean = xs.iter().copied().sum::<T>() * inv;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
            let r = T::one() / (var + c(eps)).sqrt();
            rstd[p * groups + gi] = r;
            for f in 0..gs {
                let h = (xs[f] - mean) * r;
                xhat[lo + f] = h;
                y[lo + f] = h * gamma[gi * gs + f] + beta[gi * gs + f];
            }
        }
    }
    (y, GroupNormSaved { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_bwd<T: Scalar>(
    saved: &GroupNormSaved<T>,
    dy: &[T],
    d: usize,
    groups: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let gs = d / groups;
    let n = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let inv = c::<T>(1.0 / gs as f64);
    for p in 0..n {
        for gi in 0..groups {
            let lo = p * d + gi * gs;
            let mut sum_dh = T::zero();
            let mut sum_dh_h = T::zero();
            for f in 0..gs {
                let feat = gi * gs + f;
                let h = saved.xhat[lo + f];
                let g = dy[lo + f];
                dgamma[feat] += g * h;
                dbeta[feat] += g;
                let dh = g * gamma[feat];
                sum_dh += dh;
                sum_dh_h += dh * h;
            }
            let r = saved.rstd[p * groups + gi];
            let mean_dh = sum_dh * inv;
            let mean_dh_h = sum_dh_h * inv;
            for f in 0..gs {
                let h = saved.xhat[lo + f];
                let dh = dy[lo + f] * gamma[gi * gs + f];
                dx[lo + f] = r * (dh - mean_dh - h * mean_dh_h);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------- activations

/// Overflow-safe softplus, `max(x, 0) + ln(1 + e^-|x|)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `x * tanh(softplus(x))` and its derivative.
///
/// Uses `tanh(ln(1 + e)) = n / (n + 2)` with `n = e (e + 2)`, `e = exp(x)`,
/// which needs a single exponential; above the cutoff the result is `x`.
#[inline]
pub fn mish_with_grad<T: Scalar>(x: T) -> (T, T) {
    let cutoff = c::<T>(20.0);
    if x > cutoff {
        return (x, T::one());
    }
    let two = c::<T>(2.0);
    let e = x.exp();
    let n = e * (e + two);
    let th = n / (n + two);
    let sig = e / (T::one() + e);
    let y = x * th;
    let dy = th + x * (T::one() - th * th) * sig;
    (y, dy)
}

pub fn mish_fwd<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| mish_with_grad(v).0).collect()
}

pub fn mish_bwd<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| mish_with_grad(v).1 * g)
        .collect()
}

pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut y = x.to_vec();
    for row in y.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    y
}

#[inline]
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn softmax_rows_bwd<T: Scalar>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &a), &b) in dr.iter_mut().zip(yr).zip(gr) {
            *d = a * (b - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------- attention

#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub objects: usize,
    pub steps: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
    #[inline]
    fn idx(&self, o: usize, l: usize, h: usize) -> usize {
        (o * self.steps + l) * self.dim + h * self.head_dim()
    }
    fn scale<T: Scalar>(&self) -> T {
        c(1.0 / (self.head_dim() as f64).sqrt())
    }
}

/// Multi-head self-attention across the object axis at every step.
/// Returns the head outputs and the attention weights `[steps, heads, O, O]`.
pub fn attention_fwd<T: Scalar>(q: &[T], k: &[T], v: &[T], g: &AttnGeom) -> (Vec<T>, Vec<T>) {
    let (no, dh) = (g.objects, g.head_dim());
    let scale = g.scale::<T>();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); g.steps * g.heads * no * no];
    for l in 0..g.steps {
        for h in 0..g.heads {
            let p = &mut probs[(l * g.heads + h) * no * no..(l * g.heads + h + 1) * no * no];
            for o in 0..no {
                let qo = &q[g.idx(o, l, h)..g.idx(o, l, h) + dh];
                let row = &mut p[o * no..(o + 1) * no];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[g.idx(j, l, h)..g.idx(j, l, h) + dh];
                    *r = qo.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(row);
                let dst = g.idx(o, l, h);
                for (j, &a) in row.iter().enumerate() {
                    let vj = g.idx(j, l, h);
                    for f in 0..dh {
                        out[dst + f] += a * v[vj + f];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_bwd<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    g: &AttnGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (no, dh) = (g.objects, g.head_dim());
    let scale = g.scale::<T>();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dlog = vec![T::zero(); no];
    for l in 0..g.steps {
        for h in 0..g.heads {
            let p = &probs[(l * g.heads + h) * no * no..(l * g.heads + h + 1) * no * no];
            for o in 0..no {
                let row = &p[o * no..(o + 1) * no];
                let go = g.idx(o, l, h);
                let du = &dout[go..go + dh];
                let mut dot = T::zero();
                for j in 0..no {
                    let vj = g.idx(j, l, h);
                    let dp: T = du.iter().zip(&v[vj..vj + dh]).map(|(&a, &b)| a * b).sum();
                    dlog[j] = dp;
                    dot += dp * row[j];
                    for f in 0..dh {
                        dv[vj + f] += row[j] * du[f];
                    }
                }
                for j in 0..no {
                    let dl = row[j] * (dlog[j] - dot) * scale;
                    if dl == T::zero() {
                        continue;
                    }
                    let kj = g.idx(j, l, h);
                    for f in 0..dh {
                        dq[go + f] += dl * k[kj + f];
                        dk[kj + f] += dl * q[go + f];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------- layout

/// `[a, b, d]` to `[b, a, d]`.
pub fn swap01<T: Scalar>(x: &[T], a: usize, b: usize, d: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            y[(j * a + i) * d..(j * a + i + 1) * d].copy_from_slice(&x[(i * b + j) * d..(i * b + j + 1) * d]);
        }
    }
    y
}

/// Nearest-neighbour doubling along the step axis of `[seqs, len, d]`.
pub fn upsample2_fwd<T: Scalar>(x: &[T], seqs: usize, len: usize, d: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len() * 2);
    for s in 0..seqs {
        for l in 0..len {
            let src = &x[(s * len + l) * d..(s * len + l + 1) * d];
            y.extend_from_slice(src);
            y.extend_from_slice(src);
        }
    }
    y
}

pub fn upsample2_bwd<T: Scalar>(dy: &[T], seqs: usize, len: usize, d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); seqs * len * d];
    for s in 0..seqs {
        for l in 0..len {
            let dst = &mut dx[(s * len + l) * d..(s * len + l + 1) * d];
            let a = (s * 2 * len + 2 * l) * d;
            for f in 0..d {
                dst[f] = dy[a + f] + dy[a + d + f];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_stride_two_reads_even_centres() {
        // one sequence, len 4, 1 channel, kernel [0, 1, 0] (identity tap)
        let g = ConvGeom::new(1, 4, 1, 1, 3, 2);
        let y = conv1d_fwd(&[1.0f64, 2.0, 3.0, 4.0], &[0.0, 1.0, 0.0], &[0.0], &g);
        assert_eq!(y, vec![1.0, 3.0]);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mish_matches_softplus_form() {
        for &x in &[-40.0, -5.0, -1.0, -0.1, 0.0, 0.3, 1.0, 4.0, 19.9, 25.0] {
            let reference = x * softplus(x).tanh();
            let (y, _) = mish_with_grad(x);
            assert!((y - reference).abs() < 1e-12 * (1.0 + reference.abs()), "x={x}");
        }
    }
}
