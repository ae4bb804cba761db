//! Slice kernels for the network layers, forward and backward.
//!
//! Activations are `[batch × channels × len]`, contiguous and row-major.
//! The convolution kernels work on one sample at a time so that a block's
//! working set stays in cache.

use super::Scalar;

const LANES: usize = 8;
const TILE: usize = 16;

/// Dot product with lane-split accumulation so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[inline]
pub(crate) fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    for x in &mut ca {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l];
        }
    }
    let tail = ca.remainder().iter().fold(T::zero(), |s, &v| s + v);
    acc.iter().fold(tail, |s, &v| s + v)
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yy, &xx) in y.iter_mut().zip(x) {
        *yy = *yy + alpha * xx;
    }
}

/// `y[t] += Σ_j w[j] · xp[t + j]` for every `t < y.len()`;
/// `xp` holds at least `y.len() + w.len() - 1` values.
fn correlate_add<T: Scalar>(xp: &[T], w: &[T], y: &mut [T]) {
    let n = y.len();
    let k = w.len();
    debug_assert!(xp.len() + 1 >= n + k);
    let mut t0 = 0;
    while t0 + TILE <= n {
        let mut acc = [T::zero(); TILE];
        for (j, &wj) in w.iter().enumerate() {
            let xs = &xp[t0 + j..t0 + j + TILE];
            for l in 0..TILE {
                acc[l] = acc[l] + wj * xs[l];
            }
        }
        for (yy, a) in y[t0..t0 + TILE].iter_mut().zip(acc) {
            *yy = *yy + a;
        }
        t0 += TILE;
    }
    for t in t0..n {
        y[t] = y[t] + dot(w, &xp[t..t + k]);
    }
}

/// `out[j] += Σ_t g[t] · xp[t + j]` for every `j < out.len()`;
/// `xp` holds at least `g.len() + ceil(out.len() / TILE)·TILE - 1` values.
fn accumulate_lags<T: Scalar>(xp: &[T], g: &[T], out: &mut [T]) {
    for (jt, chunk) in out.chunks_mut(TILE).enumerate() {
        let j0 = jt * TILE;
        let mut acc = [T::zero(); TILE];
        for (t, &gt) in g.iter().enumerate() {
            let xs = &xp[t + j0..t + j0 + TILE];
            for l in 0..TILE {
                acc[l] = acc[l] + gt * xs[l];
            }
        }
        for (o, a) in chunk.iter_mut().zip(acc) {
            *o = *o + a;
        }
    }
}

/// Copies `row` into the middle of `buf`, zero-padding `pad` values on
/// each side.
fn pad_into<T: Scalar>(row: &[T], pad: usize, buf: &mut Vec<T>) {
    buf.clear();
    buf.resize(row.len() + 2 * pad, T::zero());
    buf[pad..pad + row.len()].copy_from_slice(row);
}

/// Same-padded depthwise convolution, stride 1, over `rows` of length
/// `len`; row `r` uses the filter of channel `r % channels`.
/// `weight` is `[channels × k]`, `bias` is `[channels]`.
pub(crate) fn depthwise_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    channels: usize,
    len: usize,
    k: usize,
    y: &mut [T],
) {
    let mut buf = Vec::with_capacity(len + k);
    for (row, (xr, yr)) in x.chunks_exact(len).zip(y.chunks_exact_mut(len)).enumerate() {
        let c = row % channels;
        pad_into(xr, k / 2, &mut buf);
        yr.fill(bias[c]);
        correlate_add(&buf, &weight[c * k..(c + 1) * k], yr);
    }
}

/// Backward of [`depthwise_forward`]; accumulates parameter gradients and
/// optionally writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_y: &[T],
    channels: usize,
    len: usize,
    k: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    mut grad_x: Option<&mut [T]>,
) {
    let pad = k / 2;
    let lag_room = k.div_ceil(TILE) * TILE - k;
    let mut xbuf = Vec::with_capacity(len + k + lag_room);
    let mut gbuf = Vec::with_capacity(len + k);
    let mut flipped = vec![T::zero(); k];
    for (row, (xr, gr)) in x.chunks_exact(len).zip(grad_y.chunks_exact(len)).enumerate() {
        let c = row % channels;
        grad_bias[c] = grad_bias[c] + sum(gr);
        pad_into(xr, pad, &mut xbuf);
        xbuf.resize(xbuf.len() + lag_room, T::zero());
        accumulate_lags(&xbuf, gr, &mut grad_weight[c * k..(c + 1) * k]);
        if let Some(gx) = grad_x.as_deref_mut() {
            let w = &weight[c * k..(c + 1) * k];
            for (f, &v) in flipped.iter_mut().zip(w.iter().rev()) {
                *f = v;
            }
            pad_into(gr, pad, &mut gbuf);
            let gxr = &mut gx[row * len..(row + 1) * len];
            gxr.fill(T::zero());
            correlate_add(&gbuf, &flipped, gxr);
        }
    }
}

/// A row-major matrix operand, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical shape and strides after the optional transpose.
    fn view(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `c ← a·b + beta·c` with `c` row-major `[m × n]`.
pub(crate) fn matmul<T: Scalar>(a: Mat<T>, b: Mat<T>, beta: T, c: &mut [T]) {
    let (m, ka, rsa, csa) = a.view();
    let (kb, n, rsb, csb) = b.view();
    assert_eq!(ka, kb, "inner dimensions");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index the strides can reach
    unsafe {
        T::gemm(
            m,
            ka,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Kernel-size-1 convolution of one sample: `y[o] = bias[o] + Σ_i w[o,i] x[i]`.
/// `weight` is `[c_out × c_in]`.
pub(crate) fn pointwise_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    c_in: usize,
    c_out: usize,
    len: usize,
    y: &mut [T],
) {
    for (yo, &b) in y.chunks_exact_mut(len).zip(bias) {
        yo.fill(b);
    }
    matmul(Mat::new(weight, c_out, c_in), Mat::new(x, c_in, len), T::one(), y);
}

/// Backward of [`pointwise_forward`] for one sample; accumulates the
/// parameter gradients and overwrites `grad_x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pointwise_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_y: &[T],
    c_in: usize,
    c_out: usize,
    len: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_x: &mut [T],
) {
    for (gb, go) in grad_bias.iter_mut().zip(grad_y.chunks_exact(len)) {
        *gb = *gb + sum(go);
    }
    let g = Mat::new(grad_y, c_out, len);
    matmul(g, Mat::new(x, c_in, len).t(), T::one(), grad_weight);
    matmul(Mat::new(weight, c_out, c_in).t(), g, T::zero(), grad_x);
}

/// Mean and sum of squared deviations of a row.
pub(crate) fn row_moments<T: Scalar>(x: &[T]) -> (T, T) {
    let m = sum(x) / T::from_usize(x.len()).unwrap();
    let mut lanes = [T::zero(); LANES];
    let mut it = x.chunks_exact(LANES);
    for ch in &mut it {
        for l in 0..LANES {
            let d = ch[l] - m;
            lanes[l] = lanes[l] + d * d;
        }
    }
    let tail = it.remainder().iter().fold(T::zero(), |s, &v| s + (v - m) * (v - m));
    (m, lanes.iter().fold(tail, |s, &v| s + v))
}

/// Batch norm with the given statistics followed by max-pool (kernel 2,
/// stride 2, floor) on one row. Writes the pooled normalized value, the
/// pre-affine `x̂` of the winner and which element of the pair won; the
/// first element wins ties.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_maxpool_row<T: Scalar>(
    x: &[T],
    mean: T,
    inv_std: T,
    gamma: T,
    beta: T,
    pooled: &mut [T],
    pooled_xhat: Option<&mut [T]>,
    arg: Option<&mut [u8]>,
) {
    let half = x.len() / 2;
    let mut xh_out = pooled_xhat;
    let mut arg_out = arg;
    for t in 0..half {
        let ha = (x[2 * t] - mean) * inv_std;
        let hb = (x[2 * t + 1] - mean) * inv_std;
        let ya = gamma * ha + beta;
        let yb = gamma * hb + beta;
        let second = yb > ya;
        pooled[t] = if second { yb } else { ya };
        if let Some(xh) = xh_out.as_deref_mut() {
            xh[t] = if second { hb } else { ha };
        }
        if let Some(a) = arg_out.as_deref_mut() {
            a[t] = second as u8;
        }
    }
}

/// Gradient of one pre-norm row through training-mode batch norm and the
/// max-pool: `coef · (N·g_bn − Σg − x̂·Σg·x̂)` where `g_bn` is `grad_pooled`
/// routed to the pool winners. `sums = (Σg, Σg·x̂)` over the whole batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_maxpool_backward_row<T: Scalar>(
    x: &[T],
    mean: T,
    inv_std: T,
    coef: T,
    count: T,
    sums: (T, T),
    grad_pooled: &[T],
    arg: &[u8],
    grad_x: &mut [T],
) {
    let (sg, sgh) = sums;
    // coef·(−Σg − x̂·Σg·x̂) with x̂ = (x − mean)·inv_std, as one affine map of x
    let slope = T::zero() - coef * inv_std * sgh;
    let offset = T::zero() - coef * sg - slope * mean;
    for (gx, &xv) in grad_x.iter_mut().zip(x) {
        *gx = slope * xv + offset;
    }
    let step = coef * count;
    let pairs = grad_x.chunks_exact_mut(2);
    for ((pair, &g), &a) in pairs.zip(grad_pooled).zip(arg) {
        let i = a as usize & 1;
        pair[i] = pair[i] + step * g;
    }
}

/// Adaptive average pooling of each row to `bins` outputs, using the
/// `[floor(i·L/bins), ceil((i+1)·L/bins))` bin edges.
pub(crate) fn adaptive_avg_bins(len: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| {
            let start = i * len / bins;
            let end = ((i + 1) * len).div_ceil(bins);
            (start, end)
        })
        .collect()
}

/// `y[b, o] = bias[o] + Σ_i w[o, i] x[b, i]`
pub(crate) fn dense_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    batch: usize,
    n_in: usize,
    n_out: usize,
    y: &mut [T],
) {
    for b in 0..batch {
        let xb = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            y[b * n_out + o] = bias[o] + dot(&weight[o * n_in..(o + 1) * n_in], xb);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_y: &[T],
    batch: usize,
    n_in: usize,
    n_out: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_x: &mut [T],
) {
    grad_x.fill(T::zero());
    for b in 0..batch {
        let xb = &x[b * n_in..(b + 1) * n_in];
        let gxb = &mut grad_x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let g = grad_y[b * n_out + o];
            grad_bias[o] = grad_bias[o] + g;
            axpy(g, xb, &mut grad_weight[o * n_in..(o + 1) * n_in]);
            axpy(g, &weight[o * n_in..(o + 1) * n_in], gxb);
        }
    }
}
