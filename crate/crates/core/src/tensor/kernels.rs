use super::Scalar;

const LANES: usize = 8;

/// Inner product with a fixed eight-lane reduction tree.
///
/// The lane split is part of the contract: results are bit-identical across
/// runs and platforms, and the loop body vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let split = a.len() - a.len() % LANES;
    for (x, y) in a[..split]
        .chunks_exact(LANES)
        .zip(b[..split].chunks_exact(LANES))
    {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (dst, &src) in y.iter_mut().zip(x) {
        *dst += alpha * src;
    }
}

/// `out = a · b` for row-major `a: m×k`, `b: k×n`. `out` is overwritten.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = T::zero());
    // k-outer keeps each row of `b` hot across all rows of `a`; every output
    // entry still accumulates in ascending k.
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aik = a[i * k + kk];
            if aik != T::zero() {
                axpy(aik, brow, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

/// `[rows × cols]` to `[cols × rows]`.
pub(crate) fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Shape of a valid 1-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub l_out: usize,
}

/// Kernel `[c_out][c_in][k]` rearranged to `[k][c_in][c_out]`.
pub(crate) fn weight_kco<T: Scalar>(w: &[T], s: &ConvShape) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..s.c_out {
        for c in 0..s.c_in {
            for kk in 0..s.k {
                out[(kk * s.c_in + c) * s.c_out + o] = w[(o * s.c_in + c) * s.k + kk];
            }
        }
    }
    out
}

// The convolutions run time-major internally so the vector loop spans output
// channels rather than the (short) time axis.
/// `wk` is the kernel in `[k][c_in][c_out]` order, see [`weight_kco`].
pub(crate) fn conv1d_forward<T: Scalar>(x: &[T], wk: &[T], b: &[T], s: &ConvShape) -> Vec<T> {
    let xt = transpose(x, s.c_in, s.len);
    let mut out_t = vec![T::zero(); s.l_out * s.c_out];
    for t in 0..s.l_out {
        let orow = &mut out_t[t * s.c_out..(t + 1) * s.c_out];
        orow.copy_from_slice(b);
        for kk in 0..s.k {
            let xr = &xt[(t * s.stride + kk) * s.c_in..(t * s.stride + kk + 1) * s.c_in];
            for (c, &xv) in xr.iter().enumerate() {
                let base = (kk * s.c_in + c) * s.c_out;
                axpy(xv, &wk[base..base + s.c_out], orow);
            }
        }
    }
    transpose(&out_t, s.l_out, s.c_out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    wk: &[T],
    g: &[T],
    s: &ConvShape,
    want: [bool; 3],
) -> ConvGrads<T> {
    let g_t = transpose(g, s.c_out, s.l_out);
    let bias = want[2].then(|| {
        let mut db = vec![T::zero(); s.c_out];
        for grow in g_t.chunks_exact(s.c_out) {
            db.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
        }
        db
    });
    let xt = transpose(x, s.c_in, s.len);
    let weight = want[1].then(|| {
        let mut dwk = vec![T::zero(); wk.len()];
        for t in 0..s.l_out {
            let grow = &g_t[t * s.c_out..(t + 1) * s.c_out];
            for kk in 0..s.k {
                let xr = &xt[(t * s.stride + kk) * s.c_in..(t * s.stride + kk + 1) * s.c_in];
                for (c, &xv) in xr.iter().enumerate() {
                    let base = (kk * s.c_in + c) * s.c_out;
                    axpy(xv, grow, &mut dwk[base..base + s.c_out]);
                }
            }
        }
        let mut dw = vec![T::zero(); wk.len()];
        for o in 0..s.c_out {
            for c in 0..s.c_in {
                for kk in 0..s.k {
                    dw[(o * s.c_in + c) * s.k + kk] = dwk[(kk * s.c_in + c) * s.c_out + o];
                }
            }
        }
        dw
    });
    let input = want[0].then(|| {
        let mut dxt = vec![T::zero(); s.len * s.c_in];
        for t in 0..s.l_out {
            let grow = &g_t[t * s.c_out..(t + 1) * s.c_out];
            for kk in 0..s.k {
                let row = (t * s.stride + kk) * s.c_in;
                for c in 0..s.c_in {
                    let base = (kk * s.c_in + c) * s.c_out;
                    dxt[row + c] += dot(&wk[base..base + s.c_out], grow);
                }
            }
        }
        transpose(&dxt, s.len, s.c_in)
    });
    ConvGrads {
        input,
        weight,
        bias,
    }
}
