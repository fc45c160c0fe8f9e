//! Scalar-generic compute kernels behind the graph ops. Matrix products go
//! through `matrixmultiply`; everything else is plain loops written to
//! auto-vectorize.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar type usable in tensors: f32 for training speed, f64 for gradient
/// checking.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + std::iter::Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxs(self, o: Self) -> Self;

    /// C[m x n] = alpha * A * B + beta * C with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn maxs(self, o: Self) -> Self {
                if self > o {
                    self
                } else {
                    o
                }
            }
            #[inline(always)]
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: f64,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: f64,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(
                    m,
                    k,
                    n,
                    alpha as $t,
                    a,
                    rsa,
                    csa,
                    b,
                    rsb,
                    csb,
                    beta as $t,
                    c,
                    rsc,
                    csc,
                )
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);


/// C[m x n] (logical) = alpha * A * B + beta * C through explicit strided
/// views of the three buffers.
#[allow(clippy::too_many_arguments)]
pub fn gemm_raw<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [T],
    (rsc, csc): (isize, isize),
) {
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

pub fn matmul_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    let va = strides(if ta { m } else { k }, ta);
    let vb = strides(if tb { k } else { n }, tb);
    gemm_raw(m, k, n, 1.0, a, va, b, vb, 0.0, &mut c, (n as isize, 1));
    c
}

pub fn bmm_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    ta: bool,
    tb: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::ZERO; batch * m * n];
    let a_sz = m * k;
    let b_sz = k * n;
    let va = strides(if ta { m } else { k }, ta);
    let vb = strides(if tb { k } else { n }, tb);
    for i in 0..batch {
        gemm_raw(
            m,
            k,
            n,
            1.0,
            &a[i * a_sz..(i + 1) * a_sz],
            va,
            &b[i * b_sz..(i + 1) * b_sz],
            vb,
            0.0,
            &mut c[i * m * n..(i + 1) * m * n],
            (n as isize, 1),
        );
    }
    c
}

/// Strides of the logical view over row-major [rows, cols] storage (public
/// for the graph's matmul backward).
pub fn strides(cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

pub fn mul<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x * *y).collect()
}

pub fn scale<T: Scalar>(a: &[T], c: f64) -> Vec<T> {
    let c = T::from_f64(c);
    a.iter().map(|x| *x * c).collect()
}

pub fn add_scalar<T: Scalar>(a: &[T], c: f64) -> Vec<T> {
    let c = T::from_f64(c);
    a.iter().map(|x| *x + c).collect()
}

pub fn add_bias<T: Scalar>(a: &[T], bias: &[T]) -> Vec<T> {
    let c = bias.len();
    let mut out = a.to_vec();
    for row in out.chunks_mut(c) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o = *o + *b;
        }
    }
    out
}

pub fn axpy<T: Scalar>(out: &mut [T], x: &[T], c: f64) {
    let c = T::from_f64(c);
    for (o, v) in out.iter_mut().zip(x) {
        *o = *o + *v * c;
    }
}

pub fn acc_mul<T: Scalar>(out: &mut [T], a: &[T], b: &[T]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = *o + *x * *y;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu_fwd<T: Scalar>(x: &[T]) -> Vec<T> {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    x.iter()
        .map(|&v| {
            let u = c * (v + k * v * v * v);
            half * v * (T::ONE + u.tanh())
        })
        .collect()
}

pub fn gelu_bwd<T: Scalar>(grad_out: &mut [T], x: &[T], g: &[T]) {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let k3 = T::from_f64(3.0 * GELU_K);
    let half = T::from_f64(0.5);
    for ((o, &v), &gv) in grad_out.iter_mut().zip(x).zip(g) {
        let u = c * (v + k * v * v * v);
        let t = u.tanh();
        let sech2 = T::ONE - t * t;
        let du = c * (T::ONE + k3 * v * v);
        let d = half * (T::ONE + t) + half * v * sech2 * du;
        *o = *o + gv * d;
    }
}

/// Row softmax with optional boolean mask (true = visible). Mask rows are
/// broadcast cyclically over leading batch dimensions. Masked entries are
/// written as exact zeros. Returns the index of the first fully masked row
/// on failure.
pub fn softmax_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    mask: Option<(&[bool], usize)>,
) -> Result<Vec<T>, usize> {
    let rows = x.len() / n;
    let mut out = vec![T::ZERO; x.len()];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let or = &mut out[r * n..(r + 1) * n];
        let mrow = mask.map(|(m, mrows)| {
            let mr = r % mrows;
            &m[mr * n..(mr + 1) * n]
        });
        let mut mx = None;
        for j in 0..n {
            if mrow.map_or(true, |m| m[j]) {
                mx = Some(match mx {
                    None => xr[j],
                    Some(v) => xr[j].maxs(v),
                });
            }
        }
        let mx = match mx {
            Some(v) => v,
            None => return Err(r),
        };
        let mut sum = T::ZERO;
        for j in 0..n {
            if mrow.map_or(true, |m| m[j]) {
                let e = (xr[j] - mx).exp();
                or[j] = e;
                sum = sum + e;
            }
        }
        for j in 0..n {
            if mrow.map_or(true, |m| m[j]) {
                or[j] = or[j] / sum;
            }
        }
    }
    Ok(out)
}

/// dx = y * (dy - sum(dy * y)) per row; masked positions stay zero because
/// y is zero there.
pub fn softmax_bwd<T: Scalar>(grad_out: &mut [T], y: &[T], g: &[T], n: usize) {
    let rows = y.len() / n;
    for r in 0..rows {
        let yr = &y[r * n..(r + 1) * n];
        let gr = &g[r * n..(r + 1) * n];
        let or = &mut grad_out[r * n..(r + 1) * n];
        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
        for j in 0..n {
            or[j] = or[j] + yr[j] * (gr[j] - dot);
        }
    }
}

pub fn rms_norm_fwd<T: Scalar>(x: &[T], gain: &[T], eps: f64) -> Vec<T> {
    let d = gain.len();
    let eps = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut out = vec![T::ZERO; x.len()];
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms: T = xr.iter().map(|v| *v * *v).sum::<T>() * inv_d;
        let r = T::ONE / (ms + eps).sqrt();
        for j in 0..d {
            or[j] = xr[j] * r * gain[j];
        }
    }
    out
}

pub fn rms_norm_bwd<T: Scalar>(
    gx: &mut [T],
    ggain: &mut [T],
    x: &[T],
    gain: &[T],
    g: &[T],
    eps: f64,
) {
    let d = gain.len();
    let eps = T::from_f64(eps);
    let inv_d = T::from_f64(1.0 / d as f64);
    for (row, (xr, gr)) in x.chunks(d).zip(g.chunks(d)).enumerate() {
        let ms: T = xr.iter().map(|v| *v * *v).sum::<T>() * inv_d;
        let r = T::ONE / (ms + eps).sqrt();
        let r3 = r * r * r;
        let dot: T = (0..d).map(|j| gr[j] * gain[j] * xr[j]).sum();
        let gxr = &mut gx[row * d..(row + 1) * d];
        for j in 0..d {
            gxr[j] = gxr[j] + r * gain[j] * gr[j] - r3 * inv_d * xr[j] * dot;
        }
        for j in 0..d {
            ggain[j] = ggain[j] + xr[j] * r * gr[j];
        }
    }
}

/// Mean negative log-likelihood over rows of logits, computed with row-max
/// subtraction.
pub fn cross_entropy_fwd<T: Scalar>(logits: &[T], k: usize, targets: &[usize]) -> T {
    let n = targets.len();
    let mut total = T::ZERO;
    for (row, &t) in logits.chunks(k).zip(targets) {
        let mx = row.iter().fold(row[0], |a, &b| a.maxs(b));
        let lse: T = row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln() + mx;
        total = total + lse - row[t];
    }
    total * T::from_f64(1.0 / n as f64)
}

pub fn cross_entropy_bwd<T: Scalar>(gl: &mut [T], logits: &[T], k: usize, targets: &[usize], g: T) {
    let n = targets.len();
    let scale = g * T::from_f64(1.0 / n as f64);
    for (i, (row, &t)) in logits.chunks(k).zip(targets).enumerate() {
        let mx = row.iter().fold(row[0], |a, &b| a.maxs(b));
        let sum: T = row.iter().map(|v| (*v - mx).exp()).sum();
        let gr = &mut gl[i * k..(i + 1) * k];
        for j in 0..k {
            let p = (row[j] - mx).exp() / sum;
            let ind = if j == t { T::ONE } else { T::ZERO };
            gr[j] = gr[j] + (p - ind) * scale;
        }
    }
}

pub fn mse_fwd<T: Scalar>(a: &[T], b: &[T]) -> T {
    let inv = T::from_f64(1.0 / a.len() as f64);
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x - *y;
            d * d
        })
        .sum::<T>()
        * inv
}

pub fn mse_bwd<T: Scalar>(ga: Option<&mut [T]>, gb: Option<&mut [T]>, a: &[T], b: &[T], g: T) {
    let c = g * T::from_f64(2.0 / a.len() as f64);
    if let Some(ga) = ga {
        for ((o, x), y) in ga.iter_mut().zip(a).zip(b) {
            *o = *o + c * (*x - *y);
        }
    }
    if let Some(gb) = gb {
        for ((o, x), y) in gb.iter_mut().zip(a).zip(b) {
            *o = *o - c * (*x - *y);
        }
    }
}

pub fn embed_fwd<T: Scalar>(table: &[T], d: usize, ids: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&table[i * d..(i + 1) * d]);
    }
    out
}

pub fn embed_bwd<T: Scalar>(gt: &mut [T], d: usize, ids: &[usize], g: &[T]) {
    for (row, &i) in ids.iter().enumerate() {
        let src = &g[row * d..(row + 1) * d];
        let dst = &mut gt[i * d..(i + 1) * d];
        for (o, v) in dst.iter_mut().zip(src) {
            *o = *o + *v;
        }
    }
}

/// Non-overlapping p x p patches of an [H, W, C] image, flattened row-major
/// into [(H/p)*(W/p), p*p*C] with patches ordered row-major over the grid.
pub fn patches_fwd<T: Scalar>(img: &[T], h: usize, w: usize, c: usize, p: usize) -> Vec<T> {
    let gr = h / p;
    let gc = w / p;
    let mut out = Vec::with_capacity(gr * gc * p * p * c);
    for gy in 0..gr {
        for gx in 0..gc {
            for dy in 0..p {
                let y = gy * p + dy;
                let x0 = gx * p;
                out.extend_from_slice(&img[(y * w + x0) * c..(y * w + x0 + p) * c]);
            }
        }
    }
    out
}

pub fn patches_bwd<T: Scalar>(gi: &mut [T], h: usize, w: usize, c: usize, p: usize, g: &[T]) {
    let gr = h / p;
    let gc = w / p;
    let mut src = 0;
    for gy in 0..gr {
        for gx in 0..gc {
            for dy in 0..p {
                let y = gy * p + dy;
                let x0 = gx * p;
                let dst = &mut gi[(y * w + x0) * c..(y * w + x0 + p) * c];
                for (o, v) in dst.iter_mut().zip(&g[src..src + p * c]) {
                    *o = *o + *v;
                }
                src += p * c;
            }
        }
    }
}

pub fn mean_rows_fwd<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let rows = x.len() / d;
    let inv = T::from_f64(1.0 / rows as f64);
    let mut out = vec![T::ZERO; d];
    for row in x.chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = *o + *v;
        }
    }
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    out
}

pub fn split_heads_fwd<T: Scalar>(x: &[T], t: usize, d: usize, h: usize) -> Vec<T> {
    let dk = d / h;
    let mut out = vec![T::ZERO; x.len()];
    for hh in 0..h {
        for i in 0..t {
            let src = &x[i * d + hh * dk..i * d + hh * dk + dk];
            out[(hh * t + i) * dk..(hh * t + i + 1) * dk].copy_from_slice(src);
        }
    }
    out
}

pub fn split_heads_bwd<T: Scalar>(gx: &mut [T], t: usize, d: usize, h: usize, g: &[T]) {
    let dk = d / h;
    for hh in 0..h {
        for i in 0..t {
            let src = &g[(hh * t + i) * dk..(hh * t + i + 1) * dk];
            let dst = &mut gx[i * d + hh * dk..i * d + hh * dk + dk];
            for (o, v) in dst.iter_mut().zip(src) {
                *o = *o + *v;
            }
        }
    }
}

pub fn merge_heads_fwd<T: Scalar>(x: &[T], h: usize, t: usize, dk: usize) -> Vec<T> {
    let d = h * dk;
    let mut out = vec![T::ZERO; x.len()];
    for hh in 0..h {
        for i in 0..t {
            let src = &x[(hh * t + i) * dk..(hh * t + i + 1) * dk];
            out[i * d + hh * dk..i * d + hh * dk + dk].copy_from_slice(src);
        }
    }
    out
}

pub fn merge_heads_bwd<T: Scalar>(gx: &mut [T], h: usize, t: usize, dk: usize, g: &[T]) {
    let d = h * dk;
    for hh in 0..h {
        for i in 0..t {
            let src = &g[i * d + hh * dk..i * d + hh * dk + dk];
            let dst = &mut gx[(hh * t + i) * dk..(hh * t + i + 1) * dk];
            for (o, v) in dst.iter_mut().zip(src) {
                *o = *o + *v;
            }
        }
    }
}

/// Finite iff the sum of absolute values is finite (NaN and infinities both
/// poison the sum).
pub fn all_finite<T: Scalar>(x: &[T]) -> bool {
    x.iter().map(|v| v.abs()).sum::<T>().is_finite()
}
