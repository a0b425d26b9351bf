//! Numerical kernels. Every reduction runs in a fixed order so repeated runs
//! are bit-identical.

use crate::tensor::Float;

/// Dot product with eight fixed partial sums (vectorizes without relying on
/// reassociation).
#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Float>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * *xv;
    }
}

#[inline]
pub fn add_into<T: Float>(y: &mut [T], x: &[T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += *xv;
    }
}

/// `out[r×c] = a[r×k] · b[k×c]`
pub fn matmul<T: Float>(a: &[T], b: &[T], out: &mut [T], r: usize, k: usize, c: usize) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(orow, av, &b[p * c..(p + 1) * c]);
            }
        }
    }
}

/// `out[r×c] = a[r×k] · b[c×k]ᵀ`
pub fn matmul_bt<T: Float>(a: &[T], b: &[T], out: &mut [T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            out[i * c + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `acc[k×c] += a[r×k]ᵀ · g[r×c]`
pub fn acc_at_b<T: Float>(acc: &mut [T], a: &[T], g: &[T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(&mut acc[p * c..(p + 1) * c], av, grow);
            }
        }
    }
}

/// `acc[r×k] += g[r×c] · b[k×c]ᵀ`
pub fn acc_g_bt<T: Float>(acc: &mut [T], g: &[T], b: &[T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        let arow = &mut acc[i * k..(i + 1) * k];
        for (p, av) in arow.iter_mut().enumerate() {
            *av += dot(grow, &b[p * c..(p + 1) * c]);
        }
    }
}

/// `acc[r×k] += g[r×c] · b[c×k]`
pub fn acc_g_b<T: Float>(acc: &mut [T], g: &[T], b: &[T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        let arow = &mut acc[i * k..(i + 1) * k];
        for (j, &gv) in grow.iter().enumerate() {
            if gv != T::zero() {
                axpy(arow, gv, &b[j * k..(j + 1) * k]);
            }
        }
    }
}

/// `acc[c×k] += g[r×c]ᵀ · a[r×k]`
pub fn acc_gt_a<T: Float>(acc: &mut [T], g: &[T], a: &[T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        let arow = &a[i * k..(i + 1) * k];
        for (j, &gv) in grow.iter().enumerate() {
            if gv != T::zero() {
                axpy(&mut acc[j * k..(j + 1) * k], gv, arow);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
