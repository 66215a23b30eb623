//! Dense matrix-multiply kernels.
//!
//! Three layouts cover forward and both backward products without
//! materialising transposes:
//!   nn: C += A(m,k) · B(k,n)
//!   nt: C += A(m,k) · B(n,k)ᵀ
//!   tn: C += A(k,m)ᵀ · B(k,n)
//!
//! Each output row is produced by exactly one thread with a fixed inner-loop
//! order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::Real;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn axpy(acc: &mut [Real], a: Real, row: &[Real]) {
    for (c, b) in acc.iter_mut().zip(row) {
        *c += a * *b;
    }
}

#[inline]
fn dot(a: &[Real], b: &[Real]) -> Real {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

/// C(m,n) += A(m,k) · B(k,n)
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [Real], i: usize| {
        for p in 0..k {
            axpy(ci, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// C(m,n) += A(m,k) · B(n,k)ᵀ
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [Real], i: usize| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, cj) in ci.iter_mut().enumerate() {
            *cj += dot(ai, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// C(m,n) += A(k,m)ᵀ · B(k,n)
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [Real], i: usize| {
        for p in 0..k {
            axpy(ci, a[p * m + i], &b[p * n..(p + 1) * n]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}
