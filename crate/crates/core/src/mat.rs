//! Raw row-major f64 matrix kernels used by the graph forward and backward
//! passes. All kernels accumulate into `out` so backward passes can reuse
//! them for gradient accumulation; forward passes hand in zeroed buffers.
//!
//! Loop shapes are chosen so the inner loop is either a contiguous AXPY or a
//! four-accumulator dot product, both of which the compiler vectorizes while
//! keeping summation order fixed (bit-reproducible across runs).

/// out (m×n) += a (m×k) · b (k×n)
pub fn nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            axpy(av, &b[kk * n..(kk + 1) * n], out_row);
        }
    }
}

/// out (m×r) += a (m×c) · b (r×c)ᵀ
pub fn nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, c: usize, r: usize) {
    debug_assert_eq!(a.len(), m * c);
    debug_assert_eq!(b.len(), r * c);
    debug_assert_eq!(out.len(), m * r);
    for i in 0..m {
        let a_row = &a[i * c..(i + 1) * c];
        let out_row = &mut out[i * r..(i + 1) * r];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[j * c..(j + 1) * c]);
        }
    }
}

/// out (p×q) += a (m×p)ᵀ · b (m×q)
pub fn tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), m * q);
    debug_assert_eq!(out.len(), p * q);
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        let b_row = &b[i * q..(i + 1) * q];
        for (jp, &av) in a_row.iter().enumerate() {
            axpy(av, b_row, &mut out[jp * q..(jp + 1) * q]);
        }
    }
}

#[inline]
fn axpy(scale: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += scale * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s2) + (s1 + s3);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}
