//! Hot numeric kernels behind the graph ops. `f64` gets a runtime-dispatched
//! FMA path; every other scalar falls back to the portable 4-lane version.
//! Dispatch is per-machine and fixed for the process lifetime, so results
//! stay bitwise reproducible across runs on the same host.

use crate::scalar::Scalar;

/// Portable 4-accumulator dot product.
pub fn dot_generic<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] = acc[0] + a[j] * b[j];
        acc[1] = acc[1] + a[j + 1] * b[j + 1];
        acc[2] = acc[2] + a[j + 2] * b[j + 2];
        acc[3] = acc[3] + a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// Portable `out[i] += s * x[i]`.
pub fn axpy_generic<T: Scalar>(out: &mut [T], s: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot_f64_fma(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let mut acc0 = _mm256_setzero_pd();
        let mut acc1 = _mm256_setzero_pd();
        let mut acc2 = _mm256_setzero_pd();
        let mut acc3 = _mm256_setzero_pd();
        let mut i = 0;
        while i + 16 <= n {
            let pa = a.as_ptr().add(i);
            let pb = b.as_ptr().add(i);
            acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(pa), _mm256_loadu_pd(pb), acc0);
            acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(pa.add(4)), _mm256_loadu_pd(pb.add(4)), acc1);
            acc2 = _mm256_fmadd_pd(_mm256_loadu_pd(pa.add(8)), _mm256_loadu_pd(pb.add(8)), acc2);
            acc3 = _mm256_fmadd_pd(_mm256_loadu_pd(pa.add(12)), _mm256_loadu_pd(pb.add(12)), acc3);
            i += 16;
        }
        while i + 4 <= n {
            acc0 = _mm256_fmadd_pd(
                _mm256_loadu_pd(a.as_ptr().add(i)),
                _mm256_loadu_pd(b.as_ptr().add(i)),
                acc0,
            );
            i += 4;
        }
        let acc = _mm256_add_pd(_mm256_add_pd(acc0, acc1), _mm256_add_pd(acc2, acc3));
        let mut lanes = [0.0f64; 4];
        _mm256_storeu_pd(lanes.as_mut_ptr(), acc);
        let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
        while i < n {
            s += a[i] * b[i];
            i += 1;
        }
        s
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn axpy_f64_fma(out: &mut [f64], s: f64, x: &[f64]) {
        let n = out.len();
        let sv = _mm256_set1_pd(s);
        let mut i = 0;
        while i + 8 <= n {
            let po = out.as_mut_ptr().add(i);
            let px = x.as_ptr().add(i);
            let r0 = _mm256_fmadd_pd(sv, _mm256_loadu_pd(px), _mm256_loadu_pd(po));
            let r1 = _mm256_fmadd_pd(sv, _mm256_loadu_pd(px.add(4)), _mm256_loadu_pd(po.add(4)));
            _mm256_storeu_pd(po, r0);
            _mm256_storeu_pd(po.add(4), r1);
            i += 8;
        }
        while i < n {
            out[i] += s * x[i];
            i += 1;
        }
    }

    pub fn have_fma() -> bool {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }
}

#[cfg(target_arch = "x86_64")]
fn use_fma() -> bool {
    use std::sync::atomic::{AtomicU8, Ordering};
    static STATE: AtomicU8 = AtomicU8::new(0); // 0 unknown, 1 yes, 2 no
    match STATE.load(Ordering::Relaxed) {
        1 => true,
        2 => false,
        _ => {
            let yes = x86::have_fma();
            STATE.store(if yes { 1 } else { 2 }, Ordering::Relaxed);
            yes
        }
    }
}

pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if use_fma() {
            // Safety: feature presence checked at runtime.
            return unsafe { x86::dot_f64_fma(a, b) };
        }
    }
    dot_generic(a, b)
}

pub fn axpy_f64(out: &mut [f64], s: f64, x: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if use_fma() {
            unsafe { x86::axpy_f64_fma(out, s, x) };
            return;
        }
    }
    axpy_generic(out, s, x)
}
