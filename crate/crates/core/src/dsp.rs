//! FFT plumbing shared by the extractors.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place forward FFT (unnormalized).
pub(crate) fn fft(buf: &mut [Complex64]) {
    plan(buf.len(), false).process(buf);
}

/// In-place inverse FFT (unnormalized).
pub(crate) fn ifft(buf: &mut [Complex64]) {
    plan(buf.len(), true).process(buf);
}

pub(crate) fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft(&mut buf);
    buf
}

/// Signed frequency index of FFT bin `j` in a length-`n` transform.
pub(crate) fn signed_bin(j: usize, n: usize) -> isize {
    if j < n.div_ceil(2) {
        j as isize
    } else {
        j as isize - n as isize
    }
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Half-sample symmetric extension: index `i` of the infinitely mirrored signal.
pub(crate) fn mirror_index(i: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let r = i.rem_euclid(period) as usize;
    if r < len {
        r
    } else {
        2 * len - 1 - r
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_extension() {
        let idx: Vec<usize> = (-4..8).map(|i| mirror_index(i, 3)).collect();
        assert_eq!(idx, vec![2, 2, 1, 0, 0, 1, 2, 2, 1, 0, 0, 1]);
    }

    #[test]
    fn fft_roundtrip() {
        let x = [1.0, -2.0, 3.5, 0.25, 0.0];
        let mut spec = fft_real(&x);
        ifft(&mut spec);
        for (a, b) in spec.iter().zip(x) {
            assert!((a.re / 5.0 - b).abs() < 1e-12 && (a.im / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [9.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0]), 2.5);
    }
}
