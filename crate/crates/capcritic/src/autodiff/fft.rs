//! Radix-2 FFT and circular convolution on f64 slices.
//!
//! The transform is the iterative Cooley-Tukey form and only accepts
//! power-of-two lengths. [`circular_convolve_raw`] routes through the FFT
//! when the length allows it and otherwise falls back to the quadratic
//! definition, which [`circular_convolve_direct`] also exposes as an
//! independent reference for tests.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// In-place FFT (or inverse FFT) of a power-of-two-length buffer.
pub fn fft(buf: &mut [Complex64], inverse: bool) -> Result<()> {
    let n = buf.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::shape(
            "fft",
            format!("length {n} is not a positive power of two"),
        ));
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[start + k];
                let v = buf[start + k + len / 2] * w;
                buf[start + k] = u + v;
                buf[start + k + len / 2] = u - v;
                w *= wlen;
            }
            start += len;
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
    Ok(())
}

/// Circular convolution `out[k] = sum_j a[j] * b[(k - j) mod n]`, computed
/// by the quadratic definition. Kept separate from the FFT path so the two
/// can check each other.
pub fn circular_convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let mut out = vec![0.0; n];
    for k in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += a[j] * b[(n + k - j) % n];
        }
        out[k] = acc;
    }
    out
}

/// Circular convolution; FFT-backed for power-of-two lengths, direct
/// otherwise.
pub fn circular_convolve_raw(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::shape(
            "circular_convolve",
            format!("length mismatch: {} vs {}", n, b.len()),
        ));
    }
    if n == 0 {
        return Err(Error::shape("circular_convolve", "empty input"));
    }
    if !n.is_power_of_two() {
        return Ok(circular_convolve_direct(a, b));
    }
    let mut fa: Vec<Complex64> = a.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut fb: Vec<Complex64> = b.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft(&mut fa, false)?;
    fft(&mut fb, false)?;
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= *y;
    }
    fft(&mut fa, true)?;
    Ok(fa.into_iter().map(|c| c.re).collect())
}

/// Index reversal `out[m] = x[(n - m) mod n]`; convolving with the reversed
/// partner is circular correlation, which is what the convolution backward
/// pass needs.
pub fn reverse_circular(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|m| x[(n - m) % n]).collect()
}
