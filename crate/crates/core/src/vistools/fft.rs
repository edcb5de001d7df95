//! Radix-2 2-D discrete Fourier transform over zero-padded fields.

use num_complex::Complex64;

use crate::imaging::{RealField, Result};

/// Row-major complex field with power-of-two sides.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<Complex64>,
}

pub fn next_pow2(n: u32) -> u32 {
    n.max(1).next_power_of_two()
}

/// Forward unnormalized DFT. The field is zero-padded on the right and
/// bottom to the next power of two per side.
pub fn fft2d(field: &RealField) -> ComplexField {
    let (w, h) = (field.width() as usize, field.height() as usize);
    let pw = next_pow2(field.width()) as usize;
    let ph = next_pow2(field.height()) as usize;
    let mut values = vec![Complex64::new(0.0, 0.0); pw * ph];
    for y in 0..h {
        for x in 0..w {
            values[y * pw + x] = Complex64::new(field.values()[y * w + x], 0.0);
        }
    }
    let mut out = ComplexField {
        width: pw,
        height: ph,
        values,
    };
    transform_2d(&mut out, false);
    out
}

/// Inverse DFT, normalized by `1/N` so that `ifft2d(fft2d(x))` reproduces
/// the padded input.
pub fn ifft2d(spectrum: &ComplexField) -> ComplexField {
    let mut out = spectrum.clone();
    transform_2d(&mut out, true);
    let n = (out.width * out.height) as f64;
    for v in &mut out.values {
        *v /= n;
    }
    out
}

/// `ln(1 + |F|)` with the zero frequency moved to the centre, at the padded size.
pub fn log_magnitude_spectrum(field: &RealField) -> Result<RealField> {
    let spec = fft2d(field);
    let (w, h) = (spec.width, spec.height);
    let mut shifted = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let m = spec.values[y * w + x].norm();
            shifted[((y + h / 2) % h) * w + (x + w / 2) % w] = m.ln_1p();
        }
    }
    RealField::new(w as u32, h as u32, shifted)
}

fn transform_2d(f: &mut ComplexField, inverse: bool) {
    let (w, h) = (f.width, f.height);
    for row in f.values.chunks_exact_mut(w) {
        fft_in_place(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for (y, c) in col.iter_mut().enumerate() {
            *c = f.values[y * w + x];
        }
        fft_in_place(&mut col, inverse);
        for (y, c) in col.iter().enumerate() {
            f.values[y * w + x] = *c;
        }
    }
}

/// Iterative Cooley-Tukey. `buf.len()` must be a power of two.
fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let angle = sign * 2.0 * std::f64::consts::PI / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let tw = Complex64::from_polar(1.0, angle * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + half] * tw;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(field: &RealField) -> Vec<Complex64> {
        let (w, h) = (field.width() as usize, field.height() as usize);
        let mut out = vec![Complex64::new(0.0, 0.0); w * h];
        for v in 0..h {
            for u in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -2.0
                            * std::f64::consts::PI
                            * ((u * x) as f64 / w as f64 + (v * y) as f64 / h as f64);
                        acc += Complex64::from_polar(field.values()[y * w + x], phase);
                    }
                }
                out[v * w + u] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft() {
        let vals: Vec<f64> = (0..32).map(|i| ((i * 7919) % 251) as f64).collect();
        let field = RealField::new(8, 4, vals).unwrap();
        let fast = fft2d(&field);
        let slow = naive_dft(&field);
        for (a, b) in fast.values.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn pads_to_power_of_two() {
        let field = RealField::new(5, 3, vec![1.0; 15]).unwrap();
        let spec = fft2d(&field);
        assert_eq!((spec.width, spec.height), (8, 4));
        assert!((spec.values[0].re - 15.0).abs() < 1e-12);
        assert_eq!(next_pow2(1), 1);
        assert_eq!(next_pow2(224), 256);
    }
}
