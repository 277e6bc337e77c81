//! FFT-based augmentations: Hilbert frequency shift and phase surrogates.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::AugmentError;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// Analytic signal `x + i·H[x]` of a real sequence.
pub fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let (fwd, inv) = plans(n);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    // One-sided spectrum: keep DC (and Nyquist), double positive bins, zero negatives.
    for (k, v) in buf.iter_mut().enumerate() {
        let weight = if k == 0 || (n % 2 == 0 && k == n / 2) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *v *= weight / n as f64;
    }
    inv.process(&mut buf);
    buf
}

/// Shifts every channel's spectrum by `delta_hz` via the analytic signal.
pub fn freq_shift(
    trial: ArrayView2<'_, f64>,
    delta_hz: f64,
    fs_hz: f64,
) -> Result<Array2<f64>, AugmentError> {
    if !(delta_hz.is_finite() && delta_hz.abs() < fs_hz / 4.0) {
        return Err(AugmentError::Usage(format!(
            "frequency shift {delta_hz} Hz must satisfy |shift| < fs/4 = {} Hz",
            fs_hz / 4.0
        )));
    }
    let (c, t) = trial.dim();
    let mut out = Array2::zeros((c, t));
    let omega = 2.0 * PI * delta_hz / fs_hz;
    for (ch, mut row_out) in trial.outer_iter().zip(out.outer_iter_mut()) {
        let samples: Vec<f64> = ch.to_vec();
        let analytic = analytic_signal(&samples);
        for (k, (z, o)) in analytic.iter().zip(row_out.iter_mut()).enumerate() {
            let phase = omega * k as f64;
            *o = (z * Complex64::new(phase.cos(), phase.sin())).re;
        }
    }
    Ok(out)
}

/// Replaces Fourier phases with uniform draws on `[0, 2π)`, per channel.
///
/// Magnitudes are kept, the DC and Nyquist bins are untouched, and the
/// spectrum stays Hermitian so the output is real.
pub fn surrogate<R: Rng + ?Sized>(trial: ArrayView2<'_, f64>, rng: &mut R) -> Array2<f64> {
    let (c, t) = trial.dim();
    let mut out = Array2::zeros((c, t));
    if t == 0 {
        return out;
    }
    let (fwd, inv) = plans(t);
    for (ch, mut row_out) in trial.outer_iter().zip(out.outer_iter_mut()) {
        let mut buf: Vec<Complex64> = ch.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fwd.process(&mut buf);
        for k in 1..t.div_ceil(2) {
            let phase = rng.random::<f64>() * 2.0 * PI;
            let z = Complex64::from_polar(buf[k].norm(), phase);
            buf[k] = z;
            buf[t - k] = z.conj();
        }
        inv.process(&mut buf);
        for (o, z) in row_out.iter_mut().zip(&buf) {
            *o = z.re / t as f64;
        }
    }
    out
}

/// Magnitudes of the DFT of `x`.
pub fn amplitude_spectrum(x: &[f64]) -> Vec<f64> {
    let (fwd, _) = plans(x.len());
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    buf.iter().map(|z| z.norm()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sinusoid(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| (2.0 * PI * freq * k as f64 / fs).sin())
            .collect()
    }

    #[test]
    fn analytic_signal_real_part_is_input() {
        let x: Vec<f64> = (0..37).map(|k| ((k * 7919) % 13) as f64 - 6.0).collect();
        let z = analytic_signal(&x);
        for (a, b) in x.iter().zip(&z) {
            assert!((a - b.re).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_signal_of_cosine_is_complex_exponential() {
        let n = 200;
        let x: Vec<f64> = (0..n)
            .map(|k| (2.0 * PI * 10.0 * k as f64 / 200.0).cos())
            .collect();
        let z = analytic_signal(&x);
        for (k, v) in z.iter().enumerate() {
            let expected = (2.0 * PI * 10.0 * k as f64 / 200.0).sin();
            assert!((v.im - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_range_shift_is_rejected() {
        let x = Array2::zeros((1, 16));
        assert!(freq_shift(x.view(), 70.0, 250.0).is_err());
        assert!(freq_shift(x.view(), -62.5, 250.0).is_err());
    }

    #[test]
    fn sinusoid_peak_moves() {
        let fs = 250.0;
        let x = Array2::from_shape_vec((1, 250), sinusoid(10.0, fs, 250)).unwrap();
        let y = freq_shift(x.view(), 2.0, fs).unwrap();
        let spec = amplitude_spectrum(y.row(0).as_slice().unwrap());
        let peak = (0..125)
            .max_by(|&a, &b| spec[a].total_cmp(&spec[b]))
            .unwrap();
        assert_eq!(peak, 12);
    }

    #[test]
    fn surrogate_of_constant_is_constant() {
        let x = Array2::from_elem((2, 17), 3.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = surrogate(x.view(), &mut rng);
        assert!(y.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }
}
