//! Dominant frequency of a uniformly sampled signal.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Frequency of the strongest spectral peak (excluding the mean), refined by
/// parabolic interpolation of the log-magnitude around the peak bin. The
/// signal is de-meaned, Hann-windowed and zero-padded to at least 16x its
/// length.
pub fn dominant_frequency(signal: &[f64], dt: f64) -> Option<f64> {
    let n = signal.len();
    if n < 8 || !(dt > 0.0) {
        return None;
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let len = (16 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); len];
    for (k, &x) in signal.iter().enumerate() {
        let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos();
        buf[k] = Complex::new((x - mean) * w, 0.0);
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let mag: Vec<f64> = buf[..len / 2].iter().map(|c| c.norm()).collect();
    let (peak, &pmax) = mag.iter().enumerate().skip(1).max_by(|a, b| a.1.total_cmp(b.1))?;
    if pmax == 0.0 || peak + 1 >= mag.len() {
        return None;
    }
    let (a, b, c) = (mag[peak - 1].max(1e-300).ln(), pmax.ln(), mag[peak + 1].max(1e-300).ln());
    let denom = a - 2.0 * b + c;
    let shift = if denom != 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    Some((peak as f64 + shift) / (len as f64 * dt))
}
