//! Signal measurements used to check rendered audio: pitch and resonance peaks.
//!
//! These work on raw sample buffers and share no code with the synthesizer.

use rustfft::{num_complex::Complex, FftPlanner};

/// Autocorrelation pitch estimate in Hz, searching 60..500 Hz.
///
/// Picks the shortest lag whose normalized autocorrelation is within 15% of
/// the global maximum (avoids locking onto sub-harmonics), refined by a
/// parabolic fit.
pub fn estimate_f0(samples: &[f32], sample_rate: f64) -> f64 {
    let x: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    let min_lag = (sample_rate / 500.0).floor() as usize;
    let max_lag = ((sample_rate / 60.0).ceil() as usize).min(x.len() / 2);
    let n = x.len() - max_lag;
    let energy = |off: usize| x[off..off + n].iter().map(|v| v * v).sum::<f64>();
    let e0 = energy(0);
    let mut r = vec![0.0; max_lag + 2];
    for (lag, slot) in r.iter_mut().enumerate().take(max_lag + 1).skip(min_lag.saturating_sub(1)) {
        let dot: f64 = x[..n].iter().zip(&x[lag..lag + n]).map(|(a, b)| a * b).sum();
        let denom = (e0 * energy(lag)).sqrt();
        *slot = if denom > 0.0 { dot / denom } else { 0.0 };
    }
    let global = (min_lag..=max_lag).map(|l| r[l]).fold(f64::MIN, f64::max);
    let mut best = min_lag;
    for lag in min_lag..=max_lag {
        let is_peak = r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1];
        if is_peak && r[lag] >= 0.85 * global {
            best = lag;
            break;
        }
    }
    let (a, b, c) = (r[best - 1], r[best], r[best + 1]);
    let denom = a - 2.0 * b + c;
    let offset = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    sample_rate / (best as f64 + offset)
}

/// Magnitude (dB) of each harmonic `k * f0` below `max_freq`, read off a
/// Hann-windowed FFT of the whole buffer.
pub fn harmonic_envelope(samples: &[f32], sample_rate: f64, f0: f64, max_freq: f64) -> Vec<(f64, f64)> {
    let n = samples.len().next_power_of_two();
    let len = samples.len();
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|i| {
            if i < len {
                let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos();
                Complex::new(samples[i] as f64 * w, 0.0)
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let bin_hz = sample_rate / n as f64;
    let mut out = Vec::new();
    let mut k = 1;
    while k as f64 * f0 < max_freq {
        let center = k as f64 * f0 / bin_hz;
        let half = (0.25 * f0 / bin_hz).max(1.0);
        let lo = (center - half).floor().max(0.0) as usize;
        let hi = ((center + half).ceil() as usize).min(n / 2);
        let peak = buf[lo..=hi].iter().map(|c| c.norm()).fold(0.0, f64::max);
        out.push((k as f64 * f0, 20.0 * (peak + 1e-20).log10()));
        k += 1;
    }
    out
}

/// Resonance peak frequencies below `max_freq`: local maxima of the
/// 3-point smoothed harmonic envelope.
pub fn resonance_peaks(samples: &[f32], sample_rate: f64, f0: f64, max_freq: f64) -> Vec<f64> {
    let env = harmonic_envelope(samples, sample_rate, f0, max_freq);
    if env.len() < 3 {
        return Vec::new();
    }
    let smooth: Vec<f64> = (0..env.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(env.len() - 1);
            env[lo..=hi].iter().map(|p| p.1).sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    (1..smooth.len() - 1)
        .filter(|&i| smooth[i] > smooth[i - 1] && smooth[i] >= smooth[i + 1])
        .map(|i| env[i].0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pulse_train(f0: f64, sr: f64, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let ph = (t * f0).fract();
                (if ph < 0.1 { 1.0 - ph * 10.0 } else { 0.0 }) as f32
            })
            .collect()
    }

    #[test]
    fn pitch_of_pulse_trains() {
        for &f in &[85.0, 140.0, 233.0, 390.0] {
            let x = pulse_train(f, 48_000.0, 24_000);
            let est = estimate_f0(&x, 48_000.0);
            assert!((est - f).abs() / f < 0.005, "{f} -> {est}");
        }
    }

    #[test]
    fn finds_resonance_of_two_pole_filter() {
        // Pulse train through a single resonator at 700 Hz.
        let sr = 48_000.0;
        let x: Vec<f32> = (0..48_000).map(|i| if i % 480 == 0 { 1.0 } else { 0.0 }).collect();
        let r: f64 = 0.99;
        let w = 2.0 * std::f64::consts::PI * 700.0 / sr;
        let (a1, a2) = (2.0 * r * w.cos(), -r * r);
        let mut y = vec![0.0f32; x.len()];
        let (mut y1, mut y2) = (0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let out = v as f64 + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = out;
            y[i] = (out * 0.01) as f32;
        }
        let peaks = resonance_peaks(&y, sr, 100.0, 3500.0);
        assert_eq!(peaks.first().copied(), Some(700.0));
    }
}
