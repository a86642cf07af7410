//! Log-power mel spectra of short windows, and per-bin min-max normalization.

use std::path::Path;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_MELS: usize = 128;
pub const WINDOW_SAMPLES: usize = 720;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub window_samples: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: N_MELS,
            window_samples: WINDOW_SAMPLES,
            fft_size: 1024,
            sample_rate: crate::audio::SAMPLE_RATE,
            f_min: 0.0,
            f_max: 24_000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.window_samples == 0 {
            return Err(Error::invalid("n_mels and window_samples must be positive"));
        }
        if self.fft_size < self.window_samples {
            return Err(Error::invalid(format!(
                "fft_size {} is shorter than the window ({})",
                self.fft_size, self.window_samples
            )));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return Err(Error::invalid("need 0 <= f_min < f_max"));
        }
        if self.f_max > self.sample_rate as f64 / 2.0 {
            return Err(Error::invalid(format!(
                "f_max {} exceeds Nyquist for {} Hz",
                self.f_max, self.sample_rate
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::invalid("log_floor must be positive"));
        }
        Ok(())
    }

    /// Filter center frequencies (Hz): interior points of `n_mels + 2`
    /// mel-uniform edges.
    pub fn center_frequencies(&self) -> Vec<f64> {
        self.edges()[1..=self.n_mels].to_vec()
    }

    fn edges(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.f_min), hz_to_mel(self.f_max));
        let n = self.n_mels + 1;
        (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect()
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Sparse triangular filterbank over the `fft_size / 2 + 1` power bins.
#[derive(Debug, Clone)]
pub struct Filterbank {
    /// Per filter: first bin and weights for consecutive bins.
    rows: Vec<(usize, Vec<f64>)>,
    n_bins: usize,
}

impl Filterbank {
    /// Unit-peak triangles sampled at bin centers. A filter narrower than the
    /// bin spacing catches no bin center; it then reads the single bin
    /// nearest its center, so every row stays non-empty.
    pub fn new(config: &MelConfig) -> Self {
        let n_bins = config.fft_size / 2 + 1;
        let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
        let edges = config.edges();
        let rows = (0..config.n_mels)
            .map(|k| {
                let (lo, c, hi) = (edges[k], edges[k + 1], edges[k + 2]);
                let first = (lo / bin_hz).floor() as usize;
                let last = ((hi / bin_hz).ceil() as usize).min(n_bins - 1);
                let mut start = None;
                let mut w = Vec::new();
                for j in first..=last {
                    let f = j as f64 * bin_hz;
                    let v = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    if v > 0.0 {
                        start.get_or_insert(j);
                        w.push(v);
                    }
                }
                match start {
                    Some(s) => (s, w),
                    None => (((c / bin_hz).round() as usize).min(n_bins - 1), vec![1.0]),
                }
            })
            .collect();
        Filterbank { rows, n_bins }
    }

    pub fn n_filters(&self) -> usize {
        self.rows.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Dense row `k` over all bins.
    pub fn row(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_bins];
        let (s, w) = &self.rows[k];
        out[*s..*s + w.len()].copy_from_slice(w);
        out
    }

    /// Whether filter `k` fell back to its nearest bin.
    pub fn is_fallback(&self, k: usize, config: &MelConfig) -> bool {
        let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
        let edges = config.edges();
        let (lo, hi) = (edges[k], edges[k + 2]);
        let j = (lo / bin_hz).floor() as usize + 1;
        !((j as f64 * bin_hz) < hi)
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for ((s, w), o) in self.rows.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*s..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Reusable extractor: holds the FFT plan, window and filterbank.
#[derive(Clone)]
pub struct MelExtractor {
    config: MelConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: Filterbank,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("config", &self.config).finish()
    }
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.window_samples;
        // Periodic Hann.
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        let filterbank = Filterbank::new(&config);
        Ok(MelExtractor {
            config,
            window,
            fft,
            filterbank,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &Filterbank {
        &self.filterbank
    }

    /// Mel filterbank energies before the log.
    pub fn mel_power(&self, window: &[f32]) -> Result<Vec<f64>> {
        if window.len() != self.config.window_samples {
            return Err(Error::ShapeMismatch {
                op: "mel_spectrum",
                left: vec![window.len()],
                right: vec![self.config.window_samples],
            });
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.config.fft_size];
        for ((b, &x), w) in buf.iter_mut().zip(window).zip(&self.window) {
            b.re = x as f64 * w;
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.filterbank.n_bins].iter().map(|c| c.norm_sqr()).collect();
        let mut out = vec![0.0; self.config.n_mels];
        self.filterbank.apply(&power, &mut out);
        Ok(out)
    }

    /// `log10(max(power, floor))` per mel bin.
    pub fn log_mel(&self, window: &[f32]) -> Result<Vec<f64>> {
        let floor = self.config.log_floor;
        Ok(self.mel_power(window)?.into_iter().map(|p| p.max(floor).log10()).collect())
    }

    /// Log-mel of consecutive non-overlapping windows; the remainder is dropped.
    pub fn frames(&self, samples: &[f32]) -> Vec<Vec<f64>> {
        samples
            .chunks_exact(self.config.window_samples)
            .map(|w| self.log_mel(w).expect("chunk has window length"))
            .collect()
    }
}

/// One-shot convenience; build a [`MelExtractor`] for repeated use.
pub fn mel_spectrum(window: &[f32], config: &MelConfig) -> Result<Vec<f64>> {
    MelExtractor::new(config.clone())?.log_mel(window)
}

/// Per-bin min-max statistics fit on training frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a, I>(frames: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut it = frames.into_iter();
        let first = it.next().ok_or_else(|| Error::invalid("normalizer needs at least one frame"))?;
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for f in it {
            if f.len() != min.len() {
                return Err(Error::ShapeMismatch {
                    op: "fit_normalizer",
                    left: vec![f.len()],
                    right: vec![min.len()],
                });
            }
            for ((lo, hi), &v) in min.iter_mut().zip(max.iter_mut()).zip(f) {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
        Ok(Normalizer { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Maps into [0,1], clipping values outside the fitted range. A bin with
    /// `max == min` maps to 0.5.
    pub fn apply(&self, frame: &[f64]) -> Vec<f64> {
        frame
            .iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                if hi > lo {
                    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.5
                }
            })
            .collect()
    }

    pub fn denormalize(&self, frame: &[f64]) -> Vec<f64> {
        frame
            .iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&u, (&lo, &hi))| lo + u * (hi - lo))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let n: Normalizer = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        if n.min.len() != n.max.len() {
            return Err(Error::format(path, "min/max length mismatch"));
        }
        Ok(n)
    }
}
