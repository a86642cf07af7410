//! Mono sample buffers and WAV I/O.

use std::path::Path;

use rubato::{FftFixedIn, Resampler};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 48_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("samples"));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (sum / self.samples.len() as f64).sqrt()
    }

    /// Writes RIFF mono 32-bit float.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            writer.write_sample(s).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }

    /// Reads any PCM or float WAV; multichannel input is averaged to mono.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?,
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(wav_err)?
            }
        };
        let channels = spec.channels.max(1) as usize;
        let samples = if channels == 1 {
            interleaved
        } else {
            interleaved
                .chunks_exact(channels)
                .map(|frame| frame.iter().sum::<f32>() / channels as f32)
                .collect()
        };
        AudioClip::new(samples, spec.sample_rate)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    /// Band-limited conversion to `target_rate`. Output length is
    /// `round(len * target / source)`.
    pub fn resample(&self, target_rate: u32) -> Result<AudioClip> {
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        if target_rate == 0 {
            return Err(Error::invalid("target sample rate must be positive"));
        }
        let out_len = (self.samples.len() as f64 * target_rate as f64 / self.sample_rate as f64)
            .round() as usize;
        let chunk = 1024;
        let mut resampler =
            FftFixedIn::<f32>::new(self.sample_rate as usize, target_rate as usize, chunk, 2, 1)
                .map_err(|e| Error::Resample(e.to_string()))?;
        let delay = resampler.output_delay();
        let mut out: Vec<f32> = Vec::with_capacity(out_len + delay + chunk);
        let mut pos = 0;
        while pos + resampler.input_frames_next() <= self.samples.len() {
            let n = resampler.input_frames_next();
            let block = resampler
                .process(&[&self.samples[pos..pos + n]], None)
                .map_err(|e| Error::Resample(e.to_string()))?;
            out.extend_from_slice(&block[0]);
            pos += n;
        }
        let rest = &self.samples[pos..];
        let block = resampler
            .process_partial(Some(&[rest]), None)
            .map_err(|e| Error::Resample(e.to_string()))?;
        out.extend_from_slice(&block[0]);
        while out.len() < out_len + delay {
            let block = resampler
                .process_partial::<&[f32]>(None, None)
                .map_err(|e| Error::Resample(e.to_string()))?;
            out.extend_from_slice(&block[0]);
        }
        let samples = out[delay..delay + out_len].to_vec();
        AudioClip::new(samples, target_rate)
    }
}
