//! Articulatory vowel synthesizer: glottal source driving a 44-section
//! reflection-line vocal tract.

mod glottis;
mod tract;

pub use glottis::{glottal_source, Glottis};
pub use tract::{
    reflection_coefficients, shape_tract, tract_shape, Articulation, TractGeometry, TractState,
    DAMPING, GLOTTAL_REFLECTION, LIP_REFLECTION, N_SECTIONS,
};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::params::ParamTrack;

/// Samples between tract shape updates.
pub const CONTROL_BLOCK: usize = 128;

/// Lip output is summed over two half-sample tract steps, then scaled.
const OUTPUT_GAIN: f64 = 0.2;

/// Stateful renderer. One instance per thread; instances share nothing.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    sample_rate: f64,
    tract: TractState,
    glottis: Glottis,
}

impl Synthesizer {
    pub fn new(sample_rate: u32, track: &ParamTrack, seed: u64) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        let p0 = track.at(0.0);
        let mut tract = TractState::new(N_SECTIONS)?;
        let shape = tract_shape(&p0, &tract.rest_diameters);
        tract.set_diameters(&shape);
        Ok(Synthesizer {
            sample_rate: sample_rate as f64,
            tract,
            glottis: Glottis::new(sample_rate as f64, p0.frequency, p0.tenseness, seed),
        })
    }

    pub fn state(&self) -> &TractState {
        &self.tract
    }

    /// Renders `n_samples`, following `track` from t = 0.
    pub fn render(&mut self, track: &ParamTrack, n_samples: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(n_samples);
        let n = self.tract.n_sections;
        let mut start = self.tract.current_diameters.clone();
        let mut diam = vec![0.0; n];
        let mut block_start = 0;
        while block_start < n_samples {
            let len = CONTROL_BLOCK.min(n_samples - block_start);
            let p_now = track.at(block_start as f64 / self.sample_rate);
            let p_end = track.at((block_start + CONTROL_BLOCK) as f64 / self.sample_rate);
            self.glottis.set_targets(p_now.frequency, p_now.tenseness);
            let target = tract_shape(&p_end, &self.tract.rest_diameters);
            for s in 0..len {
                let frac = (s + 1) as f64 / CONTROL_BLOCK as f64;
                for ((d, a), b) in diam.iter_mut().zip(&start).zip(&target) {
                    *d = a + (b - a) * frac;
                }
                self.tract.set_diameters(&diam);
                let excitation = self.glottis.next_sample();
                let lip = self.tract.step(excitation) + self.tract.step(excitation);
                out.push((lip * OUTPUT_GAIN).clamp(-1.0, 1.0) as f32);
            }
            start.copy_from_slice(&self.tract.current_diameters);
            block_start += len;
        }
        self.tract.glottal_phase = self.glottis.phase();
        out
    }
}

/// Renders `duration` seconds of `track`. Output length is
/// `round(duration * sample_rate)`; identical inputs give identical samples.
pub fn synthesize(
    track: &ParamTrack,
    duration: f64,
    sample_rate: u32,
    rng_seed: u64,
) -> Result<AudioClip> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::invalid(format!("duration must be positive, got {duration}")));
    }
    let n_samples = (duration * sample_rate as f64).round() as usize;
    let mut synth = Synthesizer::new(sample_rate, track, rng_seed)?;
    let samples = synth.render(track, n_samples);
    AudioClip::new(samples, sample_rate)
}
