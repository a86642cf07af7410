use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::params::PARAM_RANGES;

/// Liljencrants-Fant flow-derivative pulse with pitch-synchronous parameter
/// updates and tenseness-scaled aspiration noise.
#[derive(Debug, Clone)]
pub struct Glottis {
    sample_period: f64,
    frequency: f64,
    tenseness: f64,
    target_frequency: f64,
    target_tenseness: f64,
    /// Seconds into the current glottal period.
    time_in_period: f64,
    period: f64,
    shape: LfShape,
    voice_gain: f64,
    noise_gain: f64,
    rng: ChaCha8Rng,
    aspiration: Biquad,
}

#[derive(Debug, Clone, Copy)]
struct LfShape {
    alpha: f64,
    e0: f64,
    epsilon: f64,
    shift: f64,
    delta: f64,
    te: f64,
    omega: f64,
}

impl LfShape {
    fn new(tenseness: f64) -> Self {
        let rd = (3.0 * (1.0 - tenseness)).clamp(0.5, 2.7);
        let ra = -0.01 + 0.048 * rd;
        let rk = 0.224 + 0.118 * rd;
        let rg = (rk / 4.0) * (0.5 + 1.2 * rk) / (0.11 * rd - ra * (0.5 + 1.2 * rk));

        let ta = ra;
        let tp = 1.0 / (2.0 * rg);
        let te = tp + tp * rk;

        let epsilon = 1.0 / ta;
        let shift = (-epsilon * (1.0 - te)).exp();
        let delta = 1.0 - shift;

        let rhs_integral = ((1.0 / epsilon) * (shift - 1.0) + (1.0 - te) * shift) / delta;
        let lower_integral = -(te - tp) / 2.0 + rhs_integral;
        let upper_integral = -lower_integral;

        let omega = PI / tp;
        let s = (omega * te).sin();
        // Area balance: the open-phase integral cancels the return phase.
        let y = -PI * s * upper_integral / (tp * 2.0);
        let alpha = y.ln() / (tp / 2.0 - te);
        let e0 = -1.0 / (s * (alpha * te).exp());
        LfShape {
            alpha,
            e0,
            epsilon,
            shift,
            delta,
            te,
            omega,
        }
    }

    /// Flow derivative at normalized time `t` in `[0, 1)`. Reaches -1 at `te`.
    fn eval(&self, t: f64) -> f64 {
        if t > self.te {
            (-(-self.epsilon * (t - self.te)).exp() + self.shift) / self.delta
        } else {
            self.e0 * (self.alpha * t).exp() * (self.omega * t).sin()
        }
    }
}

/// RBJ constant-peak bandpass.
#[derive(Debug, Clone)]
struct Biquad {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Biquad {
    fn bandpass(center: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * center / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn voice_gain(tenseness: f64) -> f64 {
    // Voicing never fully vanishes so every frame keeps a measurable pitch.
    0.3 + 0.7 * tenseness.powf(0.25)
}

fn noise_gain(tenseness: f64) -> f64 {
    (1.0 - tenseness.sqrt()) * 0.6
}

impl Glottis {
    pub fn new(sample_rate: f64, frequency: f64, tenseness: f64, seed: u64) -> Self {
        Glottis {
            sample_period: 1.0 / sample_rate,
            frequency,
            tenseness,
            target_frequency: frequency,
            target_tenseness: tenseness,
            time_in_period: 0.0,
            period: 1.0 / frequency,
            shape: LfShape::new(tenseness),
            voice_gain: voice_gain(tenseness),
            noise_gain: noise_gain(tenseness),
            rng: ChaCha8Rng::seed_from_u64(seed),
            aspiration: Biquad::bandpass(500.0, 0.5, sample_rate),
        }
    }

    /// New targets take effect at the next period boundary.
    pub fn set_targets(&mut self, frequency: f64, tenseness: f64) {
        self.target_frequency = frequency;
        self.target_tenseness = tenseness;
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }

    /// Phase within the current period, radians.
    pub fn phase(&self) -> f64 {
        2.0 * PI * self.time_in_period / self.period
    }

    fn start_period(&mut self) {
        self.frequency = self.target_frequency;
        self.tenseness = self.target_tenseness;
        self.period = 1.0 / self.frequency;
        self.shape = LfShape::new(self.tenseness);
        self.voice_gain = voice_gain(self.tenseness);
        self.noise_gain = noise_gain(self.tenseness);
    }

    pub fn next_sample(&mut self) -> f64 {
        let t = self.time_in_period / self.period;
        let voiced = self.shape.eval(t);

        // Aspiration is louder in the open phase, as in real breathy voice.
        let open = (2.0 * PI * t).sin().max(0.0);
        let modulator = self.tenseness * (0.1 + 0.2 * open) + (1.0 - self.tenseness) * 0.3;
        let white: f64 = self.rng.random_range(-1.0..1.0);
        let noise = self.aspiration.process(white) * modulator * self.noise_gain;

        self.time_in_period += self.sample_period;
        if self.time_in_period >= self.period {
            self.time_in_period -= self.period;
            self.start_period();
            // A period shorter than one sample cannot occur in range, but keep the
            // phase bounded if targets jump.
            self.time_in_period %= self.period;
        }
        voiced * self.voice_gain + noise
    }
}

/// Renders the bare glottal excitation at 48 kHz.
pub fn glottal_source(
    frequency: f64,
    tenseness: f64,
    n_samples: usize,
    rng_seed: u64,
) -> Result<AudioClip> {
    let (fmin, fmax) = PARAM_RANGES[0];
    if !(frequency > 0.0) {
        return Err(Error::invalid(format!(
            "glottal frequency must be positive, got {frequency}"
        )));
    }
    if !(fmin..=fmax).contains(&frequency) {
        return Err(Error::ParamOutOfRange {
            name: "frequency",
            value: frequency,
            min: fmin,
            max: fmax,
        });
    }
    if !(0.0..=1.0).contains(&tenseness) {
        return Err(Error::ParamOutOfRange {
            name: "tenseness",
            value: tenseness,
            min: 0.0,
            max: 1.0,
        });
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be positive"));
    }
    let sr = crate::audio::SAMPLE_RATE;
    let mut glottis = Glottis::new(sr as f64, frequency, tenseness, rng_seed);
    let samples = (0..n_samples)
        .map(|_| glottis.next_sample().clamp(-1.0, 1.0) as f32)
        .collect();
    AudioClip::new(samples, sr)
}
