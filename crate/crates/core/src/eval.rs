//! Evaluation reports: parameter error distributions, round-trip spectral
//! distance, training-regime comparison and trajectory export.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::dataset::{sample_params, Manifest, SamplingConfig, WindowSample};
use crate::error::{Error, Result};
use crate::mel::{MelConfig, MelExtractor};
use crate::model::{Curves, InversionModel};
use crate::params::{param_index, ParamTrack, PtParams, N_PARAMS, PARAM_NAMES};
use crate::synth::synthesize;

/// Box-plot summary. Whiskers reach the most extreme points within
/// 1.5 IQR of the quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < s.len() {
        s[i] + (s[i + 1] - s[i]) * f
    } else {
        s[i]
    }
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("box statistics of an empty sample"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("error sample"));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&s, 0.25);
        let q3 = quantile_sorted(&s, 0.75);
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        Ok(BoxStats {
            median: quantile_sorted(&s, 0.5),
            q1,
            q3,
            whisker_lo: s.iter().copied().find(|&v| v >= lo).unwrap_or(q1),
            whisker_hi: s.iter().rev().copied().find(|&v| v <= hi).unwrap_or(q3),
        })
    }
}

/// Per-parameter box statistics of |p̂ − p| on normalized values.
pub fn normalized_error_stats(pred: &[[f64; N_PARAMS]], truth: &[[f64; N_PARAMS]]) -> Result<[BoxStats; N_PARAMS]> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predicted windows vs {} true windows",
            pred.len(),
            truth.len()
        )));
    }
    let mut out = Vec::with_capacity(N_PARAMS);
    for k in 0..N_PARAMS {
        let errs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p[k] - t[k]).abs()).collect();
        out.push(BoxStats::from_values(&errs)?);
    }
    Ok(out.try_into().expect("six parameters"))
}

/// Compares two tracks breakpoint by breakpoint.
pub fn param_error_stats(predictions: &ParamTrack, truth: &ParamTrack) -> Result<[BoxStats; N_PARAMS]> {
    if predictions.len() != truth.len() {
        return Err(Error::invalid(format!(
            "prediction has {} breakpoints, truth has {}",
            predictions.len(),
            truth.len()
        )));
    }
    let norm = |t: &ParamTrack| t.breakpoints().iter().map(|b| b.params.normalized()).collect::<Vec<_>>();
    normalized_error_stats(&norm(predictions), &norm(truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub model: String,
    pub kind: String,
    pub param: String,
    #[serde(flatten)]
    pub stats: BoxStats,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
}

impl ErrorReport {
    pub fn push(&mut self, model: &str, kind: &str, stats: &[BoxStats; N_PARAMS]) {
        for (name, s) in PARAM_NAMES.iter().zip(stats) {
            self.rows.push(ErrorRow {
                model: model.into(),
                kind: kind.into(),
                param: (*name).into(),
                stats: *s,
            });
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,kind,param,median,q1,q3,whisker_lo,whisker_hi\n");
        for r in &self.rows {
            let b = &r.stats;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.model, r.kind, r.param, b.median, b.q1, b.q3, b.whisker_lo, b.whisker_hi
            );
        }
        s
    }

    /// Writes `error_report.csv` and `error_report.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_pair(dir, "error_report", &self.to_csv(), self)
    }
}

fn write_pair<T: Serialize>(dir: &Path, stem: &str, csv: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(format!("{stem}.csv"));
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json(&p, e))?;
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

/// Mean over frames of the RMS difference, in dB, between two sets of
/// log10 mel power frames. Frames beyond the shorter input are ignored.
pub fn log_spectral_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let n = a.len().min(b.len());
    if n == 0 {
        return Err(Error::invalid("log-spectral distance needs at least one frame"));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b).take(n) {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::invalid(format!("mel frames of width {} and {}", x.len(), y.len())));
        }
        let ms: f64 = x.iter().zip(y).map(|(p, q)| (10.0 * (p - q)).powi(2)).sum::<f64>() / x.len() as f64;
        total += ms.sqrt();
    }
    Ok(total / n as f64)
}

/// Anything that maps audio to a parameter track.
pub trait Inverter {
    fn invert(&self, audio: &AudioClip) -> Result<ParamTrack>;
}

impl Inverter for InversionModel {
    fn invert(&self, audio: &AudioClip) -> Result<ParamTrack> {
        self.predict_params(audio)
    }
}

/// Returns a fixed track whatever the input.
pub struct FixedTrack(pub ParamTrack);

impl Inverter for FixedTrack {
    fn invert(&self, _audio: &AudioClip) -> Result<ParamTrack> {
        Ok(self.0.clone())
    }
}

fn resynthesis_distance(audio: &AudioClip, track: &ParamTrack, mel: &MelConfig, synth_seed: u64) -> Result<f64> {
    let audio = if audio.sample_rate != mel.sample_rate {
        audio.resample(mel.sample_rate)?
    } else {
        audio.clone()
    };
    if audio.len() < mel.window_samples {
        return Err(Error::invalid("audio is shorter than one window"));
    }
    let ex = MelExtractor::new(mel.clone())?;
    let resynth = synthesize(track, audio.duration(), mel.sample_rate, synth_seed)?;
    let log_frames = |s: &[f32]| -> Result<Vec<Vec<f64>>> {
        s.chunks_exact(mel.window_samples).map(|w| ex.log_mel(w)).collect()
    };
    log_spectral_distance(&log_frames(&audio.samples)?, &log_frames(&resynth.samples)?)
}

/// Predicts a track for `audio`, renders it and measures the spectral
/// distance to the input.
pub fn round_trip_distance(
    audio: &AudioClip,
    model: &dyn Inverter,
    mel: &MelConfig,
    synth_seed: u64,
) -> Result<f64> {
    let track = model.invert(audio).map_err(|e| e.context("inversion"))?;
    resynthesis_distance(audio, &track, mel, synth_seed).map_err(|e| e.context("re-synthesis"))
}

/// Same measurement with one random parameter set for the whole clip.
pub fn random_baseline_distance<R: Rng + ?Sized>(
    audio: &AudioClip,
    rng: &mut R,
    sampling: &SamplingConfig,
    mel: &MelConfig,
    synth_seed: u64,
) -> Result<f64> {
    let track = ParamTrack::constant(sample_params(rng, sampling));
    resynthesis_distance(audio, &track, mel, synth_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripRow {
    pub clip: String,
    pub model_db: f64,
    pub baseline_db: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub rows: Vec<RoundTripRow>,
}

impl RoundTripReport {
    /// Fraction of clips where the model beats the baseline.
    pub fn win_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().filter(|r| r.model_db < r.baseline_db).count() as f64 / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,model_db,baseline_db\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.clip, r.model_db, r.baseline_db);
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_pair(dir, "round_trip", &self.to_csv(), self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub epoch: usize,
    pub joint_huber: f64,
    pub split_huber: f64,
    pub joint_mse: f64,
    pub split_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Final split-regime parameter Huber loss over the joint one.
    pub final_ratio: f64,
}

/// Side by side validation curves of joint training and of the
/// train-VAE-then-projector regime. `*_mse` is the mel reconstruction
/// error; a frozen-projector stage has none, so the split column carries
/// whatever the curve holds (NaN there).
pub fn ablation_report(joint: &Curves, split: &Curves) -> Result<AblationReport> {
    let n = joint.rows.len().min(split.rows.len());
    if n == 0 {
        return Err(Error::invalid("ablation needs at least one epoch in each run"));
    }
    let rows: Vec<AblationRow> = joint
        .rows
        .iter()
        .zip(&split.rows)
        .take(n)
        .enumerate()
        .map(|(i, (j, s))| AblationRow {
            epoch: i + 1,
            joint_huber: j.param_huber_val,
            split_huber: s.param_huber_val,
            joint_mse: j.mel_mse_val,
            split_mse: s.mel_mse_val,
        })
        .collect();
    let last = &rows[n - 1];
    let final_ratio = if last.split_huber == last.joint_huber {
        1.0
    } else {
        last.split_huber / last.joint_huber
    };
    Ok(AblationReport { rows, final_ratio })
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,joint_huber,split_huber,joint_mse,split_mse\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.joint_huber, r.split_huber, r.joint_mse, r.split_mse
            );
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_pair(dir, "ablation", &self.to_csv(), self)
    }
}

/// Per-window values of three named parameters in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dims: [String; 3],
    pub rows: Vec<[f64; 4]>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut s = format!("t,{},{},{}\n", self.dims[0], self.dims[1], self.dims[2]);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r[0], r[1], r[2], r[3]);
        }
        s
    }
}

pub fn trajectory_from_track(track: &ParamTrack, dims: [&str; 3]) -> Result<Trajectory> {
    let mut idx = [0usize; 3];
    for (i, d) in idx.iter_mut().zip(dims) {
        *i = param_index(d).ok_or_else(|| Error::invalid(format!("unknown parameter `{d}`")))?;
    }
    let rows = track
        .breakpoints()
        .iter()
        .map(|b| {
            let a = b.params.to_array();
            [b.t, a[idx[0]], a[idx[1]], a[idx[2]]]
        })
        .collect();
    Ok(Trajectory {
        dims: dims.map(String::from),
        rows,
    })
}

pub fn trajectory_export(audio: &AudioClip, model: &dyn Inverter, dims: [&str; 3]) -> Result<Trajectory> {
    for d in dims {
        if param_index(d).is_none() {
            return Err(Error::invalid(format!("unknown parameter `{d}`")));
        }
    }
    trajectory_from_track(&model.invert(audio)?, dims)
}

/// Posterior-mean predictions for already normalized window samples.
pub fn predict_samples(model: &InversionModel, samples: &[WindowSample]) -> Result<Vec<[f64; N_PARAMS]>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(512) {
        let x: Vec<f32> = chunk.iter().flat_map(|s| s.mel.iter().copied()).collect();
        let (mu, _) = model.vae.encode(&x)?;
        let p = model.vae.project(&mu)?;
        out.extend(p.chunks_exact(N_PARAMS).map(|r| std::array::from_fn(|k| r[k] as f64)));
    }
    Ok(out)
}

/// Error statistics of `model` over `samples` against their current labels.
pub fn sample_error_stats(model: &InversionModel, samples: &[WindowSample]) -> Result<[BoxStats; N_PARAMS]> {
    let pred = predict_samples(model, samples)?;
    let truth: Vec<[f64; N_PARAMS]> = samples.iter().map(|s| s.params_t.map(|v| v as f64)).collect();
    normalized_error_stats(&pred, &truth)
}

/// Round trip over manifest entries `file_ids`, each against a random
/// baseline drawn from a per-clip stream of `baseline_seed`. Both
/// re-syntheses reuse the clip's own noise seed.
pub fn round_trip_report(
    manifest: &Manifest,
    base: &Path,
    file_ids: &[usize],
    model: &(dyn Inverter + Sync),
    mel: &MelConfig,
    baseline_seed: u64,
) -> Result<RoundTripReport> {
    let rows = file_ids
        .par_iter()
        .map(|&id| {
            let entry = manifest
                .files
                .get(id)
                .ok_or_else(|| Error::invalid(format!("file id {id} is not in the manifest")))?;
            let ctx = |e: Error| e.context(entry.wav.clone());
            let audio = AudioClip::read_wav(&base.join(&entry.wav)).map_err(ctx)?;
            let model_db = round_trip_distance(&audio, model, mel, entry.seed).map_err(ctx)?;
            let mut rng = ChaCha8Rng::seed_from_u64(baseline_seed);
            rng.set_stream(id as u64);
            let baseline_db =
                random_baseline_distance(&audio, &mut rng, &manifest.spec.sampling, mel, entry.seed).map_err(ctx)?;
            Ok(RoundTripRow {
                clip: entry.wav.clone(),
                model_db,
                baseline_db,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundTripReport { rows })
}

/// Physical parameters from normalized predictions, clamped to range.
pub fn denormalize(pred: &[f64; N_PARAMS]) -> Result<PtParams> {
    PtParams::from_normalized(pred.map(|v| v.clamp(0.0, 1.0)))
}
