//! Synthetic vowel corpora: parameter sampling, rendering, windowing and the
//! on-disk record format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::mel::{MelConfig, MelExtractor, Normalizer};
use crate::params::{Breakpoint, Interpolation, ParamTrack, PtParams, N_PARAMS, PARAM_RANGES};
use crate::synth::synthesize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Static,
    Linear,
    #[serde(rename = "step100ms")]
    Step100ms,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [DatasetKind::Static, DatasetKind::Linear, DatasetKind::Step100ms];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Static => "static",
            DatasetKind::Linear => "linear",
            DatasetKind::Step100ms => "step100ms",
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown dataset kind `{s}` (static|linear|step100ms)")))
    }
}

/// Distribution knobs for [`sample_params`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Underlying normal of the tongue-index log-normal.
    pub tongue_log_mu: f64,
    pub tongue_log_sigma: f64,
    /// Lower bound of constriction_diameter is
    /// `floor + slope * (3.5 - tongue_diameter) / 1.45`.
    pub constriction_floor: f64,
    pub constriction_slope: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            tongue_log_mu: 20f64.ln(),
            tongue_log_sigma: 0.25,
            constriction_floor: 0.3,
            constriction_slope: 0.6,
        }
    }
}

impl SamplingConfig {
    pub fn constriction_lower(&self, tongue_diameter: f64) -> f64 {
        let (lo, hi) = PARAM_RANGES[3];
        let lower = self.constriction_floor + self.constriction_slope * (hi - tongue_diameter) / (hi - lo);
        lower.clamp(PARAM_RANGES[5].0, PARAM_RANGES[5].1)
    }
}

/// One parameter draw. The tongue index is log-normal, truncated to its
/// range by rejection; the constriction diameter's lower bound rises as the
/// tongue narrows the tract. Everything else is uniform.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R, cfg: &SamplingConfig) -> PtParams {
    let r = PARAM_RANGES;
    let frequency = rng.random_range(r[0].0..=r[0].1);
    let tenseness = rng.random_range(r[1].0..=r[1].1);
    let lognormal = LogNormal::new(cfg.tongue_log_mu, cfg.tongue_log_sigma).expect("sigma > 0");
    let tongue_index = loop {
        let v = lognormal.sample(rng);
        if (r[2].0..=r[2].1).contains(&v) {
            break v;
        }
    };
    let tongue_diameter = rng.random_range(r[3].0..=r[3].1);
    let constriction_index = rng.random_range(r[4].0..=r[4].1);
    let lower = cfg.constriction_lower(tongue_diameter);
    let constriction_diameter = rng.random_range(lower..=r[5].1);
    PtParams::new(
        frequency,
        tenseness,
        tongue_index,
        tongue_diameter,
        constriction_index,
        constriction_diameter,
    )
    .expect("draws lie in range")
}

/// Seconds between breakpoints of a step track.
pub const STEP_INTERVAL: f64 = 0.1;

pub fn make_track<R: Rng + ?Sized>(
    rng: &mut R,
    kind: DatasetKind,
    duration: f64,
    cfg: &SamplingConfig,
) -> ParamTrack {
    let bp = |t: f64, params: PtParams| Breakpoint { t, params };
    let (interpolation, points) = match kind {
        DatasetKind::Static => (Interpolation::Hold, vec![bp(0.0, sample_params(rng, cfg))]),
        DatasetKind::Linear => {
            let a = sample_params(rng, cfg);
            let b = sample_params(rng, cfg);
            (Interpolation::Linear, vec![bp(0.0, a), bp(duration, b)])
        }
        DatasetKind::Step100ms => {
            let n = ((duration / STEP_INTERVAL).round() as usize).max(1);
            let pts = (0..n).map(|i| bp(i as f64 * STEP_INTERVAL, sample_params(rng, cfg))).collect();
            (Interpolation::Hold, pts)
        }
    };
    ParamTrack::new(interpolation, points).expect("breakpoints are increasing from 0")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_files: usize,
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
    #[serde(default)]
    pub sampling: SamplingConfig,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, n_files: usize, seed: u64) -> Self {
        DatasetSpec {
            kind,
            n_files,
            duration: 1.0,
            sample_rate: SAMPLE_RATE,
            seed,
            sampling: SamplingConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_files == 0 {
            return Err(Error::invalid("n_files must be positive"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid("duration must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(())
    }

    /// Per-file seeds, drawn in order from the root seed.
    pub fn file_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_files).map(|_| rng.next_u64()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub wav: String,
    pub track_json: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::json(path, e))
    }
}

/// Track for file seed `seed`. Parameter draws use stream 1 of the seed so
/// they never alias the glottal noise.
pub fn track_for_seed(spec: &DatasetSpec, seed: u64) -> ParamTrack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    make_track(&mut rng, spec.kind, spec.duration, &spec.sampling)
}

/// Renders `spec.n_files` clips into `out_dir` with one track JSON each and
/// writes `manifest.json`. Each file is written under a temporary name and
/// renamed once complete.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = spec
        .file_seeds()
        .into_par_iter()
        .enumerate()
        .map(|(i, seed)| {
            let stem = format!("{}_{:05}", spec.kind, i);
            let track = track_for_seed(spec, seed);
            let clip = synthesize(&track, spec.duration, spec.sample_rate, seed)
                .map_err(|e| e.context(format!("rendering {stem}")))?;
            let wav = out_dir.join(format!("{stem}.wav"));
            let json = out_dir.join(format!("{stem}.json"));
            write_atomic(&wav, |p| clip.write_wav(p))?;
            write_atomic(&json, |p| track.save(p))?;
            Ok(ManifestEntry {
                wav: format!("{stem}.wav"),
                track_json: format!("{stem}.json"),
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        spec: spec.clone(),
        files,
    };
    manifest.save(&out_dir.join(MANIFEST_NAME))?;
    log::info!("wrote {} {} clips to {}", spec.n_files, spec.kind, out_dir.display());
    Ok(manifest)
}

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One training unit: a normalized mel frame with its window's labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub mel: Vec<f32>,
    pub params_t: [f32; N_PARAMS],
    pub params_prev: [f32; N_PARAMS],
    pub file_id: u32,
    pub window_index: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<WindowSample>,
    pub validation: Vec<WindowSample>,
    pub normalizer: Normalizer,
    pub mel_config: MelConfig,
}

/// Labels at window centers: normalized track values for each of the
/// `n_windows` non-overlapping windows.
pub fn window_labels(track: &ParamTrack, n_windows: usize, mel: &MelConfig) -> Vec<[f64; N_PARAMS]> {
    let w = mel.window_samples as f64;
    (0..n_windows)
        .map(|i| track.at((i as f64 + 0.5) * w / mel.sample_rate as f64).normalized())
        .collect()
}

struct FileWindows {
    frames: Vec<Vec<f64>>,
    labels: Vec<[f64; N_PARAMS]>,
}

fn load_file(entry: &ManifestEntry, base: &Path, ex: &MelExtractor) -> Result<FileWindows> {
    let wav_path = base.join(&entry.wav);
    let clip = AudioClip::read_wav(&wav_path)?;
    let expected = ex.config().sample_rate;
    if clip.sample_rate != expected {
        return Err(Error::SampleRateMismatch {
            path: wav_path,
            found: clip.sample_rate,
            expected,
        });
    }
    let track = ParamTrack::load(&base.join(&entry.track_json))?;
    let frames = ex.frames(&clip.samples);
    if frames.len() > u16::MAX as usize + 1 {
        return Err(Error::format(&wav_path, "too many windows for a u16 index"));
    }
    let labels = window_labels(&track, frames.len(), ex.config());
    Ok(FileWindows { frames, labels })
}

/// Number of training files for an 80-20 split by file.
pub fn n_train_files(n_files: usize) -> usize {
    if n_files < 2 {
        return n_files;
    }
    ((n_files as f64 * 0.8).round() as usize).clamp(1, n_files - 1)
}

/// Windows every manifest file, splits 80-20 by file (file order shuffled
/// with `split_seed`), fits the normalizer on training frames, and shuffles
/// both sides. `base` is the directory holding the manifest.
pub fn window_dataset(
    manifest: &Manifest,
    base: &Path,
    mel: &MelConfig,
    split_seed: u64,
) -> Result<DatasetSplit> {
    if manifest.files.is_empty() {
        return Err(Error::invalid("manifest lists no files"));
    }
    let ex = MelExtractor::new(mel.clone())?;
    let per_file = manifest
        .files
        .par_iter()
        .map(|e| load_file(e, base, &ex))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut order: Vec<usize> = (0..per_file.len()).collect();
    order.shuffle(&mut rng);
    let (train_ids, val_ids) = order.split_at(n_train_files(order.len()));

    let normalizer = Normalizer::fit(
        train_ids
            .iter()
            .flat_map(|&i| per_file[i].frames.iter().map(|f| f.as_slice())),
    )
    .map_err(|e| e.context("fitting mel normalizer (no training windows?)"))?;

    let build = |ids: &[usize]| -> Vec<WindowSample> {
        let mut out = Vec::new();
        for &id in ids {
            let fw = &per_file[id];
            for (w, (frame, label)) in fw.frames.iter().zip(&fw.labels).enumerate() {
                let prev = if w == 0 { label } else { &fw.labels[w - 1] };
                out.push(WindowSample {
                    mel: normalizer.apply(frame).into_iter().map(|v| v as f32).collect(),
                    params_t: label.map(|v| v as f32),
                    params_prev: prev.map(|v| v as f32),
                    file_id: id as u32,
                    window_index: w as u16,
                });
            }
        }
        out
    };
    let mut train = build(train_ids);
    let mut validation = build(val_ids);
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    Ok(DatasetSplit {
        train,
        validation,
        normalizer,
        mel_config: mel.clone(),
    })
}

const PTDS_MAGIC: &[u8; 4] = b"PTDS";
const PTDS_VERSION: u32 = 1;

/// Sidecar written next to a PTDS file: where the split falls, and the
/// normalization needed at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_train: usize,
    pub n_val: usize,
    pub normalizer: Normalizer,
    pub mel: MelConfig,
}

pub fn sidecar_path(ptds: &Path) -> PathBuf {
    let mut s = ptds.as_os_str().to_owned();
    s.push(".norm.json");
    PathBuf::from(s)
}

impl DatasetSplit {
    pub fn mel_dim(&self) -> usize {
        self.normalizer.dim()
    }

    /// Writes the record file (train records, then validation) and its
    /// `.norm.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mel_dim = self.mel_dim();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(PTDS_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(PTDS_VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>((self.train.len() + self.validation.len()) as u64)
            .map_err(io)?;
        w.write_u32::<LittleEndian>(mel_dim as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(N_PARAMS as u32).map_err(io)?;
        for s in self.train.iter().chain(&self.validation) {
            if s.mel.len() != mel_dim {
                return Err(Error::ShapeMismatch {
                    op: "write_ptds",
                    left: vec![s.mel.len()],
                    right: vec![mel_dim],
                });
            }
            for &v in s.mel.iter().chain(&s.params_t).chain(&s.params_prev) {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
            w.write_u32::<LittleEndian>(s.file_id).map_err(io)?;
            w.write_u16::<LittleEndian>(s.window_index).map_err(io)?;
        }
        w.flush().map_err(io)?;
        let meta = DatasetMeta {
            n_train: self.train.len(),
            n_val: self.validation.len(),
            normalizer: self.normalizer.clone(),
            mel: self.mel_config.clone(),
        };
        let side = sidecar_path(path);
        let s = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&side, e))?;
        std::fs::write(&side, s).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let meta: DatasetMeta = serde_json::from_str(
            &std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?,
        )
        .map_err(|e| Error::json(&side, e))?;

        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != PTDS_MAGIC {
            return Err(Error::format(path, "not a PTDS file"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != PTDS_VERSION {
            return Err(Error::format(path, format!("unsupported PTDS version {version}")));
        }
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mel_dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let n_params = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if n_params != N_PARAMS {
            return Err(Error::format(path, format!("expected {N_PARAMS} params, found {n_params}")));
        }
        if mel_dim != meta.normalizer.dim() || n != meta.n_train + meta.n_val {
            return Err(Error::format(path, "header disagrees with sidecar"));
        }
        let expected_len = 24 + n as u64 * (4 * (mel_dim + 2 * N_PARAMS) as u64 + 6);
        let actual_len = std::fs::metadata(path).map_err(io)?.len();
        if actual_len != expected_len {
            return Err(Error::format(
                path,
                format!("size {actual_len} bytes, header implies {expected_len}"),
            ));
        }
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let mut mel = vec![0f32; mel_dim];
            r.read_f32_into::<LittleEndian>(&mut mel).map_err(io)?;
            let mut params_t = [0f32; N_PARAMS];
            let mut params_prev = [0f32; N_PARAMS];
            r.read_f32_into::<LittleEndian>(&mut params_t).map_err(io)?;
            r.read_f32_into::<LittleEndian>(&mut params_prev).map_err(io)?;
            let file_id = r.read_u32::<LittleEndian>().map_err(io)?;
            let window_index = r.read_u16::<LittleEndian>().map_err(io)?;
            records.push(WindowSample {
                mel,
                params_t,
                params_prev,
                file_id,
                window_index,
            });
        }
        let validation = records.split_off(meta.n_train);
        Ok(DatasetSplit {
            train: records,
            validation,
            normalizer: meta.normalizer,
            mel_config: meta.mel,
        })
    }
}
