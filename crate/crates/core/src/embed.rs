//! Frame embeddings from pretrained audio encoders (`PTEB` files), resized
//! to the projector's input width and trained against window labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::n_train_files;
use crate::error::{Error, Result};
use crate::mel::MelConfig;
use crate::model::{projector, Curves, EpochMetrics, LossWeights, TrainConfig};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::loss::{huber, huber_grad};
use crate::nn::{Adam, Sequential, Tensor};
use crate::params::{ParamTrack, N_PARAMS};

const MAGIC: &[u8; 4] = b"PTEB";
const VERSION: u32 = 1;
const HEADER_BYTES: u64 = 4 + 4 + 4 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Wav2vec,
    Encodec,
}

impl ModelTag {
    pub fn code(self) -> u32 {
        match self {
            ModelTag::Wav2vec => 0,
            ModelTag::Encodec => 1,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(ModelTag::Wav2vec),
            1 => Some(ModelTag::Encodec),
            _ => None,
        }
    }

    /// Width of one frame: 768 for Wav2Vec 2.0 hidden states, 128 for the
    /// EnCodec encoder output.
    pub fn source_dim(self) -> usize {
        match self {
            ModelTag::Wav2vec => 768,
            ModelTag::Encodec => 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub model_tag: ModelTag,
    pub source_dim: usize,
    /// Seconds between frames.
    pub frame_hop: f64,
    /// `n_frames * source_dim` values, frame-major.
    pub frames: Vec<f32>,
}

impl EmbeddingFile {
    pub fn new(model_tag: ModelTag, frame_hop: f64, frames: Vec<f32>) -> Result<Self> {
        let source_dim = model_tag.source_dim();
        if !(frame_hop > 0.0 && frame_hop.is_finite()) {
            return Err(Error::invalid(format!("frame_hop must be positive, got {frame_hop}")));
        }
        if frames.len() % source_dim != 0 {
            return Err(Error::invalid(format!(
                "{} values do not divide into {source_dim}-wide frames",
                frames.len()
            )));
        }
        Ok(EmbeddingFile {
            model_tag,
            source_dim,
            frame_hop,
            frames,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.source_dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.source_dim..(i + 1) * self.source_dim]
    }

    /// Frame whose center is nearest `t` seconds; frame `i` spans
    /// `[i * hop, (i + 1) * hop)`.
    pub fn nearest_frame(&self, t: f64) -> usize {
        let i = (t / self.frame_hop - 0.5).round();
        (i.max(0.0) as usize).min(self.n_frames().saturating_sub(1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(self.model_tag.code()).map_err(io)?;
        w.write_u32::<LittleEndian>(self.source_dim as u32).map_err(io)?;
        w.write_f64::<LittleEndian>(self.frame_hop).map_err(io)?;
        w.write_u64::<LittleEndian>(self.n_frames() as u64).map_err(io)?;
        for &v in &self.frames {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let bad = |reason: String| Error::format(path, reason);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a PTEB file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(bad(format!("unsupported PTEB version {version}")));
        }
        let code = r.read_u32::<LittleEndian>().map_err(io)?;
        let tag = ModelTag::from_code(code).ok_or_else(|| bad(format!("unknown model tag {code}")))?;
        let source_dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if source_dim != tag.source_dim() {
            return Err(bad(format!(
                "source_dim {source_dim} does not match {tag:?} ({})",
                tag.source_dim()
            )));
        }
        let frame_hop = r.read_f64::<LittleEndian>().map_err(io)?;
        if !(frame_hop > 0.0 && frame_hop.is_finite()) {
            return Err(bad(format!("frame_hop must be positive, got {frame_hop}")));
        }
        let n_frames = r.read_u64::<LittleEndian>().map_err(io)?;
        let body = std::fs::metadata(path).map_err(io)?.len().saturating_sub(HEADER_BYTES);
        let expected = n_frames
            .checked_mul(source_dim as u64 * 4)
            .ok_or_else(|| bad("n_frames overflows".into()))?;
        if body != expected {
            return Err(bad(format!(
                "body holds {body} bytes but {n_frames} frames of {source_dim} need {expected}"
            )));
        }
        let mut frames = vec![0f32; n_frames as usize * source_dim];
        r.read_f32_into::<LittleEndian>(&mut frames).map_err(io)?;
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite embedding value".into()));
        }
        Ok(EmbeddingFile {
            model_tag: tag,
            source_dim,
            frame_hop,
            frames,
        })
    }
}

/// Norm-preserving resize: normalize, linearly resample the coordinate
/// sequence at fractional index `j (S-1)/(T-1)`, then scale the result to
/// the input's norm. A zero vector stays zero.
pub fn slerp_resize(v: &[f64], target_dim: usize) -> Result<Vec<f64>> {
    if v.len() < 2 || target_dim < 2 {
        return Err(Error::invalid(format!(
            "slerp_resize needs source and target dims >= 2, got {} -> {target_dim}",
            v.len()
        )));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(vec![0.0; target_dim]);
    }
    if target_dim == v.len() {
        return Ok(v.to_vec());
    }
    let s = v.len();
    let step = (s - 1) as f64 / (target_dim - 1) as f64;
    let mut out: Vec<f64> = (0..target_dim)
        .map(|j| {
            let pos = j as f64 * step;
            let i = (pos.floor() as usize).min(s - 2);
            let f = pos - i as f64;
            (v[i] * (1.0 - f) + v[i + 1] * f) / norm
        })
        .collect();
    let out_norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if out_norm > 0.0 {
        out.iter_mut().for_each(|x| *x *= norm / out_norm);
    }
    Ok(out)
}

/// An embedding file with the track that produced its audio.
#[derive(Debug, Clone)]
pub struct EmbeddingItem {
    pub embeddings: EmbeddingFile,
    pub track: ParamTrack,
    /// Audio duration in seconds; fixes the number of label windows.
    pub duration: f64,
}

/// Projector over resized foundation embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingProjector {
    pub model_tag: ModelTag,
    pub input_dim: usize,
    pub hidden: usize,
    pub net: Sequential<f32>,
}

#[derive(Serialize, Deserialize)]
struct ProjectorHeader {
    kind: String,
    model_tag: ModelTag,
    input_dim: usize,
    hidden: usize,
}

const PROJECTOR_KIND: &str = "embedding_projector";

/// Training inputs for one file: resized frames nearest each window
/// center, with current and previous labels.
fn windows_of(item: &EmbeddingItem, input_dim: usize, mel: &MelConfig) -> Result<Vec<(Vec<f32>, [f32; 6], [f32; 6])>> {
    let n = (item.duration * mel.sample_rate as f64 / mel.window_samples as f64).floor() as usize;
    if item.embeddings.n_frames() == 0 {
        return Err(Error::invalid("embedding file has no frames"));
    }
    let labels = crate::dataset::window_labels(&item.track, n, mel);
    let hop = mel.window_samples as f64 / mel.sample_rate as f64;
    (0..n)
        .map(|w| {
            let f = item.embeddings.nearest_frame((w as f64 + 0.5) * hop);
            let v: Vec<f64> = item.embeddings.frame(f).iter().map(|&x| x as f64).collect();
            let x = slerp_resize(&v, input_dim)?.into_iter().map(|x| x as f32).collect();
            let prev = if w == 0 { labels[0] } else { labels[w - 1] };
            Ok((x, labels[w].map(|v| v as f32), prev.map(|v| v as f32)))
        })
        .collect()
}

impl EmbeddingProjector {
    pub fn new(model_tag: ModelTag, input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingProjector {
            model_tag,
            input_dim,
            hidden,
            net: projector(&mut rng, input_dim, hidden),
        }
    }

    /// Normalized predictions, one per 15 ms window of `item.duration`.
    pub fn predict(&self, embeddings: &EmbeddingFile, duration: f64, mel: &MelConfig) -> Result<Vec<[f64; N_PARAMS]>> {
        if embeddings.model_tag != self.model_tag {
            return Err(Error::invalid(format!(
                "projector expects {:?} embeddings, got {:?}",
                self.model_tag, embeddings.model_tag
            )));
        }
        let item = EmbeddingItem {
            embeddings: embeddings.clone(),
            track: ParamTrack::constant(crate::params::PtParams::neutral()),
            duration,
        };
        let wins = windows_of(&item, self.input_dim, mel)?;
        let x: Vec<f32> = wins.iter().flat_map(|w| w.0.iter().copied()).collect();
        let y = self.net.infer(Tensor::new(vec![wins.len(), self.input_dim], x)?)?;
        Ok(y.data()
            .chunks_exact(N_PARAMS)
            .map(|r| {
                let mut a = [0.0; N_PARAMS];
                a.iter_mut().zip(r).for_each(|(d, s)| *d = *s as f64);
                a
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ProjectorHeader {
            kind: PROJECTOR_KIND.into(),
            model_tag: self.model_tag,
            input_dim: self.input_dim,
            hidden: self.hidden,
        };
        Checkpoint {
            header: serde_json::to_value(header).map_err(|e| Error::json(path, e))?,
            tensors: self
                .net
                .named_params()
                .into_iter()
                .map(|(n, p)| (format!("projector.{n}"), p.value.clone()))
                .collect(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let h: ProjectorHeader = serde_json::from_value(ck.header.clone()).map_err(|e| Error::json(path, e))?;
        if h.kind != PROJECTOR_KIND {
            return Err(Error::format(path, format!("checkpoint holds a `{}`, not a projector", h.kind)));
        }
        let mut p = EmbeddingProjector::new(h.model_tag, h.input_dim, h.hidden, 0);
        p.net.load_params(|n| ck.get(&format!("projector.{n}")).cloned())?;
        Ok(p)
    }
}

/// Trains a projector on resized embeddings with the parameter terms of
/// the loss (squared error on the current window, Huber against the
/// previous one). Files split 80-20 as for mel datasets. Curves carry NaN
/// in the mel and KL columns.
pub fn train_projector_on_embeddings(
    items: &[EmbeddingItem],
    input_dim: usize,
    hidden: usize,
    loss: &LossWeights,
    train: &TrainConfig,
    mel: &MelConfig,
) -> Result<(EmbeddingProjector, Curves)> {
    loss.validate()?;
    let tag = items
        .first()
        .ok_or_else(|| Error::invalid("no embedding files"))?
        .embeddings
        .model_tag;
    if let Some(other) = items.iter().find(|i| i.embeddings.model_tag != tag) {
        return Err(Error::invalid(format!(
            "mixed embedding sources: {tag:?} and {:?}",
            other.embeddings.model_tag
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let (tr, va) = order.split_at(n_train_files(order.len()));
    let collect = |ids: &[usize]| -> Result<Vec<_>> {
        let mut out = Vec::new();
        for &i in ids {
            out.extend(windows_of(&items[i], input_dim, mel)?);
        }
        Ok(out)
    };
    let train_set = collect(tr)?;
    let val_set = collect(va)?;
    if train_set.is_empty() {
        return Err(Error::invalid("no training windows"));
    }

    let mut proj = EmbeddingProjector::new(tag, input_dim, hidden, train.seed);
    let mut opt = Adam::<f32>::new(train.lr);
    let mut idx: Vec<usize> = (0..train_set.len()).collect();
    let mut curves = Curves::default();
    let delta = loss.huber_delta as f32;
    for epoch in 1..=train.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(train.batch_size.max(1)) {
            let b = chunk.len();
            let x: Vec<f32> = chunk.iter().flat_map(|&i| train_set[i].0.iter().copied()).collect();
            proj.net.zero_grad();
            let y = proj.net.forward(Tensor::new(vec![b, input_dim], x)?)?;
            let mut g = vec![0f32; b * N_PARAMS];
            let mut total = 0.0f64;
            for (s, &i) in chunk.iter().enumerate() {
                let (_, pt, pp) = &train_set[i];
                for k in 0..N_PARAMS {
                    let p = y.data()[s * N_PARAMS + k];
                    total += loss.beta_t[k] * ((p - pt[k]) as f64).powi(2)
                        + loss.beta_prev[k] * huber(p, pp[k], delta) as f64;
                    g[s * N_PARAMS + k] = (2.0 * loss.beta_t[k] as f32 * (p - pt[k])
                        + loss.beta_prev[k] as f32 * huber_grad(p, pp[k], delta))
                        / b as f32;
                }
            }
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, term: "param" });
            }
            proj.net.backward(Tensor::new(vec![b, N_PARAMS], g)?);
            opt.step(&mut proj.net.params_mut());
        }
        let mut row = EpochMetrics {
            epoch,
            mel_mse_val: f64::NAN,
            param_huber_val: 0.0,
            param_mse_val: 0.0,
            kl_val: f64::NAN,
        };
        if val_set.is_empty() {
            row.param_huber_val = f64::NAN;
            row.param_mse_val = f64::NAN;
        } else {
            let x: Vec<f32> = val_set.iter().flat_map(|w| w.0.iter().copied()).collect();
            let y = proj.net.infer(Tensor::new(vec![val_set.len(), input_dim], x)?)?;
            for (p, w) in y.data().chunks_exact(N_PARAMS).zip(&val_set) {
                for k in 0..N_PARAMS {
                    let (p, t) = (p[k] as f64, w.1[k] as f64);
                    row.param_mse_val += (p - t).powi(2);
                    row.param_huber_val += huber(p, t, loss.huber_delta);
                }
            }
            row.param_mse_val /= val_set.len() as f64;
            row.param_huber_val /= val_set.len() as f64;
        }
        curves.rows.push(row);
    }
    proj.net.reset_state();
    Ok((proj, curves))
}
