//! Two-head VAE: a convolutional encoder to a Gaussian latent, a transposed
//! convolution head reconstructing the mel frame, and a dense projector
//! predicting the six synthesizer parameters.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::dataset::{DatasetSplit, WindowSample};
use crate::error::{Error, Result};
use crate::mel::{MelConfig, MelExtractor, Normalizer};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::loss::{huber, huber_grad, kl_gaussian, kl_gaussian_grad, reparameterize, sample_eps};
use crate::nn::{Adam, Conv1d, ConvTranspose1d, Dense, Layer, Real, Sequential, Tensor};
use crate::params::{Breakpoint, Interpolation, ParamTrack, PtParams, N_PARAMS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the mel reconstruction error (the ELBO's likelihood term).
    pub beta_recon: f64,
    pub beta_kl: f64,
    pub beta_t: [f64; N_PARAMS],
    pub beta_prev: [f64; N_PARAMS],
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_recon: 1.0,
            beta_kl: 1e-3,
            beta_t: [1.0; N_PARAMS],
            beta_prev: [0.5; N_PARAMS],
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_recon, self.beta_kl, self.huber_delta]
            .into_iter()
            .chain(self.beta_t)
            .chain(self.beta_prev);
        for v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("loss weights must be finite and >= 0, got {v}")));
            }
        }
        if self.huber_delta <= 0.0 {
            return Err(Error::invalid("huber_delta must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub mel_dim: usize,
    /// Encoder conv channels; the reconstruction head mirrors them.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub latent: usize,
    /// Width of the projector's three hidden layers.
    pub projector_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            mel_dim: 128,
            channels: vec![32, 64, 128],
            kernel: 5,
            stride: 2,
            latent: 64,
            projector_hidden: 128,
        }
    }
}

impl ArchConfig {
    /// Length after each encoder conv.
    fn lengths(&self) -> Vec<usize> {
        let pad = self.kernel / 2;
        let mut l = self.mel_dim;
        let mut out = vec![l];
        for _ in &self.channels {
            l = (l + 2 * pad - self.kernel) / self.stride + 1;
            out.push(l);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.kernel % 2 == 0 || self.stride == 0 {
            return Err(Error::invalid("need at least one conv, an odd kernel and stride >= 1"));
        }
        if self.latent == 0 || self.projector_hidden == 0 {
            return Err(Error::invalid("latent and projector widths must be positive"));
        }
        let lens = self.lengths();
        // The mirrored head must land back on mel_dim exactly.
        let pad = self.kernel / 2;
        let op = self.output_padding();
        let mut l = *lens.last().expect("non-empty");
        for _ in &self.channels {
            l = (l - 1) * self.stride + self.kernel + op - 2 * pad;
        }
        if l != self.mel_dim || lens.contains(&0) {
            return Err(Error::invalid(format!(
                "mel_dim {} does not survive {} stride-{} stages",
                self.mel_dim,
                self.channels.len(),
                self.stride
            )));
        }
        Ok(())
    }

    fn output_padding(&self) -> usize {
        self.stride - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub arch: ArchConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Encoder, reconstruction head and projector on the full loss.
    Joint,
    /// Encoder and reconstruction head on the ELBO only; the projector is untouched.
    VaeOnly,
    /// Projector only, on the parameter terms, over a fixed encoder.
    FrozenProjector,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "vae_only" => Ok(TrainMode::VaeOnly),
            "frozen_projector" => Ok(TrainMode::FrozenProjector),
            _ => Err(Error::invalid(format!(
                "unknown mode `{s}` (joint|vae_only|frozen_projector)"
            ))),
        }
    }
}

/// Builds the projector: four dense layers, ReLU between, sigmoid out.
pub fn projector<T: Real, R: rand::Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Sequential<T> {
    Sequential::new(vec![
        Layer::Dense(Dense::new(rng, input, hidden)),
        Layer::relu(),
        Layer::Dense(Dense::new(rng, hidden, hidden)),
        Layer::relu(),
        Layer::Dense(Dense::new(rng, hidden, hidden)),
        Layer::relu(),
        Layer::Dense(Dense::new(rng, hidden, N_PARAMS)),
        Layer::sigmoid(),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae<T> {
    pub arch: ArchConfig,
    pub encoder: Sequential<T>,
    pub decoder: Sequential<T>,
    pub projector: Sequential<T>,
}

/// Everything a training-mode forward produced.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
    pub z: Vec<T>,
    pub recon: Option<Vec<T>>,
    pub params_hat: Option<Vec<T>>,
}

/// Batch-mean loss terms. `param_sq` and `param_huber` are already
/// weighted; `kl` is raw (multiply by `beta_kl` for its share of `total`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub mel_mse: f64,
    pub kl: f64,
    pub param_sq: f64,
    pub param_huber: f64,
    pub total: f64,
}

/// Labels for one batch: `mel` is `[batch * mel_dim]`, the parameter
/// slices `[batch * 6]`.
#[derive(Debug, Clone)]
pub struct Targets<'a, T> {
    pub mel: &'a [T],
    pub params_t: &'a [T],
    pub params_prev: &'a [T],
}

impl<T: Real> Vae<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, s, pad) = (arch.kernel, arch.stride, arch.kernel / 2);
        let lens = arch.lengths();
        let last_c = *arch.channels.last().expect("validated");
        let last_l = *lens.last().expect("validated");

        let mut enc = vec![Layer::reshape(vec![1, arch.mel_dim])];
        let mut c_in = 1;
        for &c in &arch.channels {
            enc.push(Layer::Conv1d(Conv1d::new(&mut rng, c_in, c, k, s, pad)));
            enc.push(Layer::relu());
            c_in = c;
        }
        enc.push(Layer::reshape(vec![last_c * last_l]));
        enc.push(Layer::Dense(Dense::new(&mut rng, last_c * last_l, 2 * arch.latent)));

        let mut dec = vec![
            Layer::Dense(Dense::new(&mut rng, arch.latent, last_c * last_l)),
            Layer::relu(),
            Layer::reshape(vec![last_c, last_l]),
        ];
        let mut outs: Vec<usize> = arch.channels.iter().rev().skip(1).copied().collect();
        outs.push(1);
        let mut c_in = last_c;
        for (i, &c) in outs.iter().enumerate() {
            let op = arch.output_padding();
            dec.push(Layer::ConvTranspose1d(ConvTranspose1d::new(&mut rng, c_in, c, k, s, pad, op)));
            if i + 1 < outs.len() {
                dec.push(Layer::relu());
            }
            c_in = c;
        }
        dec.push(Layer::reshape(vec![arch.mel_dim]));
        dec.push(Layer::sigmoid());

        let proj = projector(&mut rng, arch.latent, arch.projector_hidden);
        Ok(Vae {
            arch: arch.clone(),
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
            projector: proj,
        })
    }

    fn check_input(&self, x: &[T]) -> Result<usize> {
        let m = self.arch.mel_dim;
        if x.is_empty() || x.len() % m != 0 {
            return Err(Error::ShapeMismatch {
                op: "vae_forward",
                left: vec![x.len()],
                right: vec![0, m],
            });
        }
        Ok(x.len() / m)
    }

    fn split_latent(&self, enc: &[T]) -> (Vec<T>, Vec<T>) {
        let l = self.arch.latent;
        let mut mu = Vec::with_capacity(enc.len() / 2);
        let mut lv = Vec::with_capacity(enc.len() / 2);
        for row in enc.chunks_exact(2 * l) {
            mu.extend_from_slice(&row[..l]);
            lv.extend_from_slice(&row[l..]);
        }
        (mu, lv)
    }

    /// Posterior parameters for a batch of normalized frames `[b * mel_dim]`.
    pub fn encode(&self, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let b = self.check_input(x)?;
        let enc = self.encoder.infer(Tensor::new(vec![b, self.arch.mel_dim], x.to_vec())?)?;
        Ok(self.split_latent(enc.data()))
    }

    pub fn decode(&self, z: &[T]) -> Result<Vec<T>> {
        let b = z.len() / self.arch.latent;
        Ok(self.decoder.infer(Tensor::new(vec![b, self.arch.latent], z.to_vec())?)?.into_data())
    }

    pub fn project(&self, z: &[T]) -> Result<Vec<T>> {
        let b = z.len() / self.arch.latent;
        Ok(self.projector.infer(Tensor::new(vec![b, self.arch.latent], z.to_vec())?)?.into_data())
    }

    /// Training-style forward with explicit noise `eps` (`[b * latent]`).
    /// Both heads read the same sampled `z`.
    pub fn forward(&mut self, x: &[T], eps: &[T], mode: TrainMode) -> Result<ForwardPass<T>> {
        let b = self.check_input(x)?;
        let xt = Tensor::new(vec![b, self.arch.mel_dim], x.to_vec())?;
        let enc = match mode {
            TrainMode::FrozenProjector => self.encoder.infer(xt)?,
            _ => self.encoder.forward(xt)?,
        };
        let (mu, logvar) = self.split_latent(enc.data());
        if eps.len() != mu.len() {
            return Err(Error::ShapeMismatch {
                op: "reparameterize",
                left: vec![eps.len()],
                right: vec![mu.len()],
            });
        }
        let z = reparameterize(&mu, &logvar, eps);
        let zt = || Tensor::new(vec![b, self.arch.latent], z.clone());
        let recon = match mode {
            TrainMode::FrozenProjector => None,
            _ => Some(self.decoder.forward(zt()?)?.into_data()),
        };
        let params_hat = match mode {
            TrainMode::VaeOnly => None,
            _ => Some(self.projector.forward(zt()?)?.into_data()),
        };
        Ok(ForwardPass {
            mu,
            logvar,
            z,
            recon,
            params_hat,
        })
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
        self.projector.zero_grad();
    }

    pub fn reset_state(&mut self) {
        self.encoder.reset_state();
        self.decoder.reset_state();
        self.projector.reset_state();
    }

    /// Batch-mean loss terms of a forward pass. In `FrozenProjector` mode the
    /// ELBO terms are reported but do not count toward `total`.
    pub fn loss(&self, fwd: &ForwardPass<T>, y: &Targets<'_, T>, w: &LossWeights, mode: TrainMode) -> LossBreakdown {
        let l = self.arch.latent;
        let m = self.arch.mel_dim as f64;
        let bf = (fwd.mu.len() / l) as f64;
        let mut out = LossBreakdown::default();
        if let Some(recon) = &fwd.recon {
            let sq: f64 = recon.iter().zip(y.mel).map(|(&r, &t)| (r - t).f64().powi(2)).sum();
            out.mel_mse = sq / (bf * m);
        }
        out.kl = fwd
            .mu
            .chunks_exact(l)
            .zip(fwd.logvar.chunks_exact(l))
            .map(|(mu, lv)| kl_gaussian(mu, lv).f64())
            .sum::<f64>()
            / bf;
        if let Some(p_hat) = &fwd.params_hat {
            let delta = w.huber_delta;
            for (j, &p) in p_hat.iter().enumerate() {
                let i = j % N_PARAMS;
                let p = p.f64();
                out.param_sq += w.beta_t[i] * (p - y.params_t[j].f64()).powi(2);
                out.param_huber += w.beta_prev[i] * huber(p, y.params_prev[j].f64(), delta);
            }
            out.param_sq /= bf;
            out.param_huber /= bf;
        }
        let (w_recon, w_kl) = elbo_weights(w, mode);
        out.total = w_recon * out.mel_mse + w_kl * out.kl + out.param_sq + out.param_huber;
        out
    }

    /// Accumulates gradients of [`Vae::loss`]'s `total` into the layers
    /// that `mode` trains. Must follow a [`Vae::forward`] with the same `eps`.
    pub fn backward(&mut self, fwd: &ForwardPass<T>, eps: &[T], y: &Targets<'_, T>, w: &LossWeights, mode: TrainMode) {
        let l = self.arch.latent;
        let m = self.arch.mel_dim;
        let b = fwd.mu.len() / l;
        let bf = b as f64;
        let (w_recon, w_kl) = elbo_weights(w, mode);
        let mut dz = vec![T::zero(); b * l];

        if let Some(recon) = &fwd.recon {
            if w_recon > 0.0 {
                let scale = T::of(2.0 * w_recon / (bf * m as f64));
                let g: Vec<T> = recon.iter().zip(y.mel).map(|(&r, &t)| scale * (r - t)).collect();
                let gz = self.decoder.backward(Tensor::new(vec![b, m], g).expect("sized"));
                dz.iter_mut().zip(gz.data()).for_each(|(a, v)| *a += *v);
            }
        }
        if let Some(p_hat) = &fwd.params_hat {
            if w.beta_t.iter().chain(&w.beta_prev).any(|&v| v > 0.0) {
                let delta = T::of(w.huber_delta);
                let g: Vec<T> = p_hat
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        let i = j % N_PARAMS;
                        let sq = T::of(2.0 * w.beta_t[i]) * (p - y.params_t[j]);
                        let hub = T::of(w.beta_prev[i]) * huber_grad(p, y.params_prev[j], delta);
                        (sq + hub) / T::of(bf)
                    })
                    .collect();
                let gz = self.projector.backward(Tensor::new(vec![b, N_PARAMS], g).expect("sized"));
                dz.iter_mut().zip(gz.data()).for_each(|(a, v)| *a += *v);
            }
        }
        if mode == TrainMode::FrozenProjector {
            return;
        }
        let half = T::of(0.5);
        let mut d_mu = dz.clone();
        let mut d_lv: Vec<T> = dz
            .iter()
            .zip(eps)
            .zip(&fwd.logvar)
            .map(|((&g, &e), &lv)| g * e * half * (half * lv).exp())
            .collect();
        if w_kl > 0.0 {
            kl_gaussian_grad(&fwd.mu, &fwd.logvar, T::of(w_kl / bf), &mut d_mu, &mut d_lv);
        }
        let mut g = Vec::with_capacity(2 * b * l);
        for s in 0..b {
            g.extend_from_slice(&d_mu[s * l..(s + 1) * l]);
            g.extend_from_slice(&d_lv[s * l..(s + 1) * l]);
        }
        self.encoder.backward(Tensor::new(vec![b, 2 * l], g).expect("sized"));
    }

    /// Sign patterns of every ReLU in the last forward, in network order.
    pub fn relu_masks(&self) -> Vec<Vec<bool>> {
        [&self.encoder, &self.decoder, &self.projector]
            .iter()
            .flat_map(|n| n.layers.iter().filter_map(|l| l.relu_mask().map(|m| m.to_vec())))
            .collect()
    }

    /// Weights as named tensors (`encoder.3.weight`, ...).
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let parts = [("encoder", &self.encoder), ("decoder", &self.decoder), ("projector", &self.projector)];
        parts
            .iter()
            .flat_map(|(prefix, net)| {
                net.named_params()
                    .into_iter()
                    .map(move |(n, p)| (format!("{prefix}.{n}"), p.value.cast::<f32>()))
            })
            .collect()
    }

    pub fn load_tensors(&mut self, ck: &Checkpoint) -> Result<()> {
        let lookup = |prefix: &'static str| {
            move |name: &str| ck.get(&format!("{prefix}.{name}")).map(|t| t.cast::<T>())
        };
        self.encoder.load_params(lookup("encoder"))?;
        self.decoder.load_params(lookup("decoder"))?;
        self.projector.load_params(lookup("projector"))
    }
}

fn elbo_weights(w: &LossWeights, mode: TrainMode) -> (f64, f64) {
    match mode {
        TrainMode::FrozenProjector => (0.0, 0.0),
        _ => (w.beta_recon, w.beta_kl),
    }
}

/// Per-epoch validation curves, one row per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mel_mse_val: f64,
    /// Mean over windows of the summed unweighted Huber loss between the
    /// predicted and true current parameters.
    pub param_huber_val: f64,
    /// Same, squared error.
    pub param_mse_val: f64,
    pub kl_val: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Curves {
    pub rows: Vec<EpochMetrics>,
}

pub const CURVES_HEADER: &str = "epoch,mel_mse_val,param_huber_val,param_mse_val,kl_val";

impl Curves {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CURVES_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.mel_mse_val, r.param_huber_val, r.param_mse_val, r.kl_val
            ));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = s.lines();
        if lines.next() != Some(CURVES_HEADER) {
            return Err(Error::format(path, "unexpected curves header"));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i)
                        .and_then(|v| v.trim().parse().ok())
                        .ok_or_else(|| Error::format(path, format!("bad curves row `{l}`")))
                };
                Ok(EpochMetrics {
                    epoch: num(0)? as usize,
                    mel_mse_val: num(1)?,
                    param_huber_val: num(2)?,
                    param_mse_val: num(3)?,
                    kl_val: num(4)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Curves { rows })
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }
}

fn gather(samples: &[&WindowSample]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut x = Vec::with_capacity(samples.len() * samples.first().map_or(0, |s| s.mel.len()));
    let mut pt = Vec::with_capacity(samples.len() * N_PARAMS);
    let mut pp = Vec::with_capacity(samples.len() * N_PARAMS);
    for s in samples {
        x.extend_from_slice(&s.mel);
        pt.extend_from_slice(&s.params_t);
        pp.extend_from_slice(&s.params_prev);
    }
    (x, pt, pp)
}

const EVAL_CHUNK: usize = 512;

/// Validation metrics at the posterior mean.
pub fn evaluate(vae: &Vae<f32>, samples: &[WindowSample], delta: f64) -> Result<EpochMetrics> {
    let mut acc = EpochMetrics {
        epoch: 0,
        mel_mse_val: 0.0,
        param_huber_val: 0.0,
        param_mse_val: 0.0,
        kl_val: 0.0,
    };
    if samples.is_empty() {
        return Ok(EpochMetrics {
            mel_mse_val: f64::NAN,
            param_huber_val: f64::NAN,
            param_mse_val: f64::NAN,
            kl_val: f64::NAN,
            ..acc
        });
    }
    let l = vae.arch.latent;
    let m = vae.arch.mel_dim;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let (x, pt, _) = gather(&refs);
        let (mu, lv) = vae.encode(&x)?;
        let recon = vae.decode(&mu)?;
        let p_hat = vae.project(&mu)?;
        acc.mel_mse_val += recon
            .iter()
            .zip(&x)
            .map(|(&r, &t)| ((r - t) as f64).powi(2))
            .sum::<f64>()
            / m as f64;
        for (p, t) in p_hat.iter().zip(&pt) {
            let (p, t) = (*p as f64, *t as f64);
            acc.param_mse_val += (p - t).powi(2);
            acc.param_huber_val += huber(p, t, delta);
        }
        acc.kl_val += mu
            .chunks_exact(l)
            .zip(lv.chunks_exact(l))
            .map(|(a, b)| kl_gaussian(a, b) as f64)
            .sum::<f64>();
    }
    let n = samples.len() as f64;
    acc.mel_mse_val /= n;
    acc.param_huber_val /= n;
    acc.param_mse_val /= n;
    acc.kl_val /= n;
    Ok(acc)
}

fn check_finite(epoch: usize, b: &LossBreakdown) -> Result<()> {
    let terms = [
        ("mel_mse", b.mel_mse),
        ("kl", b.kl),
        ("param_sq", b.param_sq),
        ("param_huber", b.param_huber),
    ];
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some((term, _)) => Err(Error::NonFiniteLoss { epoch, term }),
        None => Ok(()),
    }
}

/// Trains `vae` in place and returns per-epoch validation curves. Epochs
/// are 1-based in the curves. `on_epoch` sees each row as it is produced.
pub fn train(
    vae: &mut Vae<f32>,
    data: &DatasetSplit,
    cfg: &VaeConfig,
    mode: TrainMode,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Curves> {
    cfg.loss.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if data.mel_dim() != vae.arch.mel_dim {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: vec![data.mel_dim()],
            right: vec![vae.arch.mel_dim],
        });
    }
    let tc = &cfg.train;
    let batch = tc.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = Adam::<f32>::new(tc.lr);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut curves = Curves::default();
    let l = vae.arch.latent;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let refs: Vec<&WindowSample> = idx.iter().map(|&i| &data.train[i]).collect();
            let (x, pt, pp) = gather(&refs);
            let eps: Vec<f32> = sample_eps(&mut rng, refs.len() * l);
            vae.zero_grad();
            let fwd = vae.forward(&x, &eps, mode)?;
            let targets = Targets {
                mel: &x,
                params_t: &pt,
                params_prev: &pp,
            };
            let b = vae.loss(&fwd, &targets, &cfg.loss, mode);
            check_finite(epoch, &b)?;
            vae.backward(&fwd, &eps, &targets, &cfg.loss, mode);
            let mut params = match mode {
                TrainMode::Joint => {
                    let mut p = vae.encoder.params_mut();
                    p.extend(vae.decoder.params_mut());
                    p.extend(vae.projector.params_mut());
                    p
                }
                TrainMode::VaeOnly => {
                    let mut p = vae.encoder.params_mut();
                    p.extend(vae.decoder.params_mut());
                    p
                }
                TrainMode::FrozenProjector => vae.projector.params_mut(),
            };
            opt.step(&mut params);
        }
        let mut row = evaluate(vae, &data.validation, cfg.loss.huber_delta)?;
        row.epoch = epoch;
        if !data.validation.is_empty() {
            let b = LossBreakdown {
                mel_mse: row.mel_mse_val,
                kl: row.kl_val,
                param_sq: row.param_mse_val,
                param_huber: row.param_huber_val,
                total: 0.0,
            };
            check_finite(epoch, &b)?;
        }
        log::debug!(
            "epoch {epoch}: mel {:.5} param_mse {:.5} huber {:.5} kl {:.3}",
            row.mel_mse_val,
            row.param_mse_val,
            row.param_huber_val,
            row.kl_val
        );
        on_epoch(&row);
        curves.rows.push(row);
    }
    vae.reset_state();
    Ok(curves)
}

/// A trained VAE with the feature pipeline it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionModel {
    pub config: VaeConfig,
    pub vae: Vae<f32>,
    pub normalizer: Normalizer,
    pub mel: MelConfig,
    /// Training stages applied so far, in order.
    pub history: Vec<TrainMode>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    config: VaeConfig,
    normalizer: Normalizer,
    mel: MelConfig,
    history: Vec<TrainMode>,
}

const VAE_KIND: &str = "vae";

impl InversionModel {
    pub fn new(config: VaeConfig, normalizer: Normalizer, mel: MelConfig) -> Result<Self> {
        let vae = Vae::new(&config.arch, config.train.seed)?;
        if normalizer.dim() != config.arch.mel_dim || mel.n_mels != config.arch.mel_dim {
            return Err(Error::invalid(format!(
                "mel size {} / normalizer size {} disagree with model input {}",
                mel.n_mels,
                normalizer.dim(),
                config.arch.mel_dim
            )));
        }
        Ok(InversionModel {
            config,
            vae,
            normalizer,
            mel,
            history: Vec::new(),
        })
    }

    /// Runs one training stage on `data` with this model's config.
    pub fn fit(
        &mut self,
        data: &DatasetSplit,
        mode: TrainMode,
        on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Curves> {
        if data.normalizer != self.normalizer {
            return Err(Error::invalid("dataset normalizer differs from the model's"));
        }
        let curves = train(&mut self.vae, data, &self.config, mode, on_epoch)?;
        self.history.push(mode);
        Ok(curves)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            kind: VAE_KIND.into(),
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            mel: self.mel.clone(),
            history: self.history.clone(),
        };
        Checkpoint {
            header: serde_json::to_value(header).map_err(|e| Error::json(path, e))?,
            tensors: self.vae.named_tensors(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let header: ModelHeader =
            serde_json::from_value(ck.header.clone()).map_err(|e| Error::json(path, e))?;
        if header.kind != VAE_KIND {
            return Err(Error::format(path, format!("checkpoint holds a `{}`, not a VAE", header.kind)));
        }
        let mut vae = Vae::new(&header.config.arch, 0)?;
        vae.load_tensors(&ck).map_err(|e| e.context(path.display().to_string()))?;
        Ok(InversionModel {
            config: header.config,
            vae,
            normalizer: header.normalizer,
            mel: header.mel,
            history: header.history,
        })
    }

    /// Normalized parameter predictions for raw log-mel frames.
    pub fn predict_frames(&self, frames: &[Vec<f64>]) -> Result<Vec<[f64; N_PARAMS]>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EVAL_CHUNK) {
            let x: Vec<f32> = chunk
                .iter()
                .flat_map(|f| self.normalizer.apply(f).into_iter().map(|v| v as f32))
                .collect();
            let (mu, _) = self.vae.encode(&x)?;
            let p = self.vae.project(&mu)?;
            out.extend(p.chunks_exact(N_PARAMS).map(|r| {
                let mut a = [0.0; N_PARAMS];
                a.iter_mut().zip(r).for_each(|(d, s)| *d = *s as f64);
                a
            }));
        }
        Ok(out)
    }

    /// Log-mel frames of `audio`, resampled to the model's rate first if needed.
    pub fn frames(&self, audio: &AudioClip) -> Result<Vec<Vec<f64>>> {
        let audio = if audio.sample_rate != self.mel.sample_rate {
            audio.resample(self.mel.sample_rate)?
        } else {
            audio.clone()
        };
        if audio.len() < self.mel.window_samples {
            return Err(Error::invalid(format!(
                "audio has {} samples, shorter than one {}-sample window",
                audio.len(),
                self.mel.window_samples
            )));
        }
        Ok(MelExtractor::new(self.mel.clone())?.frames(&audio.samples))
    }

    /// One breakpoint per window (held from the window's start), in
    /// physical units. Uses the posterior mean, so it is deterministic.
    pub fn predict_params(&self, audio: &AudioClip) -> Result<ParamTrack> {
        let frames = self.frames(audio)?;
        let preds = self.predict_frames(&frames)?;
        track_from_predictions(&preds, self.mel.window_samples as f64 / self.mel.sample_rate as f64)
    }
}

/// Hold track with one breakpoint every `hop` seconds.
pub fn track_from_predictions(preds: &[[f64; N_PARAMS]], hop: f64) -> Result<ParamTrack> {
    let points = preds
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let clamped = u.map(|v| v.clamp(0.0, 1.0));
            Ok(Breakpoint {
                t: i as f64 * hop,
                params: PtParams::from_normalized(clamped)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ParamTrack::new(Interpolation::Hold, points)
}
