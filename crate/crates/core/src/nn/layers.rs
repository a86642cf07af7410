use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Param, Real, Tensor};
use crate::error::{Error, Result};

fn mismatch(op: &'static str, left: &[usize], right: Vec<usize>) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right,
    }
}

fn he_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("sized from shape")
}

/// `y = x W^T + b`, with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, n_in: usize, n_out: usize) -> Self {
        Dense {
            weight: Param::new(he_normal(rng, vec![n_out, n_in], n_in as f64)),
            bias: Param::new(Tensor::zeros(vec![n_out])),
            input: None,
        }
    }

    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weight.shape().to_vec();
        if s.len() != 2 || bias.shape() != [s[0]] {
            return Err(mismatch("dense", &s, bias.shape().to_vec()));
        }
        Ok(Dense {
            weight: Param::new(weight),
            bias: Param::new(bias),
            input: None,
        })
    }

    fn dims(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[1], s[0])
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n_in, n_out) = self.dims();
        if x.shape().len() != 2 || x.shape()[1] != n_in {
            return Err(mismatch("dense", x.shape(), vec![0, n_in]));
        }
        let b = x.shape()[0];
        let mut y = vec![T::zero(); b * n_out];
        for row in y.chunks_exact_mut(n_out) {
            row.copy_from_slice(self.bias.value.data());
        }
        let w = self.weight.value.data();
        T::gemm_raw(b, n_in, n_out, T::one(), x.data(), n_in, 1, w, 1, n_in, T::one(), &mut y, n_out, 1);
        Tensor::new(vec![b, n_out], y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("dense backward without forward");
        let (n_in, n_out) = self.dims();
        let b = x.shape()[0];
        let gd = g.data();
        T::gemm_raw(
            n_out,
            b,
            n_in,
            T::one(),
            gd,
            1,
            n_out,
            x.data(),
            n_in,
            1,
            T::one(),
            &mut self.weight.grad,
            n_in,
            1,
        );
        for row in gd.chunks_exact(n_out) {
            for (acc, v) in self.bias.grad.iter_mut().zip(row) {
                *acc += *v;
            }
        }
        let mut dx = vec![T::zero(); b * n_in];
        let w = self.weight.value.data();
        T::gemm_raw(b, n_out, n_in, T::one(), gd, n_out, 1, w, n_in, 1, T::zero(), &mut dx, n_in, 1);
        Tensor::new(vec![b, n_in], dx).expect("sized")
    }
}

/// Index map shared by both convolutions: input position of kernel tap `k`
/// at output position `t`, or `None` in the padding.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvGeom {
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    #[inline]
    fn src(&self, t: usize, k: usize, len: usize) -> Option<usize> {
        let i = (t * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    /// `cols[(c*K + k), b*l_short + t] = long[b, c, src(t, k)]`.
    fn im2col<T: Real>(&self, long: &[T], b: usize, ch: usize, l_long: usize, l_short: usize) -> Vec<T> {
        let k_n = self.kernel;
        let width = b * l_short;
        let mut cols = vec![T::zero(); ch * k_n * width];
        for c in 0..ch {
            for k in 0..k_n {
                let row = &mut cols[(c * k_n + k) * width..(c * k_n + k + 1) * width];
                for bi in 0..b {
                    let src = &long[(bi * ch + c) * l_long..(bi * ch + c + 1) * l_long];
                    for t in 0..l_short {
                        if let Some(i) = self.src(t, k, l_long) {
                            row[bi * l_short + t] = src[i];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds columns back.
    fn col2im<T: Real>(&self, cols: &[T], b: usize, ch: usize, l_long: usize, l_short: usize) -> Vec<T> {
        let k_n = self.kernel;
        let width = b * l_short;
        let mut long = vec![T::zero(); b * ch * l_long];
        for c in 0..ch {
            for k in 0..k_n {
                let row = &cols[(c * k_n + k) * width..(c * k_n + k + 1) * width];
                for bi in 0..b {
                    let dst = &mut long[(bi * ch + c) * l_long..(bi * ch + c + 1) * l_long];
                    for t in 0..l_short {
                        if let Some(i) = self.src(t, k, l_long) {
                            dst[i] += row[bi * l_short + t];
                        }
                    }
                }
            }
        }
        long
    }
}

/// `[b, c, l]` to `[c, b*l]`.
fn to_channel_major<T: Real>(x: &[T], b: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[ci * b * l + bi * l..ci * b * l + (bi + 1) * l]
                .copy_from_slice(&x[(bi * c + ci) * l..(bi * c + ci + 1) * l]);
        }
    }
    out
}

fn to_batch_major<T: Real>(x: &[T], b: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * l..(bi * c + ci + 1) * l]
                .copy_from_slice(&x[ci * b * l + bi * l..ci * b * l + (bi + 1) * l]);
        }
    }
    out
}

fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T], l: usize) {
    let c = bias.len();
    for (i, chunk) in y.chunks_exact_mut(l).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_bias<T: Real>(grad: &mut [T], g: &[T], l: usize) {
    let c = grad.len();
    for (i, chunk) in g.chunks_exact(l).enumerate() {
        grad[i % c] += chunk.iter().copied().sum::<T>();
    }
}

/// Strided 1-D convolution, weight `[c_out, c_in, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    geom: ConvGeom,
    cache: Option<(Vec<T>, [usize; 3])>,
}

impl<T: Real> Conv1d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = he_normal(rng, vec![c_out, c_in, kernel], (c_in * kernel) as f64);
        Self::from_weights(w, Tensor::zeros(vec![c_out]), stride, pad).expect("consistent shapes")
    }

    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let s = weight.shape().to_vec();
        if s.len() != 3 || bias.shape() != [s[0]] || stride == 0 || s[2] == 0 {
            return Err(mismatch("conv1d", &s, bias.shape().to_vec()));
        }
        Ok(Conv1d {
            geom: ConvGeom {
                kernel: s[2],
                stride,
                pad,
            },
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    fn channels(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[1], s[0])
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let (c_in, c_out) = self.channels();
        let s = x.shape();
        let l_out = (s.len() == 3 && s[1] == c_in).then(|| self.geom.out_len(s[2])).flatten();
        let Some(l_out) = l_out else {
            return Err(mismatch("conv1d", s, vec![0, c_in, self.geom.kernel]));
        };
        let (b, l) = (s[0], s[2]);
        let cols = self.geom.im2col(x.data(), b, c_in, l, l_out);
        let ck = c_in * self.geom.kernel;
        let width = b * l_out;
        let mut y = vec![T::zero(); c_out * width];
        let w = self.weight.value.data();
        T::gemm_raw(c_out, ck, width, T::one(), w, ck, 1, &cols, width, 1, T::zero(), &mut y, width, 1);
        let mut y = to_batch_major(&y, b, c_out, l_out);
        add_channel_bias(&mut y, self.bias.value.data(), l_out);
        Ok((Tensor::new(vec![b, c_out, l_out], y)?, cols))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        let (cols, [b, c_in, l]) = self.cache.take().expect("conv1d backward without forward");
        let (_, c_out) = self.channels();
        let l_out = g.shape()[2];
        let ck = c_in * self.geom.kernel;
        let width = b * l_out;
        accumulate_channel_bias(&mut self.bias.grad, g.data(), l_out);
        let gp = to_channel_major(g.data(), b, c_out, l_out);
        T::gemm_raw(c_out, width, ck, T::one(), &gp, width, 1, &cols, 1, width, T::one(), &mut self.weight.grad, ck, 1);
        let mut dcols = vec![T::zero(); ck * width];
        let w = self.weight.value.data();
        T::gemm_raw(ck, c_out, width, T::one(), w, 1, ck, &gp, width, 1, T::zero(), &mut dcols, width, 1);
        let dx = self.geom.col2im(&dcols, b, c_in, l, l_out);
        Tensor::new(vec![b, c_in, l], dx).expect("sized")
    }
}

/// Transposed convolution (the adjoint of [`Conv1d`] with the same stride
/// and padding), weight `[c_in, c_out, k]`. Output length is
/// `(l - 1) * stride - 2 * pad + k + output_padding`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose1d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    geom: ConvGeom,
    output_padding: usize,
    cache: Option<(Vec<T>, [usize; 3])>,
}

impl<T: Real> ConvTranspose1d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Self {
        let fan_in = (c_in * kernel) as f64 / stride as f64;
        let w = he_normal(rng, vec![c_in, c_out, kernel], fan_in);
        Self::from_weights(w, Tensor::zeros(vec![c_out]), stride, pad, output_padding)
            .expect("consistent shapes")
    }

    pub fn from_weights(
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let s = weight.shape().to_vec();
        if s.len() != 3 || bias.shape() != [s[1]] || stride == 0 || s[2] == 0 || output_padding >= stride {
            return Err(mismatch("conv_transpose1d", &s, bias.shape().to_vec()));
        }
        Ok(ConvTranspose1d {
            geom: ConvGeom {
                kernel: s[2],
                stride,
                pad,
            },
            output_padding,
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    fn channels(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1])
    }

    fn out_len(&self, l: usize) -> Option<usize> {
        let g = self.geom;
        ((l - 1) * g.stride + g.kernel + self.output_padding).checked_sub(2 * g.pad)
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let (c_in, c_out) = self.channels();
        let s = x.shape();
        let l_out = (s.len() == 3 && s[1] == c_in && s[2] > 0).then(|| self.out_len(s[2])).flatten();
        let Some(l_out) = l_out else {
            return Err(mismatch("conv_transpose1d", s, vec![0, c_in, self.geom.kernel]));
        };
        let (b, l) = (s[0], s[2]);
        let xp = to_channel_major(x.data(), b, c_in, l);
        let ck = c_out * self.geom.kernel;
        let width = b * l;
        let mut cols = vec![T::zero(); ck * width];
        let w = self.weight.value.data();
        T::gemm_raw(ck, c_in, width, T::one(), w, 1, ck, &xp, width, 1, T::zero(), &mut cols, width, 1);
        let mut y = self.geom.col2im(&cols, b, c_out, l_out, l);
        add_channel_bias(&mut y, self.bias.value.data(), l_out);
        Ok((Tensor::new(vec![b, c_out, l_out], y)?, xp))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        let (xp, [b, c_in, l]) = self.cache.take().expect("conv_transpose1d backward without forward");
        let (_, c_out) = self.channels();
        let l_out = g.shape()[2];
        let ck = c_out * self.geom.kernel;
        let width = b * l;
        accumulate_channel_bias(&mut self.bias.grad, g.data(), l_out);
        let dcols = self.geom.im2col(g.data(), b, c_out, l_out, l);
        T::gemm_raw(c_in, width, ck, T::one(), &xp, width, 1, &dcols, 1, width, T::one(), &mut self.weight.grad, ck, 1);
        let mut dxp = vec![T::zero(); c_in * width];
        let w = self.weight.value.data();
        T::gemm_raw(c_in, ck, width, T::one(), w, ck, 1, &dcols, width, 1, T::zero(), &mut dxp, width, 1);
        Tensor::new(vec![b, c_in, l], to_batch_major(&dxp, b, c_in, l)).expect("sized")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv1d(Conv1d<T>),
    ConvTranspose1d(ConvTranspose1d<T>),
    Relu(Option<Vec<bool>>),
    Sigmoid(Option<Tensor<T>>),
    /// Reshapes each batch item to the given shape.
    Reshape(Vec<usize>, Option<Vec<usize>>),
}

impl<T: Real> Layer<T> {
    pub fn relu() -> Self {
        Layer::Relu(None)
    }

    pub fn sigmoid() -> Self {
        Layer::Sigmoid(None)
    }

    pub fn reshape(item_shape: Vec<usize>) -> Self {
        Layer::Reshape(item_shape, None)
    }

    /// Forward pass that keeps what backward needs.
    pub fn forward(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Dense(d) => {
                let y = d.run(&x)?;
                d.input = Some(x);
                Ok(y)
            }
            Layer::Conv1d(c) => {
                let (y, cols) = c.run(&x)?;
                let s = x.shape();
                c.cache = Some((cols, [s[0], s[1], s[2]]));
                Ok(y)
            }
            Layer::ConvTranspose1d(c) => {
                let (y, xp) = c.run(&x)?;
                let s = x.shape();
                c.cache = Some((xp, [s[0], s[1], s[2]]));
                Ok(y)
            }
            Layer::Relu(mask) => {
                let mut x = x;
                let m = x.data_mut().iter_mut().map(|v| {
                    let on = *v > T::zero();
                    if !on {
                        *v = T::zero();
                    }
                    on
                });
                *mask = Some(m.collect());
                Ok(x)
            }
            Layer::Sigmoid(out) => {
                let y = self_sigmoid(x);
                *out = Some(y.clone());
                Ok(y)
            }
            Layer::Reshape(shape, cache) => {
                let y = reshape_items(&x, shape)?;
                *cache = Some(x.shape().to_vec());
                Ok(x.reshape(y)?)
            }
        }
    }

    /// Forward pass without caching; usable on a shared model.
    pub fn infer(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Dense(d) => d.run(&x),
            Layer::Conv1d(c) => Ok(c.run(&x)?.0),
            Layer::ConvTranspose1d(c) => Ok(c.run(&x)?.0),
            Layer::Relu(_) => {
                let mut x = x;
                x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
                Ok(x)
            }
            Layer::Sigmoid(_) => Ok(self_sigmoid(x)),
            Layer::Reshape(shape, _) => {
                let y = reshape_items(&x, shape)?;
                x.reshape(y)
            }
        }
    }

    /// Consumes the upstream gradient, accumulates parameter gradients and
    /// returns the input gradient.
    pub fn backward(&mut self, g: Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Dense(d) => d.backward(&g),
            Layer::Conv1d(c) => c.backward(&g),
            Layer::ConvTranspose1d(c) => c.backward(&g),
            Layer::Relu(mask) => {
                let mask = mask.take().expect("relu backward without forward");
                let mut g = g;
                for (v, on) in g.data_mut().iter_mut().zip(mask) {
                    if !on {
                        *v = T::zero();
                    }
                }
                g
            }
            Layer::Sigmoid(out) => {
                let y = out.take().expect("sigmoid backward without forward");
                let mut g = g;
                for (v, s) in g.data_mut().iter_mut().zip(y.data()) {
                    *v *= *s * (T::one() - *s);
                }
                g
            }
            Layer::Reshape(_, cache) => {
                let shape = cache.take().expect("reshape backward without forward");
                g.reshape(shape).expect("same element count")
            }
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        match self {
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            Layer::Conv1d(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::ConvTranspose1d(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv1d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::ConvTranspose1d(c) => vec![&mut c.weight, &mut c.bias],
            _ => Vec::new(),
        }
    }

    /// Drops whatever the last forward cached.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Dense(d) => d.input = None,
            Layer::Conv1d(c) => c.cache = None,
            Layer::ConvTranspose1d(c) => c.cache = None,
            Layer::Relu(m) => *m = None,
            Layer::Sigmoid(y) => *y = None,
            Layer::Reshape(_, c) => *c = None,
        }
    }

    /// Pre-activation sign pattern of the last ReLU forward, if any.
    pub fn relu_mask(&self) -> Option<&[bool]> {
        match self {
            Layer::Relu(Some(m)) => Some(m),
            _ => None,
        }
    }
}

fn self_sigmoid<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
    x
}

fn reshape_items<T: Real>(x: &Tensor<T>, item: &[usize]) -> Result<Vec<usize>> {
    let b = *x.shape().first().unwrap_or(&0);
    let per: usize = item.iter().product();
    if b * per != x.len() {
        return Err(mismatch("reshape", x.shape(), item.to_vec()));
    }
    let mut s = vec![b];
    s.extend_from_slice(item);
    Ok(s)
}

/// Layers applied in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&mut self, mut x: Tensor<T>) -> Result<Tensor<T>> {
        for l in &mut self.layers {
            x = l.forward(x)?;
        }
        Ok(x)
    }

    pub fn infer(&self, mut x: Tensor<T>) -> Result<Tensor<T>> {
        for l in &self.layers {
            x = l.infer(x)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, mut g: Tensor<T>) -> Tensor<T> {
        for l in self.layers.iter_mut().rev() {
            g = l.backward(g);
        }
        g
    }

    /// `(name, param)` pairs named `<layer index>.<weight|bias>`.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, p)| (format!("{i}.{n}"), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Zero gradients and no forward caches, as after loading.
    pub fn reset_state(&mut self) {
        self.zero_grad();
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        let cp = |p: &Param<T>| Param::new(p.value.cast::<U>());
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Layer::Dense(Dense {
                    weight: cp(&d.weight),
                    bias: cp(&d.bias),
                    input: None,
                }),
                Layer::Conv1d(c) => Layer::Conv1d(Conv1d {
                    weight: cp(&c.weight),
                    bias: cp(&c.bias),
                    geom: c.geom,
                    cache: None,
                }),
                Layer::ConvTranspose1d(c) => Layer::ConvTranspose1d(ConvTranspose1d {
                    weight: cp(&c.weight),
                    bias: cp(&c.bias),
                    geom: c.geom,
                    output_padding: c.output_padding,
                    cache: None,
                }),
                Layer::Relu(_) => Layer::Relu(None),
                Layer::Sigmoid(_) => Layer::Sigmoid(None),
                Layer::Reshape(s, _) => Layer::Reshape(s.clone(), None),
            })
            .collect();
        Sequential { layers }
    }

    /// Replaces parameter values by name; every parameter must be supplied
    /// with its current shape.
    pub fn load_params(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let names = ["weight", "bias"];
            for (p, n) in l.params_mut().into_iter().zip(names) {
                let key = format!("{i}.{n}");
                let t = lookup(&key).ok_or_else(|| Error::invalid(format!("missing tensor `{key}`")))?;
                if t.shape() != p.value.shape() {
                    return Err(mismatch("load_params", t.shape(), p.value.shape().to_vec()));
                }
                *p = Param::new(t);
            }
        }
        Ok(())
    }
}
