//! Layers over `[batch × channels × time]` activations with hand-written
//! backward passes. Every layer caches what its backward pass needs during
//! `forward`; `infer` runs the same arithmetic without touching the cache.

use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense activation tensor `[batch × channels × len]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(batch: usize, channels: usize, len: usize) -> Self {
        Self {
            batch,
            channels,
            len,
            data: vec![0.0; batch * channels * len],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * len {
            return Err(Error::shape(
                "activation",
                format!("{batch}x{channels}x{len}"),
                data.len(),
            ));
        }
        Ok(Self {
            batch,
            channels,
            len,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.channels, self.len]
    }

    /// Elements per batch row.
    pub fn row_len(&self) -> usize {
        self.channels * self.len
    }

    pub fn row(&self, b: usize) -> &[f64] {
        let r = self.row_len();
        &self.data[b * r..(b + 1) * r]
    }

    /// Rows `indices` stacked in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.row_len());
        for &b in indices {
            data.extend_from_slice(self.row(b));
        }
        Self {
            batch: indices.len(),
            channels: self.channels,
            len: self.len,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Act, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn uniform(name: String, shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self {
            name,
            shape,
            value,
            grad: vec![0.0; n],
        }
    }

    fn filled(name: String, n: usize, v: f64) -> Self {
        Self {
            name,
            shape: vec![n],
            value: vec![v; n],
            grad: vec![0.0; n],
        }
    }
}

/// Non-trainable state saved with the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    weight: Param,
    bias: Option<Param>,
    input: Option<Act>,
}

impl Conv1d {
    /// Same-padded, stride-1 convolution; `kernel` must be odd.
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        let weight = Param::uniform(format!("{name}.weight"), vec![out_ch, in_ch, kernel], bound, rng);
        let bias = bias.then(|| Param::uniform(format!("{name}.bias"), vec![out_ch], bound, rng));
        Self {
            in_ch,
            out_ch,
            kernel,
            weight,
            bias,
            input: None,
        }
    }

    fn compute(&self, x: &Act) -> Act {
        let (t_len, pad, k) = (x.len, self.kernel / 2, self.kernel);
        let mut y = Act::zeros(x.batch, self.out_ch, t_len);
        for b in 0..x.batch {
            for o in 0..self.out_ch {
                let out = &mut y.data[(b * self.out_ch + o) * t_len..][..t_len];
                if let Some(bias) = &self.bias {
                    out.fill(bias.value[o]);
                }
                for i in 0..self.in_ch {
                    let xin = &x.data[(b * self.in_ch + i) * t_len..][..t_len];
                    let w = &self.weight.value[(o * self.in_ch + i) * k..][..k];
                    for (j, &wj) in w.iter().enumerate() {
                        // out[t] += wj * xin[t + j - pad]
                        let lo = pad.saturating_sub(j);
                        let hi = (t_len + pad).saturating_sub(j).min(t_len);
                        for t in lo..hi {
                            out[t] += wj * xin[t + j - pad];
                        }
                    }
                }
            }
        }
        y
    }

    fn backward(&mut self, g: &Act) -> Act {
        let x = self.input.as_ref().expect("conv backward before forward");
        let (t_len, pad, k) = (x.len, self.kernel / 2, self.kernel);
        let mut dx = Act::zeros(x.batch, self.in_ch, t_len);
        for b in 0..x.batch {
            for o in 0..self.out_ch {
                let go = &g.data[(b * self.out_ch + o) * t_len..][..t_len];
                if let Some(bias) = &mut self.bias {
                    bias.grad[o] += go.iter().sum::<f64>();
                }
                for i in 0..self.in_ch {
                    let xin = &x.data[(b * self.in_ch + i) * t_len..][..t_len];
                    let dxi = &mut dx.data[(b * self.in_ch + i) * t_len..][..t_len];
                    let base = (o * self.in_ch + i) * k;
                    for j in 0..k {
                        let lo = pad.saturating_sub(j);
                        let hi = (t_len + pad).saturating_sub(j).min(t_len);
                        let wj = self.weight.value[base + j];
                        let mut acc = 0.0;
                        for t in lo..hi {
                            acc += go[t] * xin[t + j - pad];
                            dxi[t + j - pad] += go[t] * wj;
                        }
                        self.weight.grad[base + j] += acc;
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    channels: usize,
    gamma: Param,
    beta: Param,
    running_mean: Buffer,
    running_var: Buffer,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm1d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(format!("{name}.gamma"), channels, 1.0),
            beta: Param::filled(format!("{name}.beta"), channels, 0.0),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![1.0; channels],
            },
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// Returns output, cache, and (in training mode) the batch mean/variance.
    fn compute(&self, x: &Act, mode: Mode) -> (Act, BnCache, Option<(Vec<f64>, Vec<f64>)>) {
        let (c_n, t_len) = (self.channels, x.len);
        let count = (x.batch * t_len) as f64;
        let mut stats = None;
        let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c_n];
                let mut var = vec![0.0; c_n];
                for c in 0..c_n {
                    let mut s = 0.0;
                    for b in 0..x.batch {
                        s += x.data[(b * c_n + c) * t_len..][..t_len].iter().sum::<f64>();
                    }
                    mean[c] = s / count;
                    let mut v = 0.0;
                    for b in 0..x.batch {
                        v += x.data[(b * c_n + c) * t_len..][..t_len]
                            .iter()
                            .map(|x| (x - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                    var[c] = v / count;
                }
                let inv = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                stats = Some((mean.clone(), var));
                (mean, inv)
            }
            Mode::Eval => (
                self.running_mean.value.clone(),
                self.running_var.value.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
            ),
        };
        let mut y = Act::zeros(x.batch, c_n, t_len);
        let mut xhat = vec![0.0; x.data.len()];
        for b in 0..x.batch {
            for c in 0..c_n {
                let off = (b * c_n + c) * t_len;
                for t in off..off + t_len {
                    let h = (x.data[t] - mean[c]) * inv_std[c];
                    xhat[t] = h;
                    y.data[t] = self.gamma.value[c] * h + self.beta.value[c];
                }
            }
        }
        (y, BnCache { xhat, inv_std, mode }, stats)
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for c in 0..self.channels {
            let rm = &mut self.running_mean.value[c];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[c];
            let rv = &mut self.running_var.value[c];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * var[c] * unbias;
        }
    }

    fn backward(&mut self, g: &Act) -> Act {
        let cache = self.cache.as_ref().expect("batch-norm backward before forward");
        let (c_n, t_len) = (self.channels, g.len);
        let count = (g.batch * t_len) as f64;
        let mut dx = Act::zeros(g.batch, c_n, t_len);
        for c in 0..c_n {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..g.batch {
                let off = (b * c_n + c) * t_len;
                for t in off..off + t_len {
                    sum_g += g.data[t];
                    sum_gx += g.data[t] * cache.xhat[t];
                }
            }
            self.gamma.grad[c] += sum_gx;
            self.beta.grad[c] += sum_g;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            for b in 0..g.batch {
                let off = (b * c_n + c) * t_len;
                for t in off..off + t_len {
                    dx.data[t] = match cache.mode {
                        Mode::Train => scale * (g.data[t] - sum_g / count - cache.xhat[t] * sum_gx / count),
                        Mode::Eval => scale * g.data[t],
                    };
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    in_f: usize,
    out_f: usize,
    weight: Param,
    bias: Param,
    input: Option<Act>,
}

impl Linear {
    pub fn new(name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_f as f64).sqrt();
        Self {
            in_f,
            out_f,
            weight: Param::uniform(format!("{name}.weight"), vec![out_f, in_f], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), vec![out_f], bound, rng),
            input: None,
        }
    }

    fn compute(&self, x: &Act) -> Result<Act> {
        if x.row_len() != self.in_f {
            return Err(Error::shape("linear input", self.in_f, x.row_len()));
        }
        let mut y = Act::zeros(x.batch, self.out_f, 1);
        for b in 0..x.batch {
            let xr = x.row(b);
            for o in 0..self.out_f {
                let w = &self.weight.value[o * self.in_f..][..self.in_f];
                y.data[b * self.out_f + o] = self.bias.value[o] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(y)
    }

    fn backward(&mut self, g: &Act) -> Act {
        let x = self.input.as_ref().expect("linear backward before forward");
        let mut dx = Act::zeros(x.batch, x.channels, x.len);
        for b in 0..x.batch {
            let xr = &x.data[b * self.in_f..][..self.in_f];
            let dxr = &mut dx.data[b * self.in_f..][..self.in_f];
            for o in 0..self.out_f {
                let go = g.data[b * self.out_f + o];
                self.bias.grad[o] += go;
                let w = &self.weight.value[o * self.in_f..][..self.in_f];
                let dw = &mut self.weight.grad[o * self.in_f..][..self.in_f];
                for k in 0..self.in_f {
                    dw[k] += go * xr[k];
                    dxr[k] += go * w[k];
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv1d),
    BatchNorm(BatchNorm1d),
    Relu { mask: Vec<bool> },
    /// Non-overlapping max over pairs; an odd trailing step is dropped.
    MaxPool { argmax: Vec<usize>, in_shape: [usize; 3] },
    /// Nearest-neighbour ×2 along time.
    Upsample,
    Dropout { rate: f64, mask: Vec<f64> },
    Linear(Linear),
}

fn relu(x: &Act) -> (Act, Vec<bool>) {
    let mask: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
    let data = x.data.iter().map(|&v| v.max(0.0)).collect();
    (Act { data, ..*x }, mask)
}

fn max_pool(x: &Act) -> (Act, Vec<usize>) {
    let out_len = x.len / 2;
    let mut y = Act::zeros(x.batch, x.channels, out_len);
    let mut argmax = Vec::with_capacity(y.data.len());
    for row in 0..x.batch * x.channels {
        for t in 0..out_len {
            let i = row * x.len + 2 * t;
            let pick = if x.data[i + 1] > x.data[i] { i + 1 } else { i };
            y.data[row * out_len + t] = x.data[pick];
            argmax.push(pick);
        }
    }
    (y, argmax)
}

fn upsample(x: &Act) -> Act {
    let mut y = Act::zeros(x.batch, x.channels, x.len * 2);
    for (i, v) in x.data.iter().enumerate() {
        y.data[2 * i] = *v;
        y.data[2 * i + 1] = *v;
    }
    y
}

impl Layer {
    fn forward(&mut self, x: Act, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Act> {
        Ok(match self {
            Layer::Conv(conv) => {
                check_channels("conv input", conv.in_ch, &x)?;
                let y = conv.compute(&x);
                conv.input = Some(x);
                y
            }
            Layer::BatchNorm(bn) => {
                check_channels("batch-norm input", bn.channels, &x)?;
                let (y, cache, stats) = bn.compute(&x, mode);
                if let Some((mean, var)) = stats {
                    bn.update_running(&mean, &var, x.batch * x.len);
                }
                bn.cache = Some(cache);
                y
            }
            Layer::Relu { mask } => {
                let (y, m) = relu(&x);
                *mask = m;
                y
            }
            Layer::MaxPool { argmax, in_shape } => {
                let (y, a) = max_pool(&x);
                *argmax = a;
                *in_shape = x.shape();
                y
            }
            Layer::Upsample => upsample(&x),
            Layer::Dropout { rate, mask } => match mode {
                Mode::Eval => {
                    mask.clear();
                    x
                }
                Mode::Train => {
                    let keep = 1.0 - *rate;
                    *mask = (0..x.data.len())
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let data = x.data.iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
                    Act { data, ..x }
                }
            },
            Layer::Linear(lin) => {
                let y = lin.compute(&x)?;
                lin.input = Some(x);
                y
            }
        })
    }

    fn infer(&self, x: &Act) -> Result<Act> {
        Ok(match self {
            Layer::Conv(conv) => {
                check_channels("conv input", conv.in_ch, x)?;
                conv.compute(x)
            }
            Layer::BatchNorm(bn) => {
                check_channels("batch-norm input", bn.channels, x)?;
                bn.compute(x, Mode::Eval).0
            }
            Layer::Relu { .. } => relu(x).0,
            Layer::MaxPool { .. } => max_pool(x).0,
            Layer::Upsample => upsample(x),
            Layer::Dropout { .. } => x.clone(),
            Layer::Linear(lin) => lin.compute(x)?,
        })
    }

    fn backward(&mut self, g: Act) -> Act {
        match self {
            Layer::Conv(conv) => conv.backward(&g),
            Layer::BatchNorm(bn) => bn.backward(&g),
            Layer::Relu { mask } => {
                let data = g.data.iter().zip(mask.iter()).map(|(v, &m)| if m { *v } else { 0.0 }).collect();
                Act { data, ..g }
            }
            Layer::MaxPool { argmax, in_shape } => {
                let [b, c, t] = *in_shape;
                let mut dx = Act::zeros(b, c, t);
                for (gv, &i) in g.data.iter().zip(argmax.iter()) {
                    dx.data[i] += gv;
                }
                dx
            }
            Layer::Upsample => {
                let mut dx = Act::zeros(g.batch, g.channels, g.len / 2);
                for (i, v) in dx.data.iter_mut().enumerate() {
                    *v = g.data[2 * i] + g.data[2 * i + 1];
                }
                dx
            }
            Layer::Dropout { mask, .. } => {
                if mask.is_empty() {
                    g
                } else {
                    let data = g.data.iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
                    Act { data, ..g }
                }
            }
            Layer::Linear(lin) => lin.backward(&g),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    fn buffers(&self) -> Vec<&Buffer> {
        match self {
            Layer::BatchNorm(bn) => vec![&bn.running_mean, &bn.running_var],
            _ => Vec::new(),
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        match self {
            Layer::BatchNorm(bn) => vec![&mut bn.running_mean, &mut bn.running_var],
            _ => Vec::new(),
        }
    }
}

fn check_channels(edge: &str, expected: usize, x: &Act) -> Result<()> {
    if x.channels != expected {
        return Err(Error::shape(edge, format!("{expected} channels"), format!("{} channels", x.channels)));
    }
    Ok(())
}

/// A stack of layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, bias: bool, rng: &mut ChaCha8Rng) {
        self.push(Layer::Conv(Conv1d::new(name, in_ch, out_ch, kernel, bias, rng)));
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) {
        self.push(Layer::BatchNorm(BatchNorm1d::new(name, channels)));
    }

    pub fn relu(&mut self) {
        self.push(Layer::Relu { mask: Vec::new() });
    }

    pub fn max_pool(&mut self) {
        self.push(Layer::MaxPool {
            argmax: Vec::new(),
            in_shape: [0; 3],
        });
    }

    pub fn upsample(&mut self) {
        self.push(Layer::Upsample);
    }

    pub fn dropout(&mut self, rate: f64) {
        self.push(Layer::Dropout { rate, mask: Vec::new() });
    }

    pub fn linear(&mut self, name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) {
        self.push(Layer::Linear(Linear::new(name, in_f, out_f, rng)));
    }

    /// Caching forward pass; dropout masks are drawn from `rng` in training mode.
    pub fn forward(&mut self, x: Act, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Act> {
        self.layers.iter_mut().try_fold(x, |h, layer| layer.forward(h, mode, rng))
    }

    /// Read-only inference pass (running batch-norm statistics, no dropout).
    pub fn infer(&self, x: &Act) -> Result<Act> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Back-propagates `g` through the cached forward pass, accumulating
    /// parameter gradients, and returns the gradient at the input.
    pub fn backward(&mut self, g: Act) -> Act {
        self.layers.iter_mut().rev().fold(g, |g, layer| layer.backward(g))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        self.layers.iter().flat_map(Layer::buffers).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.layers.iter_mut().flat_map(Layer::buffers_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Fingerprint of the piecewise-linear regime of the last forward pass
    /// (rectifier masks and pooling winners). Finite differences are only
    /// meaningful when it is unchanged by the perturbation.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for layer in &self.layers {
            match layer {
                Layer::Relu { mask } => mask.hash(&mut h),
                Layer::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn conv_matches_direct_formula() {
        let mut r = rng();
        let conv = Conv1d::new("c", 2, 3, 3, true, &mut r);
        let x = Act::from_vec(1, 2, 4, (0..8).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        let y = conv.compute(&x);
        for o in 0..3 {
            for t in 0..4 {
                let mut expected = conv.bias.as_ref().unwrap().value[o];
                for i in 0..2 {
                    for j in 0..3 {
                        let src = t as isize + j as isize - 1;
                        if (0..4).contains(&src) {
                            expected += conv.weight.value[(o * 2 + i) * 3 + j] * x.data[i * 4 + src as usize];
                        }
                    }
                }
                assert!((y.data[o * 4 + t] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Act::from_vec(1, 1, 5, vec![1.0, 3.0, 2.0, -1.0, 9.0]).unwrap();
        let (y, argmax) = max_pool(&x);
        assert_eq!(y.data, vec![3.0, 2.0]);
        assert_eq!(argmax, vec![1, 2]);
        let u = upsample(&y);
        assert_eq!(u.data, vec![3.0, 3.0, 2.0, 2.0]);
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let mut bn = BatchNorm1d::new("bn", 2);
        let x = Act::from_vec(2, 2, 3, vec![1.0, 2.0, 3.0, 10.0, 10.0, 10.0, 4.0, 5.0, 6.0, 0.0, 20.0, 10.0]).unwrap();
        let (y, _, stats) = bn.compute(&x, Mode::Train);
        let (mean, _) = stats.unwrap();
        assert!((mean[0] - 3.5).abs() < 1e-12);
        let ch0: Vec<f64> = [0, 1, 2, 6, 7, 8].iter().map(|&i| y.data[i]).collect();
        assert!(ch0.iter().sum::<f64>().abs() < 1e-12);
        bn.update_running(&[1.0, 1.0], &[2.0, 2.0], 6);
        assert!((bn.running_mean.value[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn dropout_only_in_training() {
        let mut seq = Sequential::new();
        seq.dropout(0.5);
        let x = Act::from_vec(1, 1, 64, vec![1.0; 64]).unwrap();
        let y = seq.forward(x.clone(), Mode::Eval, &mut rng()).unwrap();
        assert_eq!(y, x);
        let a = seq.forward(x.clone(), Mode::Train, &mut rng()).unwrap();
        let b = seq.forward(x.clone(), Mode::Train, &mut rng()).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().any(|&v| v == 0.0) && a.data.iter().any(|&v| v == 2.0));
    }
}
