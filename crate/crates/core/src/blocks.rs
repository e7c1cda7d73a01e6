//! Backbone plugins at toy tensor scale: the global context block and
//! single-head attention over sinusoidally position-encoded features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm epsilon inside the context transform.
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_REDUCTION: usize = 16;

/// Parameters of a global context block over `C` channels.
///
/// Context modelling: a 1×1 conv to one channel gives per-position key
/// logits, softmax over all positions pools a `C`-vector. Transform: 1×1 conv
/// `C → C/r`, layer norm, ReLU, 1×1 conv `C/r → C`; the result is added to
/// every position.
#[derive(Debug, Clone, PartialEq)]
pub struct GcbParams {
    pub key_weight: Vec<f64>,
    pub key_bias: f64,
    /// `(hidden, C)` row-major.
    pub down_weight: Vec<f64>,
    pub down_bias: Vec<f64>,
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
    /// `(C, hidden)` row-major.
    pub up_weight: Vec<f64>,
    pub up_bias: Vec<f64>,
}

impl GcbParams {
    pub fn hidden_for(channels: usize, ratio: usize) -> usize {
        (channels / ratio.max(1)).max(1)
    }

    /// Zero transform: the block reduces to the identity.
    pub fn zeros(channels: usize, ratio: usize) -> Self {
        let hid = Self::hidden_for(channels, ratio);
        Self {
            key_weight: vec![0.0; channels],
            key_bias: 0.0,
            down_weight: vec![0.0; hid * channels],
            down_bias: vec![0.0; hid],
            ln_gamma: vec![1.0; hid],
            ln_beta: vec![0.0; hid],
            up_weight: vec![0.0; channels * hid],
            up_bias: vec![0.0; channels],
        }
    }

    /// Uniform(-scale, scale) parameters from a seed.
    pub fn random(channels: usize, ratio: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
        let hid = Self::hidden_for(channels, ratio);
        let key_weight = draw(channels);
        let key_bias = draw(1)[0];
        let down_weight = draw(hid * channels);
        let down_bias = draw(hid);
        let ln_gamma = draw(hid).into_iter().map(|v| 1.0 + v).collect();
        let ln_beta = draw(hid);
        let up_weight = draw(channels * hid);
        let up_bias = draw(channels);
        Self {
            key_weight,
            key_bias,
            down_weight,
            down_bias,
            ln_gamma,
            ln_beta,
            up_weight,
            up_bias,
        }
    }

    pub fn channels(&self) -> usize {
        self.key_weight.len()
    }

    pub fn hidden(&self) -> usize {
        self.down_bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h) = (self.channels(), self.hidden());
        if c == 0 || h == 0 {
            return Err(Error::Empty("context block channels"));
        }
        let ok = self.down_weight.len() == h * c
            && self.ln_gamma.len() == h
            && self.ln_beta.len() == h
            && self.up_weight.len() == c * h
            && self.up_bias.len() == c;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "inconsistent context block parameters for C={c}, hidden={h}"
            )));
        }
        Ok(())
    }
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Attention weights over the `H·W` positions and the pooled context vector.
pub fn context_pool(x: &Tensor, p: &GcbParams) -> Result<(Vec<f64>, Vec<f64>)> {
    p.validate()?;
    let (c, h, w) = x.dims3()?;
    if c != p.channels() {
        return Err(Error::ShapeMismatch(format!(
            "context block built for {} channels, input has {c}",
            p.channels()
        )));
    }
    let n = h * w;
    let data = x.data();
    let logits: Vec<f64> = (0..n)
        .map(|j| p.key_bias + (0..c).map(|ch| p.key_weight[ch] * data[ch * n + j]).sum::<f64>())
        .collect();
    let weights = softmax(&logits);
    let pooled = (0..c)
        .map(|ch| (0..n).map(|j| weights[j] * data[ch * n + j]).sum())
        .collect();
    Ok((weights, pooled))
}

fn context_transform(pooled: &[f64], p: &GcbParams) -> Vec<f64> {
    let (c, hid) = (p.channels(), p.hidden());
    let z: Vec<f64> = (0..hid)
        .map(|i| p.down_bias[i] + (0..c).map(|j| p.down_weight[i * c + j] * pooled[j]).sum::<f64>())
        .collect();
    let mean = z.iter().sum::<f64>() / hid as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hid as f64;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let a: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, v)| (p.ln_gamma[i] * (v - mean) * inv + p.ln_beta[i]).max(0.0))
        .collect();
    (0..c)
        .map(|i| p.up_bias[i] + (0..hid).map(|j| p.up_weight[i * hid + j] * a[j]).sum::<f64>())
        .collect()
}

/// `x + transform(context_pool(x))`, broadcast over positions.
pub fn global_context_block(x: &Tensor, p: &GcbParams) -> Result<Tensor> {
    let (_, pooled) = context_pool(x, p)?;
    let add = context_transform(&pooled, p);
    let (_, h, w) = x.dims3()?;
    let n = h * w;
    let mut out = x.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(n).enumerate() {
        chunk.iter_mut().for_each(|v| *v += add[ch]);
    }
    Ok(out)
}

/// Sinusoidal encoding over row-major flattened positions `p = y·w + x`:
/// channel `2i` is `sin(p / 10000^(2i/c))`, channel `2i + 1` the cosine.
pub fn positional_encoding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c == 0 || !c.is_multiple_of(2) {
        return Err(Error::invalid(format!("channel count must be even and positive, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("spatial size must be positive"));
    }
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, pos) = (i[0], (i[1] * w + i[2]) as f64);
        let pair = (ch / 2 * 2) as f64;
        let angle = pos / 10000f64.powf(pair / c as f64);
        if ch % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Square query/key/value projections; scores are scaled by `1/√C`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `(C, C)` row-major each.
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    channels: usize,
}

impl AttentionParams {
    pub fn new(channels: usize, query: Vec<f64>, key: Vec<f64>, value: Vec<f64>) -> Result<Self> {
        let n = channels * channels;
        if channels == 0 || query.len() != n || key.len() != n || value.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "attention projections must be {channels}x{channels}"
            )));
        }
        if query.iter().chain(&key).chain(&value).any(|v| !v.is_finite()) {
            return Err(Error::invalid("attention projections must be finite"));
        }
        Ok(Self {
            query,
            key,
            value,
            channels,
        })
    }

    pub fn identity(channels: usize) -> Self {
        let eye: Vec<f64> = (0..channels * channels)
            .map(|i| if i / channels == i % channels { 1.0 } else { 0.0 })
            .collect();
        Self {
            query: eye.clone(),
            key: eye.clone(),
            value: eye,
            channels,
        }
    }

    pub fn random(channels: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> {
            (0..channels * channels)
                .map(|_| rng.random_range(-scale..scale))
                .collect()
        };
        let (query, key, value) = (draw(), draw(), draw());
        Self {
            query,
            key,
            value,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.channels as f64).sqrt()
    }
}

fn project(m: &[f64], x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * n];
    for i in 0..c {
        for k in 0..c {
            let a = m[i * c + k];
            if a == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += a * x[k * n + j];
            }
        }
    }
    out
}

/// Row-stochastic `(N, N)` attention matrix `softmax(QᵀK / √C)` for a `(C, N)` input.
pub fn attention_weights(x: &Tensor, p: &AttentionParams) -> Result<Vec<Vec<f64>>> {
    let (c, n) = attention_dims(x, p)?;
    let q = project(&p.query, x.data(), c, n);
    let k = project(&p.key, x.data(), c, n);
    let scale = p.scale();
    Ok((0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..n)
                .map(|j| scale * (0..c).map(|ch| q[ch * n + i] * k[ch * n + j]).sum::<f64>())
                .collect();
            softmax(&logits)
        })
        .collect())
}

fn attention_dims(x: &Tensor, p: &AttentionParams) -> Result<(usize, usize)> {
    match x.shape()[..] {
        [c, n] if c == p.channels() => Ok((c, n)),
        _ => Err(Error::ShapeMismatch(format!(
            "attention expects ({}, N) input, got {:?}",
            p.channels(),
            x.shape()
        ))),
    }
}

/// Single-head self-attention over the columns of a `(C, N)` tensor:
/// `out[:, i] = Σ_j a_ij · V[:, j]`.
pub fn single_head_attention(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (c, n) = attention_dims(x, p)?;
    let a = attention_weights(x, p)?;
    let v = project(&p.value, x.data(), c, n);
    let mut out = vec![0.0; c * n];
    for (i, row) in a.iter().enumerate() {
        for ch in 0..c {
            out[ch * n + i] = row.iter().enumerate().map(|(j, w)| w * v[ch * n + j]).sum();
        }
    }
    Tensor::new(vec![c, n], out)
}

/// Attention plugin on a `(C, H, W)` map: add the positional encoding,
/// attend over the flattened positions, and restore the spatial shape.
pub fn attention_plugin(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let encoded = x.add(&positional_encoding(h, w, c)?)?;
    let flat = encoded.reshape(vec![c, h * w])?;
    single_head_attention(&flat, p)?.reshape(vec![c, h, w])
}
