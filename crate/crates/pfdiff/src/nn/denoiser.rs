//! Noise-prediction network: dense encoder–decoder with skips.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::{AttentionCache, AttentionGrads, TokenAttention};
use crate::nn::embed::time_embedding;
use crate::nn::linear::{Linear, LinearGrad};
use crate::nn::{silu_map, silu_prime};

/// Architecture of [`DenoiserModel`].
///
/// `hidden` must read the same forwards and backwards (encoder widths
/// mirrored by the decoder) with the single middle entry acting as the
/// bottleneck. Activations of the down path are added to the matching up
/// path activations ("skip connections"); a sinusoidal embedding of the
/// step index is linearly projected into every hidden layer before the
/// activation; the output layer is linear and zero-initialized so a fresh
/// model predicts zero noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub attention: bool,
    /// Channel width of the bottleneck token view when attention is on.
    pub attention_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            dim: 0, // set per case
            hidden: vec![256, 128, 64, 32, 64, 128, 256],
            time_dim: 32,
            attention: true,
            attention_channels: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn with_dim(dim: usize) -> Self {
        DenoiserConfig {
            dim,
            ..DenoiserConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.hidden.len();
        if self.dim == 0 {
            return Err(Error::InvalidConfig("denoiser dim must be positive".into()));
        }
        if n < 3 || n % 2 == 0 {
            return Err(Error::InvalidConfig(
                "denoiser hidden widths must have odd length >= 3".into(),
            ));
        }
        for i in 0..n / 2 {
            if self.hidden[i] != self.hidden[n - 1 - i] {
                return Err(Error::InvalidConfig(
                    "denoiser hidden widths must be symmetric".into(),
                ));
            }
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::InvalidConfig("time embedding width must be even and >= 2".into()));
        }
        if self.attention {
            let mid = self.hidden[n / 2];
            if self.attention_channels == 0 || mid % self.attention_channels != 0 {
                return Err(Error::InvalidConfig(
                    "bottleneck width must be divisible by attention channels".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The ε-predictor: maps a noisy sample and its step index to predicted
/// noise of the same dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    /// Hidden layers then the output layer (`hidden.len() + 1` entries).
    pub layers: Vec<Linear>,
    /// One embedding projection per hidden layer.
    pub time_proj: Vec<Linear>,
    pub attention: Option<TokenAttention>,
}

/// Forward intermediates for one batch.
pub struct DenoiserCache {
    x: Array2<f64>,
    emb: Array2<f64>,
    /// Pre-activation of each hidden layer.
    z: Vec<Array2<f64>>,
    /// Output of each hidden layer as fed to the next (post activation,
    /// post attention/skip).
    a: Vec<Array2<f64>>,
    /// Bottleneck activation before the attention residual.
    bottleneck_in: Option<Array2<f64>>,
    attn: Option<AttentionCache>,
}

/// Gradients shaped like [`DenoiserModel`], same parameter order.
pub struct DenoiserGrads {
    pub layers: Vec<LinearGrad>,
    pub time_proj: Vec<LinearGrad>,
    pub attention: Option<AttentionGrads>,
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut fan_in = config.dim;
        for &w in &config.hidden {
            layers.push(Linear::new(rng, fan_in, w));
            fan_in = w;
        }
        layers.push(Linear::zeroed(fan_in, config.dim));
        let time_proj = config
            .hidden
            .iter()
            .map(|&w| Linear::new(rng, config.time_dim, w))
            .collect();
        let attention = if config.attention {
            let mid = config.hidden[config.hidden.len() / 2];
            Some(TokenAttention::new(
                rng,
                mid / config.attention_channels,
                config.attention_channels,
            ))
        } else {
            None
        };
        Ok(DenoiserModel {
            config,
            layers,
            time_proj,
            attention,
        })
    }

    fn mid(&self) -> usize {
        self.config.hidden.len() / 2
    }

    /// Build the batch embedding matrix for per-row step indices.
    fn embed(&self, t: &[usize]) -> Array2<f64> {
        let mut e = Array2::zeros((t.len(), self.config.time_dim));
        for (r, &ti) in t.iter().enumerate() {
            e.row_mut(r).assign(&time_embedding(ti, self.config.time_dim));
        }
        e
    }

    /// Predict noise for a batch. `x: (B, dim)`, `t` one step index per row.
    pub fn forward(&self, x: &Array2<f64>, t: &[usize]) -> Array2<f64> {
        self.forward_cached(x, t).0
    }

    /// Forward pass retaining everything the backward pass needs.
    pub fn forward_cached(&self, x: &Array2<f64>, t: &[usize]) -> (Array2<f64>, DenoiserCache) {
        assert_eq!(x.ncols(), self.config.dim, "denoiser input width mismatch");
        assert_eq!(x.nrows(), t.len(), "one step index per batch row");
        let n = self.config.hidden.len();
        let mid = self.mid();
        let emb = self.embed(t);
        let mut z = Vec::with_capacity(n);
        let mut a: Vec<Array2<f64>> = Vec::with_capacity(n);
        let mut bottleneck_in = None;
        let mut attn_cache = None;
        let mut h = x.clone();
        for i in 0..n {
            let zi = self.layers[i].forward(&h) + self.time_proj[i].forward(&emb);
            let mut ai = silu_map(&zi);
            if i == mid {
                if let Some(att) = &self.attention {
                    bottleneck_in = Some(ai.clone());
                    let (y, c) = att.forward_cached(&ai);
                    ai += &y;
                    attn_cache = Some(c);
                }
            }
            if i > mid {
                ai += &a[n - 1 - i];
            }
            z.push(zi);
            h = ai.clone();
            a.push(ai);
        }
        let out = self.layers[n].forward(&h);
        (
            out,
            DenoiserCache {
                x: x.clone(),
                emb,
                z,
                a,
                bottleneck_in,
                attn: attn_cache,
            },
        )
    }

    /// Reverse-mode pass. Returns parameter gradients and the gradient at
    /// the input batch.
    pub fn backward(&self, cache: &DenoiserCache, gy: &Array2<f64>) -> (DenoiserGrads, Array2<f64>) {
        let n = self.config.hidden.len();
        let mid = self.mid();
        let mut grads = self.zero_grads();
        let mut skip: Vec<Option<Array2<f64>>> = vec![None; n];

        let mut g = self.layers[n].backward(&cache.a[n - 1], gy, &mut grads.layers[n]);
        for i in (0..n).rev() {
            let mut ga = g;
            if let Some(s) = skip[i].take() {
                ga += &s;
            }
            if i > mid {
                // The same upstream gradient also flows into the skip source.
                let src = n - 1 - i;
                skip[src] = Some(match skip[src].take() {
                    Some(acc) => acc + &ga,
                    None => ga.clone(),
                });
            }
            let gs = if i == mid && self.attention.is_some() {
                let att = self.attention.as_ref().unwrap();
                let gin = att.backward(
                    cache.attn.as_ref().unwrap(),
                    &ga,
                    grads.attention.as_mut().unwrap(),
                );
                debug_assert!(cache.bottleneck_in.is_some());
                ga + &gin
            } else {
                ga
            };
            let gz = &gs * &cache.z[i].mapv(silu_prime);
            self.time_proj[i].backward(&cache.emb, &gz, &mut grads.time_proj[i]);
            let input = if i == 0 { &cache.x } else { &cache.a[i - 1] };
            g = self.layers[i].backward(input, &gz, &mut grads.layers[i]);
        }
        (grads, g)
    }

    pub fn zero_grads(&self) -> DenoiserGrads {
        DenoiserGrads {
            layers: self.layers.iter().map(Linear::zero_grad).collect(),
            time_proj: self.time_proj.iter().map(Linear::zero_grad).collect(),
            attention: self.attention.as_ref().map(TokenAttention::zero_grads),
        }
    }

    /// Parameters in documented order: hidden+output layers (w then b each),
    /// then time projections (w, b), then attention (wq, wk, wv, wo).
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut p = Vec::new();
        for l in self.layers.iter().chain(self.time_proj.iter()) {
            p.push(&l.w);
            p.push(&l.b);
        }
        if let Some(a) = &self.attention {
            p.extend([&a.wq, &a.wk, &a.wv, &a.wo]);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p: Vec<&mut Array2<f64>> = Vec::new();
        for l in self.layers.iter_mut().chain(self.time_proj.iter_mut()) {
            p.push(&mut l.w);
            p.push(&mut l.b);
        }
        if let Some(a) = &mut self.attention {
            p.push(&mut a.wq);
            p.push(&mut a.wk);
            p.push(&mut a.wv);
            p.push(&mut a.wo);
        }
        p
    }

    pub fn param_count(&self) -> usize {
        crate::nn::param_count(&self.params())
    }
}

impl DenoiserGrads {
    /// Same order as [`DenoiserModel::params`].
    pub fn flat(&self) -> Vec<&Array2<f64>> {
        let mut g = Vec::new();
        for l in self.layers.iter().chain(self.time_proj.iter()) {
            g.push(&l.w);
            g.push(&l.b);
        }
        if let Some(a) = &self.attention {
            g.extend([&a.wq, &a.wk, &a.wv, &a.wo]);
        }
        g
    }

    /// Scale all gradients (e.g. by 1/batch).
    pub fn scale(&mut self, s: f64) {
        for l in self.layers.iter_mut().chain(self.time_proj.iter_mut()) {
            l.w *= s;
            l.b *= s;
        }
        if let Some(a) = &mut self.attention {
            a.wq *= s;
            a.wk *= s;
            a.wv *= s;
            a.wo *= s;
        }
    }

    pub fn add(&mut self, other: &DenoiserGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
        for (a, b) in self.time_proj.iter_mut().zip(&other.time_proj) {
            a.w += &b.w;
            a.b += &b.b;
        }
        if let (Some(a), Some(b)) = (&mut self.attention, &other.attention) {
            a.wq += &b.wq;
            a.wk += &b.wk;
            a.wv += &b.wv;
            a.wo += &b.wo;
        }
    }
}
