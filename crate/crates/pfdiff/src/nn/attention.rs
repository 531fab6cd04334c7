//! Single-head self-attention over a token view of the bottleneck vector.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Minimal dot-product self-attention. The bottleneck activation of width
/// `tokens·channels` is reshaped to `tokens × channels`, attended with one
/// head (no biases), projected back, and flattened; the caller adds the
/// residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenAttention {
    pub tokens: usize,
    pub channels: usize,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

/// Per-batch forward intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x_tok: Vec<Array2<f64>>,
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    attn: Vec<Array2<f64>>, // softmax rows
    o: Vec<Array2<f64>>,    // attn·v
}

/// Gradients shaped like [`TokenAttention`].
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

impl TokenAttention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, tokens: usize, channels: usize) -> Self {
        let limit = (1.0 / channels as f64).sqrt();
        let mut init = || Array2::from_shape_fn((channels, channels), |_| rng.gen_range(-limit..limit));
        TokenAttention {
            tokens,
            channels,
            wq: init(),
            wk: init(),
            wv: init(),
            wo: init(),
        }
    }

    pub fn width(&self) -> usize {
        self.tokens * self.channels
    }

    pub fn param_count(&self) -> usize {
        4 * self.channels * self.channels
    }

    fn tokenize(&self, row: ndarray::ArrayView1<f64>) -> Array2<f64> {
        Array2::from_shape_fn((self.tokens, self.channels), |(i, c)| row[i * self.channels + c])
    }

    /// `x: (B, tokens·channels)` → same shape, plus cache.
    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        assert_eq!(x.ncols(), self.width(), "attention width mismatch");
        let b = x.nrows();
        let scale = 1.0 / (self.channels as f64).sqrt();
        let mut out = Array2::zeros((b, self.width()));
        let mut cache = AttentionCache {
            x_tok: Vec::with_capacity(b),
            q: Vec::with_capacity(b),
            k: Vec::with_capacity(b),
            v: Vec::with_capacity(b),
            attn: Vec::with_capacity(b),
            o: Vec::with_capacity(b),
        };
        for r in 0..b {
            let x_tok = self.tokenize(x.row(r));
            let q = x_tok.dot(&self.wq);
            let k = x_tok.dot(&self.wk);
            let v = x_tok.dot(&self.wv);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            let mut attn = scores;
            for mut row in attn.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|s| (s - m).exp());
                let z: f64 = row.sum();
                row.mapv_inplace(|s| s / z);
            }
            let o = attn.dot(&v);
            let y = o.dot(&self.wo);
            for i in 0..self.tokens {
                for c in 0..self.channels {
                    out[[r, i * self.channels + c]] = y[[i, c]];
                }
            }
            cache.x_tok.push(x_tok);
            cache.q.push(q);
            cache.k.push(k);
            cache.v.push(v);
            cache.attn.push(attn);
            cache.o.push(o);
        }
        (out, cache)
    }

    /// Gradient at the input given the gradient at the output; parameter
    /// gradients accumulate into `grads`.
    pub fn backward(&self, cache: &AttentionCache, gy: &Array2<f64>, grads: &mut AttentionGrads) -> Array2<f64> {
        let b = gy.nrows();
        let scale = 1.0 / (self.channels as f64).sqrt();
        let mut gx = Array2::zeros((b, self.width()));
        for r in 0..b {
            let gy_tok = self.tokenize(gy.row(r));
            let (x_tok, q, k, v, attn, o) = (
                &cache.x_tok[r],
                &cache.q[r],
                &cache.k[r],
                &cache.v[r],
                &cache.attn[r],
                &cache.o[r],
            );
            grads.wo += &o.t().dot(&gy_tok);
            let go = gy_tok.dot(&self.wo.t());
            let ga = go.dot(&v.t());
            let gv = attn.t().dot(&go);
            // Softmax backward row-wise: gS_ij = A_ij (gA_ij − Σ_k gA_ik A_ik).
            let mut gs = Array2::zeros(ga.raw_dim());
            for i in 0..self.tokens {
                let dot: f64 = (0..self.tokens).map(|j| ga[[i, j]] * attn[[i, j]]).sum();
                for j in 0..self.tokens {
                    gs[[i, j]] = attn[[i, j]] * (ga[[i, j]] - dot) * scale;
                }
            }
            let gq = gs.dot(k);
            let gk = gs.t().dot(q);
            grads.wq += &x_tok.t().dot(&gq);
            grads.wk += &x_tok.t().dot(&gk);
            grads.wv += &x_tok.t().dot(&gv);
            let gx_tok = gq.dot(&self.wq.t()) + gk.dot(&self.wk.t()) + gv.dot(&self.wv.t());
            for i in 0..self.tokens {
                for c in 0..self.channels {
                    gx[[r, i * self.channels + c]] = gx_tok[[i, c]];
                }
            }
        }
        gx
    }

    pub fn zero_grads(&self) -> AttentionGrads {
        let z = || Array2::zeros((self.channels, self.channels));
        AttentionGrads {
            wq: z(),
            wk: z(),
            wv: z(),
            wo: z(),
        }
    }
}
