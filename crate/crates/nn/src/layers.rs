//! Parameterized building blocks. Each layer only records parameter names;
//! values live in a [`ParameterStore`] so the same layer definition serves
//! both precisions.

use rand::Rng;

use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParameterStore};
use crate::tensor::Tensor;
use crate::{NnError, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, bias, Init::FanIn { fan_in: d_in, gain: 1.0 }, rng)
    }

    /// A linear map whose weight and bias start at exactly zero.
    pub fn zeros<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, true, Init::Zeros, rng)
    }

    pub fn with_init<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.init(&weight, &[d_in, d_out], init, rng)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.init(&b, &[d_out], Init::Zeros, rng)?;
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(g.param(store, b)?),
            None => None,
        };
        g.linear(x, w, b)
    }
}

/// Layer normalization with a learned elementwise affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn new<T: Float, R: Rng>(store: &mut ParameterStore<T>, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.init(&gain, &[width], Init::Ones, rng)?;
        store.init(&bias, &[width], Init::Zeros, rng)?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let gain = g.param(store, &self.gain)?;
        let bias = g.param(store, &self.bias)?;
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(NnError::Heads { width, heads });
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_width, width, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_width, width, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, true, rng)?,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.q.d_out / self.heads
    }

    /// `segments` pairs query-row and key-row counts per independent sequence;
    /// pass `kv_src == q_src` with square segments for self-attention.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        q_src: Var,
        kv_src: Var,
        segments: &[(usize, usize)],
    ) -> Result<Var> {
        let q = self.q.forward(g, store, q_src)?;
        let k = self.k.forward(g, store, kv_src)?;
        let v = self.v.forward(g, store, kv_src)?;
        let a = g.attention(q, k, v, self.heads, segments)?;
        self.o.forward(g, store, a)
    }
}

/// Pre-normalized two-layer GELU MLP. Returns the branch only; callers add
/// the residual.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width, rng)?,
            up: Linear::new(store, &format!("{name}.up"), width, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, width, true, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.up.forward(g, store, h)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

/// Sinusoidal features for integer timesteps, `[cos | sin]` halves.
pub fn sinusoidal_embedding<T: Float>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); timesteps.len() * dim];
    for (r, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            data[r * dim + i] = T::of(arg.cos());
            data[r * dim + half + i] = T::of(arg.sin());
        }
    }
    Tensor::new(vec![timesteps.len(), dim], data).expect("shape matches")
}

/// Sinusoidal features followed by a learned two-layer SiLU map.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    pub freq_dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimestepEmbedder {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        freq_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            freq_dim,
            fc1: Linear::new(store, &format!("{name}.fc1"), freq_dim, width, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), width, width, true, rng)?,
        })
    }

    /// One embedding row per entry of `timesteps`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, timesteps: &[usize]) -> Result<Var> {
        let feats = g.input(sinusoidal_embedding(timesteps, self.freq_dim));
        let h = self.fc1.forward(g, store, feats)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Adaptive layer norm: `LN(x) * (1 + scale(c)) + shift(c)` with `c` the
/// SiLU of a timestep embedding. Both heads start at zero, so a fresh layer
/// is exactly a parameter-free layer norm.
#[derive(Debug, Clone)]
pub struct AdaLn {
    pub scale: Linear,
    pub shift: Linear,
}

impl AdaLn {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        cond_width: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            scale: Linear::zeros(store, &format!("{name}.scale"), cond_width, width, rng)?,
            shift: Linear::zeros(store, &format!("{name}.shift"), cond_width, width, rng)?,
        })
    }

    /// `x: [sum(rows_per_sample), D]`, `cond: [B, C]`; row block `b` of `x` is
    /// modulated by row `b` of `cond`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: Var,
        cond: Var,
        rows_per_sample: &[usize],
    ) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let c = g.silu(cond)?;
        let scale = self.scale.forward(g, store, c)?;
        let shift = self.shift.forward(g, store, c)?;
        let scale = g.repeat_rows(scale, rows_per_sample)?;
        let shift = g.repeat_rows(shift, rows_per_sample)?;
        let scaled = g.mul(n, scale)?;
        let y = g.add(n, scaled)?;
        g.add(y, shift)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let init = if zero_init { Init::Zeros } else { Init::FanIn { fan_in: in_ch * kernel * kernel, gain: 1.0 } };
        store.init(&weight, &[out_ch, in_ch, kernel, kernel], init, rng)?;
        store.init(&bias, &[out_ch], Init::Zeros, rng)?;
        Ok(Self { weight, bias, in_ch, out_ch, kernel, stride, pad })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn out_len(&self, input: usize) -> usize {
        crate::graph::conv_out_len(input, self.kernel, self.stride, self.pad)
    }
}
