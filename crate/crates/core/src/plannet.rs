//! The layout planner: a transformer denoiser over the 5 x `E_MAX` token
//! grid, its training objective, and the constrained reverse sampler.

use std::path::Path;

use ppg_nn::graph::Targets;
use ppg_nn::layers::{AdaLn, FeedForward, LayerNorm, Linear, MultiHeadAttention, TimestepEmbedder};
use ppg_nn::{AdamW, Float, Graph, Init, ParameterStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_step_distribution, sample_categorical, DiffusionSchedule, ScheduleKind};
use crate::embed::{EmbeddingBundle, HASH_DIM};
use crate::layout::{AttributeVocabulary, Category, TokenGrid, ATTR_NAMES, E_MAX, N_ATTRS};
use crate::{Error, Result};

/// What the output head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// Clean tokens `z_0`; the reverse step marginalizes the posterior.
    #[default]
    X0,
    /// `z_{t-1}` directly, trained against the exact posterior.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub heads: usize,
    pub width: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub t_p: usize,
    pub e_max: usize,
    pub vocab: AttributeVocabulary,
    /// Width of the incoming text/image embeddings.
    pub cond_dim: usize,
    pub freq_dim: usize,
    #[serde(default)]
    pub parameterization: Parameterization,
    /// Learned per-slot position embedding; off only for ablations.
    #[serde(default = "yes")]
    pub slot_embedding: bool,
}

fn yes() -> bool {
    true
}

impl DecoderConfig {
    pub fn paper() -> Self {
        Self {
            blocks: 4,
            heads: 8,
            width: 512,
            hidden: 2048,
            dropout: 0.1,
            t_p: 100,
            e_max: E_MAX,
            vocab: AttributeVocabulary::default(),
            cond_dim: HASH_DIM,
            freq_dim: 128,
            parameterization: Parameterization::X0,
            slot_embedding: true,
        }
    }

    pub fn desk() -> Self {
        Self { blocks: 2, heads: 4, width: 64, hidden: 256, dropout: 0.0, t_p: 20, freq_dim: 32, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 || self.hidden == 0 || self.t_p == 0 {
            return Err(Error::invalid("decoder sizes must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if self.e_max != E_MAX {
            return Err(Error::invalid(format!("e_max is fixed at {E_MAX}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.e_max * N_ATTRS
    }

    /// Head width for attribute `a`: regular states plus MASK.
    pub fn head_width(&self, a: usize) -> usize {
        self.vocab.k_attr(a)
    }
}

/// One independent chain per attribute; timesteps are shared.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerSchedules {
    pub attrs: Vec<DiffusionSchedule>,
}

impl PlannerSchedules {
    pub fn new(t_p: usize, vocab: &AttributeVocabulary, kind: ScheduleKind) -> Result<Self> {
        let cat = DiffusionSchedule::new(t_p, vocab.states(0), kind)?;
        let geo = DiffusionSchedule::new(t_p, vocab.bins_geometry, kind)?;
        let attrs = (0..N_ATTRS).map(|a| if a == 0 { cat.clone() } else { geo.clone() }).collect();
        Ok(Self { attrs })
    }

    pub fn t_max(&self) -> usize {
        self.attrs[0].t_max
    }
}

#[derive(Debug, Clone)]
struct Block {
    ada: AdaLn,
    sa: MultiHeadAttention,
    ca_norm: LayerNorm,
    ca: MultiHeadAttention,
    ff: FeedForward,
}

/// Parameter layout of the decoder. Values live in a `ParameterStore`.
#[derive(Debug, Clone)]
pub struct LayoutDecoder {
    pub cfg: DecoderConfig,
    offsets: [usize; N_ATTRS],
    cond_proj: Linear,
    time: TimestepEmbedder,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    heads: Vec<Linear>,
}

const TOKEN_TABLE: &str = "embed.tokens";
const SLOT_TABLE: &str = "embed.slot";
const ATTR_TABLE: &str = "embed.attr";
const COND_TYPE: &str = "cond.type";

/// Per-token targets for one training batch.
#[derive(Debug, Clone)]
pub struct CorruptedBatch {
    pub noisy: Vec<TokenGrid>,
    pub clean: Vec<TokenGrid>,
}

impl CorruptedBatch {
    pub fn corrupted(&self, b: usize, slot: usize, a: usize) -> bool {
        self.noisy[b].tokens[slot][a] != self.clean[b].tokens[slot][a]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Mean cross-entropy over corrupted tokens.
    pub corrupt_ce: f64,
    /// Mean of `ln K_a` over the same tokens: the loss of a uniform guess.
    pub uniform_ce: f64,
    pub n_corrupt: usize,
    pub grad_norm: f64,
}

impl LayoutDecoder {
    pub fn new<T: Float, R: Rng>(cfg: DecoderConfig, store: &mut ParameterStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let mut offsets = [0; N_ATTRS];
        let mut rows = 0;
        for (a, o) in offsets.iter_mut().enumerate() {
            *o = rows;
            rows += cfg.vocab.k_attr(a);
        }
        let small = Init::Normal { std: 0.02 };
        store.init(TOKEN_TABLE, &[rows, w], Init::Normal { std: 1.0 / (w as f64).sqrt() * 2.0 }, rng)?;
        store.init(SLOT_TABLE, &[cfg.e_max, w], small, rng)?;
        store.init(ATTR_TABLE, &[N_ATTRS, w], small, rng)?;
        store.init(COND_TYPE, &[2, w], small, rng)?;
        let cond_proj = Linear::new(store, "cond.proj", cfg.cond_dim, w, true, rng)?;
        let time = TimestepEmbedder::new(store, "time", cfg.freq_dim, w, rng)?;
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            let p = format!("block{b}");
            blocks.push(Block {
                ada: AdaLn::new(store, &format!("{p}.ada"), w, w, rng)?,
                sa: MultiHeadAttention::new(store, &format!("{p}.sa"), w, w, cfg.heads, rng)?,
                ca_norm: LayerNorm::new(store, &format!("{p}.ca_norm"), w, rng)?,
                ca: MultiHeadAttention::new(store, &format!("{p}.ca"), w, w, cfg.heads, rng)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), w, cfg.hidden, rng)?,
            });
        }
        let out_norm = LayerNorm::new(store, "out.norm", w, rng)?;
        let heads = (0..N_ATTRS)
            .map(|a| Linear::new(store, &format!("out.head.{}", ATTR_NAMES[a]), w, cfg.head_width(a), true, rng))
            .collect::<ppg_nn::Result<Vec<_>>>()?;
        Ok(Self { cfg, offsets, cond_proj, time, blocks, out_norm, heads })
    }

    /// Decoder definition for an existing store, checking every parameter
    /// is present with the expected shape.
    pub fn bind<T: Float>(cfg: DecoderConfig, store: &ParameterStore<T>) -> Result<Self> {
        let mut scratch = ParameterStore::<T>::new();
        let dec = Self::new(cfg, &mut scratch, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in scratch.iter() {
            match store.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::invalid(format!(
                        "checkpoint parameter `{name}` has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("checkpoint lacks parameter `{name}`"))),
            }
        }
        Ok(dec)
    }

    /// Builds the forward pass for a batch and returns per-attribute logits,
    /// each `[B * E_MAX, head_width(a)]` in slot order.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        grids: &[&TokenGrid],
        conds: &[&EmbeddingBundle],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Var>> {
        let cfg = &self.cfg;
        let b = grids.len();
        if b == 0 || conds.len() != b {
            return Err(Error::invalid(format!("batch of {b} grids with {} embedding bundles", conds.len())));
        }
        let n_tok = cfg.tokens();
        let mut ids = Vec::with_capacity(b * n_tok);
        let mut slots = Vec::with_capacity(b * n_tok);
        let mut attrs = Vec::with_capacity(b * n_tok);
        let mut timesteps = Vec::with_capacity(b);
        for grid in grids {
            grid.check(&cfg.vocab)?;
            if grid.timestep > cfg.t_p {
                return Err(Error::invalid(format!("grid timestep {} exceeds T_P = {}", grid.timestep, cfg.t_p)));
            }
            timesteps.push(grid.timestep);
            for (s, row) in grid.tokens.iter().enumerate() {
                for (a, &z) in row.iter().enumerate() {
                    ids.push(self.offsets[a] + z as usize);
                    slots.push(s);
                    attrs.push(a);
                }
            }
        }

        // token, slot and attribute embeddings
        let table = g.param(store, TOKEN_TABLE)?;
        let mut e = g.gather_rows(table, &ids)?;
        if cfg.slot_embedding {
            let st = g.param(store, SLOT_TABLE)?;
            let s = g.gather_rows(st, &slots)?;
            e = g.add(e, s)?;
        }
        let at = g.param(store, ATTR_TABLE)?;
        let a = g.gather_rows(at, &attrs)?;
        e = g.add(e, a)?;

        // conditioning tokens: CAT(e_T, e_I) per sample
        let mut cond_rows = Vec::new();
        let mut cond_types = Vec::new();
        let mut cond_lens = Vec::with_capacity(b);
        for c in conds {
            if c.d != cfg.cond_dim {
                return Err(Error::invalid(format!("embedding width {} does not match decoder cond_dim {}", c.d, cfg.cond_dim)));
            }
            cond_rows.extend(c.text.iter().chain(&c.image).map(|v| T::of(*v as f64)));
            cond_types.extend(std::iter::repeat(0).take(c.text_len()));
            cond_types.extend(std::iter::repeat(1).take(c.image_len()));
            cond_lens.push(c.rows());
        }
        let total_cond: usize = cond_lens.iter().sum();
        let ctx = if total_cond > 0 {
            let raw = g.input(Tensor::new(vec![total_cond, cfg.cond_dim], cond_rows)?);
            let p = self.cond_proj.forward(g, store, raw)?;
            let tt = g.param(store, COND_TYPE)?;
            let ty = g.gather_rows(tt, &cond_types)?;
            Some(g.add(p, ty)?)
        } else {
            None
        };

        let temb = self.time.forward(g, store, &timesteps)?;
        let rows = vec![n_tok; b];
        let self_segments: Vec<(usize, usize)> = vec![(n_tok, n_tok); b];
        let cross_segments: Vec<(usize, usize)> = cond_lens.iter().map(|&l| (n_tok, l)).collect();
        for blk in &self.blocks {
            let h = blk.ada.forward(g, store, e, temb, &rows)?;
            let sa = blk.sa.forward(g, store, h, h, &self_segments)?;
            let sa = g.dropout(sa, cfg.dropout, rng)?;
            let a = g.add(h, sa)?;
            let u = match ctx {
                Some(ctx) => {
                    let n = blk.ca_norm.forward(g, store, a)?;
                    let ca = blk.ca.forward(g, store, n, ctx, &cross_segments)?;
                    let ca = g.dropout(ca, cfg.dropout, rng)?;
                    g.add(a, ca)?
                }
                None => a,
            };
            let ff = blk.ff.forward(g, store, u)?;
            let ff = g.dropout(ff, cfg.dropout, rng)?;
            e = g.add(u, ff)?;
        }
        let h = self.out_norm.forward(g, store, e)?;
        let mut logits = Vec::with_capacity(N_ATTRS);
        for (a, head) in self.heads.iter().enumerate() {
            let idx: Vec<usize> = (0..b * cfg.e_max).map(|r| r * N_ATTRS + a).collect();
            let ha = g.gather_rows(h, &idx)?;
            logits.push(head.forward(g, store, ha)?);
        }
        Ok(logits)
    }

    /// Eval-mode logits for one grid: `logits[a]` is `E_MAX x head_width(a)`.
    pub fn denoise_step(
        &self,
        store: &ParameterStore<f32>,
        grid: &TokenGrid,
        t: usize,
        emb: &EmbeddingBundle,
    ) -> Result<Vec<Tensor<f32>>> {
        if grid.timestep != t {
            return Err(Error::invalid(format!("grid is at timestep {}, asked to denoise t = {t}", grid.timestep)));
        }
        let mut g = Graph::new(false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, store, &[grid], &[emb], &mut rng)?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Training loss graph for a corrupted batch.
    pub fn loss<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        batch: &CorruptedBatch,
        conds: &[&EmbeddingBundle],
        schedules: &PlannerSchedules,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossOutput> {
        let cfg = &self.cfg;
        let b = batch.noisy.len();
        let grids: Vec<&TokenGrid> = batch.noisy.iter().collect();
        let logits = self.forward(g, store, &grids, conds, rng)?;
        let mut n_c = 0usize;
        let mut n_u = 0usize;
        for bi in 0..b {
            for s in 0..cfg.e_max {
                for a in 0..N_ATTRS {
                    if batch.corrupted(bi, s, a) {
                        n_c += 1;
                    } else {
                        n_u += 1;
                    }
                }
            }
        }
        let w_c = if n_c > 0 { 1.0 / n_c as f64 } else { 0.0 };
        let w_u = if n_u > 0 { UNCORRUPTED_WEIGHT / n_u as f64 } else { 0.0 };
        let mut total: Option<Var> = None;
        for (a, &lg) in logits.iter().enumerate() {
            let k = cfg.vocab.states(a);
            let mut weights = Vec::with_capacity(b * cfg.e_max);
            for bi in 0..b {
                for s in 0..cfg.e_max {
                    weights.push(T::of(if batch.corrupted(bi, s, a) { w_c } else { w_u }));
                }
            }
            let (targets, n_valid) = match cfg.parameterization {
                Parameterization::X0 => {
                    let t: Vec<usize> =
                        (0..b).flat_map(|bi| (0..cfg.e_max).map(move |s| (bi, s))).map(|(bi, s)| batch.clean[bi].tokens[s][a] as usize).collect();
                    (Targets::Hard(t), k)
                }
                Parameterization::Direct => {
                    let sched = &schedules.attrs[a];
                    let mut soft = Vec::with_capacity(b * cfg.e_max * (k + 1));
                    let mut post = vec![0.0; k + 1];
                    for bi in 0..b {
                        let t = batch.noisy[bi].timestep;
                        for s in 0..cfg.e_max {
                            let zt = batch.noisy[bi].tokens[s][a] as usize;
                            let z0 = batch.clean[bi].tokens[s][a] as usize;
                            if t <= 1 {
                                post.iter_mut().enumerate().for_each(|(i, p)| *p = if i == z0 { 1.0 } else { 0.0 });
                            } else {
                                sched.posterior_into(zt, z0, t, &mut post)?;
                            }
                            soft.extend(post.iter().map(|p| T::of(*p)));
                        }
                    }
                    (Targets::Soft(soft), k + 1)
                }
            };
            let ce = g.cross_entropy(lg, targets, weights, n_valid)?;
            total = Some(match total {
                None => ce,
                Some(acc) => g.add(acc, ce)?,
            });
        }
        Ok(LossOutput { loss: total.expect("five attributes"), logits })
    }
}

pub struct LossOutput {
    pub loss: Var,
    pub logits: Vec<Var>,
}

/// Relative weight of the loss on tokens the forward process left intact.
pub const UNCORRUPTED_WEIGHT: f64 = 0.01;

/// Samples `t ~ U{1..T}` per example and corrupts every token independently.
/// With probability `keep_clean_prob` one random slot of an example is left
/// clean, mimicking the clamped tokens seen under partial constraints.
pub fn corrupt_batch<R: Rng>(
    clean: &[&TokenGrid],
    schedules: &PlannerSchedules,
    keep_clean_prob: f64,
    rng: &mut R,
) -> Result<CorruptedBatch> {
    let mut noisy = Vec::with_capacity(clean.len());
    for z0 in clean {
        if z0.timestep != 0 {
            return Err(Error::invalid("training grids must be clean (t = 0)"));
        }
        let t = rng.gen_range(1..=schedules.t_max());
        let keep = if rng.gen::<f64>() < keep_clean_prob { Some(rng.gen_range(0..E_MAX)) } else { None };
        let mut zt = TokenGrid { tokens: z0.tokens.clone(), timestep: t };
        for (s, row) in zt.tokens.iter_mut().enumerate() {
            if keep == Some(s) {
                continue;
            }
            for (a, z) in row.iter_mut().enumerate() {
                *z = schedules.attrs[a].forward_sample(*z as usize, t, rng)? as u16;
            }
        }
        noisy.push(zt);
    }
    Ok(CorruptedBatch { noisy, clean: clean.iter().map(|g| (*g).clone()).collect() })
}

/// Mean CE and uniform baseline over corrupted tokens, from logit values.
fn corrupt_stats(logits: &[&Tensor<f32>], batch: &CorruptedBatch, cfg: &DecoderConfig) -> (f64, f64, usize) {
    let mut ce = 0.0;
    let mut uni = 0.0;
    let mut n = 0;
    for (a, lg) in logits.iter().enumerate() {
        let k = cfg.vocab.states(a);
        let width = cfg.head_width(a);
        for bi in 0..batch.noisy.len() {
            for s in 0..cfg.e_max {
                if !batch.corrupted(bi, s, a) {
                    continue;
                }
                let row = &lg.data()[(bi * cfg.e_max + s) * width..][..k];
                let max = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
                let lse = max + row.iter().map(|v| (*v as f64 - max).exp()).sum::<f64>().ln();
                let z0 = batch.clean[bi].tokens[s][a] as usize;
                ce += lse - row[z0] as f64;
                uni += (k as f64).ln();
                n += 1;
            }
        }
    }
    if n == 0 {
        (0.0, 0.0, 0)
    } else {
        (ce / n as f64, uni / n as f64, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub keep_clean_prob: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { batch_size: 16, keep_clean_prob: 0.1 }
    }
}

/// One optimizer step on a batch of clean grids with their embeddings.
pub fn train_step(
    decoder: &LayoutDecoder,
    store: &mut ParameterStore<f32>,
    opt: &AdamW,
    schedules: &PlannerSchedules,
    batch: &[(&TokenGrid, &EmbeddingBundle)],
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let clean: Vec<&TokenGrid> = batch.iter().map(|(g, _)| *g).collect();
    let conds: Vec<&EmbeddingBundle> = batch.iter().map(|(_, e)| *e).collect();
    let cb = corrupt_batch(&clean, schedules, opts.keep_clean_prob, rng)?;
    let mut g = Graph::new(true);
    let out = decoder.loss(&mut g, store, &cb, &conds, schedules, rng)?;
    let loss_value = g.value(out.loss).item() as f64;
    let stats = if decoder.cfg.parameterization == Parameterization::X0 {
        let lg: Vec<&Tensor<f32>> = out.logits.iter().map(|v| g.value(*v)).collect();
        corrupt_stats(&lg, &cb, &decoder.cfg)
    } else {
        (f64::NAN, f64::NAN, 0)
    };
    let grads = g.backward(out.loss)?;
    let grad_norm = opt.step(store, &grads)?;
    Ok(StepStats { loss: loss_value, corrupt_ce: stats.0, uniform_ce: stats.1, n_corrupt: stats.2, grad_norm })
}


/// Fixed token ids per `(slot, attribute)`; `None` leaves a token free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutConstraint {
    pub fixed: Vec<[Option<u16>; N_ATTRS]>,
}

impl Default for LayoutConstraint {
    fn default() -> Self {
        Self { fixed: vec![[None; N_ATTRS]; E_MAX] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedElement {
    pub slot: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Vec<Option<f64>>>,
}

/// The constraint file: `{ "fix": [ { "slot", "category"?, "box"? } ] }`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintFile {
    pub fix: Vec<FixedElement>,
}

impl LayoutConstraint {
    pub fn is_empty(&self) -> bool {
        self.fixed.iter().all(|r| r.iter().all(Option::is_none))
    }

    pub fn set(&mut self, slot: usize, attr: usize, id: u16, vocab: &AttributeVocabulary) -> Result<()> {
        if slot >= E_MAX || attr >= N_ATTRS {
            return Err(Error::invalid(format!("constraint slot {slot} / attribute {attr} out of range")));
        }
        if id as usize >= vocab.states(attr) {
            return Err(Error::invalid(format!(
                "constraint token {id} for slot {slot} {} is not a regular state (0..{})",
                ATTR_NAMES[attr],
                vocab.states(attr)
            )));
        }
        self.fixed[slot][attr] = Some(id);
        Ok(())
    }

    pub fn from_file(file: &ConstraintFile, vocab: &AttributeVocabulary) -> Result<Self> {
        let mut c = Self::default();
        for f in &file.fix {
            if let Some(name) = &f.category {
                let cat = Category::parse(name).ok_or_else(|| Error::invalid(format!("unknown category `{name}`")))?;
                c.set(f.slot, 0, cat.id() as u16, vocab)?;
            }
            if let Some(b) = &f.bbox {
                if b.len() != 4 {
                    return Err(Error::invalid(format!("slot {}: box needs 4 entries, got {}", f.slot, b.len())));
                }
                for (i, v) in b.iter().enumerate() {
                    if let Some(v) = v {
                        if !v.is_finite() {
                            return Err(Error::invalid(format!("slot {}: non-finite box value", f.slot)));
                        }
                        c.set(f.slot, i + 1, vocab.bin(*v), vocab)?;
                    }
                }
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path, vocab: &AttributeVocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let file: ConstraintFile = serde_json::from_str(&text)?;
        Self::from_file(&file, vocab)
    }

    pub fn apply(&self, grid: &mut TokenGrid) {
        for (row, fixed) in grid.tokens.iter_mut().zip(&self.fixed) {
            for (z, f) in row.iter_mut().zip(fixed) {
                if let Some(id) = f {
                    *z = *id;
                }
            }
        }
    }

    /// Whether `grid` carries every fixed token.
    pub fn satisfied_by(&self, grid: &TokenGrid) -> bool {
        grid.tokens.iter().zip(&self.fixed).all(|(row, fixed)| row.iter().zip(fixed).all(|(z, f)| f.map_or(true, |id| *z == id)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Softmax temperature on predicted logits.
    pub temperature: f64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

fn softmax_row(row: &[f32], temperature: f64, out: &mut [f64]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = ((*v as f64 - max) / temperature).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Reverse diffusion from an all-MASK grid for each `(cond, seed)` pair.
/// Each sample draws from its own stream seeded by `seeds[i]`; constrained
/// tokens are overwritten after every step.
pub fn sample_grids(
    decoder: &LayoutDecoder,
    store: &ParameterStore<f32>,
    schedules: &PlannerSchedules,
    conds: &[&EmbeddingBundle],
    constraint: &LayoutConstraint,
    seeds: &[u64],
    opts: &SamplerOptions,
) -> Result<Vec<TokenGrid>> {
    let cfg = &decoder.cfg;
    if schedules.t_max() != cfg.t_p {
        return Err(Error::invalid(format!("schedule has T = {}, decoder expects T_P = {}", schedules.t_max(), cfg.t_p)));
    }
    if conds.len() != seeds.len() {
        return Err(Error::invalid("one seed per conditioning bundle"));
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    for (s, row) in constraint.fixed.iter().enumerate() {
        for (a, f) in row.iter().enumerate() {
            if let Some(id) = f {
                if *id as usize >= cfg.vocab.states(a) {
                    return Err(Error::invalid(format!("infeasible constraint token {id} at slot {s} {}", ATTR_NAMES[a])));
                }
            }
        }
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|s| ChaCha8Rng::seed_from_u64(*s)).collect();
    let mut grids: Vec<TokenGrid> = seeds.iter().map(|_| TokenGrid::all_mask(&cfg.vocab, cfg.t_p)).collect();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(0);
    let mut p0 = vec![0.0; cfg.vocab.bins_geometry.max(cfg.vocab.categories) + 1];
    let mut step = vec![0.0; p0.len()];
    for t in (1..=cfg.t_p).rev() {
        let mut g = Graph::new(false);
        let refs: Vec<&TokenGrid> = grids.iter().collect();
        let logits = decoder.forward(&mut g, store, &refs, conds, &mut dropout_rng)?;
        for (bi, grid) in grids.iter_mut().enumerate() {
            let rng = &mut rngs[bi];
            for (a, lv) in logits.iter().enumerate() {
                let lg = g.value(*lv);
                let k = cfg.vocab.states(a);
                let width = cfg.head_width(a);
                let sched = &schedules.attrs[a];
                for s in 0..cfg.e_max {
                    let row = &lg.data()[(bi * cfg.e_max + s) * width..][..width];
                    let zt = grid.tokens[s][a] as usize;
                    let next = match cfg.parameterization {
                        Parameterization::X0 => {
                            softmax_row(&row[..k], opts.temperature, &mut p0[..k]);
                            match reverse_step_distribution(sched, zt, t, &p0[..k], &mut step[..=k]) {
                                Some(()) => sample_categorical(&step[..=k], rng),
                                // no clean state the model believes in leads to z_t
                                None if zt == k => argmax(&p0[..k]),
                                None => zt,
                            }
                        }
                        Parameterization::Direct => {
                            softmax_row(row, opts.temperature, &mut step[..=k]);
                            if t == 1 || zt != k {
                                step[k] = 0.0;
                            }
                            if step[..=k].iter().sum::<f64>() > 0.0 {
                                sample_categorical(&step[..=k], rng)
                            } else {
                                argmax(&p0[..k])
                            }
                        }
                    };
                    grid.tokens[s][a] = next as u16;
                }
            }
            grid.timestep = t - 1;
            constraint.apply(grid);
        }
    }
    Ok(grids)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Checkpoint metadata stored next to the `PRCK` parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerMeta {
    pub decoder: DecoderConfig,
    pub schedule: ScheduleKind,
    pub steps: u64,
}

pub fn meta_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_extension("json")
}

pub fn save_planner(path: &Path, meta: &PlannerMeta, store: &ParameterStore<f32>) -> Result<()> {
    store.save(path)?;
    let json = serde_json::to_string_pretty(meta)?;
    let mp = meta_path(path);
    std::fs::write(&mp, json).map_err(|e| Error::file(mp, e))?;
    Ok(())
}

pub fn load_planner(path: &Path) -> Result<(PlannerMeta, LayoutDecoder, ParameterStore<f32>)> {
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::file(&mp, e))?;
    let meta: PlannerMeta = serde_json::from_str(&text)?;
    if !path.exists() {
        return Err(Error::file(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint missing")));
    }
    let store = ParameterStore::<f32>::load(path)?;
    let decoder = LayoutDecoder::bind(meta.decoder.clone(), &store)?;
    Ok((meta, decoder, store))
}
