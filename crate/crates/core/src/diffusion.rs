//! Absorbing-state categorical diffusion over one attribute with `K` regular
//! states and a terminal MASK at index `K`.
//!
//! Every one-step matrix has the structure
//! `Q[i][j] = alpha` if `i == j`, `beta` between regular states, `gamma`
//! into MASK, and the MASK column is the unit vector on MASK. Products of
//! such matrices keep the structure, so cumulative matrices are carried as
//! three scalars and expanded on demand.

use std::io::Write;
use std::sync::OnceLock;

use rand::Rng;

use crate::{Error, Result};

/// Per-step retention base of the default schedule.
pub const RETAIN_DECAY: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `cum_gamma_t = t/T`, `cum_alpha_t = (1 - t/T) * 0.999^t`.
    #[default]
    LinearMask,
}

/// Column-stochastic `(K+1) x (K+1)` matrix, `entries[i * (K+1) + j]` is
/// `P(z_t = i | z_{t-1} = j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub k: usize,
    pub entries: Vec<f64>,
}

impl TransitionMatrix {
    /// The structured matrix with diagonal `alpha`, regular off-diagonal
    /// `beta`, MASK row `gamma`.
    pub fn structured(k: usize, alpha: f64, beta: f64, gamma: f64) -> Self {
        let n = k + 1;
        let mut entries = vec![0.0; n * n];
        for j in 0..k {
            for i in 0..k {
                entries[i * n + j] = if i == j { alpha } else { beta };
            }
            entries[k * n + j] = gamma;
        }
        entries[k * n + k] = 1.0;
        Self { k, entries }
    }

    pub fn identity(k: usize) -> Self {
        Self::structured(k, 1.0, 0.0, 0.0)
    }

    pub fn size(&self) -> usize {
        self.k + 1
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size() + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.size()).map(|i| self.get(i, j)).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.size()).map(|j| self.column(j).iter().sum()).collect()
    }

    /// Plain triple-loop product `self * rhs`.
    pub fn matmul(&self, rhs: &TransitionMatrix) -> TransitionMatrix {
        assert_eq!(self.k, rhs.k, "matrix sizes differ");
        let n = self.size();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for m in 0..n {
                    acc += self.get(i, m) * rhs.get(m, j);
                }
                entries[i * n + j] = acc;
            }
        }
        TransitionMatrix { k: self.k, entries }
    }

    /// Applies to a distribution column vector.
    pub fn apply(&self, dist: &[f64]) -> Vec<f64> {
        let n = self.size();
        (0..n).map(|i| (0..n).map(|j| self.get(i, j) * dist[j]).sum()).collect()
    }
}

/// Structured scalars of one matrix (per-step or cumulative).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Coeffs {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl Coeffs {
    fn entry(&self, k: usize, i: usize, j: usize) -> f64 {
        if j == k {
            return if i == k { 1.0 } else { 0.0 };
        }
        if i == k {
            self.gamma
        } else if i == j {
            self.alpha
        } else {
            self.beta
        }
    }
}

#[derive(Debug)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub k: usize,
    /// Index 0 is unused; entries 1..=T are the per-step coefficients.
    step: Vec<Coeffs>,
    /// Index 0 is the identity.
    cum: Vec<Coeffs>,
    cum_cache: OnceLock<Vec<TransitionMatrix>>,
}

impl Clone for DiffusionSchedule {
    fn clone(&self) -> Self {
        Self { t_max: self.t_max, k: self.k, step: self.step.clone(), cum: self.cum.clone(), cum_cache: OnceLock::new() }
    }
}

impl PartialEq for DiffusionSchedule {
    fn eq(&self, other: &Self) -> bool {
        self.t_max == other.t_max && self.k == other.k && self.step == other.step && self.cum == other.cum
    }
}

impl DiffusionSchedule {
    pub fn new(t_max: usize, k: usize, kind: ScheduleKind) -> Result<Self> {
        if t_max < 1 || k < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 1 and K >= 2, got T = {t_max}, K = {k}")));
        }
        let kf = k as f64;
        let tf = t_max as f64;
        let cum: Vec<Coeffs> = (0..=t_max)
            .map(|t| match kind {
                ScheduleKind::LinearMask => {
                    let gamma = t as f64 / tf;
                    let alpha = (1.0 - gamma) * RETAIN_DECAY.powi(t as i32);
                    let beta = (1.0 - gamma - alpha) / (kf - 1.0);
                    Coeffs { alpha, beta, gamma }
                }
            })
            .collect();
        let mut step = vec![Coeffs { alpha: 1.0, beta: 0.0, gamma: 0.0 }];
        for t in 1..=t_max {
            let (prev, cur) = (cum[t - 1], cum[t]);
            // a = alpha - beta multiplies along the chain; so does the
            // surviving (non-MASK) mass 1 - gamma.
            let a_prev = prev.alpha - prev.beta;
            let a_cur = cur.alpha - cur.beta;
            let keep = (1.0 - cur.gamma) / (1.0 - prev.gamma);
            let a = a_cur / a_prev;
            let gamma = 1.0 - keep;
            let beta = (keep - a) / kf;
            if !(beta >= 0.0) || !(a >= 0.0) || !(gamma >= 0.0) {
                return Err(Error::invalid(format!("infeasible schedule at t = {t}: beta = {beta}, a = {a}")));
            }
            step.push(Coeffs { alpha: a + beta, beta, gamma });
        }
        Ok(Self { t_max, k, step, cum, cum_cache: OnceLock::new() })
    }

    /// A schedule from explicit per-step `(alpha, beta, gamma)`; cumulative
    /// coefficients follow by composing the structured matrices.
    pub fn from_steps(k: usize, steps: &[(f64, f64, f64)]) -> Result<Self> {
        if steps.is_empty() || k < 2 {
            return Err(Error::invalid("schedule needs at least one step and K >= 2"));
        }
        let kf = k as f64;
        let mut step = vec![Coeffs { alpha: 1.0, beta: 0.0, gamma: 0.0 }];
        let mut cum = vec![Coeffs { alpha: 1.0, beta: 0.0, gamma: 0.0 }];
        for (t, &(alpha, beta, gamma)) in steps.iter().enumerate() {
            let s = alpha + (kf - 1.0) * beta + gamma;
            if alpha < 0.0 || beta < 0.0 || gamma < 0.0 || (s - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("step {}: ({alpha}, {beta}, {gamma}) is not a distribution", t + 1)));
            }
            step.push(Coeffs { alpha, beta, gamma });
            let p = *cum.last().expect("nonempty");
            let a = (alpha - beta) * (p.alpha - p.beta);
            let keep = (1.0 - gamma) * (1.0 - p.gamma);
            let cb = (keep - a) / kf;
            cum.push(Coeffs { alpha: a + cb, beta: cb, gamma: 1.0 - keep });
        }
        Ok(Self { t_max: steps.len(), k, step, cum, cum_cache: OnceLock::new() })
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_max {
            return Err(Error::invalid(format!("timestep {t} outside {lo}..={}", self.t_max)));
        }
        Ok(())
    }

    pub fn mask(&self) -> usize {
        self.k
    }

    /// `(alpha_t, beta_t, gamma_t)`.
    pub fn step_coeffs(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t, 1)?;
        let c = self.step[t];
        Ok((c.alpha, c.beta, c.gamma))
    }

    /// Cumulative `(alpha_bar, beta_bar, gamma_bar)`; `t = 0` is the identity.
    pub fn cum_coeffs(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t, 0)?;
        let c = self.cum[t];
        Ok((c.alpha, c.beta, c.gamma))
    }

    pub fn transition_matrix(&self, t: usize) -> Result<TransitionMatrix> {
        let (a, b, g) = self.step_coeffs(t)?;
        Ok(TransitionMatrix::structured(self.k, a, b, g))
    }

    /// `Q_t Q_{t-1} ... Q_1`, cached per schedule.
    pub fn cumulative_matrix(&self, t: usize) -> Result<&TransitionMatrix> {
        self.check_t(t, 1)?;
        let cache = self.cum_cache.get_or_init(|| {
            self.cum.iter().map(|c| TransitionMatrix::structured(self.k, c.alpha, c.beta, c.gamma)).collect()
        });
        Ok(&cache[t])
    }

    /// `q(z_t = i | z_{t-1} = j)`.
    pub fn q_step(&self, t: usize, i: usize, j: usize) -> f64 {
        self.step[t].entry(self.k, i, j)
    }

    /// `q(z_t = i | z_0 = j)`.
    pub fn q_cum(&self, t: usize, i: usize, j: usize) -> f64 {
        self.cum[t].entry(self.k, i, j)
    }

    /// Draws `z_t ~ column z0 of Q̄_t`.
    pub fn forward_sample<R: Rng + ?Sized>(&self, z0: usize, t: usize, rng: &mut R) -> Result<usize> {
        if z0 >= self.k {
            return Err(Error::invalid(format!("forward_sample from state {z0}: clean tokens are never MASK")));
        }
        self.check_t(t, 0)?;
        let c = self.cum[t];
        let u: f64 = rng.gen();
        if u < c.gamma {
            return Ok(self.k);
        }
        if u < c.gamma + c.alpha || self.k == 1 {
            return Ok(z0);
        }
        // uniform over the other K - 1 regular states
        let r = rng.gen_range(0..self.k - 1);
        Ok(if r >= z0 { r + 1 } else { r })
    }

    /// `q(z_{t-1} | z_t, z_0)` over all `K + 1` states.
    pub fn posterior(&self, z_t: usize, z0: usize, t: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.k + 1];
        self.posterior_into(z_t, z0, t, &mut out)?;
        Ok(out)
    }

    pub fn posterior_into(&self, z_t: usize, z0: usize, t: usize, out: &mut [f64]) -> Result<()> {
        self.check_t(t, 1)?;
        if z_t > self.k || z0 > self.k || out.len() != self.k + 1 {
            return Err(Error::invalid("posterior state out of range"));
        }
        if self.q_cum(t, z_t, z0) == 0.0 {
            return Err(Error::ImpossiblePair { z_t, z0, t });
        }
        let mut total = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            let v = self.q_step(t, z_t, i) * self.q_cum(t - 1, i, z0);
            *o = v;
            total += v;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
        Ok(())
    }

    /// Bayes over every `z_{t-1}` with explicitly multiplied matrices.
    /// Verification only: limited to `K <= 8`, `T <= 12`.
    pub fn posterior_oracle(&self, z_t: usize, z0: usize, t: usize) -> Result<Vec<f64>> {
        if self.k > 8 || self.t_max > 12 {
            return Err(Error::invalid(format!("oracle limited to K <= 8, T <= 12 (got {}, {})", self.k, self.t_max)));
        }
        self.check_t(t, 1)?;
        let mut prev = TransitionMatrix::identity(self.k);
        for s in 1..t {
            prev = self.transition_matrix(s)?.matmul(&prev);
        }
        let q_t = self.transition_matrix(t)?;
        let cum_t = q_t.matmul(&prev);
        let evidence = cum_t.get(z_t, z0);
        if evidence == 0.0 {
            return Err(Error::ImpossiblePair { z_t, z0, t });
        }
        Ok((0..=self.k).map(|i| q_t.get(z_t, i) * prev.get(i, z0) / evidence).collect())
    }

    /// Diagnostic dump: `t, alpha, beta, gamma, cum_alpha, cum_gamma`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "alpha", "beta", "gamma", "cum_alpha", "cum_gamma"])?;
        for t in 1..=self.t_max {
            let (s, c) = (self.step[t], self.cum[t]);
            out.write_record(
                [t as f64, s.alpha, s.beta, s.gamma, c.alpha, c.gamma].iter().enumerate().map(|(i, v)| {
                    if i == 0 {
                        t.to_string()
                    } else {
                        format!("{v:.17e}")
                    }
                }),
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-token reverse-step distribution under the x0-parameterization:
/// `p(z_{t-1} | z_t) = sum_{z0} q(z_{t-1} | z_t, z0) p(z0)`; at `t = 1` the
/// step produces `z0` itself, weighted by `q(z_1 | z0)`.
///
/// `p0` covers the `K` regular states. Returns `None` when every state with
/// positive predicted mass is inconsistent with `z_t`.
pub fn reverse_step_distribution(s: &DiffusionSchedule, z_t: usize, t: usize, p0: &[f64], out: &mut [f64]) -> Option<()> {
    let k = s.k;
    debug_assert_eq!(p0.len(), k);
    debug_assert_eq!(out.len(), k + 1);
    out.iter_mut().for_each(|v| *v = 0.0);
    if t == 1 {
        for (z0, &p) in p0.iter().enumerate() {
            out[z0] = p * s.q_step(1, z_t, z0);
        }
    } else {
        let mut post = vec![0.0; k + 1];
        for (z0, &p) in p0.iter().enumerate() {
            if p == 0.0 || s.q_cum(t, z_t, z0) == 0.0 {
                continue;
            }
            s.posterior_into(z_t, z0, t, &mut post).ok()?;
            for (o, q) in out.iter_mut().zip(&post) {
                *o += p * q;
            }
        }
    }
    let total: f64 = out.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    out.iter_mut().for_each(|v| *v /= total);
    Some(())
}

/// Draws an index from an unnormalized nonnegative weight vector.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}
