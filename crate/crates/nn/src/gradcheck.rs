//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Above this many coordinates only a random subsample is checked.
    pub full_check_limit: usize,
    pub subsample_fraction: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is zero are judged on absolute error.
    pub denom_floor: f64,
    pub seed: u64,
    /// Whether graphs are built in training mode (dropout active).
    pub training: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            full_check_limit: 10_000,
            subsample_fraction: 0.01,
            denom_floor: 1e-6,
            seed: 0,
            training: false,
        }
    }
}

/// Where a checked coordinate lives.
#[derive(Debug, Clone, PartialEq)]
pub enum Coordinate {
    Input { input: usize, index: usize },
    Param { name: String, index: usize },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub total: usize,
}

/// Relative error used by the checker.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of the scalar built by `f` against central
/// differences over every input and parameter coordinate.
///
/// `f` must be deterministic: it is re-run for every perturbation. Any
/// randomness it uses (dropout) must come from a stream it seeds itself.
pub fn gradient_check<F>(
    inputs: &[Tensor<f64>],
    store: &ParameterStore<f64>,
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], store: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::new(opts.training);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, store, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(opts.training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    let grads = g.backward(loss)?;

    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|index| Coordinate::Input { input: i, index }));
    }
    for (name, t) in store.iter() {
        coords.extend((0..t.len()).map(|index| Coordinate::Param { name: name.to_string(), index }));
    }
    let total = coords.len();
    if total > opts.full_check_limit {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let n = ((total as f64 * opts.subsample_fraction).ceil() as usize).max(1);
        let mut picked = sample(&mut rng, total, n).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i].clone()).collect();
    }

    let mut inputs_work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut store_work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: coords.len(),
        total,
    };
    let h = opts.step;
    for c in coords {
        let analytic = match &c {
            Coordinate::Input { input, index } => grads.get(vars[*input]).map(|t| t.data()[*index]).unwrap_or(0.0),
            Coordinate::Param { name, index } => grads.param(name).map(|t| t.data()[*index]).unwrap_or(0.0),
        };
        if !analytic.is_finite() {
            return Err(NnError::NonFinite { op: "gradient_check" });
        }
        let orig = *coord_slot(&c, &mut inputs_work, &mut store_work);
        let (up, down) = (orig + h, orig - h);
        *coord_slot(&c, &mut inputs_work, &mut store_work) = up;
        let f_up = eval(&inputs_work, &store_work)?;
        *coord_slot(&c, &mut inputs_work, &mut store_work) = down;
        let f_down = eval(&inputs_work, &store_work)?;
        *coord_slot(&c, &mut inputs_work, &mut store_work) = orig;
        let numeric = (f_up - f_down) / (up - down);
        let err = relative_error(analytic, numeric, opts.denom_floor);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some(c);
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

fn coord_slot<'a>(
    c: &Coordinate,
    inputs: &'a mut [Tensor<f64>],
    store: &'a mut ParameterStore<f64>,
) -> &'a mut f64 {
    match c {
        Coordinate::Input { input, index } => &mut inputs[*input].data_mut()[*index],
        Coordinate::Param { name, index } => &mut store.get_mut(name).expect("name from store").data_mut()[*index],
    }
}
