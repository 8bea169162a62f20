//! Layout evaluation: maximum IoU under optimal same-category matching, a
//! Gaussian Fréchet distance over geometric layout features, and overlap
//! diagnostics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::layout::{Category, Element, Layout, E_MAX};
use crate::{Error, Result};

/// Layout feature width.
pub const FEATURE_DIM: usize = 23;
/// Below this many layouts per set the covariances are shrunk toward a
/// scaled identity.
pub const FULL_RANK_MIN: usize = FEATURE_DIM + 1;
const SHRINKAGE: f64 = 0.1;

fn area(e: &[f64; 4]) -> f64 {
    (e[2] - e[0]).max(0.0) * (e[3] - e[1]).max(0.0)
}

fn intersection(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// Intersection over union; two zero-area boxes give 0.
pub fn iou(a: &Element, b: &Element) -> f64 {
    let (ea, eb) = (a.edges(), b.edges());
    let inter = intersection(&ea, &eb);
    let union = area(&ea) + area(&eb) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <=
/// cols`) by shortest augmenting paths with potentials. Returns the column
/// of each row.
pub fn assign_min_cost(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs rows <= cols");
    let inf = f64::INFINITY;
    // 1-based arrays; p[j] is the row matched to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Best summed IoU over one-to-one matchings of `a` against `b`.
pub fn matched_iou_sum(a: &[&Element], b: &[&Element]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (rows, cols) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let cost: Vec<Vec<f64>> = rows.iter().map(|r| cols.iter().map(|c| -iou(r, c)).collect()).collect();
    let cols_of = assign_min_cost(&cost);
    let mut pairs: Vec<f64> = cols_of.iter().enumerate().map(|(i, &j)| -cost[i][j]).collect();
    // summing in a fixed order keeps the result independent of input order
    pairs.sort_by(f64::total_cmp);
    pairs.iter().sum()
}

/// Averaging used by [`max_iou_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouAveraging {
    /// Per-category mean matched IoU, averaged over reference categories.
    #[default]
    Category,
    /// Total matched IoU over the total per-category box slots.
    Box,
}

pub fn max_iou(generated: &Layout, reference: &Layout) -> f64 {
    max_iou_with(generated, reference, IouAveraging::Category)
}

pub fn max_iou_with(generated: &Layout, reference: &Layout, averaging: IouAveraging) -> f64 {
    let mut per_cat = Vec::new();
    let (mut total, mut slots) = (0.0, 0usize);
    for cat in Category::VISIBLE {
        let r: Vec<&Element> = reference.of(cat).collect();
        if r.is_empty() {
            continue;
        }
        let g: Vec<&Element> = generated.of(cat).collect();
        let s = matched_iou_sum(&g, &r);
        let denom = g.len().max(r.len());
        per_cat.push(s / denom as f64);
        total += s;
        slots += denom;
    }
    if per_cat.is_empty() {
        return if generated.visible().next().is_none() { 1.0 } else { 0.0 };
    }
    match averaging {
        IouAveraging::Category => per_cat.iter().sum::<f64>() / per_cat.len() as f64,
        IouAveraging::Box => total / slots as f64,
    }
}

/// Geometric layout feature: per-category counts, center means and standard
/// deviations, area coverage, total pairwise overlap and the four empty
/// margins. Margins are not clamped.
pub fn layout_features(layout: &Layout) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    for (ci, cat) in Category::VISIBLE.iter().enumerate() {
        let es: Vec<&Element> = layout.of(*cat).collect();
        let n = es.len() as f64;
        f[ci] = n;
        if es.is_empty() {
            continue;
        }
        let mx = es.iter().map(|e| e.center_x).sum::<f64>() / n;
        let my = es.iter().map(|e| e.center_y).sum::<f64>() / n;
        let sx = (es.iter().map(|e| (e.center_x - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (es.iter().map(|e| (e.center_y - my).powi(2)).sum::<f64>() / n).sqrt();
        f[3 + 4 * ci] = mx;
        f[4 + 4 * ci] = my;
        f[5 + 4 * ci] = sx;
        f[6 + 4 * ci] = sy;
        f[15 + ci] = es.iter().map(|e| area(&e.edges())).sum();
    }
    let edges: Vec<[f64; 4]> = layout.visible().map(|e| e.edges()).collect();
    let mut overlap = 0.0;
    for i in 0..edges.len() {
        for j in i + 1..edges.len() {
            overlap += intersection(&edges[i], &edges[j]);
        }
    }
    f[18] = overlap;
    if edges.is_empty() {
        f[19..23].fill(1.0);
    } else {
        f[19] = edges.iter().map(|e| e[0]).fold(f64::INFINITY, f64::min);
        f[20] = edges.iter().map(|e| e[1]).fold(f64::INFINITY, f64::min);
        f[21] = 1.0 - edges.iter().map(|e| e[2]).fold(f64::NEG_INFINITY, f64::max);
        f[22] = 1.0 - edges.iter().map(|e| e[3]).fold(f64::NEG_INFINITY, f64::max);
    }
    debug_assert!(f[15..18].iter().all(|c| *c <= E_MAX as f64));
    f
}

fn mean_cov(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = feats[0].len();
    let n = feats.len();
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    if n < d + 1 {
        let target = cov.trace() / d as f64;
        cov *= 1.0 - SHRINKAGE;
        for i in 0..d {
            cov[(i, i)] += SHRINKAGE * target;
        }
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(format!("fd needs at least 2 samples per set, got {} and {}", a.len(), b.len())));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|f| f.len() != d || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("feature vectors must be finite and equally long"));
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let diff = (&ma - &mb).norm_squared();
    let sa = sym_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((diff + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn fd_geo(set_a: &[Layout], set_b: &[Layout]) -> Result<f64> {
    let fa: Vec<Vec<f64>> = set_a.iter().map(|l| layout_features(l).to_vec()).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|l| layout_features(l).to_vec()).collect();
    frechet_distance(&fa, &fb)
}

/// Area of `target` covered by the union of `others`, by coordinate
/// compression.
fn covered_area(target: &[f64; 4], others: &[[f64; 4]]) -> f64 {
    let clipped: Vec<[f64; 4]> = others
        .iter()
        .map(|o| [o[0].max(target[0]), o[1].max(target[1]), o[2].min(target[2]), o[3].min(target[3])])
        .filter(|c| c[2] > c[0] && c[3] > c[1])
        .collect();
    if clipped.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = clipped.iter().flat_map(|c| [c[0], c[2]]).collect();
    let mut ys: Vec<f64> = clipped.iter().flat_map(|c| [c[1], c[3]]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut total = 0.0;
    for xw in xs.windows(2) {
        let xm = 0.5 * (xw[0] + xw[1]);
        for yw in ys.windows(2) {
            let ym = 0.5 * (yw[0] + yw[1]);
            if clipped.iter().any(|c| c[0] <= xm && xm < c[2] && c[1] <= ym && ym < c[3]) {
                total += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    total
}

/// Fraction of total text area that intersects another text box or the
/// product.
pub fn overlap_rate(layout: &Layout) -> f64 {
    let texts: Vec<[f64; 4]> = layout.of(Category::Text).map(|e| e.edges()).collect();
    let products: Vec<[f64; 4]> = layout.of(Category::Product).map(|e| e.edges()).collect();
    let total: f64 = texts.iter().map(area).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut covered = 0.0;
    for (i, t) in texts.iter().enumerate() {
        let others: Vec<[f64; 4]> =
            texts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| *o).chain(products.iter().copied()).collect();
        covered += covered_area(t, &others);
    }
    (covered / total).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub max_iou: f64,
    pub fd_geo: f64,
    pub overlap_rate: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub max_iou: f64,
    pub overlap_rate: f64,
}

/// Scores generated layouts against their references. Per-record scores run
/// in parallel and are reduced in input order.
pub fn evaluate(pairs: &[(String, Layout, Layout)], averaging: IouAveraging) -> Result<(EvalReport, Vec<RecordScore>)> {
    if pairs.len() < 2 {
        return Err(Error::invalid(format!("evaluation needs at least 2 layouts, got {}", pairs.len())));
    }
    let scores: Vec<RecordScore> = pairs
        .par_iter()
        .map(|(id, gen, reference)| RecordScore {
            id: id.clone(),
            max_iou: max_iou_with(gen, reference, averaging),
            overlap_rate: overlap_rate(gen),
        })
        .collect();
    let n = scores.len();
    let gens: Vec<Layout> = pairs.iter().map(|p| p.1.clone()).collect();
    let refs: Vec<Layout> = pairs.iter().map(|p| p.2.clone()).collect();
    let report = EvalReport {
        max_iou: scores.iter().map(|s| s.max_iou).sum::<f64>() / n as f64,
        fd_geo: fd_geo(&gens, &refs)?,
        overlap_rate: scores.iter().map(|s| s.overlap_rate).sum::<f64>() / n as f64,
        n,
    };
    Ok((report, scores))
}
