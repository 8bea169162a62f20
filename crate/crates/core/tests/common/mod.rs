//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use ppg_core::layout::{Category, Element, Layout};
use ppg_core::metrics::iou;
use rand::Rng;

/// Maximum of `sum IoU` over every injective map of the smaller list into
/// the larger, by enumerating permutations.
pub fn brute_matched_sum(a: &[&Element], b: &[&Element]) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut used = vec![false; large.len()];
    fn go(i: usize, small: &[&Element], large: &[&Element], used: &mut [bool], acc: f64) -> f64 {
        if i == small.len() {
            return acc;
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..large.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(go(i + 1, small, large, used, acc + iou(small[i], large[j])));
                used[j] = false;
            }
        }
        best
    }
    if small.is_empty() {
        return 0.0;
    }
    go(0, small, large, &mut used, 0.0)
}

/// Category-averaged maximum IoU by brute force.
pub fn brute_max_iou(generated: &Layout, reference: &Layout) -> f64 {
    let mut per_cat = Vec::new();
    for cat in Category::VISIBLE {
        let r: Vec<&Element> = reference.of(cat).collect();
        if r.is_empty() {
            continue;
        }
        let g: Vec<&Element> = generated.of(cat).collect();
        per_cat.push(brute_matched_sum(&g, &r) / g.len().max(r.len()) as f64);
    }
    if per_cat.is_empty() {
        return if generated.visible().next().is_none() { 1.0 } else { 0.0 };
    }
    per_cat.iter().sum::<f64>() / per_cat.len() as f64
}

pub fn random_box<R: Rng>(rng: &mut R, category: Category) -> Element {
    let w = rng.gen_range(0.02..0.6);
    let h = rng.gen_range(0.02..0.6);
    let x = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
    let y = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
    Element::new(category, x, y, w, h)
}

/// A layout with `0..=max_per_cat` boxes of each visible category.
pub fn random_layout<R: Rng>(rng: &mut R, max_per_cat: usize) -> Layout {
    let mut elements = Vec::new();
    for cat in Category::VISIBLE {
        for _ in 0..rng.gen_range(0..=max_per_cat) {
            elements.push(random_box(rng, cat));
        }
    }
    Layout::new(elements, 1.5)
}

/// Pixel-center raster estimate of the text overlap rate on an `n x n` grid.
pub fn raster_overlap_rate(layout: &Layout, n: usize) -> f64 {
    let inside = |e: &Element, x: f64, y: f64| {
        let [l, t, r, b] = e.edges();
        x >= l && x < r && y >= t && y < b
    };
    let texts: Vec<&Element> = layout.of(Category::Text).collect();
    let products: Vec<&Element> = layout.of(Category::Product).collect();
    let (mut covered, mut total) = (0usize, 0usize);
    for py in 0..n {
        let y = (py as f64 + 0.5) / n as f64;
        for px in 0..n {
            let x = (px as f64 + 0.5) / n as f64;
            for (i, t) in texts.iter().enumerate() {
                if !inside(t, x, y) {
                    continue;
                }
                total += 1;
                let hit = texts.iter().enumerate().any(|(j, o)| j != i && inside(o, x, y))
                    || products.iter().any(|p| inside(p, x, y));
                if hit {
                    covered += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}
