mod common;

use common::{brute_max_iou, random_box, random_layout, raster_overlap_rate};
use ppg_core::layout::{Category, Element, Layout};
use ppg_core::metrics::*;
use ppg_core::synth::{generate, SyntheticGrammar};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn self_iou_is_exactly_one_on_corpus() {
    let recs = generate(&SyntheticGrammar::default(), 1000, 13).unwrap();
    for r in &recs {
        assert_eq!(max_iou(&r.layout, &r.layout), 1.0);
        assert_eq!(max_iou_with(&r.layout, &r.layout, IouAveraging::Box), 1.0);
    }
}

#[test]
fn disjoint_boxes_score_zero() {
    let a = Layout::new(vec![Element::new(Category::Text, 0.2, 0.2, 0.1, 0.1)], 1.5);
    let b = Layout::new(vec![Element::new(Category::Text, 0.7, 0.7, 0.1, 0.1)], 1.5);
    assert_eq!(max_iou(&a, &b), 0.0);
    let flat = Element::new(Category::Text, 0.2, 0.2, 0.0, 0.0);
    assert_eq!(iou(&flat, &flat), 0.0);
}

#[test]
fn half_overlap_has_known_iou() {
    let a = Element::new(Category::Text, 0.25, 0.5, 0.5, 0.5);
    let b = Element::new(Category::Text, 0.5, 0.5, 0.5, 0.5);
    assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn unmatched_boxes_count_against_the_score() {
    let e = Element::new(Category::Text, 0.3, 0.3, 0.2, 0.2);
    let one = Layout::new(vec![e.clone()], 1.5);
    let two = Layout::new(vec![e.clone(), Element::new(Category::Text, 0.8, 0.8, 0.1, 0.1)], 1.5);
    assert!((max_iou(&one, &two) - 0.5).abs() < 1e-15);
    assert!((max_iou(&two, &one) - 0.5).abs() < 1e-15);
    // categories absent from the reference are ignored
    let extra = Layout::new(vec![e, Element::new(Category::Product, 0.5, 0.5, 0.2, 0.2)], 1.5);
    assert_eq!(max_iou(&extra, &one), 1.0);
    assert_eq!(max_iou(&Layout::empty(1.5), &Layout::empty(1.5)), 1.0);
    assert_eq!(max_iou(&one, &Layout::empty(1.5)), 0.0);
}

#[test]
fn hungarian_matches_brute_force_up_to_six_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..2000 {
        let a = random_layout(&mut rng, 6);
        let b = random_layout(&mut rng, 6);
        let fast = max_iou(&a, &b);
        let slow = brute_max_iou(&a, &b);
        assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
    }
}

#[test]
fn assignment_solver_handles_rectangular_costs() {
    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]];
    let cols = assign_min_cost(&cost);
    assert_eq!(cols, vec![1, 0]);
    assert!(assign_min_cost(&[]).is_empty());
}

#[test]
fn identical_sets_have_zero_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set: Vec<Layout> = (0..200).map(|_| random_layout(&mut rng, 4)).collect();
    assert!(fd_geo(&set, &set).unwrap() <= 1e-6);
    let small: Vec<Layout> = set[..10].to_vec();
    assert!(fd_geo(&small, &small).unwrap() <= 1e-6);
    assert!(fd_geo(&set[..1], &set).is_err());
}

#[test]
fn distance_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a: Vec<Layout> = (0..150).map(|_| random_layout(&mut rng, 4)).collect();
    let b: Vec<Layout> = (0..90).map(|_| random_layout(&mut rng, 2)).collect();
    let ab = fd_geo(&a, &b).unwrap();
    let ba = fd_geo(&b, &a).unwrap();
    assert!(ab > 0.0);
    assert!((ab - ba).abs() <= 1e-9, "{ab} vs {ba}");
}

#[test]
fn mean_shift_recovers_closed_form() {
    let d = FEATURE_DIM;
    let n = 5000;
    let delta = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut draw = |shift: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                v[0] += shift;
                v
            })
            .collect()
    };
    let a = draw(0.0);
    let b = draw(delta);
    let fd = frechet_distance(&a, &b).unwrap();
    let expect = delta * delta;
    assert!((fd - expect).abs() <= 0.05 * expect, "fd {fd} vs {expect}");
}

#[test]
fn features_shift_with_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let mut l = random_layout(&mut rng, 3);
        l.elements.iter_mut().for_each(|e| e.center_x = e.center_x * 0.8);
        let f = layout_features(&l);
        let mut moved = l.clone();
        moved.elements.iter_mut().for_each(|e| e.center_x += 0.1);
        let g = layout_features(&moved);
        for ci in 0..3 {
            let present = f[ci] > 0.0;
            let dx = g[3 + 4 * ci] - f[3 + 4 * ci];
            assert!((dx - if present { 0.1 } else { 0.0 }).abs() < 1e-12);
            for k in [4, 5, 6] {
                assert!((g[k + 4 * ci] - f[k + 4 * ci]).abs() < 1e-12);
            }
        }
        if l.visible().next().is_some() {
            assert!((g[19] - f[19] - 0.1).abs() < 1e-12);
            assert!((g[21] - f[21] + 0.1).abs() < 1e-12);
        }
        assert_eq!(f[..3], g[..3]);
        assert!((f[18] - g[18]).abs() < 1e-12);
    }
}

#[test]
fn empty_layout_features_are_finite() {
    let f = layout_features(&Layout::empty(1.5));
    assert!(f.iter().all(|v| v.is_finite()));
    assert_eq!(f[19..23], [1.0; 4]);
}

#[test]
fn overlap_rate_edge_cases() {
    let product = Element::new(Category::Product, 0.5, 0.5, 0.6, 0.6);
    let apart = Layout::new(vec![product.clone(), Element::new(Category::Text, 0.5, 0.95, 0.3, 0.05)], 1.5);
    assert_eq!(overlap_rate(&apart), 0.0);
    let inside = Layout::new(vec![product, Element::new(Category::Text, 0.5, 0.5, 0.1, 0.1)], 1.5);
    assert_eq!(overlap_rate(&inside), 1.0);
    // an underlay under its text is not overlap
    let t = Element::new(Category::Text, 0.5, 0.9, 0.3, 0.05);
    let u = Element::new(Category::Underlay, 0.5, 0.9, 0.35, 0.07);
    assert_eq!(overlap_rate(&Layout::new(vec![t, u], 1.5)), 0.0);
}

#[test]
fn overlap_rate_matches_raster_on_pixel_aligned_boxes() {
    // edges on the 1/512 grid make pixel counting exact
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let snap = |v: f64| (v * 512.0).round() / 512.0;
    for _ in 0..40 {
        let mut l = random_layout(&mut rng, 4);
        l.elements.push(random_box(&mut rng, Category::Text));
        for e in &mut l.elements {
            let [a, b, c, d] = e.edges().map(snap);
            *e = Element::from_edges(e.category, a, b, c.max(a + 1.0 / 512.0), d.max(b + 1.0 / 512.0));
        }
        let exact = overlap_rate(&l);
        let raster = raster_overlap_rate(&l, 512);
        assert!((exact - raster).abs() <= 1e-12, "{exact} vs {raster}");
    }
}

#[test]
fn overlap_rate_matches_fine_raster_on_random_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let mut l = random_layout(&mut rng, 4);
        l.elements.push(random_box(&mut rng, Category::Text));
        let exact = overlap_rate(&l);
        let raster = raster_overlap_rate(&l, 4096);
        assert!((exact - raster).abs() <= 0.01, "{exact} vs {raster}");
    }
}

#[test]
fn evaluate_reports_means() {
    let recs = generate(&SyntheticGrammar::default(), 30, 2).unwrap();
    let pairs: Vec<_> = recs.iter().map(|r| (r.id.clone(), r.layout.clone(), r.layout.clone())).collect();
    let (report, scores) = evaluate(&pairs, IouAveraging::Category).unwrap();
    assert_eq!(report.n, 30);
    assert_eq!(report.max_iou, 1.0);
    assert!(report.fd_geo <= 1e-6);
    assert_eq!(scores.len(), 30);
    assert_eq!(scores[4].id, recs[4].id);
    assert!(evaluate(&pairs[..1], IouAveraging::Category).is_err());
}

fn layout_strategy() -> impl Strategy<Value = Layout> {
    any::<u64>().prop_map(|s| random_layout(&mut ChaCha8Rng::seed_from_u64(s), 5))
}

proptest! {
    #[test]
    fn max_iou_ignores_element_order(a in layout_strategy(), b in layout_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a2 = a.clone();
        a2.elements.shuffle(&mut rng);
        let mut b2 = b.clone();
        b2.elements.shuffle(&mut rng);
        prop_assert_eq!(max_iou(&a, &b), max_iou(&a2, &b2));
    }

    #[test]
    fn max_iou_is_symmetric_for_equal_category_counts(a in layout_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Layout::new(a.elements.iter().map(|e| random_box(&mut rng, e.category)).collect(), 1.5);
        prop_assert!((max_iou(&a, &b) - max_iou(&b, &a)).abs() <= 1e-12);
        let s = max_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn overlap_rate_is_a_fraction(a in layout_strategy()) {
        let r = overlap_rate(&a);
        prop_assert!((0.0..=1.0).contains(&r));
    }
}

