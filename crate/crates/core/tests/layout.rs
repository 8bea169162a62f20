use ppg_core::layout::*;
use proptest::prelude::*;

fn vocab() -> AttributeVocabulary {
    AttributeVocabulary::default()
}

#[test]
fn bins_partition_the_unit_interval() {
    let v = vocab();
    assert_eq!(v.bin(0.0), 0);
    assert_eq!(v.bin(1.0), 63);
    assert_eq!(v.bin(-3.0), 0);
    assert_eq!(v.bin(7.0), 63);
    assert_eq!(v.bin(0.5), 32);
    assert_eq!(v.bin(1.0 / 64.0 - 1e-9), 0);
    assert_eq!(v.bin(1.0 / 64.0), 1);
    for b in 0..64u16 {
        assert_eq!(v.bin(v.bin_center(b)), b);
    }
}

#[test]
fn mask_ids_follow_regular_states() {
    let v = vocab();
    assert_eq!(v.mask(0), 4);
    for a in 1..N_ATTRS {
        assert_eq!(v.mask(a), 64);
        assert_eq!(v.k_attr(a), 65);
    }
    let g = TokenGrid::all_mask(&v, 20);
    assert!(g.is_all_mask(&v));
    assert!(g.check(&v).is_ok());
    assert!(dequantize_tokens(&g, &v, 1.5).is_err());
}

#[test]
fn pad_slots_vanish_on_dequantize() {
    let v = vocab();
    let g = TokenGrid::all_pad(&v);
    let l = dequantize_tokens(&g, &v, 1.5).unwrap();
    assert!(l.elements.is_empty());
}

#[test]
fn out_of_range_token_is_rejected() {
    let v = vocab();
    let mut g = TokenGrid::all_pad(&v);
    g.tokens[3][2] = 65;
    assert!(g.check(&v).is_err());
    g.tokens[3][2] = 64;
    assert!(g.check(&v).is_ok());
    g.tokens.pop();
    assert!(g.check(&v).is_err());
}

#[test]
fn quantize_rejects_overflow_and_nan() {
    let v = vocab();
    let many = Layout::new(vec![Element::new(Category::Text, 0.5, 0.5, 0.1, 0.1); E_MAX + 1], 1.5);
    assert!(quantize_layout(&many, &v).is_err());
    let nan = Layout::new(vec![Element::new(Category::Text, f64::NAN, 0.5, 0.1, 0.1)], 1.5);
    assert!(quantize_layout(&nan, &v).is_err());
}

#[test]
fn diagnostics_flag_structural_problems() {
    let ok = Layout::new(
        vec![Element::new(Category::Product, 0.5, 0.4, 0.4, 0.3), Element::new(Category::Text, 0.5, 0.8, 0.6, 0.05)],
        1.5,
    );
    assert!(validate_layout(&ok).is_empty());

    let none = Layout::new(vec![Element::new(Category::Text, 0.5, 0.8, 0.6, 0.05)], 1.5);
    assert!(validate_layout(&none).has(|d| *d == Diagnostic::MissingProduct));

    let two = Layout::new(vec![Element::new(Category::Product, 0.5, 0.4, 0.4, 0.3); 2], 1.5);
    assert!(validate_layout(&two).has(|d| *d == Diagnostic::DuplicateProduct { count: 2 }));

    let outside = Layout::new(vec![Element::new(Category::Product, 0.95, 0.4, 0.4, 0.3)], 1.5);
    assert!(validate_layout(&outside).has(|d| *d == Diagnostic::OutOfCanvas { index: 0 }));

    let flat = Layout::new(vec![Element::new(Category::Product, 0.5, 0.4, 0.0, 0.3)], 1.5);
    assert!(validate_layout(&flat).has(|d| *d == Diagnostic::ZeroArea { index: 0 }));

    let early_pad = Layout::new(vec![Element::pad(), Element::new(Category::Product, 0.5, 0.4, 0.4, 0.3)], 1.5);
    assert!(validate_layout(&early_pad).has(|d| *d == Diagnostic::PadNotTrailing { index: 1 }));
}

#[test]
fn category_names_round_trip() {
    for id in 0..K_CAT {
        let c = Category::from_id(id).unwrap();
        assert_eq!(Category::parse(c.name()), Some(c));
        assert_eq!(c.id(), id);
    }
    assert_eq!(Category::from_id(K_CAT), None);
}

fn element() -> impl Strategy<Value = Element> {
    (0usize..3, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64)
        .prop_map(|(c, x, y, w, h)| Element::new(Category::from_id(c).unwrap(), x, y, w, h))
}

proptest! {
    #[test]
    fn round_trip_error_is_at_most_half_a_bin(elements in prop::collection::vec(element(), 0..=E_MAX)) {
        let v = vocab();
        let l = Layout::new(elements.clone(), 1.4);
        let g = quantize_layout(&l, &v).unwrap();
        let back = dequantize_tokens(&g, &v, 1.4).unwrap();
        prop_assert_eq!(back.elements.len(), elements.len());
        for (a, b) in elements.iter().zip(&back.elements) {
            prop_assert_eq!(a.category, b.category);
            for (p, q) in a.geometry().iter().zip(b.geometry()) {
                prop_assert!((p - q).abs() <= 0.5 / 64.0 + 1e-12);
            }
        }
        // quantizing the dequantized layout is a fixed point
        prop_assert_eq!(quantize_layout(&back, &v).unwrap(), g);
    }

    #[test]
    fn binning_is_monotone(a in -0.5..1.5f64, b in -0.5..1.5f64) {
        let v = vocab();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(v.bin(lo) <= v.bin(hi));
    }
}
