//! Synthetic poster grammar used as the desk-scale training corpus.
//!
//! Geometry is generated directly in bin units so every emitted box sits on
//! bin centers. Slot 0 holds the product; texts follow as `(text, underlay)`
//! pairs stacked below the product.

use std::io::BufWriter;
use std::ops::RangeInclusive;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{GrayImage, ImageEncoder, Luma, Rgba, RgbaImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{bbox_element, AnnotatedElement, Annotation};
use crate::embed::{hash_embedder, EmbeddingBundle};
use crate::layout::{Category, Element, Layout, K_GEO};
use crate::{Error, Result};

const WORDS: &[&str] = &[
    "fresh", "summer", "sale", "new", "organic", "classic", "bold", "pure", "daily", "glow", "urban", "night",
    "coffee", "tea", "juice", "lotion", "serum", "sneaker", "watch", "lamp", "chair", "bag", "soap", "honey",
    "limited", "edition", "free", "gift", "today", "only", "deal", "best", "choice", "smooth", "light", "care",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGrammar {
    pub canvas: (u32, u32),
    /// Generated product center bins.
    pub product_cx: RangeInclusive<u16>,
    pub product_cy: RangeInclusive<u16>,
    pub product_h: RangeInclusive<u16>,
    /// Product width / height in pixels.
    pub aspect: (f64, f64),
    /// Band the rules accept for the product center, in bins.
    pub band_cx: RangeInclusive<u16>,
    pub band_cy: RangeInclusive<u16>,
    pub text_count: RangeInclusive<usize>,
    /// Largest fraction of a text box allowed to overlap the product.
    pub max_text_product_overlap: f64,
}

impl Default for SyntheticGrammar {
    fn default() -> Self {
        Self {
            canvas: (513, 750),
            product_cx: 30..=33,
            product_cy: 20..=26,
            product_h: 14..=22,
            aspect: (0.6, 1.3),
            band_cx: 28..=35,
            band_cy: 18..=28,
            text_count: 1..=4,
            max_text_product_overlap: 0.05,
        }
    }
}

fn center(bin: u16) -> f64 {
    (bin as f64 + 0.5) / K_GEO as f64
}

fn even(v: f64) -> u16 {
    (2.0 * (v / 2.0).round()) as u16
}

impl SyntheticGrammar {
    pub fn validate(&self) -> Result<()> {
        let bad = self.product_cx.is_empty()
            || self.product_cy.is_empty()
            || self.product_h.is_empty()
            || self.text_count.is_empty()
            || *self.text_count.start() < 1
            || *self.text_count.end() > 4
            || !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1)
            || self.product_cx.start() < self.band_cx.start()
            || self.product_cx.end() > self.band_cx.end()
            || self.product_cy.start() < self.band_cy.start()
            || self.product_cy.end() > self.band_cy.end();
        // the deepest product bottom must leave room for four stacked texts
        let bottom = *self.product_cy.end() as f64 + 0.5 + (*self.product_h.end() as f64 + 0.5) / 2.0;
        if bad || bottom > 38.0 || (*self.product_cy.start() as f64 + 0.5) < (*self.product_h.end() as f64 + 0.5) / 2.0 {
            return Err(Error::invalid("unsatisfiable grammar ranges"));
        }
        Ok(())
    }

    /// Draws a layout and its text contents.
    pub fn sample_layout<R: Rng>(&self, rng: &mut R) -> (Layout, Vec<String>) {
        let aspect_canvas = self.canvas.1 as f64 / self.canvas.0 as f64;
        let cx = rng.gen_range(self.product_cx.clone());
        let cy = rng.gen_range(self.product_cy.clone());
        let h = rng.gen_range(self.product_h.clone());
        let ar = rng.gen_range(self.aspect.0..=self.aspect.1);
        let w_norm = (h as f64 + 0.5) / K_GEO as f64 * aspect_canvas * ar;
        let w = ((w_norm * K_GEO as f64 - 0.5).round() as i64).clamp(6, 40) as u16;
        let product = Element::new(Category::Product, center(cx), center(cy), center(w), center(h));
        let mut elements = vec![product];

        let n = rng.gen_range(self.text_count.clone());
        let left_aligned = rng.gen_bool(0.5);
        let mut texts = Vec::with_capacity(n);
        let mut cursor = cy as f64 + 0.5 + (h as f64 + 0.5) / 2.0 + 1.0;
        for i in 0..n {
            let words = if i == 0 { rng.gen_range(1..=2) } else { rng.gen_range(2..=4) };
            let mut s: Vec<&str> = Vec::with_capacity(words);
            for _ in 0..words {
                s.push(WORDS.choose(rng).expect("nonempty"));
            }
            let mut text = s.join(" ");
            if i == 0 {
                text = text.to_uppercase();
            }
            let chars = text.chars().count() as f64;
            let (th, per_char) = if i == 0 { (3u16, 1.6) } else { (2u16, 1.0) };
            let tw = even(chars * per_char).clamp(6, 44);
            let tx = if left_aligned { 8 + tw / 2 } else { 32 };
            let hu = th as f64 + 2.5;
            let ty = (cursor + hu / 2.0 - 0.5).round() as u16;
            cursor = ty as f64 + 0.5 + hu / 2.0 + 1.0;
            elements.push(Element::new(Category::Text, center(tx), center(ty), center(tw), center(th)).with_text(text.clone()));
            elements.push(Element::new(Category::Underlay, center(tx), center(ty), center(tw + 4), center(th + 2)));
            texts.push(text);
        }
        (Layout::new(elements, aspect_canvas), texts)
    }

    pub fn check(&self, layout: &Layout) -> RuleReport {
        check_rules(self, layout)
    }
}

/// Outcome of the grammar rules for one layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RuleReport {
    pub single_product: bool,
    pub product_in_band: bool,
    pub has_text: bool,
    pub underlays_contain_texts: bool,
    pub text_product_overlap_ok: bool,
}

impl RuleReport {
    pub fn all(&self) -> bool {
        self.single_product && self.product_in_band && self.has_text && self.underlays_contain_texts && self.text_product_overlap_ok
    }
}

fn contains(outer: &Element, inner: &Element) -> bool {
    let (o, i) = (outer.edges(), inner.edges());
    const TOL: f64 = 1e-9;
    o[0] <= i[0] + TOL && o[1] <= i[1] + TOL && o[2] + TOL >= i[2] && o[3] + TOL >= i[3]
}

fn intersection(a: &Element, b: &Element) -> f64 {
    let (p, q) = (a.edges(), b.edges());
    let w = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let h = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    w * h
}

pub fn check_rules(grammar: &SyntheticGrammar, layout: &Layout) -> RuleReport {
    let products: Vec<&Element> = layout.of(Category::Product).collect();
    let texts: Vec<&Element> = layout.of(Category::Text).collect();
    let underlays: Vec<&Element> = layout.of(Category::Underlay).collect();
    let in_band = |v: f64, r: &RangeInclusive<u16>| {
        v >= *r.start() as f64 / K_GEO as f64 && v <= (*r.end() as f64 + 1.0) / K_GEO as f64
    };
    let product_in_band =
        products.len() == 1 && in_band(products[0].center_x, &grammar.band_cx) && in_band(products[0].center_y, &grammar.band_cy);
    let underlays_contain_texts = texts.iter().all(|t| underlays.iter().any(|u| contains(u, t)))
        && underlays.iter().all(|u| texts.iter().any(|t| contains(u, t)));
    let text_product_overlap_ok = texts.iter().all(|t| {
        let area = t.width * t.height;
        area > 0.0 && products.iter().map(|p| intersection(t, p)).sum::<f64>() <= grammar.max_text_product_overlap * area
    });
    RuleReport {
        single_product: products.len() == 1,
        product_in_band,
        has_text: !texts.is_empty(),
        underlays_contain_texts,
        text_product_overlap_ok,
    }
}

/// Inclusive pixel rectangle covered by a normalized box on `canvas`.
pub fn pixel_rect(e: &Element, canvas: (u32, u32)) -> [u32; 4] {
    let [l, t, r, b] = e.edges();
    let (w, h) = (canvas.0 as f64, canvas.1 as f64);
    let x0 = (l * w).round().clamp(0.0, w - 1.0) as u32;
    let y0 = (t * h).round().clamp(0.0, h - 1.0) as u32;
    let x1 = ((r * w).round() as u32).clamp(x0 + 1, canvas.0) - 1;
    let y1 = ((b * h).round() as u32).clamp(y0 + 1, canvas.1) - 1;
    [x0, y0, x1, y1]
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Procedural product cutout of exactly `w x h` pixels whose opaque region
/// touches all four edges.
pub fn draw_product<R: Rng>(w: u32, h: u32, rng: &mut R) -> RgbaImage {
    let shape = rng.gen_range(0..3);
    let gray = rng.gen_bool(0.15);
    let base = hsv(rng.gen_range(0.0..360.0), if gray { 0.0 } else { rng.gen_range(0.4..0.9) }, rng.gen_range(0.35..0.85));
    let accent = hsv(rng.gen_range(0.0..360.0), if gray { 0.0 } else { rng.gen_range(0.2..0.6) }, rng.gen_range(0.7..1.0));
    let label_top = rng.gen_range(0.45..0.6);
    let label_h = rng.gen_range(0.12..0.22);
    let (wf, hf) = (w as f64, h as f64);
    RgbaImage::from_fn(w, h, |x, y| {
        let u = (x as f64 + 0.5) / wf;
        let v = (y as f64 + 0.5) / hf;
        let inside = match shape {
            0 => (2.0 * u - 1.0).powi(2) + (2.0 * v - 1.0).powi(2) <= 1.0,
            1 => {
                // rounded rectangle with corner radius 15% of the short side
                let r = 0.15 * wf.min(hf);
                let px = (x as f64 + 0.5).min(wf - x as f64 - 0.5);
                let py = (y as f64 + 0.5).min(hf - y as f64 - 0.5);
                px >= r || py >= r || (r - px).powi(2) + (r - py).powi(2) <= r * r
            }
            _ => {
                // bottle: full-width body, centered neck reaching the top
                if v < 0.3 {
                    (u - 0.5).abs() <= 0.18
                } else {
                    true
                }
            }
        };
        if !inside {
            return Rgba([0, 0, 0, 0]);
        }
        let shade = 1.0 - 0.35 * v + 0.15 * (1.0 - (2.0 * u - 1.0).abs());
        let c = if v >= label_top && v <= label_top + label_h { accent } else { base.map(|c| c * shade) };
        Rgba([
            (c[0] * 255.0).round().clamp(0.0, 255.0) as u8,
            (c[1] * 255.0).round().clamp(0.0, 255.0) as u8,
            (c[2] * 255.0).round().clamp(0.0, 255.0) as u8,
            255,
        ])
    })
}

/// One generated poster record held in memory.
#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub id: String,
    pub canvas: (u32, u32),
    /// Ground truth with the product box snapped to its pixel rectangle.
    pub layout: Layout,
    pub texts: Vec<String>,
    pub product: RgbaImage,
    pub product_rect: [u32; 4],
    pub embeddings: EmbeddingBundle,
}

pub fn record_id(index: usize) -> String {
    format!("syn{index:05}")
}

/// Deterministic per-record stream.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn generate_record(grammar: &SyntheticGrammar, seed: u64, index: usize) -> SynthRecord {
    let mut rng = record_rng(seed, index);
    let (mut layout, texts) = grammar.sample_layout(&mut rng);
    let rect = pixel_rect(&layout.elements[0], grammar.canvas);
    let snapped = bbox_element(rect, grammar.canvas);
    layout.elements[0] = snapped;
    let product = draw_product(rect[2] - rect[0] + 1, rect[3] - rect[1] + 1, &mut rng);
    let embeddings = hash_embedder(&texts, &product, grammar.canvas);
    SynthRecord { id: record_id(index), canvas: grammar.canvas, layout, texts, product, product_rect: rect, embeddings }
}

/// Generates `n` records in memory, checking each against the grammar.
pub fn generate(grammar: &SyntheticGrammar, n: usize, seed: u64) -> Result<Vec<SynthRecord>> {
    grammar.validate()?;
    let recs: Vec<SynthRecord> = (0..n).into_par_iter().map(|i| generate_record(grammar, seed, i)).collect();
    for r in &recs {
        let rep = grammar.check(&r.layout);
        if !rep.all() {
            return Err(Error::Runtime(format!("grammar emitted a layout violating its rules ({}): {rep:?}", r.id)));
        }
    }
    Ok(recs)
}

fn write_png(path: &Path, bytes: &[u8], w: u32, h: u32, color: image::ExtendedColorType) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    PngEncoder::new_with_quality(BufWriter::new(f), CompressionType::Fast, FilterType::Sub).write_image(bytes, w, h, color)?;
    Ok(())
}

/// Writes one record: annotation JSON at `dir/<id>.json`, assets under
/// `dir/assets/`.
pub fn write_record(dir: &Path, r: &SynthRecord) -> Result<()> {
    let assets = dir.join("assets");
    std::fs::create_dir_all(&assets).map_err(|e| Error::file(&assets, e))?;
    let (cw, ch) = r.canvas;
    let mut canvas_img = RgbaImage::new(cw, ch);
    let mut mask = GrayImage::new(cw, ch);
    for (x, y, p) in r.product.enumerate_pixels() {
        let (cx, cy) = (r.product_rect[0] + x, r.product_rect[1] + y);
        canvas_img.put_pixel(cx, cy, *p);
        if p.0[3] > 0 {
            mask.put_pixel(cx, cy, Luma([255]));
        }
    }
    let image_rel = format!("assets/{}_image.png", r.id);
    let mask_rel = format!("assets/{}_mask.png", r.id);
    let emb_rel = format!("assets/{}.pre", r.id);
    write_png(&dir.join(&image_rel), canvas_img.as_raw(), cw, ch, image::ExtendedColorType::Rgba8)?;
    write_png(&dir.join(&mask_rel), mask.as_raw(), cw, ch, image::ExtendedColorType::L8)?;
    r.embeddings.save(&dir.join(&emb_rel))?;
    let ann = Annotation {
        id: r.id.clone(),
        canvas: [cw, ch],
        elements: r.layout.elements.iter().map(AnnotatedElement::from).collect(),
        product_mask: mask_rel,
        product_image: image_rel,
        embeddings: emb_rel,
    };
    let path = dir.join(format!("{}.json", r.id));
    std::fs::write(&path, serde_json::to_string_pretty(&ann)?).map_err(|e| Error::file(&path, e))?;
    Ok(())
}

/// Generates and writes an `n`-record corpus into `dir`.
pub fn synth_corpus(grammar: &SyntheticGrammar, n: usize, seed: u64, dir: &Path) -> Result<Vec<SynthRecord>> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let recs = generate(grammar, n, seed)?;
    recs.par_iter().try_for_each(|r| write_record(dir, r))?;
    Ok(recs)
}
