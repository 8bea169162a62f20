//! Poster assembly: a palette-driven gradient background, rounded underlays,
//! the repositioned product, and shrink-to-fit text whose color is chosen
//! against the mean color of the region beneath it.

use std::path::Path;
use std::sync::OnceLock;

use ab_glyph::{point, Font, FontRef, Glyph, GlyphId, PxScale, ScaleFont};
use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{Category, Element, Layout};
use crate::render::{pixel_span, reposition_product};
use crate::{Error, Result};

/// Pixels kept clear between a text box edge and its glyphs.
pub const TEXT_INSET: i64 = 2;
/// Single-line sizes below this trigger word wrapping.
pub const WRAP_BELOW_PX: f32 = 12.0;
pub const UNDERLAY_OPACITY: f64 = 0.85;
pub const LINE_HEIGHT: f32 = 1.15;
/// Minimum top luminance of the background gradient.
const BACKGROUND_MIN_LUMINANCE: f64 = 0.65;
/// Drawn in place of characters the chosen font lacks.
const TOFU: char = '\u{25A1}';

const FONT_DATA: [(&str, &[u8]); 6] = [
    ("DejaVu Sans", include_bytes!("../assets/fonts/DejaVuSans.ttf")),
    ("DejaVu Sans Bold", include_bytes!("../assets/fonts/DejaVuSans-Bold.ttf")),
    ("DejaVu Serif", include_bytes!("../assets/fonts/DejaVuSerif.ttf")),
    ("DejaVu Serif Bold", include_bytes!("../assets/fonts/DejaVuSerif-Bold.ttf")),
    ("DejaVu Sans Mono", include_bytes!("../assets/fonts/DejaVuSansMono.ttf")),
    ("DejaVu Sans Mono Bold", include_bytes!("../assets/fonts/DejaVuSansMono-Bold.ttf")),
];

/// The bundled fonts, addressed by index.
pub fn fonts() -> &'static [(&'static str, FontRef<'static>)] {
    static FONTS: OnceLock<Vec<(&'static str, FontRef<'static>)>> = OnceLock::new();
    FONTS.get_or_init(|| {
        FONT_DATA.iter().map(|(name, data)| (*name, FontRef::try_from_slice(data).expect("bundled font parses"))).collect()
    })
}

/// sRGB in `[0, 1]`.
pub type Color = [f64; 3];

fn channel_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn relative_luminance(c: Color) -> f64 {
    0.2126 * channel_linear(c[0]) + 0.7152 * channel_linear(c[1]) + 0.0722 * channel_linear(c[2])
}

pub fn contrast_ratio(a: Color, b: Color) -> f64 {
    let (la, lb) = (relative_luminance(a), relative_luminance(b));
    (la.max(lb) + 0.05) / (la.min(lb) + 0.05)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    /// `(color, weight)` by decreasing weight; weights sum to 1.
    pub colors: Vec<(Color, f64)>,
}

impl Palette {
    pub fn dominant(&self) -> Color {
        self.colors[0].0
    }

    /// Second color when there is one, else the dominant.
    pub fn accent(&self) -> Color {
        self.colors.get(1).unwrap_or(&self.colors[0]).0
    }
}

/// Top-4 buckets of an 8-per-channel histogram over opaque pixels, each
/// represented by the mean color of its members.
pub fn extract_palette(product: &RgbaImage) -> Palette {
    let mut count = vec![0u64; 512];
    let mut sums = vec![[0u64; 3]; 512];
    for p in product.pixels() {
        if p.0[3] < 128 {
            continue;
        }
        let b = (p.0[0] as usize >> 5) * 64 + (p.0[1] as usize >> 5) * 8 + (p.0[2] as usize >> 5);
        count[b] += 1;
        for c in 0..3 {
            sums[b][c] += p.0[c] as u64;
        }
    }
    let mut order: Vec<usize> = (0..512).filter(|&b| count[b] > 0).collect();
    order.sort_by(|a, b| count[*b].cmp(&count[*a]).then(a.cmp(b)));
    order.truncate(4);
    if order.is_empty() {
        return Palette { colors: vec![([0.5; 3], 1.0)] };
    }
    let total: u64 = order.iter().map(|&b| count[b]).sum();
    let colors = order
        .iter()
        .map(|&b| {
            let n = count[b] as f64;
            ([sums[b][0] as f64 / n / 255.0, sums[b][1] as f64 / n / 255.0, sums[b][2] as f64 / n / 255.0], n / total as f64)
        })
        .collect();
    Palette { colors }
}

fn mix(a: Color, b: Color, t: f64) -> Color {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn desaturate(c: Color, keep: f64) -> Color {
    let l = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    [l + (c[0] - l) * keep, l + (c[1] - l) * keep, l + (c[2] - l) * keep]
}

fn to_u8(c: f64) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Vertical two-stop gradient from a softened dominant color at the top to
/// near-white at the bottom.
pub fn procedural_background(palette: &Palette, size: (u32, u32), seed: u64) -> RgbaImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = desaturate(palette.dominant(), rng.gen_range(0.45..0.7));
    let mut t = rng.gen_range(0.45..0.7);
    let mut top = mix(base, [1.0; 3], t);
    while relative_luminance(top) < BACKGROUND_MIN_LUMINANCE && t < 1.0 {
        t = (t + 0.02).min(1.0);
        top = mix(base, [1.0; 3], t);
    }
    let bottom_level = rng.gen_range(0.95..1.0);
    let bottom = mix(top, [bottom_level; 3], 0.85);
    let h = size.1.max(2) as f64 - 1.0;
    let rows: Vec<Rgba<u8>> = (0..size.1)
        .map(|y| {
            let c = mix(top, bottom, y as f64 / h);
            Rgba([to_u8(c[0]), to_u8(c[1]), to_u8(c[2]), 255])
        })
        .collect();
    RgbaImage::from_fn(size.0, size.1, |_, y| rows[y as usize])
}

/// Black or white, whichever contrasts more with `region`, nudged toward
/// the extreme until the ratio reaches 4.5.
pub fn pick_text_color(region: Color) -> Color {
    let white = contrast_ratio([1.0; 3], region);
    let black = contrast_ratio([0.0; 3], region);
    let mut c = if white < black { [0.0; 3] } else { [1.0; 3] };
    let target = c;
    let mut t = 0.0;
    while contrast_ratio(c, region) < 4.5 && t < 1.0 {
        t += 0.1;
        c = mix(c, target, t);
    }
    c
}

/// Mean color of `rect = [x0, y0, x1, y1)`; `None` when empty.
pub fn region_mean(img: &RgbaImage, rect: [i64; 4]) -> Option<Color> {
    let x0 = rect[0].max(0) as u32;
    let y0 = rect[1].max(0) as u32;
    let x1 = (rect[2].min(img.width() as i64)).max(0) as u32;
    let y1 = (rect[3].min(img.height() as i64)).max(0) as u32;
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let mut acc = [0f64; 3];
    for y in y0..y1 {
        for x in x0..x1 {
            let p = img.get_pixel(x, y).0;
            for c in 0..3 {
                acc[c] += p[c] as f64;
            }
        }
    }
    let n = ((x1 - x0) * (y1 - y0)) as f64 * 255.0;
    Some([acc[0] / n, acc[1] / n, acc[2] / n])
}

fn blend(img: &mut RgbaImage, x: i64, y: i64, color: Color, alpha: f64) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 || alpha <= 0.0 {
        return;
    }
    let p = img.get_pixel_mut(x as u32, y as u32);
    for c in 0..3 {
        let v = p.0[c] as f64 / 255.0;
        p.0[c] = to_u8(v + (color[c] - v) * alpha.min(1.0));
    }
}

/// Pixel rectangle `[x0, y0, x1, y1)` of a box on a `size` canvas.
pub fn box_px(e: &Element, size: (u32, u32)) -> [i64; 4] {
    let (x0, w) = pixel_span(e.center_x, e.width, size.0 as usize);
    let (y0, h) = pixel_span(e.center_y, e.height, size.1 as usize);
    [x0, y0, x0 + w, y0 + h]
}

fn draw_rounded_rect(img: &mut RgbaImage, r: [i64; 4], color: Color, alpha: f64) {
    let (w, h) = (r[2] - r[0], r[3] - r[1]);
    if w <= 0 || h <= 0 {
        return;
    }
    let rad = 0.25 * w.min(h) as f64;
    for y in r[1]..r[3] {
        for x in r[0]..r[2] {
            let px = (x - r[0]) as f64 + 0.5;
            let py = (y - r[1]) as f64 + 0.5;
            let dx = (rad - px).max(px - (w as f64 - rad)).max(0.0);
            let dy = (rad - py).max(py - (h as f64 - rad)).max(0.0);
            if dx * dx + dy * dy <= rad * rad {
                blend(img, x, y, color, alpha);
            }
        }
    }
}

fn draw_product(canvas: &mut RgbaImage, product: &RgbaImage, layout: &Layout) -> Result<()> {
    for e in layout.of(Category::Product) {
        let placed = reposition_product(product, e, canvas.dimensions())?;
        image::imageops::overlay(canvas, &placed, 0, 0);
    }
    Ok(())
}

struct TextLayout {
    /// Glyphs positioned at absolute baselines.
    glyphs: Vec<Glyph>,
    lines: usize,
    size: f32,
    missing: usize,
    /// Union of glyph pixel bounds `[x0, y0, x1, y1)`.
    bounds: Option<[i64; 4]>,
}

fn layout_lines(font: &FontRef<'static>, lines: &[String], size: f32) -> TextLayout {
    let scale = PxScale::from(size);
    let sf = font.as_scaled(scale);
    let tofu = font.glyph_id(TOFU);
    let mut glyphs = Vec::new();
    let mut missing = 0;
    let mut bounds: Option<[f32; 4]> = None;
    let step = (sf.ascent() - sf.descent() + sf.line_gap()) * LINE_HEIGHT;
    for (li, line) in lines.iter().enumerate() {
        let baseline = sf.ascent() + li as f32 * step;
        let mut x = 0.0f32;
        let mut prev: Option<GlyphId> = None;
        for ch in line.chars() {
            let mut id = font.glyph_id(ch);
            if id.0 == 0 && !ch.is_whitespace() {
                missing += 1;
                id = tofu;
            }
            if let Some(p) = prev {
                x += sf.kern(p, id);
            }
            let glyph = id.with_scale_and_position(scale, point(x, baseline));
            if let Some(o) = font.outline_glyph(glyph.clone()) {
                let b = o.px_bounds();
                bounds = Some(match bounds {
                    None => [b.min.x, b.min.y, b.max.x, b.max.y],
                    Some(u) => [u[0].min(b.min.x), u[1].min(b.min.y), u[2].max(b.max.x), u[3].max(b.max.y)],
                });
            }
            x += sf.h_advance(id);
            prev = Some(id);
            glyphs.push(glyph);
        }
    }
    let bounds = bounds.map(|b| [b[0].floor() as i64, b[1].floor() as i64, b[2].ceil() as i64, b[3].ceil() as i64]);
    TextLayout { glyphs, lines: lines.len(), size, missing, bounds }
}

fn fits(t: &TextLayout, inner: [i64; 4]) -> bool {
    match t.bounds {
        Some(b) => b[2] - b[0] <= inner[2] - inner[0] && b[3] - b[1] <= inner[3] - inner[1],
        None => true,
    }
}

/// Largest size in `[1, hi]` at which `lines` fit inside `inner`.
fn shrink_to_fit(font: &FontRef<'static>, lines: &[String], inner: [i64; 4]) -> Option<TextLayout> {
    let hi = (inner[3] - inner[1]) as f32 * 1.5 + 1.0;
    let mut lo_fit = layout_lines(font, lines, 1.0);
    if !fits(&lo_fit, inner) {
        return None;
    }
    let (mut lo, mut hi) = (1.0f32, hi);
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        let t = layout_lines(font, lines, mid);
        if fits(&t, inner) {
            lo = mid;
            lo_fit = t;
        } else {
            hi = mid;
        }
    }
    Some(lo_fit)
}

/// Splits words into `k` lines greedily against an even character budget.
fn wrap_words(words: &[&str], k: usize) -> Vec<String> {
    let total: usize = words.iter().map(|w| w.chars().count()).sum::<usize>() + words.len().saturating_sub(1);
    let budget = total.div_ceil(k);
    let mut lines: Vec<String> = Vec::new();
    let mut cur = String::new();
    for (i, w) in words.iter().enumerate() {
        let remaining_words = words.len() - i;
        let remaining_lines = k - lines.len();
        let cur_len = cur.chars().count();
        if !cur.is_empty() && (cur_len + 1 + w.chars().count() > budget || remaining_words < remaining_lines) && remaining_lines > 1 {
            lines.push(std::mem::take(&mut cur));
        }
        if !cur.is_empty() {
            cur.push(' ');
        }
        cur.push_str(w);
    }
    if !cur.is_empty() {
        lines.push(cur);
    }
    lines
}

fn fit_text(font: &FontRef<'static>, text: &str, inner: [i64; 4]) -> Option<(TextLayout, Vec<String>)> {
    let single = vec![text.to_string()];
    let best = shrink_to_fit(font, &single, inner);
    let words: Vec<&str> = text.split_whitespace().collect();
    if best.as_ref().is_some_and(|b| b.size >= WRAP_BELOW_PX) || words.len() < 2 {
        return best.map(|b| (b, single));
    }
    let mut best = best.map(|b| (b, single));
    for k in 2..=words.len().min(4) {
        let lines = wrap_words(&words, k);
        if let Some(t) = shrink_to_fit(font, &lines, inner) {
            if best.as_ref().map_or(true, |(b, _)| t.size > b.size) {
                best = Some((t, lines));
            }
        }
    }
    best
}

fn draw_text(img: &mut RgbaImage, font: &FontRef<'static>, t: &TextLayout, dx: i64, dy: i64, color: Color) -> [i64; 4] {
    let mut drawn: Option<[i64; 4]> = None;
    // outline at the fitted positions and shift in whole pixels, so the
    // drawn bounds are exactly the fitted bounds moved by (dx, dy)
    for p in &t.glyphs {
        let Some(o) = font.outline_glyph(p.clone()) else { continue };
        let b = o.px_bounds();
        let (bx, by) = (b.min.x as i64 + dx, b.min.y as i64 + dy);
        let r = [bx, by, b.max.x as i64 + dx, b.max.y as i64 + dy];
        drawn = Some(match drawn {
            None => r,
            Some(u) => [u[0].min(r[0]), u[1].min(r[1]), u[2].max(r[2]), u[3].max(r[3])],
        });
        o.draw(|x, y, cov| blend(img, bx + x as i64, by + y as i64, color, cov as f64));
    }
    drawn.unwrap_or([0; 4])
}

/// Audit entry for one rendered element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementRender {
    pub index: usize,
    pub category: Category,
    pub box_px: [i64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<TextRender>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRender {
    pub content: String,
    pub font: String,
    pub size_px: f32,
    pub lines: usize,
    pub color: Color,
    pub region_mean: Color,
    pub contrast: f64,
    /// Union of drawn glyph pixel bounds; `None` if nothing fit.
    pub glyph_bounds: Option<[i64; 4]>,
    pub missing_glyphs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub seed: u64,
    pub canvas: (u32, u32),
    pub elements: Vec<ElementRender>,
    pub missing_glyphs: usize,
}

pub struct Poster {
    pub image: RgbaImage,
    pub report: RenderReport,
}

impl Poster {
    /// Writes the PNG and its sidecar `<stem>.json`.
    pub fn save(&self, png_path: &Path) -> Result<()> {
        let rgb = image::DynamicImage::ImageRgba8(self.image.clone()).to_rgb8();
        rgb.save(png_path)?;
        let side = png_path.with_extension("json");
        std::fs::write(&side, serde_json::to_string_pretty(&self.report)?).map_err(|e| Error::file(&side, e))?;
        Ok(())
    }
}

/// Background, underlays and product; everything except text.
pub fn compose_base(product: &RgbaImage, layout: &Layout, canvas: (u32, u32), seed: u64) -> Result<RgbaImage> {
    let palette = extract_palette(product);
    let mut img = procedural_background(&palette, canvas, seed);
    let accent = palette.accent();
    // lightened accent keeps dark products from producing heavy underlays
    let underlay = mix(desaturate(accent, 0.8), [1.0; 3], 0.35);
    for e in layout.of(Category::Underlay) {
        draw_rounded_rect(&mut img, box_px(e, canvas), underlay, UNDERLAY_OPACITY);
    }
    draw_product(&mut img, product, layout)?;
    Ok(img)
}

/// Renders a poster. Texts are assigned to Text elements in layout order.
pub fn compose_poster(product: &RgbaImage, texts: &[String], layout: &Layout, canvas: (u32, u32), seed: u64) -> Result<Poster> {
    let n_text = layout.count(Category::Text);
    if n_text > texts.len() {
        return Err(Error::invalid(format!(
            "layout has {n_text} text elements but only {} strings are available ({} missing)",
            texts.len(),
            n_text - texts.len()
        )));
    }
    let base = compose_base(product, layout, canvas, seed)?;
    let mut img = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_f0e7);
    let lib = fonts();
    let mut elements = Vec::new();
    let mut text_i = 0;
    let mut missing_total = 0;
    for (index, e) in layout.elements.iter().enumerate() {
        if e.category == Category::Pad {
            continue;
        }
        let box_r = box_px(e, canvas);
        let mut render = ElementRender { index, category: e.category, box_px: box_r, text: None };
        if e.category == Category::Text {
            let content = texts[text_i].clone();
            text_i += 1;
            let (font_name, font) = &lib[rng.gen_range(0..lib.len())];
            let inner = [box_r[0] + TEXT_INSET, box_r[1] + TEXT_INSET, box_r[2] - TEXT_INSET, box_r[3] - TEXT_INSET];
            let region = region_mean(&base, inner).or_else(|| region_mean(&base, box_r)).unwrap_or([1.0; 3]);
            let color = pick_text_color(region);
            let mut tr = TextRender {
                content: content.clone(),
                font: font_name.to_string(),
                size_px: 0.0,
                lines: 0,
                color,
                region_mean: region,
                contrast: contrast_ratio(color, region),
                glyph_bounds: None,
                missing_glyphs: 0,
            };
            let fitted = if inner[2] > inner[0] && inner[3] > inner[1] { fit_text(font, &content, inner) } else { None };
            if let Some((t, _)) = fitted {
                if let Some(b) = t.bounds {
                    let dx = inner[0] + ((inner[2] - inner[0]) - (b[2] - b[0])) / 2 - b[0];
                    let dy = inner[1] + ((inner[3] - inner[1]) - (b[3] - b[1])) / 2 - b[1];
                    tr.glyph_bounds = Some(draw_text(&mut img, font, &t, dx, dy, color));
                }
                tr.size_px = t.size;
                tr.lines = t.lines;
                tr.missing_glyphs = t.missing;
                missing_total += t.missing;
            }
            render.text = Some(tr);
        }
        elements.push(render);
    }
    Ok(Poster { image: img, report: RenderReport { seed, canvas, elements, missing_glyphs: missing_total } })
}
