//! Layout domain model: elements, the per-attribute token vocabulary, and
//! the quantized grid the planner operates on.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Slots per layout.
pub const E_MAX: usize = 16;
/// Attributes per element, in token order `(c, x, y, w, h)`.
pub const N_ATTRS: usize = 5;
pub const K_GEO: usize = 64;
pub const K_CAT: usize = 4;
/// Clamp margin before binning so `v = 1` lands in the last bin.
pub const QUANT_EPS: f64 = 1e-6;
/// Slack allowed outside the canvas after bin-center rounding.
pub const CANVAS_SLACK: f64 = 0.02;

pub const ATTR_NAMES: [&str; N_ATTRS] = ["category", "center_x", "center_y", "width", "height"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Text,
    Underlay,
    Product,
    Pad,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Text, Category::Underlay, Category::Product, Category::Pad];
    /// Categories that carry geometry.
    pub const VISIBLE: [Category; 3] = [Category::Text, Category::Underlay, Category::Product];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Text => "text",
            Category::Underlay => "underlay",
            Category::Product => "product",
            Category::Pad => "pad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// One poster element in normalized canvas coordinates (origin top-left,
/// y down).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub category: Category,
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl Element {
    pub fn new(category: Category, center_x: f64, center_y: f64, width: f64, height: f64) -> Self {
        Self { category, center_x, center_y, width, height, text: None }
    }

    pub fn pad() -> Self {
        Self::new(Category::Pad, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn geometry(&self) -> [f64; 4] {
        [self.center_x, self.center_y, self.width, self.height]
    }

    /// `[left, top, right, bottom]`.
    pub fn edges(&self) -> [f64; 4] {
        [
            self.center_x - self.width / 2.0,
            self.center_y - self.height / 2.0,
            self.center_x + self.width / 2.0,
            self.center_y + self.height / 2.0,
        ]
    }

    pub fn from_edges(category: Category, left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self::new(category, (left + right) / 2.0, (top + bottom) / 2.0, right - left, bottom - top)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub elements: Vec<Element>,
    /// Canvas height over width.
    pub canvas_aspect: f64,
}

impl Layout {
    pub fn new(elements: Vec<Element>, canvas_aspect: f64) -> Self {
        Self { elements, canvas_aspect }
    }

    pub fn empty(canvas_aspect: f64) -> Self {
        Self { elements: Vec::new(), canvas_aspect }
    }

    /// Non-Pad elements of one category, in slot order.
    pub fn of(&self, category: Category) -> impl Iterator<Item = &Element> {
        self.elements.iter().filter(move |e| e.category == category)
    }

    pub fn count(&self, category: Category) -> usize {
        self.of(category).count()
    }

    pub fn visible(&self) -> impl Iterator<Item = &Element> {
        self.elements.iter().filter(|e| e.category != Category::Pad)
    }
}

/// Per-attribute categorical spaces. Each attribute has its own MASK id,
/// placed after its regular states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    pub bins_geometry: usize,
    pub categories: usize,
}

impl Default for AttributeVocabulary {
    fn default() -> Self {
        Self { bins_geometry: K_GEO, categories: K_CAT }
    }
}

impl AttributeVocabulary {
    /// Regular (non-MASK) states of attribute `attr`.
    pub fn states(&self, attr: usize) -> usize {
        if attr == 0 {
            self.categories
        } else {
            self.bins_geometry
        }
    }

    /// States including MASK.
    pub fn k_attr(&self, attr: usize) -> usize {
        self.states(attr) + 1
    }

    pub fn mask(&self, attr: usize) -> u16 {
        self.states(attr) as u16
    }

    pub fn pad_category(&self) -> u16 {
        Category::Pad.id() as u16
    }

    pub fn bin(&self, v: f64) -> u16 {
        let k = self.bins_geometry as f64;
        (v.clamp(0.0, 1.0 - QUANT_EPS) * k).floor() as u16
    }

    pub fn bin_center(&self, bin: u16) -> f64 {
        (bin as f64 + 0.5) / self.bins_geometry as f64
    }
}

/// Quantized layout state `z_t`: `E_MAX` rows of `(c, x, y, w, h)` ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub tokens: Vec<[u16; N_ATTRS]>,
    pub timestep: usize,
}

impl TokenGrid {
    pub fn all_mask(vocab: &AttributeVocabulary, timestep: usize) -> Self {
        let row = std::array::from_fn(|a| vocab.mask(a));
        Self { tokens: vec![row; E_MAX], timestep }
    }

    pub fn all_pad(vocab: &AttributeVocabulary) -> Self {
        let mut row = [0u16; N_ATTRS];
        row[0] = vocab.pad_category();
        Self { tokens: vec![row; E_MAX], timestep: 0 }
    }

    pub fn is_all_mask(&self, vocab: &AttributeVocabulary) -> bool {
        self.tokens.iter().all(|r| (0..N_ATTRS).all(|a| r[a] == vocab.mask(a)))
    }

    pub fn flat(&self) -> impl Iterator<Item = u16> + '_ {
        self.tokens.iter().flat_map(|r| r.iter().copied())
    }

    /// Checks every id is below its attribute's state count.
    pub fn check(&self, vocab: &AttributeVocabulary) -> Result<()> {
        if self.tokens.len() != E_MAX {
            return Err(Error::invalid(format!("grid has {} rows, expected {E_MAX}", self.tokens.len())));
        }
        for (slot, row) in self.tokens.iter().enumerate() {
            for (a, &id) in row.iter().enumerate() {
                if id as usize >= vocab.k_attr(a) {
                    return Err(Error::invalid(format!(
                        "slot {slot} {}: token {id} outside 0..{}",
                        ATTR_NAMES[a],
                        vocab.k_attr(a)
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn quantize_layout(layout: &Layout, vocab: &AttributeVocabulary) -> Result<TokenGrid> {
    if layout.elements.len() > E_MAX {
        return Err(Error::invalid(format!("layout has {} elements, capacity is {E_MAX}", layout.elements.len())));
    }
    let mut grid = TokenGrid::all_pad(vocab);
    for (i, e) in layout.elements.iter().enumerate() {
        if e.category == Category::Pad {
            continue;
        }
        let geo = e.geometry();
        if let Some(a) = geo.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("element {i}: non-finite {}", ATTR_NAMES[a + 1])));
        }
        let mut row = [e.category.id() as u16, 0, 0, 0, 0];
        for (a, v) in geo.iter().enumerate() {
            row[a + 1] = vocab.bin(*v);
        }
        grid.tokens[i] = row;
    }
    Ok(grid)
}

pub fn dequantize_tokens(grid: &TokenGrid, vocab: &AttributeVocabulary, canvas_aspect: f64) -> Result<Layout> {
    grid.check(vocab)?;
    let mut elements = Vec::new();
    for (slot, row) in grid.tokens.iter().enumerate() {
        if let Some(a) = (0..N_ATTRS).find(|&a| row[a] == vocab.mask(a)) {
            return Err(Error::invalid(format!("residual MASK at slot {slot}, attribute {}", ATTR_NAMES[a])));
        }
        let category = Category::from_id(row[0] as usize).expect("checked against vocabulary");
        if category == Category::Pad {
            continue;
        }
        let [x, y, w, h] = [1, 2, 3, 4].map(|a| vocab.bin_center(row[a]));
        elements.push(Element::new(category, x, y, w, h));
    }
    Ok(Layout::new(elements, canvas_aspect))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    OutOfCanvas { index: usize },
    ZeroArea { index: usize },
    NonFinite { index: usize },
    PadWithGeometry { index: usize },
    PadNotTrailing { index: usize },
    MissingProduct,
    DuplicateProduct { count: usize },
    Overflow { count: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub issues: Vec<Diagnostic>,
}

impl DiagnosticsReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, pred: impl Fn(&Diagnostic) -> bool) -> bool {
        self.issues.iter().any(pred)
    }
}

/// Structural checks for a layout. Never fails; an empty report means the
/// layout is a valid ground truth.
pub fn validate_layout(layout: &Layout) -> DiagnosticsReport {
    let mut issues = Vec::new();
    let n = layout.elements.len();
    if n > E_MAX {
        issues.push(Diagnostic::Overflow { count: n });
    }
    let mut seen_pad = false;
    for (index, e) in layout.elements.iter().enumerate() {
        if e.category == Category::Pad {
            seen_pad = true;
            if e.width != 0.0 || e.height != 0.0 {
                issues.push(Diagnostic::PadWithGeometry { index });
            }
            continue;
        }
        if seen_pad {
            issues.push(Diagnostic::PadNotTrailing { index });
        }
        if !e.geometry().iter().all(|v| v.is_finite()) {
            issues.push(Diagnostic::NonFinite { index });
            continue;
        }
        if e.width <= 0.0 || e.height <= 0.0 {
            issues.push(Diagnostic::ZeroArea { index });
        }
        let lo = -CANVAS_SLACK;
        let hi = 1.0 + CANVAS_SLACK;
        if e.edges().iter().any(|v| *v < lo || *v > hi) {
            issues.push(Diagnostic::OutOfCanvas { index });
        }
    }
    match layout.count(Category::Product) {
        0 => issues.push(Diagnostic::MissingProduct),
        1 => {}
        count => issues.push(Diagnostic::DuplicateProduct { count }),
    }
    DiagnosticsReport { issues }
}
