//! Poster records on disk: one JSON annotation per poster plus the product
//! image, its mask, and a `PRE1` embedding file, all relative to the
//! annotation's directory.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbaImage};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingBundle;
use crate::layout::{validate_layout, Category, Element, Layout};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedElement {
    pub category: Category,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl From<&Element> for AnnotatedElement {
    fn from(e: &Element) -> Self {
        Self { category: e.category, bbox: e.geometry(), text: e.text.clone() }
    }
}

impl From<&AnnotatedElement> for Element {
    fn from(a: &AnnotatedElement) -> Self {
        let [x, y, w, h] = a.bbox;
        Element { category: a.category, center_x: x, center_y: y, width: w, height: h, text: a.text.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub canvas: [u32; 2],
    pub elements: Vec<AnnotatedElement>,
    pub product_mask: String,
    pub product_image: String,
    pub embeddings: String,
}

/// A layout serialized with the annotation element schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub id: String,
    pub canvas: [u32; 2],
    pub elements: Vec<AnnotatedElement>,
}

impl LayoutFile {
    pub fn new(id: &str, canvas: (u32, u32), layout: &Layout) -> Self {
        Self { id: id.to_string(), canvas: [canvas.0, canvas.1], elements: layout.elements.iter().map(Into::into).collect() }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.elements.iter().map(Into::into).collect(), canvas_aspect(self.canvas))
    }
}

pub fn canvas_aspect(canvas: [u32; 2]) -> f64 {
    canvas[1] as f64 / canvas[0] as f64
}

#[derive(Debug, Clone)]
pub struct PosterRecord {
    pub id: String,
    pub canvas: (u32, u32),
    /// Product pixels cropped to the mask's bounding box; alpha is the mask.
    pub product: RgbaImage,
    pub ground_truth: Layout,
    pub texts: Vec<String>,
    pub embedding_ref: PathBuf,
}

impl PosterRecord {
    pub fn embeddings(&self) -> Result<EmbeddingBundle> {
        EmbeddingBundle::load(&self.embedding_ref)
    }

    pub fn product_box(&self) -> Option<&Element> {
        self.ground_truth.of(Category::Product).next()
    }
}

/// Inclusive pixel bounds `[x0, y0, x1, y1]` of the nonzero mask pixels.
pub fn mask_bbox(mask: &GrayImage) -> Option<[u32; 4]> {
    let mut b: Option<[u32; 4]> = None;
    for (x, y, p) in mask.enumerate_pixels() {
        if p.0[0] == 0 {
            continue;
        }
        b = Some(match b {
            None => [x, y, x, y],
            Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
        });
    }
    b
}

/// Normalized box of an inclusive pixel rectangle.
pub fn bbox_element(b: [u32; 4], canvas: (u32, u32)) -> Element {
    let (w, h) = (canvas.0 as f64, canvas.1 as f64);
    Element::from_edges(Category::Product, b[0] as f64 / w, b[1] as f64 / h, (b[2] + 1) as f64 / w, (b[3] + 1) as f64 / h)
}

fn read_annotation(path: &Path) -> Result<Annotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads one record; the error string is the skip reason.
fn load_record(path: &Path) -> std::result::Result<PosterRecord, String> {
    let ann = read_annotation(path).map_err(|e| format!("malformed annotation: {e}"))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let canvas = (ann.canvas[0], ann.canvas[1]);
    if canvas.0 == 0 || canvas.1 == 0 {
        return Err("zero canvas".into());
    }
    let mask_path = dir.join(&ann.product_mask);
    let mask = image::open(&mask_path).map_err(|e| format!("product mask {}: {e}", mask_path.display()))?.to_luma8();
    let bbox = mask_bbox(&mask).ok_or_else(|| format!("product mask {} is empty", mask_path.display()))?;
    let img_path = dir.join(&ann.product_image);
    let img = image::open(&img_path).map_err(|e| format!("product image {}: {e}", img_path.display()))?.to_rgba8();
    if img.dimensions() != mask.dimensions() {
        return Err(format!("product image {:?} and mask {:?} differ in size", img.dimensions(), mask.dimensions()));
    }
    let (cw, ch) = (bbox[2] - bbox[0] + 1, bbox[3] - bbox[1] + 1);
    let product = RgbaImage::from_fn(cw, ch, |x, y| {
        let mut p = *img.get_pixel(bbox[0] + x, bbox[1] + y);
        let m = mask.get_pixel(bbox[0] + x, bbox[1] + y).0[0] as u32;
        p.0[3] = ((p.0[3] as u32 * m + 127) / 255) as u8;
        p
    });
    let mut elements: Vec<Element> = ann.elements.iter().map(Into::into).collect();
    let from_mask = bbox_element(bbox, (mask.width(), mask.height()));
    for e in elements.iter_mut().filter(|e| e.category == Category::Product) {
        e.center_x = from_mask.center_x;
        e.center_y = from_mask.center_y;
        e.width = from_mask.width;
        e.height = from_mask.height;
    }
    let texts = elements.iter().filter(|e| e.category == Category::Text).map(|e| e.text.clone().unwrap_or_default()).collect();
    let ground_truth = Layout::new(elements, canvas_aspect(ann.canvas));
    let diag = validate_layout(&ground_truth);
    if !diag.is_empty() {
        return Err(format!("invalid ground truth: {:?}", diag.issues));
    }
    Ok(PosterRecord { id: ann.id, canvas, product, ground_truth, texts, embedding_ref: dir.join(&ann.embeddings) })
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub records: Vec<PosterRecord>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Loads every `*.json` annotation in `dir`, sorted by id. Unusable records
/// are skipped with a logged reason.
pub fn load_dataset(dir: &Path) -> Result<LoadReport> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let p = entry.map_err(|e| Error::file(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            paths.push(p);
        }
    }
    paths.sort();
    let results: Vec<_> = paths.par_iter().map(|p| (p.clone(), load_record(p))).collect();
    let mut report = LoadReport::default();
    for (p, r) in results {
        match r {
            Ok(rec) => report.records.push(rec),
            Err(reason) => {
                warn!("skipping {}: {reason}", p.display());
                report.skipped.push((p, reason));
            }
        }
    }
    report.records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(report)
}
