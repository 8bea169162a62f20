//! Geometric front-end of the renderer: masked layout images, the spatial
//! fusion branch producing `Z_L`, product repositioning, the vision branch
//! producing `Z_V`, and assembly of the control condition.

use std::io::BufWriter;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgba, RgbaImage};
use ppg_nn::checkpoint::{save_records, Record};
use ppg_nn::layers::{Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use ppg_nn::{Float, Graph, Init, ParameterStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{Category, Element, Layout};
use crate::{Error, Result};

/// Mask planes in order: Text, then Underlay.
pub const MASK_CATEGORIES: [Category; 2] = [Category::Text, Category::Underlay];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Mask-encoder channels `C`.
    pub channels: usize,
    /// Feature width `W` and height `H`.
    pub width: usize,
    pub height: usize,
    /// Patch size `P`.
    pub patch: usize,
    /// Fusion transformer depth `S`.
    pub depth: usize,
    pub heads: usize,
    /// Token width inside the fusion transformer.
    pub d_model: usize,
    /// Channels of the latent that `Z_L`, `Z_V` and `Z_t` share.
    pub latent_channels: usize,
    /// Hidden channels of the first five product-encoder convs.
    pub product_channels: [usize; 5],
}

impl FusionConfig {
    pub fn paper() -> Self {
        Self {
            channels: 320,
            width: 128,
            height: 192,
            patch: 8,
            depth: 2,
            heads: 8,
            d_model: 320,
            latent_channels: 4,
            product_channels: [16, 16, 32, 32, 96],
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: 8,
            width: 32,
            height: 48,
            patch: 8,
            depth: 2,
            heads: 4,
            d_model: 32,
            latent_channels: 4,
            product_channels: [8, 8, 16, 16, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width % self.patch != 0 || self.height % self.patch != 0 {
            return Err(Error::invalid(format!("feature size {}x{} is not divisible by patch {}", self.width, self.height, self.patch)));
        }
        if self.width % 4 != 0 || self.height % 4 != 0 {
            return Err(Error::invalid("feature size must be divisible by 4"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.channels == 0 || self.latent_channels == 0 || self.product_channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    /// `[channels, height, width]` of `Z_L`, `Z_V` and `Z_t`.
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.height / 4, self.width / 4]
    }

    /// Pixel size `(w, h)` of the product raster fed to the vision branch.
    pub fn product_size(&self) -> (u32, u32) {
        (2 * self.width as u32, 2 * self.height as u32)
    }
}

/// Pixel span `(start, len)` of a normalized interval on an `n`-pixel axis.
/// Length is `round(size * n)` and start is `round(center * n - len / 2)`,
/// both rounding halves away from zero.
pub fn pixel_span(center: f64, size: f64, n: usize) -> (i64, i64) {
    let len = (size * n as f64).round() as i64;
    let start = (center * n as f64 - len as f64 / 2.0).round() as i64;
    (start, len)
}

/// Binary rasters, one per entry of [`MASK_CATEGORIES`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStack {
    pub width: usize,
    pub height: usize,
    /// Row-major planes of 0/1.
    pub planes: Vec<Vec<u8>>,
}

impl MaskStack {
    pub fn count(&self, plane: usize) -> usize {
        self.planes[plane].iter().map(|&p| p as usize).sum()
    }

    /// Writes one plane as a 1-bit grayscale PNG.
    pub fn write_png(&self, plane: usize, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(f), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.planes[plane][y * self.width + x] != 0 {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        let mut w = enc.write_header().map_err(|e| Error::Runtime(format!("png: {e}")))?;
        w.write_image_data(&packed).map_err(|e| Error::Runtime(format!("png: {e}")))?;
        Ok(())
    }
}

pub fn rasterize_masks(layout: &Layout, width: usize, height: usize) -> MaskStack {
    let mut planes = vec![vec![0u8; width * height]; MASK_CATEGORIES.len()];
    for e in &layout.elements {
        let Some(plane) = MASK_CATEGORIES.iter().position(|c| *c == e.category) else { continue };
        let (x0, w) = pixel_span(e.center_x, e.width, width);
        let (y0, h) = pixel_span(e.center_y, e.height, height);
        let xs = x0.clamp(0, width as i64) as usize..(x0 + w).clamp(0, width as i64) as usize;
        let ys = y0.clamp(0, height as i64) as usize..(y0 + h).clamp(0, height as i64) as usize;
        for y in ys {
            planes[plane][y * width + xs.start..y * width + xs.end].fill(1);
        }
    }
    MaskStack { width, height, planes }
}

/// Flat indices turning `[n, c, h, w]` into `[n * patches, c * p * p]` rows.
fn patchify_index(n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for iy in 0..p {
                        for ix in 0..p {
                            idx.push(((b * c + ch) * h + py * p + iy) * w + px * p + ix);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`patchify_index`].
fn unpatchify_index(n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let row = c * p * p;
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let r = (b * gh + y / p) * gw + x / p;
                    idx.push(r * row + (ch * p + y % p) * p + x % p);
                }
            }
        }
    }
    idx
}

#[derive(Debug, Clone)]
struct FusionLayer {
    norm: LayerNorm,
    attn: MultiHeadAttention,
    ff: FeedForward,
}

/// Spatial fusion branch: per-plane conv encoders, per-patch aggregation
/// token attention, and an output conv stack ending at the latent shape.
#[derive(Debug, Clone)]
pub struct LayoutFusion {
    pub cfg: FusionConfig,
    plane_convs: Vec<[Conv2d; 3]>,
    plane_proj: Vec<Linear>,
    agg_token: String,
    layers: Vec<FusionLayer>,
    unproj: Linear,
    out_convs: [Conv2d; 3],
}

impl LayoutFusion {
    pub fn new<T: Float, R: Rng>(cfg: FusionConfig, store: &mut ParameterStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let pp = cfg.patch * cfg.patch;
        let mut plane_convs = Vec::new();
        let mut plane_proj = Vec::new();
        for m in 0..MASK_CATEGORIES.len() {
            let name = format!("fusion.plane{m}");
            plane_convs.push([
                Conv2d::new(store, &format!("{name}.conv0"), 1, c, 3, 1, 1, false, rng)?,
                Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1, false, rng)?,
                Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, false, rng)?,
            ]);
            plane_proj.push(Linear::new(store, &format!("{name}.proj"), c * pp, cfg.d_model, true, rng)?);
        }
        let agg_token = "fusion.agg_token".to_string();
        store.init(&agg_token, &[1, cfg.d_model], Init::Normal { std: 0.02 }, rng)?;
        let mut layers = Vec::new();
        for s in 0..cfg.depth {
            let name = format!("fusion.layer{s}");
            layers.push(FusionLayer {
                norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d_model, rng)?,
                attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.d_model, cfg.heads, rng)?,
                ff: FeedForward::new(store, &format!("{name}.ff"), cfg.d_model, 4 * cfg.d_model, rng)?,
            });
        }
        let unproj = Linear::new(store, "fusion.unproj", cfg.d_model, c * pp, true, rng)?;
        let out_convs = [
            Conv2d::new(store, "fusion.out0", c, c, 3, 2, 1, false, rng)?,
            Conv2d::new(store, "fusion.out1", c, c, 3, 2, 1, false, rng)?,
            Conv2d::new(store, "fusion.out2", c, cfg.latent_channels, 3, 1, 1, true, rng)?,
        ];
        Ok(Self { cfg, plane_convs, plane_proj, agg_token, layers, unproj, out_convs })
    }

    /// `Z_L` for a batch of stacks as `[n, latent_channels, H/4, W/4]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, stacks: &[&MaskStack]) -> Result<Var> {
        let cfg = &self.cfg;
        let (w, h, p, c) = (cfg.width, cfg.height, cfg.patch, cfg.channels);
        let n = stacks.len();
        if n == 0 {
            return Err(Error::invalid("empty mask batch"));
        }
        for s in stacks {
            if s.planes.len() != self.plane_convs.len() {
                return Err(Error::invalid(format!("mask stack has {} planes, fusion expects {}", s.planes.len(), self.plane_convs.len())));
            }
            if s.width != w || s.height != h {
                return Err(Error::invalid(format!("mask stack is {}x{}, fusion expects {w}x{h}", s.width, s.height)));
            }
        }
        let np = cfg.patches();
        let patch_idx = patchify_index(n, c, h, w, p);
        let mut plane_tokens = Vec::new();
        for (m, (convs, proj)) in self.plane_convs.iter().zip(&self.plane_proj).enumerate() {
            let mut data = Vec::with_capacity(n * w * h);
            for s in stacks {
                data.extend(s.planes[m].iter().map(|&v| T::of(v as f64)));
            }
            let mut x = g.input(Tensor::new(vec![n, 1, h, w], data)?);
            for (i, conv) in convs.iter().enumerate() {
                x = conv.forward(g, store, x)?;
                if i + 1 < convs.len() {
                    x = g.silu(x)?;
                }
            }
            let rows = g.gather(x, patch_idx.clone(), &[n * np, c * p * p])?;
            plane_tokens.push(proj.forward(g, store, rows)?);
        }
        // rows per patch: aggregation token, then plane 0, plane 1, ...
        let agg = g.param(store, &self.agg_token)?;
        let agg = g.repeat_rows(agg, &[n * np])?;
        let mut parts = vec![agg];
        parts.extend(plane_tokens);
        let stacked = g.concat_rows(&parts)?;
        let group = parts.len();
        let order: Vec<usize> = (0..n * np).flat_map(|j| (0..group).map(move |m| m * n * np + j)).collect();
        let mut x = g.gather_rows(stacked, &order)?;
        let segments = vec![(group, group); n * np];
        for layer in &self.layers {
            let hn = layer.norm.forward(g, store, x)?;
            let a = layer.attn.forward(g, store, hn, hn, &segments)?;
            x = g.add(x, a)?;
            let f = layer.ff.forward(g, store, x)?;
            x = g.add(x, f)?;
        }
        let first: Vec<usize> = (0..n * np).map(|j| j * group).collect();
        let fused = g.gather_rows(x, &first)?;
        let fused = self.unproj.forward(g, store, fused)?;
        let mut z = g.gather(fused, unpatchify_index(n, c, h, w, p), &[n, c, h, w])?;
        for (i, conv) in self.out_convs.iter().enumerate() {
            z = conv.forward(g, store, z)?;
            if i + 1 < self.out_convs.len() {
                z = g.silu(z)?;
            }
        }
        Ok(z)
    }
}

/// Six-conv vision branch from the repositioned product raster to `Z_V`.
#[derive(Debug, Clone)]
pub struct ProductEncoder {
    pub cfg: FusionConfig,
    convs: Vec<Conv2d>,
}

pub const PRODUCT_STRIDES: [usize; 6] = [1, 2, 1, 2, 1, 2];

impl ProductEncoder {
    pub fn new<T: Float, R: Rng>(cfg: FusionConfig, store: &mut ParameterStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut chans = vec![3];
        chans.extend_from_slice(&cfg.product_channels);
        chans.push(cfg.latent_channels);
        let mut convs = Vec::new();
        for (i, s) in PRODUCT_STRIDES.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("vision.conv{i}"), chans[i], chans[i + 1], 3, *s, 1, i == 5, rng)?);
        }
        Ok(Self { cfg, convs })
    }

    /// `images`: RGB rasters already composited and scaled to
    /// [`FusionConfig::product_size`].
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, images: &[&RgbaImage]) -> Result<Var> {
        let (w, h) = self.cfg.product_size();
        if images.is_empty() {
            return Err(Error::invalid("empty product batch"));
        }
        let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
        for img in images {
            if img.dimensions() != (w, h) {
                return Err(Error::invalid(format!("product raster is {:?}, vision branch expects {w}x{h}", img.dimensions())));
            }
            for ch in 0..3 {
                data.extend(img.pixels().map(|p| T::of(vision_value(p, ch))));
            }
        }
        let mut x = g.input(Tensor::new(vec![images.len(), 3, h as usize, w as usize], data)?);
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, store, x)?;
            if i + 1 < self.convs.len() {
                x = g.silu(x)?;
            }
        }
        Ok(x)
    }
}

/// Channel value in `[-1, 1]` after compositing over neutral gray, which
/// maps to 0.
fn vision_value(p: &Rgba<u8>, ch: usize) -> f64 {
    let a = p.0[3] as f64 / 255.0;
    let c = p.0[ch] as f64 / 255.0;
    2.0 * (a * c + (1.0 - a) * 0.5) - 1.0
}

/// Scales `product` to fit inside `product_box` with its aspect preserved,
/// centers it there, and pastes it onto a transparent `size` raster.
pub fn reposition_product(product: &RgbaImage, product_box: &Element, size: (u32, u32)) -> Result<RgbaImage> {
    if product_box.category != Category::Product {
        return Err(Error::invalid(format!("reposition needs a product box, got {}", product_box.category.name())));
    }
    let (x0, bw) = pixel_span(product_box.center_x, product_box.width, size.0 as usize);
    let (y0, bh) = pixel_span(product_box.center_y, product_box.height, size.1 as usize);
    if bw <= 0 || bh <= 0 || product.width() == 0 || product.height() == 0 {
        return Err(Error::invalid("degenerate product box"));
    }
    let (pw, ph) = (product.width() as f64, product.height() as f64);
    let scale = (bw as f64 / pw).min(bh as f64 / ph);
    let dw = ((pw * scale).round() as u32).max(1);
    let dh = ((ph * scale).round() as u32).max(1);
    let scaled = if (dw, dh) == product.dimensions() { product.clone() } else { imageops::resize(product, dw, dh, FilterType::Triangle) };
    let ox = x0 + (bw - dw as i64) / 2;
    let oy = y0 + (bh - dh as i64) / 2;
    let mut out = RgbaImage::new(size.0, size.1);
    imageops::overlay(&mut out, &scaled, ox, oy);
    Ok(out)
}

/// `Z_L`, `Z_V` and `Z' = Z_t + Z_L + Z_V` for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTensors {
    pub z_l: Tensor<f32>,
    pub z_v: Tensor<f32>,
    pub z_prime: Tensor<f32>,
}

impl ConditionTensors {
    /// Dumps the three tensors in the `PRCK` record format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let recs =
            [Record::from_tensor("z_l", &self.z_l), Record::from_tensor("z_v", &self.z_v), Record::from_tensor("z_prime", &self.z_prime)];
        save_records(path, &recs).map_err(|e| match e {
            ppg_nn::NnError::Io(io) => Error::file(path, io),
            other => other.into(),
        })
    }
}

/// Elementwise sum of three equally shaped tensors.
pub fn assemble_condition<T: Float>(z_t: &Tensor<T>, z_l: &Tensor<T>, z_v: &Tensor<T>) -> Result<Tensor<T>> {
    if z_t.shape() != z_l.shape() || z_t.shape() != z_v.shape() {
        return Err(Error::invalid(format!(
            "condition shapes differ: Z_t {:?}, Z_L {:?}, Z_V {:?}",
            z_t.shape(),
            z_l.shape(),
            z_v.shape()
        )));
    }
    let data = z_t.data().iter().zip(z_l.data()).zip(z_v.data()).map(|((a, b), c)| *a + (*b + *c)).collect();
    Ok(Tensor::new(z_t.shape().to_vec(), data)?)
}

/// Both geometric branches sharing one parameter store.
#[derive(Debug, Clone)]
pub struct RenderFrontEnd {
    pub fusion: LayoutFusion,
    pub vision: ProductEncoder,
}

impl RenderFrontEnd {
    pub fn new<R: Rng>(cfg: FusionConfig, store: &mut ParameterStore<f32>, rng: &mut R) -> Result<Self> {
        Ok(Self { fusion: LayoutFusion::new(cfg, store, rng)?, vision: ProductEncoder::new(cfg, store, rng)? })
    }

    /// Conditions for one planned layout. `z_t` stands in for the noised
    /// latent of the out-of-scope backbone.
    pub fn condition(
        &self,
        store: &ParameterStore<f32>,
        layout: &Layout,
        product: &RgbaImage,
        z_t: &Tensor<f32>,
    ) -> Result<ConditionTensors> {
        let cfg = &self.fusion.cfg;
        let stack = rasterize_masks(layout, cfg.width, cfg.height);
        let product_box = layout
            .of(Category::Product)
            .next()
            .ok_or_else(|| Error::invalid("layout has no product element"))?;
        let v = reposition_product(product, product_box, cfg.product_size())?;
        let mut g = Graph::new(false);
        let zl = self.fusion.forward(&mut g, store, &[&stack])?;
        let zv = self.vision.forward(&mut g, store, &[&v])?;
        let shape = cfg.latent_shape().to_vec();
        let z_l = g.value(zl).clone().reshape(&shape)?;
        let z_v = g.value(zv).clone().reshape(&shape)?;
        let z_prime = assemble_condition(z_t, &z_l, &z_v)?;
        Ok(ConditionTensors { z_l, z_v, z_prime })
    }
}
