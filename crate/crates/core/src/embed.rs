//! Conditioning embeddings: the `PRE1` file format and a deterministic
//! hash-based embedder standing in for learned text/image encoders.

use std::io::{Read, Write};
use std::path::Path;

use image::RgbaImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const PRE_MAGIC: &[u8; 4] = b"PRE1";
/// Width of hash-embedder vectors.
pub const HASH_DIM: usize = 32;
/// Image tokens from the hash embedder: a 4 x 4 patch grid.
pub const IMAGE_GRID: usize = 4;

const TEXT_HASH_DIMS: usize = 24;
const IMAGE_RAW_FEATURES: usize = 10;
const PROJECTION_SEED: u64 = 0x5eed_a6e5;

/// Text token rows `e_T` and image patch rows `e_I`, both `d` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub d: usize,
    pub text: Vec<f32>,
    pub image: Vec<f32>,
}

impl EmbeddingBundle {
    pub fn new(d: usize, text: Vec<f32>, image: Vec<f32>) -> Result<Self> {
        if d == 0 || text.len() % d != 0 || image.len() % d != 0 {
            return Err(Error::invalid(format!(
                "embedding payloads ({} / {}) are not multiples of d = {d}",
                text.len(),
                image.len()
            )));
        }
        if !text.iter().chain(&image).all(|v| v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        Ok(Self { d, text, image })
    }

    pub fn text_len(&self) -> usize {
        self.text.len() / self.d
    }

    pub fn image_len(&self) -> usize {
        self.image.len() / self.d
    }

    /// `e_T` rows followed by `e_I` rows.
    pub fn rows(&self) -> usize {
        self.text_len() + self.image_len()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PRE_MAGIC)?;
        for n in [self.text_len(), self.image_len(), self.d] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for v in self.text.iter().chain(&self.image) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 16 || &buf[..4] != PRE_MAGIC {
            return Err(Error::invalid("embedding file lacks PRE1 header"));
        }
        let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (lt, li, d) = (word(0), word(1), word(2));
        let count = (lt + li) * d;
        if buf.len() != 16 + 4 * count {
            return Err(Error::invalid(format!("embedding payload is {} bytes, header implies {}", buf.len() - 16, 4 * count)));
        }
        let vals: Vec<f32> =
            buf[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let (text, image) = vals.split_at(lt * d);
        Self::new(d, text.to_vec(), image.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn text_vector(text: &str, index: usize) -> [f32; HASH_DIM] {
    let mut v = [0f32; HASH_DIM];
    let chars: Vec<char> = text.chars().collect();
    let mut buf = [0u8; 16];
    for n in 1..=3usize {
        for gram in chars.windows(n) {
            let mut bytes = vec![n as u8];
            for c in gram {
                bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
            let h = fnv1a(&bytes);
            let slot = (h % TEXT_HASH_DIMS as u64) as usize;
            v[slot] += if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        }
    }
    let norm = v[..TEXT_HASH_DIMS].iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v[..TEXT_HASH_DIMS].iter_mut().for_each(|x| *x /= norm);
    }
    let len = chars.len() as f32;
    let words = text.split_whitespace().count() as f32;
    v[24] = (1.0 + len).ln() / 3.0;
    v[25] = len / 20.0;
    v[26] = words / 4.0;
    v[27] = if index == 0 { 1.0 } else { 0.0 };
    let i = index as f32;
    v[28] = (i * 0.7).sin();
    v[29] = (i * 0.7).cos();
    v[30] = i / 4.0;
    v[31] = 1.0;
    v
}

fn projection() -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let scale = (1.0 / IMAGE_RAW_FEATURES as f64).sqrt();
    (0..IMAGE_RAW_FEATURES * HASH_DIM).map(|_| (rng.gen_range(-1.0..1.0) * scale * 1.7) as f32).collect()
}

/// Deterministic stand-in for the learned encoders.
///
/// Each text becomes one row built from signed hashed character n-grams plus
/// length and position features. The product cutout is split into a 4 x 4
/// grid; each patch's mean color, alpha coverage, grid position, the
/// cutout's aspect and its size relative to `canvas` are projected to
/// `HASH_DIM` by a fixed random matrix.
pub fn hash_embedder(texts: &[String], product: &RgbaImage, canvas: (u32, u32)) -> EmbeddingBundle {
    let mut text = Vec::with_capacity(texts.len() * HASH_DIM);
    for (i, t) in texts.iter().enumerate() {
        text.extend_from_slice(&text_vector(t, i));
    }
    let proj = projection();
    let (w, h) = product.dimensions();
    let aspect = if w > 0 && h > 0 { (w as f32 / h as f32).ln() } else { 0.0 };
    let rel_w = w as f32 / canvas.0.max(1) as f32;
    let rel_h = h as f32 / canvas.1.max(1) as f32;
    let mut image = Vec::with_capacity(IMAGE_GRID * IMAGE_GRID * HASH_DIM);
    for gy in 0..IMAGE_GRID {
        for gx in 0..IMAGE_GRID {
            let x0 = (gx as u32 * w) / IMAGE_GRID as u32;
            let x1 = ((gx as u32 + 1) * w) / IMAGE_GRID as u32;
            let y0 = (gy as u32 * h) / IMAGE_GRID as u32;
            let y1 = ((gy as u32 + 1) * h) / IMAGE_GRID as u32;
            let mut acc = [0f64; 4];
            let mut n = 0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = product.get_pixel(x, y).0;
                    let a = p[3] as f64 / 255.0;
                    acc[0] += p[0] as f64 / 255.0 * a;
                    acc[1] += p[1] as f64 / 255.0 * a;
                    acc[2] += p[2] as f64 / 255.0 * a;
                    acc[3] += a;
                    n += 1.0;
                }
            }
            let cov = if n > 0.0 { acc[3] / n } else { 0.0 };
            let mean = |c: usize| if acc[3] > 0.0 { (acc[c] / acc[3]) as f32 } else { 0.0 };
            let raw: [f32; IMAGE_RAW_FEATURES] = [
                mean(0) - 0.5,
                mean(1) - 0.5,
                mean(2) - 0.5,
                cov as f32,
                (gx as f32 + 0.5) / IMAGE_GRID as f32 - 0.5,
                (gy as f32 + 0.5) / IMAGE_GRID as f32 - 0.5,
                aspect,
                rel_w * 2.0,
                rel_h * 2.0,
                1.0,
            ];
            for o in 0..HASH_DIM {
                let mut s = 0f32;
                for (i, r) in raw.iter().enumerate() {
                    s += r * proj[i * HASH_DIM + o];
                }
                image.push(s);
            }
        }
    }
    EmbeddingBundle::new(HASH_DIM, text, image).expect("finite by construction")
}
