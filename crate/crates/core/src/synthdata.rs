//! Deterministic synthetic corpus and the JSONL manifest format.
//!
//! Positive images carry one or more "key glyphs": a filled disc of a fixed
//! hue with a concentric ring of a contrasting colour, annotated by its tight
//! bounding box. Negative images share the same background distribution and
//! may contain a near-miss distractor (a same-hue square, or the disc without
//! its ring).
//!
//! Manifest lines look like
//! `{"id":"pos-00000","path":"images/pos-00000.png","label":"pos","boxes":[[x,y,w,h]]}`
//! with an optional `"category"` string. Relative paths resolve against the
//! manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baggen::Label;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{intersect_area, BBox};
use crate::imaging::{load_image, save_image, Image};
use crate::seeds;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

const DISC_RGB: [f64; 3] = [0.9, 0.12, 0.12];
const RING_RGB: [f64; 3] = [0.98, 0.92, 0.3];
/// Ring band as fractions of the glyph radius.
const RING_INNER: f64 = 0.45;
const RING_OUTER: f64 = 0.75;
const NOISE_GRID: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_positive: usize,
    pub n_negative: usize,
    pub image_size: usize,
    /// Inclusive glyph diameter range in pixels.
    pub glyph_size_range: (usize, usize),
    /// Inclusive number of glyphs per positive image.
    pub glyphs_per_positive: (usize, usize),
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_positive: 100,
            n_negative: 100,
            image_size: 128,
            glyph_size_range: (12, 32),
            glyphs_per_positive: (1, 3),
            distractor_rate: 0.7,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_positive == 0 || self.n_negative == 0 {
            return bad("corpus needs at least one image per class".into());
        }
        if self.image_size < 4 || self.image_size > 4096 {
            return bad(format!("image size {} outside 4..=4096", self.image_size));
        }
        let (gmin, gmax) = self.glyph_size_range;
        if gmin < 2 || gmin > gmax || gmax > self.image_size {
            return bad(format!(
                "glyph size range [{gmin}, {gmax}] must satisfy 2 <= min <= max <= {}",
                self.image_size
            ));
        }
        let (cmin, cmax) = self.glyphs_per_positive;
        if cmin == 0 || cmin > cmax || cmax > 16 {
            return bad(format!(
                "glyphs per positive [{cmin}, {cmax}] must satisfy 1 <= min <= max <= 16"
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad(format!("distractor rate {} outside [0, 1]", self.distractor_rate));
        }
        Ok(())
    }

    /// Reads spec keys from a config, leaving the rest for other consumers.
    pub fn from_config(config: &mut Config) -> Result<Self> {
        let mut spec = CorpusSpec::default();
        if let Some(v) = config.take("n_positive")? {
            spec.n_positive = v;
        }
        if let Some(v) = config.take("n_negative")? {
            spec.n_negative = v;
        }
        if let Some(v) = config.take("image_size")? {
            spec.image_size = v;
        }
        if let Some(v) = config.take_list::<usize>("glyph_size_range")? {
            spec.glyph_size_range = pair(&v, "glyph_size_range")?;
        }
        if let Some(v) = config.take_list::<usize>("glyphs_per_positive")? {
            spec.glyphs_per_positive = pair(&v, "glyphs_per_positive")?;
        }
        if let Some(v) = config.take("distractor_rate")? {
            spec.distractor_rate = v;
        }
        if let Some(v) = config.take("seed")? {
            spec.seed = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn pair(values: &[usize], key: &str) -> Result<(usize, usize)> {
    match values {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::InvalidArgument(format!(
            "{key} needs two values, got {values:?}"
        ))),
    }
}

/// One manifest record.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Image path as written in the manifest.
    pub path: String,
    pub label: Label,
    pub boxes: Vec<BBox>,
    pub category: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct WireEntry {
    id: String,
    path: String,
    label: String,
    #[serde(default)]
    boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

/// Parses one manifest line.
pub fn parse_manifest_line(line: &str, line_no: usize) -> Result<ManifestEntry> {
    let err = |message: String| Error::Manifest { line: line_no, message };
    let wire: WireEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    let label = match wire.label.as_str() {
        "pos" => Label::Positive,
        "neg" => Label::Negative,
        other => return Err(err(format!("label must be \"pos\" or \"neg\", got {other:?}"))),
    };
    if wire.id.is_empty() {
        return Err(err("empty id".into()));
    }
    if wire.path.is_empty() {
        return Err(err("empty path".into()));
    }
    let boxes = wire
        .boxes
        .iter()
        .map(|&[x, y, w, h]| BBox::new(x, y, w, h))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| err(e.to_string()))?;
    if label == Label::Negative && !boxes.is_empty() {
        return Err(err("negative entry carries annotation boxes".into()));
    }
    Ok(ManifestEntry {
        id: wire.id,
        path: wire.path,
        label,
        boxes,
        category: wire.category,
    })
}

/// Parses a whole manifest; ids must be unique.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = parse_manifest_line(line, i + 1)?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Manifest {
                line: i + 1,
                message: format!("duplicate id {:?}", entry.id),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn manifest_line(entry: &ManifestEntry) -> String {
    let wire = WireEntry {
        id: entry.id.clone(),
        path: entry.path.clone(),
        label: match entry.label {
            Label::Positive => "pos",
            Label::Negative => "neg",
        }
        .to_string(),
        boxes: entry.boxes.iter().map(BBox::as_array).collect(),
        category: entry.category.clone(),
    };
    serde_json::to_string(&wire).expect("manifest entries always serialize")
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in entries {
        text.push_str(&manifest_line(e));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

fn resolve(root: &Path, entry_path: &str) -> PathBuf {
    let p = Path::new(entry_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Manifest entries with their decoded images, in manifest order.
#[derive(Debug, Clone)]
pub struct Corpus {
    entries: Vec<ManifestEntry>,
    images: Vec<Image>,
}

impl Corpus {
    pub fn new(entries: Vec<ManifestEntry>, images: Vec<Image>) -> Result<Self> {
        if entries.len() != images.len() {
            return Err(Error::Dataset(format!(
                "{} entries but {} images",
                entries.len(),
                images.len()
            )));
        }
        Ok(Corpus { entries, images })
    }

    /// Reads a manifest and decodes every image it lists.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let entries = read_manifest(manifest)?;
        let root = manifest.parent().unwrap_or(Path::new("."));
        let images = entries
            .par_iter()
            .map(|e| load_image(resolve(root, &e.path)))
            .collect::<Result<Vec<_>>>()?;
        for (e, img) in entries.iter().zip(&images) {
            if img.channels() != 3 {
                return Err(Error::Dataset(format!("{}: expected an RGB image", e.id)));
            }
        }
        Corpus::new(entries, images)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn get(&self, i: usize) -> (&ManifestEntry, &Image) {
        (&self.entries[i], &self.images[i])
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Corpus {
        Corpus {
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

fn image_seed(spec: &CorpusSpec, label: Label, index: usize) -> u64 {
    seeds::derive(spec.seed, &[u64::from(label.is_positive()), index as u64])
}

/// Smooth coloured noise: a random base colour, a coarse bilinear grid of
/// offsets and fine per-pixel jitter.
fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.65));
    let g = NOISE_GRID + 1;
    let grid: Vec<f64> = (0..g * g * 3).map(|_| rng.random_range(-0.2..0.2)).collect();
    let mut px = vec![0.0; size * size * 3];
    let cell = size as f64 / NOISE_GRID as f64;
    for y in 0..size {
        let gy = (y as f64 + 0.5) / cell;
        let (y0, fy) = (gy.floor() as usize, gy.fract());
        for x in 0..size {
            let gx = (x as f64 + 0.5) / cell;
            let (x0, fx) = (gx.floor() as usize, gx.fract());
            for c in 0..3 {
                let at = |yy: usize, xx: usize| grid[((yy.min(g - 1)) * g + xx.min(g - 1)) * 3 + c];
                let smooth = (at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx) * (1.0 - fy)
                    + (at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx) * fy;
                let jitter = rng.random_range(-0.05..0.05);
                px[(y * size + x) * 3 + c] = (base[c] + smooth + jitter).clamp(0.0, 1.0);
            }
        }
    }
    px
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Glyph,
    Disc,
    Square,
}

fn paint(px: &mut [f64], size: usize, bounds: &BBox, shape: Shape) {
    let (cx, cy) = bounds.center();
    let r = 0.5 * bounds.w;
    let (x0, y0) = (bounds.x as usize, bounds.y as usize);
    let s = bounds.w as usize;
    for y in y0..(y0 + s).min(size) {
        for x in x0..(x0 + s).min(size) {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let color = match shape {
                Shape::Square => DISC_RGB,
                _ if d > r => continue,
                Shape::Glyph if (RING_INNER * r..=RING_OUTER * r).contains(&d) => RING_RGB,
                _ => DISC_RGB,
            };
            px[(y * size + x) * 3..][..3].copy_from_slice(&color);
        }
    }
}

fn random_box(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> BBox {
    let s = rng.random_range(spec.glyph_size_range.0..=spec.glyph_size_range.1);
    let x = rng.random_range(0..=spec.image_size - s);
    let y = rng.random_range(0..=spec.image_size - s);
    BBox {
        x: x as f64,
        y: y as f64,
        w: s as f64,
        h: s as f64,
    }
}

/// Renders image `index` of the given class; returns it with its annotations.
pub fn render(spec: &CorpusSpec, label: Label, index: usize) -> (Image, Vec<BBox>) {
    let mut rng = seeds::rng(image_seed(spec, label, index));
    let size = spec.image_size;
    let mut px = background(&mut rng, size);
    let mut boxes: Vec<BBox> = Vec::new();
    match label {
        Label::Positive => {
            let (cmin, cmax) = spec.glyphs_per_positive;
            let want = rng.random_range(cmin..=cmax);
            for _ in 0..want {
                for _attempt in 0..50 {
                    let b = random_box(&mut rng, spec);
                    let padded = BBox::new(b.x - 1.0, b.y - 1.0, b.w + 2.0, b.h + 2.0).expect("positive size");
                    if boxes.iter().all(|o| intersect_area(&padded, o) == 0.0) {
                        boxes.push(b);
                        break;
                    }
                }
            }
            for b in &boxes {
                paint(&mut px, size, b, Shape::Glyph);
            }
        }
        Label::Negative => {
            if rng.random_bool(spec.distractor_rate) {
                let b = random_box(&mut rng, spec);
                let shape = if rng.random_bool(0.5) {
                    Shape::Square
                } else {
                    Shape::Disc
                };
                paint(&mut px, size, &b, shape);
            }
        }
    }
    let img = Image::new(size, size, 3, px).expect("rendered pixels are in range");
    (img, boxes)
}

fn entry_id(label: Label, index: usize) -> String {
    match label {
        Label::Positive => format!("pos-{index:05}"),
        Label::Negative => format!("neg-{index:05}"),
    }
}

/// Writes `images/*.png` and `manifest.jsonl` under `out_dir`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let jobs: Vec<(Label, usize)> = (0..spec.n_positive)
        .map(|i| (Label::Positive, i))
        .chain((0..spec.n_negative).map(|i| (Label::Negative, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(label, index)| {
            let (img, boxes) = render(spec, label, index);
            let id = entry_id(label, index);
            let rel = format!("images/{id}.png");
            save_image(&img, out_dir.join(&rel))?;
            Ok(ManifestEntry {
                id,
                path: rel,
                label,
                boxes,
                category: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&entries, out_dir.join(MANIFEST_NAME))?;
    Ok(entries)
}
