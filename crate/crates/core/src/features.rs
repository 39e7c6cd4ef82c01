//! Per-image feature extraction.
//!
//! An image is described by a concatenation of named feature units. The
//! [`FeatureSchema`] fixes the unit order and dimensions; that layout is the
//! group structure used by the block-diagonal dictionary and the ℓ2,1
//! penalty downstream.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Slices with an ℓ2 norm below this are treated as degenerate and zeroed.
const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureUnit {
    pub name: String,
    pub dim: usize,
}

/// Ordered list of feature units. Serializes as `{"units": [{name, dim}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct FeatureSchema {
    units: Vec<FeatureUnit>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    units: Vec<FeatureUnit>,
}

impl TryFrom<SchemaRepr> for FeatureSchema {
    type Error = Error;
    fn try_from(r: SchemaRepr) -> Result<Self> {
        FeatureSchema::new(r.units)
    }
}

impl From<FeatureSchema> for SchemaRepr {
    fn from(s: FeatureSchema) -> Self {
        SchemaRepr { units: s.units }
    }
}

impl FeatureSchema {
    pub fn new(units: Vec<FeatureUnit>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::InvalidConfig("schema needs at least one unit".into()));
        }
        let mut seen = HashSet::new();
        let mut offsets = Vec::with_capacity(units.len());
        let mut acc = 0;
        for u in &units {
            if u.dim == 0 {
                return Err(Error::InvalidConfig(format!("unit {:?} has zero dimension", u.name)));
            }
            if !seen.insert(u.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate unit name {:?}", u.name)));
            }
            offsets.push(acc);
            acc += u.dim;
        }
        Ok(FeatureSchema { units, offsets })
    }

    /// Convenience constructor from `(name, dim)` pairs.
    pub fn from_dims<S: Into<String>>(units: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        Self::new(
            units
                .into_iter()
                .map(|(name, dim)| FeatureUnit { name: name.into(), dim })
                .collect(),
        )
    }

    /// Schema made of built-in units in the given order.
    pub fn standard(kinds: &[UnitKind]) -> Result<Self> {
        Self::from_dims(kinds.iter().map(|k| (k.name(), k.dim())))
    }

    pub fn units(&self) -> &[FeatureUnit] {
        &self.units
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn total_dim(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.units.last().unwrap().dim)
    }

    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn span(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k] + self.units[k].dim
    }

    pub fn spans(&self) -> Vec<Range<usize>> {
        (0..self.units.len()).map(|k| self.span(k)).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.units.iter().position(|u| u.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeature {
    pub image_id: String,
    pub values: Vec<f64>,
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(RasterImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RasterImage { width, height, pixels: vec![rgb; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        RasterImage { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    fn ensure_non_empty(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidImage(format!(
                "zero-area image ({}x{})",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Built-in feature units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnitKind {
    /// 16×16 RGB thumbnail, channel-planar.
    Tiny,
    /// 2×2 spatial grid of joint CIELAB histograms with 4×7×7 bins.
    LabHist,
    /// Gradient-orientation histograms over 2×2-cell blocks of a 64×64 grayscale resize.
    HogLite,
}

const TINY_SIDE: usize = 16;
const LAB_GRID: usize = 2;
const LAB_BINS: [usize; 3] = [4, 7, 7];
const HOG_SIDE: usize = 64;
const HOG_CELL: usize = 8;
const HOG_BINS: usize = 9;

impl UnitKind {
    pub const ALL: [UnitKind; 3] = [UnitKind::Tiny, UnitKind::LabHist, UnitKind::HogLite];

    pub fn name(self) -> &'static str {
        match self {
            UnitKind::Tiny => "tiny",
            UnitKind::LabHist => "lab_hist",
            UnitKind::HogLite => "hog_lite",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn dim(self) -> usize {
        match self {
            UnitKind::Tiny => TINY_SIDE * TINY_SIDE * 3,
            UnitKind::LabHist => LAB_GRID * LAB_GRID * LAB_BINS.iter().product::<usize>(),
            UnitKind::HogLite => {
                let blocks = HOG_SIDE / HOG_CELL - 1;
                blocks * blocks * 4 * HOG_BINS
            }
        }
    }
}

/// Raw (unnormalized) output of one built-in unit.
pub fn extract_unit(img: &RasterImage, unit: UnitKind) -> Result<Vec<f64>> {
    img.ensure_non_empty()?;
    Ok(match unit {
        UnitKind::Tiny => tiny_image(img),
        UnitKind::LabHist => lab_histogram(img),
        UnitKind::HogLite => hog_lite(img),
    })
}

/// A feature unit computed from a raster.
pub trait UnitExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, img: &RasterImage) -> Result<Vec<f64>>;
    /// Applied to the raw vector before ℓ2 normalization.
    fn center(&self, _values: &mut [f64]) {}
}

struct Builtin(UnitKind);

impl UnitExtractor for Builtin {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn extract(&self, img: &RasterImage) -> Result<Vec<f64>> {
        extract_unit(img, self.0)
    }

    fn center(&self, values: &mut [f64]) {
        if self.0 == UnitKind::Tiny {
            for plane in values.chunks_mut(TINY_SIDE * TINY_SIDE) {
                let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                plane.iter_mut().for_each(|v| *v -= mean);
            }
        }
    }
}

/// Maps unit names onto extractors. [`Default`] registers the built-ins.
pub struct ExtractorRegistry {
    extractors: BTreeMap<String, Box<dyn UnitExtractor>>,
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        let mut r = ExtractorRegistry { extractors: BTreeMap::new() };
        for kind in UnitKind::ALL {
            r.register(kind.name(), Box::new(Builtin(kind)));
        }
        r
    }
}

impl ExtractorRegistry {
    pub fn register(&mut self, name: &str, extractor: Box<dyn UnitExtractor>) {
        self.extractors.insert(name.to_string(), extractor);
    }

    /// Concatenated feature vector with every unit slice ℓ2-normalized.
    pub fn extract(&self, image_id: &str, img: &RasterImage, schema: &FeatureSchema) -> Result<ImageFeature> {
        img.ensure_non_empty()?;
        let mut values = Vec::with_capacity(schema.total_dim());
        for unit in schema.units() {
            let ex = self
                .extractors
                .get(&unit.name)
                .ok_or_else(|| Error::UnknownUnit(unit.name.clone()))?;
            if ex.dim() != unit.dim {
                return Err(Error::SchemaMismatch(format!(
                    "unit {:?} declared with dim {}, extractor produces {}",
                    unit.name,
                    unit.dim,
                    ex.dim()
                )));
            }
            let mut v = ex.extract(img)?;
            ex.center(&mut v);
            normalize_l2(&mut v);
            values.extend(v);
        }
        Ok(ImageFeature { image_id: image_id.to_string(), values })
    }
}

/// [`ExtractorRegistry::extract`] with the built-in registry.
pub fn extract_image_features(image_id: &str, img: &RasterImage, schema: &FeatureSchema) -> Result<ImageFeature> {
    ExtractorRegistry::default().extract(image_id, img, schema)
}

/// Scales `v` to unit ℓ2 norm; near-zero vectors become exactly zero.
pub fn normalize_l2(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < NORM_EPS {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Normalizes each unit slice of a concatenated vector independently.
pub fn normalize_units(values: &mut [f64], schema: &FeatureSchema) {
    for span in schema.spans() {
        normalize_l2(&mut values[span]);
    }
}

/// Area-averaging resample weights along one axis: for every target index,
/// the overlapping source indices with their coverage fractions.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let lo = t as f64 * scale;
            let hi = (t + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let w = (hi.min(s as f64 + 1.0) - lo.max(s as f64)) / scale;
                    (w > 0.0).then_some((s, w))
                })
                .collect()
        })
        .collect()
}

/// Resamples to `w × h` by exact area averaging, channels scaled to [0, 1].
fn resize_rgb(img: &RasterImage, w: usize, h: usize) -> Vec<[f64; 3]> {
    let wx = area_weights(img.width, w);
    let wy = area_weights(img.height, h);
    let mut out = Vec::with_capacity(w * h);
    for ty in &wy {
        for tx in &wx {
            let mut acc = [0.0; 3];
            for &(sy, fy) in ty {
                for &(sx, fx) in tx {
                    let p = img.pixel(sx, sy);
                    for c in 0..3 {
                        acc[c] += fx * fy * p[c] as f64;
                    }
                }
            }
            out.push(acc.map(|v| v / 255.0));
        }
    }
    out
}

fn tiny_image(img: &RasterImage) -> Vec<f64> {
    let px = resize_rgb(img, TINY_SIDE, TINY_SIDE);
    let plane = TINY_SIDE * TINY_SIDE;
    let mut out = vec![0.0; 3 * plane];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = p[c];
        }
    }
    out
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// CIELAB under D65 for an 8-bit sRGB triple.
pub fn rgb_to_lab(p: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = p.map(|c| srgb_to_linear(c as f64 / 255.0));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let f = |t: f64| {
        const E: f64 = 216.0 / 24389.0;
        const K: f64 = 24389.0 / 27.0;
        if t > E {
            t.cbrt()
        } else {
            (K * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn quantize(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = ((v - lo) / (hi - lo) * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

/// Joint LAB histogram per spatial cell; entries are raw pixel counts.
fn lab_histogram(img: &RasterImage) -> Vec<f64> {
    let [nl, na, nb] = LAB_BINS;
    let per_cell = nl * na * nb;
    let mut hist = vec![0.0; LAB_GRID * LAB_GRID * per_cell];
    for y in 0..img.height {
        let cy = (y * LAB_GRID / img.height).min(LAB_GRID - 1);
        for x in 0..img.width {
            let cx = (x * LAB_GRID / img.width).min(LAB_GRID - 1);
            let [l, a, b] = rgb_to_lab(img.pixel(x, y));
            let bin = (quantize(l, 0.0, 100.0, nl) * na + quantize(a, -128.0, 128.0, na)) * nb
                + quantize(b, -128.0, 128.0, nb);
            hist[(cy * LAB_GRID + cx) * per_cell + bin] += 1.0;
        }
    }
    hist
}

fn hog_lite(img: &RasterImage) -> Vec<f64> {
    let n = HOG_SIDE;
    let gray: Vec<f64> = resize_rgb(img, n, n)
        .iter()
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let at = |x: usize, y: usize| gray[y * n + x];

    let cells = n / HOG_CELL;
    let mut cell_hist = vec![0.0; cells * cells * HOG_BINS];
    let bin_width = 180.0 / HOG_BINS as f64;
    for y in 0..n {
        for x in 0..n {
            let gx = at((x + 1).min(n - 1), y) - at(x.saturating_sub(1), y);
            let gy = at(x, (y + 1).min(n - 1)) - at(x, y.saturating_sub(1));
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            // linear vote between the two nearest bin centers
            let pos = angle / bin_width - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as isize).rem_euclid(HOG_BINS as isize) as usize;
            let b1 = (b0 + 1) % HOG_BINS;
            let cell = (y / HOG_CELL) * cells + x / HOG_CELL;
            cell_hist[cell * HOG_BINS + b0] += mag * (1.0 - frac);
            cell_hist[cell * HOG_BINS + b1] += mag * frac;
        }
    }

    let blocks = cells - 1;
    let mut out = Vec::with_capacity(blocks * blocks * 4 * HOG_BINS);
    for by in 0..blocks {
        for bx in 0..blocks {
            let start = out.len();
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let cell = (by + dy) * cells + bx + dx;
                out.extend_from_slice(&cell_hist[cell * HOG_BINS..(cell + 1) * HOG_BINS]);
            }
            let block = &mut out[start..];
            let norm = (block.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            block.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Parses a binary PPM (P6) with maxval 255.
pub fn load_ppm(bytes: &[u8]) -> Result<RasterImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Parse("not a binary PPM (missing P6 magic)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Parse("PPM header truncated".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse(format!("expected a number in PPM header at byte {pos}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| Error::Parse(format!("PPM header: {e}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Parse("PPM header must end with one whitespace byte".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Parse(format!("unsupported PPM maxval {maxval}, only 255 is accepted")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Parse("PPM dimensions overflow".into()))?;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(Error::Parse(format!("PPM body truncated: need {need} bytes, have {}", body.len())));
    }
    let pixels = body[..need].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    RasterImage::new(width, height, pixels)
}

pub fn encode_ppm(img: &RasterImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for p in &img.pixels {
        out.extend_from_slice(p);
    }
    out
}
