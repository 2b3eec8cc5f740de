//! Patch descriptors: native HOG plus a binary table format for externally
//! computed features.
//!
//! HOG follows the Dalal-Triggs layout: centered `[-1, 0, 1]` gradients on
//! the channel with the largest magnitude, unsigned orientation histograms per
//! cell with linear interpolation between neighbouring bins, and overlapping
//! blocks normalized with L2-Hys.
//!
//! Orientation is measured along the edge, i.e. perpendicular to the gradient,
//! so a vertical step edge votes into the 90 degree bin. Bin `k` is centred at
//! `(k + 0.5) * 180 / orientations` degrees.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::bbox::BBox;
use crate::raster::RgbImage;

const MAGIC: &[u8; 5] = b"FEAT1";
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("bad HOG parameters: {0}")]
    BadParams(String),
    #[error("feature file does not start with FEAT1")]
    BadMagic,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("duplicate feature id {0:?}")]
    DuplicateId(String),
    #[error("feature file is malformed: {0}")]
    Malformed(String),
    #[error("no imported feature for patch {0:?}")]
    MissingPatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub space_id: String,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, space_id: impl Into<String>) -> Self {
        Self {
            values,
            space_id: space_id.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Scales to unit Euclidean norm; the zero vector is returned unchanged.
pub fn l2_normalize(v: &FeatureVector) -> FeatureVector {
    let n = v.norm();
    if n == 0.0 {
        return v.clone();
    }
    FeatureVector::new(v.values.iter().map(|x| x / n).collect(), v.space_id.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HogParams {
    pub cell_size: usize,
    pub block_size: usize,
    pub block_stride: usize,
    pub orientations: usize,
    pub patch_width: usize,
    pub patch_height: usize,
}

impl Default for HogParams {
    fn default() -> Self {
        Self {
            cell_size: 8,
            block_size: 2,
            block_stride: 1,
            orientations: 9,
            patch_width: 64,
            patch_height: 64,
        }
    }
}

impl HogParams {
    pub const CLIP: f64 = 0.2;

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::BadParams(m.to_string()));
        if self.cell_size == 0 || self.block_size == 0 || self.block_stride == 0 || self.orientations == 0 {
            return bad("sizes and counts must be positive");
        }
        if !self.patch_width.is_multiple_of(self.cell_size) || !self.patch_height.is_multiple_of(self.cell_size) {
            return bad("patch size must be divisible by the cell size");
        }
        let (cx, cy) = self.cells();
        if self.block_size > cx || self.block_size > cy {
            return bad("block does not fit in the cell grid");
        }
        Ok(())
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.patch_width / self.cell_size, self.patch_height / self.cell_size)
    }

    pub fn blocks(&self) -> (usize, usize) {
        let (cx, cy) = self.cells();
        (
            (cx - self.block_size) / self.block_stride + 1,
            (cy - self.block_size) / self.block_stride + 1,
        )
    }

    pub fn dim(&self) -> usize {
        let (bx, by) = self.blocks();
        bx * by * self.block_size * self.block_size * self.orientations
    }

    pub fn space_id(&self) -> String {
        let mut id = format!(
            "hog-{}-{}-{}-{}",
            self.cell_size, self.block_size, self.orientations, self.patch_width
        );
        if self.patch_height != self.patch_width {
            id.push_str(&format!("x{}", self.patch_height));
        }
        if self.block_stride != 1 {
            id.push_str(&format!("-s{}", self.block_stride));
        }
        id
    }
}

/// Per-pixel gradient magnitude and edge orientation in degrees `[0, 180)`,
/// taken from the channel with the largest gradient magnitude.
pub fn gradients(patch: &RgbImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (patch.width(), patch.height());
    let px: Vec<[f64; 3]> = patch.pixels().map(|p| p.map(|c| c as f64 / 255.0)).collect();
    let mut mag = vec![0.0; w * h];
    let mut ori = vec![0.0; w * h];
    for y in 0..h {
        let (up, down) = (&px[y.saturating_sub(1) * w..], &px[(y + 1).min(h - 1) * w..]);
        let row = &px[y * w..(y + 1) * w];
        for x in 0..w {
            let (l, r) = (row[x.saturating_sub(1)], row[(x + 1).min(w - 1)]);
            let (u, d) = (up[x], down[x]);
            let mut best = (0.0, 0.0, 0.0);
            for c in 0..3 {
                let gx = r[c] - l[c];
                let gy = d[c] - u[c];
                let m2 = gx * gx + gy * gy;
                if m2 > best.0 {
                    best = (m2, gx, gy);
                }
            }
            let (m2, gx, gy) = best;
            if m2 > 0.0 {
                mag[y * w + x] = m2.sqrt();
                let a = gy.atan2(gx).to_degrees() + 90.0;
                ori[y * w + x] = if a >= 180.0 {
                    a - 180.0
                } else if a < 0.0 {
                    a + 180.0
                } else {
                    a
                };
            }
        }
    }
    (mag, ori)
}

/// Unnormalized orientation histograms, row-major over cells.
pub fn cell_histograms(patch: &RgbImage, params: &HogParams) -> Vec<f64> {
    let (w, _) = (patch.width(), patch.height());
    let (cx, cy) = params.cells();
    let bins = params.orientations;
    let bin_width = 180.0 / bins as f64;
    let (mag, ori) = gradients(patch);
    let mut hist = vec![0.0; cx * cy * bins];
    for cell_y in 0..cy {
        for cell_x in 0..cx {
            let base = (cell_y * cx + cell_x) * bins;
            for y in cell_y * params.cell_size..(cell_y + 1) * params.cell_size {
                for x in cell_x * params.cell_size..(cell_x + 1) * params.cell_size {
                    let m = mag[y * w + x];
                    if m == 0.0 {
                        continue;
                    }
                    let pos = ori[y * w + x] / bin_width - 0.5;
                    // pos >= -0.5, so floor is truncation except below zero.
                    let lo = if pos < 0.0 { -1.0 } else { pos as i64 as f64 };
                    let frac = pos - lo;
                    let b0 = (lo as i64).rem_euclid(bins as i64) as usize;
                    let b1 = (b0 + 1) % bins;
                    hist[base + b0] += m * (1.0 - frac);
                    hist[base + b1] += m * frac;
                }
            }
        }
    }
    hist
}

fn l2_hys(block: &mut [f64]) {
    let normalize = |b: &mut [f64]| {
        let n = (b.iter().map(|v| v * v).sum::<f64>() + NORM_EPS * NORM_EPS).sqrt();
        b.iter_mut().for_each(|v| *v /= n);
    };
    normalize(block);
    block.iter_mut().for_each(|v| *v = v.min(HogParams::CLIP));
    normalize(block);
}

/// HOG descriptor of a patch, resized to the parameter patch size first.
pub fn extract_hog(patch: &RgbImage, params: &HogParams) -> Result<FeatureVector, FeatureError> {
    params.validate()?;
    let resized;
    let patch = if patch.width() != params.patch_width || patch.height() != params.patch_height {
        resized = patch.resize(params.patch_width, params.patch_height);
        &resized
    } else {
        patch
    };
    let hist = cell_histograms(patch, params);
    let (cx, _) = params.cells();
    let (bx, by) = params.blocks();
    let bins = params.orientations;
    let bs = params.block_size;
    let mut out = Vec::with_capacity(params.dim());
    let mut block = Vec::with_capacity(bs * bs * bins);
    for by_i in 0..by {
        for bx_i in 0..bx {
            block.clear();
            for dy in 0..bs {
                for dx in 0..bs {
                    let cell = (by_i * params.block_stride + dy) * cx + bx_i * params.block_stride + dx;
                    block.extend_from_slice(&hist[cell * bins..(cell + 1) * bins]);
                }
            }
            l2_hys(&mut block);
            out.extend_from_slice(&block);
        }
    }
    Ok(FeatureVector::new(out, params.space_id()))
}

/// Maps an image region to a feature vector in one named space.
pub trait Featurizer: Sync {
    fn space_id(&self) -> String;

    fn featurize(&self, image_id: &str, image: &RgbImage, region: &BBox) -> Result<FeatureVector, FeatureError>;
}

/// HOG over a region, optionally padded by `context` times the region size
/// on every side before warping to the patch size.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HogFeaturizer {
    pub params: HogParams,
    pub context: f64,
}

impl Featurizer for HogFeaturizer {
    fn space_id(&self) -> String {
        let id = self.params.space_id();
        if self.context > 0.0 {
            format!("{id}-ctx{}", self.context)
        } else {
            id
        }
    }

    fn featurize(&self, _image_id: &str, image: &RgbImage, region: &BBox) -> Result<FeatureVector, FeatureError> {
        let (pw, ph) = (self.params.patch_width, self.params.patch_height);
        let patch = if self.context > 0.0 {
            let (cw, ch) = (self.context * region.width() as f64, self.context * region.height() as f64);
            image.resample_rect(
                region.xmin as f64 - cw,
                region.ymin as f64 - ch,
                region.xmax as f64 + cw,
                region.ymax as f64 + ch,
                pw,
                ph,
            )
        } else {
            image.resample_region(region, pw, ph)
        };
        let mut v = extract_hog(&patch, &self.params)?;
        v.space_id = self.space_id();
        Ok(v)
    }
}

/// Key under which an imported feature row is looked up for a region.
pub fn patch_key(image_id: &str, region: &BBox) -> String {
    format!("{image_id}@{},{},{},{}", region.xmin, region.ymin, region.xmax, region.ymax)
}

/// Imported feature rows, kept in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    space_id: String,
    dim: usize,
    rows: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(space_id: impl Into<String>, dim: usize) -> Self {
        Self {
            space_id: space_id.into(),
            dim,
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f64>) -> Result<(), FeatureError> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(FeatureError::DimensionMismatch(format!(
                "row {id:?} has {} values, table dim is {}",
                values.len(),
                self.dim
            )));
        }
        if self.index.contains_key(&id) {
            return Err(FeatureError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.rows.len());
        self.rows.push((id, values));
        Ok(())
    }

    pub fn from_rows(
        space_id: impl Into<String>,
        rows: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, FeatureError> {
        let mut rows = rows.into_iter().peekable();
        let dim = rows.peek().map_or(0, |r| r.1.len());
        let mut table = Self::new(space_id, dim);
        for (id, v) in rows {
            table.push(id, v)?;
        }
        Ok(table)
    }

    pub fn space_id(&self) -> &str {
        &self.space_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<FeatureVector> {
        self.index
            .get(id)
            .map(|&i| FeatureVector::new(self.rows[i].1.clone(), self.space_id.clone()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|(id, _)| id.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.space_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.space_id.as_bytes());
        for (id, values) in &self.rows {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FeatureError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5).ok() != Some(&MAGIC[..]) {
            return Err(FeatureError::BadMagic);
        }
        let header = |e: FeatureError| FeatureError::Malformed(format!("truncated header ({e})"));
        let count = r.u32().map_err(header)? as usize;
        let dim = r.u32().map_err(header)? as usize;
        let id_len = r.u16().map_err(header)? as usize;
        let space_id = r.string(id_len).map_err(header)?;
        let mut table = Self::new(space_id, dim);
        for row in 0..count {
            // A short row means the data does not match the declared dimension.
            let short = |_| FeatureError::DimensionMismatch(format!("row {row} is shorter than dim {dim}"));
            let len = r.u32().map_err(short)? as usize;
            let id = r.string(len).map_err(short)?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(r.f32().map_err(short)? as f64);
            }
            table.push(id, values)?;
        }
        if r.pos != bytes.len() {
            return Err(FeatureError::DimensionMismatch(format!(
                "{} bytes left after {count} rows of dim {dim}",
                bytes.len() - r.pos
            )));
        }
        Ok(table)
    }

    pub fn read(path: &Path) -> Result<Self, FeatureError> {
        let bytes = fs::read(path).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), FeatureError> {
        fs::write(path, self.encode()).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| FeatureError::Malformed("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FeatureError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, FeatureError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String, FeatureError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FeatureError::Malformed("id is not UTF-8".into()))
    }
}

/// Reads features through a patch-keyed table, optionally L2-normalizing.
#[derive(Clone, Debug)]
pub struct TableFeaturizer {
    pub table: FeatureTable,
    pub l2: bool,
}

impl Featurizer for TableFeaturizer {
    fn space_id(&self) -> String {
        self.table.space_id().to_string()
    }

    fn featurize(&self, image_id: &str, _image: &RgbImage, region: &BBox) -> Result<FeatureVector, FeatureError> {
        let key = patch_key(image_id, region);
        let v = self.table.get(&key).ok_or(FeatureError::MissingPatch(key))?;
        Ok(if self.l2 { l2_normalize(&v) } else { v })
    }
}
