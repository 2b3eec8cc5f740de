//! 8-bit RGB rasters, boolean masks, and binary PPM (P6) IO.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::bbox::BBox;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad PPM data: {0}")]
    BadPpm(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Builds an image from interleaved RGB bytes.
    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer + 0.5), clamped to the border.
    pub fn sample_bilinear(&self, fx: f64, fy: f64) -> [f64; 3] {
        let (x0, x1, ax) = Self::taps(fx, self.width);
        let (y0, y1, ay) = Self::taps(fy, self.height);
        self.blend(x0, x1, ax, y0, y1, ay)
    }

    /// Neighbouring sample indices and the weight of the second one.
    #[inline]
    fn taps(f: f64, n: usize) -> (usize, usize, f64) {
        let s = (f - 0.5).clamp(0.0, (n - 1) as f64);
        // s >= 0, so truncation is floor.
        let i0 = s as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    }

    #[inline]
    fn blend(&self, x0: usize, x1: usize, ax: f64, y0: usize, y1: usize, ay: f64) -> [f64; 3] {
        let (p00, p10, p01, p11) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - ax) + p10[c] as f64 * ax;
            let bottom = p01[c] as f64 * (1.0 - ax) + p11[c] as f64 * ax;
            out[c] = top * (1.0 - ay) + bottom * ay;
        }
        out
    }

    /// Samples a `width x height` grid whose pixel centers map to
    /// `origin + (i + 0.5) * step` in source coordinates.
    fn resample_grid(&self, origin: (f64, f64), step: (f64, f64), width: usize, height: usize) -> RgbImage {
        let xs: Vec<_> = (0..width).map(|x| Self::taps(origin.0 + (x as f64 + 0.5) * step.0, self.width)).collect();
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let (y0, y1, ay) = Self::taps(origin.1 + (y as f64 + 0.5) * step.1, self.height);
            for &(x0, x1, ax) in &xs {
                data.extend(self.blend(x0, x1, ax, y0, y1, ay).map(round_u8));
            }
        }
        RgbImage { width, height, data }
    }

    /// Bilinear resize (stretch, no aspect preservation).
    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let scale = (self.width as f64 / width as f64, self.height as f64 / height as f64);
        self.resample_grid((0.0, 0.0), scale, width, height)
    }

    /// Bilinearly warps the pixels inside `region` to a `width x height` raster.
    pub fn resample_region(&self, region: &BBox, width: usize, height: usize) -> RgbImage {
        let step = (region.width() as f64 / width as f64, region.height() as f64 / height as f64);
        self.resample_grid((region.xmin as f64, region.ymin as f64), step, width, height)
    }

    /// Bilinearly warps an arbitrary rectangle `[x0, x1) x [y0, y1)` to a
    /// `width x height` raster; samples outside the image take the border value.
    pub fn resample_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64, width: usize, height: usize) -> RgbImage {
        let step = ((x1 - x0) / width as f64, (y1 - y0) / height as f64);
        self.resample_grid((x0, y0), step, width, height)
    }

    /// Copies the pixels inside a half-open box. The box must lie in the image.
    pub fn crop(&self, b: &BBox) -> RgbImage {
        let (x0, y0) = (b.xmin as usize, b.ymin as usize);
        RgbImage::from_fn(b.width() as usize, b.height() as usize, |x, y| {
            self.get(x0 + x, y0 + y)
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.data.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, ImageError> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // Skip whitespace and comments between header tokens.
            while pos < bytes.len() {
                match bytes[pos] {
                    b'#' => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    c if c.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::BadPpm("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(ImageError::BadPpm(format!("unsupported magic {:?}", fields[0])));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| ImageError::BadPpm(format!("bad {what}: {s:?}")))
        };
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        let maxval = parse(&fields[3], "maxval")?;
        if maxval != 255 {
            return Err(ImageError::BadPpm(format!("maxval {maxval} unsupported")));
        }
        if width == 0 || height == 0 {
            return Err(ImageError::BadPpm("zero-sized image".into()));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(ImageError::BadPpm("truncated raster".into()));
        }
        Ok(RgbImage {
            width,
            height,
            data: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn read_ppm(path: &Path) -> Result<RgbImage, ImageError> {
        let bytes = fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode_ppm(&bytes)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        let io_err = |source| ImageError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        fs::write(path, self.encode_ppm()).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[inline]
pub fn round_u8(v: f64) -> u8 {
    // Half-up via truncation; avoids a libm call on baseline x86-64.
    if v <= 0.0 {
        0
    } else if v >= 255.0 {
        255
    } else {
        (v + 0.5) as u8
    }
}

/// Row-major boolean raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}
