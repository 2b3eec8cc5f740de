//! Software rendering of a posed mesh under one background/texture cue cell.
//!
//! The camera sits on +z at a fixed distance looking at the origin. After
//! perspective division the projection is rescaled so the object's projected
//! height is `fill_fraction` of the frame height, then triangles are
//! z-buffered with a top-left fill rule on a fixed-point sub-pixel grid.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::mesh::{self, Mesh, MeshError, UvScheme, Vec3, ViewPreset};
use crate::raster::{round_u8, Mask, RgbImage};
use crate::seed;

pub const AMBIENT: f64 = 0.35;
pub const DIFFUSE: f64 = 0.65;
pub const UNIFORM_GRAY: u8 = 127;
pub const CAMERA_DISTANCE: f64 = 3.0;
const SUBPIXEL_BITS: u32 = 8;
const SUBPIXEL: f64 = (1 << SUBPIXEL_BITS) as f64;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("render produced an empty mask (object outside the frame)")]
    EmptyRender,
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("missing {0} image required by the cue configuration")]
    MissingPool(&'static str),
    #[error("invalid cue configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgMode {
    RealRgb,
    White,
    RealGray,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxMode {
    RealRgb,
    UniformGray,
}

impl BgMode {
    pub const ALL: [BgMode; 3] = [BgMode::RealRgb, BgMode::White, BgMode::RealGray];

    pub fn code(self) -> &'static str {
        match self {
            BgMode::RealRgb => "RR",
            BgMode::White => "W",
            BgMode::RealGray => "RG",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BgMode::RealRgb => "real_rgb",
            BgMode::White => "white",
            BgMode::RealGray => "real_gray",
        }
    }

    pub fn needs_image(self) -> bool {
        self != BgMode::White
    }
}

impl TxMode {
    pub const ALL: [TxMode; 2] = [TxMode::RealRgb, TxMode::UniformGray];

    pub fn code(self) -> &'static str {
        match self {
            TxMode::RealRgb => "RR",
            TxMode::UniformGray => "UG",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TxMode::RealRgb => "real_rgb",
            TxMode::UniformGray => "uniform_gray",
        }
    }

    pub fn needs_image(self) -> bool {
        self == TxMode::RealRgb
    }
}

impl std::str::FromStr for BgMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "real_rgb" | "RR" => Ok(BgMode::RealRgb),
            "white" | "W" => Ok(BgMode::White),
            "real_gray" | "RG" => Ok(BgMode::RealGray),
            other => Err(format!("unknown background mode {other:?}")),
        }
    }
}

impl std::str::FromStr for TxMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "real_rgb" | "RR" => Ok(TxMode::RealRgb),
            "uniform_gray" | "UG" => Ok(TxMode::UniformGray),
            other => Err(format!("unknown texture mode {other:?}")),
        }
    }
}

/// One background x texture cell, e.g. `RR-RR` or `W-UG`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CueCell {
    pub bg: BgMode,
    pub tx: TxMode,
}

impl CueCell {
    pub fn all() -> Vec<CueCell> {
        BgMode::ALL
            .iter()
            .flat_map(|&bg| TxMode::ALL.iter().map(move |&tx| CueCell { bg, tx }))
            .collect()
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.bg.code(), self.tx.code())
    }
}

impl std::str::FromStr for CueCell {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (bg, tx) = s
            .split_once('-')
            .ok_or_else(|| format!("cue cell {s:?} is not of the form BG-TX"))?;
        Ok(CueCell {
            bg: bg.parse()?,
            tx: tx.parse()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueConfig {
    pub bg_mode: BgMode,
    pub tx_mode: TxMode,
    pub view: ViewPreset,
    pub perturb_range_deg: f64,
    pub width: usize,
    pub height: usize,
    pub fill_fraction: f64,
}

impl Default for CueConfig {
    fn default() -> Self {
        Self {
            bg_mode: BgMode::RealRgb,
            tx_mode: TxMode::RealRgb,
            view: ViewPreset::FRONT,
            perturb_range_deg: 15.0,
            width: 256,
            height: 256,
            fill_fraction: 0.7,
        }
    }
}

impl CueConfig {
    pub fn cell(&self) -> CueCell {
        CueCell {
            bg: self.bg_mode,
            tx: self.tx_mode,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: String| Err(RenderError::BadConfig(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("image size {}x{} below 16", self.width, self.height));
        }
        if !(self.fill_fraction > 0.0 && self.fill_fraction <= 1.0) {
            return bad(format!("fill_fraction {} outside (0,1]", self.fill_fraction));
        }
        if !(self.perturb_range_deg >= 0.0 && self.perturb_range_deg.is_finite()) {
            return bad(format!("perturb range {} must be >= 0", self.perturb_range_deg));
        }
        if !self.view.is_finite() {
            return bad("non-finite view angles".into());
        }
        Ok(())
    }
}

/// Everything needed to reproduce a render from the same pools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub bg_mode: BgMode,
    pub tx_mode: TxMode,
    pub width: usize,
    pub height: usize,
    pub fill_fraction: f64,
    pub base_view: mesh::ViewLabel,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub bg_id: Option<String>,
    pub texture_id: Option<String>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub rgb: RgbImage,
    pub mask: Mask,
    pub bbox: BBox,
    pub provenance: Provenance,
}

/// A pool image together with its identifier.
#[derive(Clone, Copy, Debug)]
pub struct Asset<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
}

/// Adds independent uniform offsets in `[-range, range]` to yaw and pitch.
pub fn perturb_pose(view: &ViewPreset, range_deg: f64, seed: u64) -> ViewPreset {
    if range_deg <= 0.0 {
        return *view;
    }
    let mut rng = seed::rng(seed);
    let dyaw = rng.gen_range(-range_deg..=range_deg);
    let dpitch = rng.gen_range(-range_deg..=range_deg);
    ViewPreset {
        yaw: view.yaw + dyaw,
        pitch: view.pitch + dpitch,
        ..*view
    }
}

/// BT.601 luma, replicated over the three channels.
pub fn to_grayscale(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let [r, g, b] = img.get(x, y);
        let l = round_u8(0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64);
        [l, l, l]
    })
}

/// Tight half-open box around the set pixels.
pub fn derive_bbox(mask: &Mask) -> Result<BBox, RenderError> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    let (x0, y0, x1, y1) = bounds.ok_or(RenderError::EmptyMask)?;
    Ok(BBox {
        xmin: x0 as i32,
        ymin: y0 as i32,
        xmax: x1 as i32 + 1,
        ymax: y1 as i32 + 1,
    })
}

/// A projected vertex: screen position in pixels and reciprocal view depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreenVertex {
    pub x: f64,
    pub y: f64,
    pub inv_depth: f64,
}

impl ScreenVertex {
    pub fn new(x: f64, y: f64, inv_depth: f64) -> Self {
        Self { x, y, inv_depth }
    }
}

#[derive(Clone, Copy)]
struct FixedPoint {
    x: i64,
    y: i64,
}

fn edge(a: FixedPoint, b: FixedPoint, px: i64, py: i64) -> i64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

// With positive orientation and y pointing down, an edge is "top" when it is
// horizontal with the interior below it, and "left" when it runs upward.
fn is_top_left(a: FixedPoint, b: FixedPoint) -> bool {
    (a.y == b.y && b.x > a.x) || b.y < a.y
}

/// Visits every pixel whose center is covered by the triangle under the
/// top-left rule. The callback receives the pixel and the screen-space
/// barycentric weights of the original vertex order.
pub fn for_each_covered(
    tri: [[f64; 2]; 3],
    width: usize,
    height: usize,
    mut visit: impl FnMut(usize, usize, [f64; 3]),
) {
    let to_fixed = |p: [f64; 2]| FixedPoint {
        x: (p[0] * SUBPIXEL).round() as i64,
        y: (p[1] * SUBPIXEL).round() as i64,
    };
    let mut v = tri.map(to_fixed);
    let mut order = [0usize, 1, 2];
    let mut area = edge(v[0], v[1], v[2].x, v[2].y);
    if area == 0 {
        return;
    }
    if area < 0 {
        v.swap(1, 2);
        order.swap(1, 2);
        area = -area;
    }
    let bias = |a: FixedPoint, b: FixedPoint| if is_top_left(a, b) { 0 } else { -1 };
    let biases = [bias(v[1], v[2]), bias(v[2], v[0]), bias(v[0], v[1])];

    let unit = 1i64 << SUBPIXEL_BITS;
    let half = unit / 2;
    let min_x = v.iter().map(|p| p.x).min().unwrap();
    let max_x = v.iter().map(|p| p.x).max().unwrap();
    let min_y = v.iter().map(|p| p.y).min().unwrap();
    let max_y = v.iter().map(|p| p.y).max().unwrap();
    // Pixel px has its center at px*unit + half.
    let first = |lo: i64| (lo - half).div_euclid(unit).max(0);
    let last = |hi: i64, limit: usize| ((hi - half).div_euclid(unit)).min(limit as i64 - 1);
    let (x0, x1) = (first(min_x), last(max_x, width));
    let (y0, y1) = (first(min_y), last(max_y, height));

    let inv_area = 1.0 / area as f64;
    for py in y0..=y1 {
        let cy = py * unit + half;
        for px in x0..=x1 {
            let cx = px * unit + half;
            let w0 = edge(v[1], v[2], cx, cy);
            let w1 = edge(v[2], v[0], cx, cy);
            let w2 = edge(v[0], v[1], cx, cy);
            if w0 + biases[0] < 0 || w1 + biases[1] < 0 || w2 + biases[2] < 0 {
                continue;
            }
            let mut bary = [0.0; 3];
            bary[order[0]] = w0 as f64 * inv_area;
            bary[order[1]] = w1 as f64 * inv_area;
            bary[order[2]] = w2 as f64 * inv_area;
            visit(px as usize, py as usize, bary);
        }
    }
}

/// Color + depth + coverage buffers.
pub struct Framebuffer {
    pub color: RgbImage,
    pub mask: Mask,
    depth: Vec<f64>,
}

impl Framebuffer {
    pub fn new(background: RgbImage) -> Self {
        let (w, h) = (background.width(), background.height());
        Self {
            color: background,
            mask: Mask::new(w, h),
            depth: vec![0.0; w * h],
        }
    }

    /// Z-buffered triangle draw. `shade` receives perspective-correct
    /// barycentric weights; nearer fragments (larger reciprocal depth) win,
    /// ties keep the earlier triangle.
    pub fn draw(&mut self, tri: [ScreenVertex; 3], mut shade: impl FnMut([f64; 3]) -> [u8; 3]) {
        let (w, h) = (self.color.width(), self.color.height());
        let pts = tri.map(|v| [v.x, v.y]);
        let depth = &mut self.depth;
        let color = &mut self.color;
        let mask = &mut self.mask;
        for_each_covered(pts, w, h, |x, y, bary| {
            let inv_z: f64 = (0..3).map(|k| bary[k] * tri[k].inv_depth).sum();
            let slot = &mut depth[y * w + x];
            if inv_z <= *slot {
                return;
            }
            *slot = inv_z;
            let persp = [0, 1, 2].map(|k| bary[k] * tri[k].inv_depth / inv_z);
            color.put(x, y, shade(persp));
            mask.set(x, y, true);
        });
    }
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Flat Lambertian intensity for a face, lit from the camera direction.
/// Face normals are recomputed and turned toward the camera so inconsistent
/// winding does not darken visible faces.
pub fn face_intensity(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let n = cross(sub(b, a), sub(c, a));
    let len = dot(n, n).sqrt();
    if len == 0.0 {
        return AMBIENT;
    }
    let centroid = [0, 1, 2].map(|k| (a[k] + b[k] + c[k]) / 3.0);
    let to_camera = sub([0.0, 0.0, CAMERA_DISTANCE], centroid);
    let sign = if dot(n, to_camera) < 0.0 { -1.0 } else { 1.0 };
    let ndotl = sign * n[2] / len;
    AMBIENT + DIFFUSE * ndotl.max(0.0)
}

fn background_for(cue: &CueConfig, bg: Option<Asset>) -> Result<RgbImage, RenderError> {
    let (w, h) = (cue.width, cue.height);
    match cue.bg_mode {
        BgMode::White => Ok(RgbImage::filled(w, h, [255, 255, 255])),
        BgMode::RealRgb => Ok(bg.ok_or(RenderError::MissingPool("background"))?.image.resize(w, h)),
        BgMode::RealGray => Ok(to_grayscale(
            &bg.ok_or(RenderError::MissingPool("background"))?.image.resize(w, h),
        )),
    }
}

/// Renders `model` under `cue`, perturbing the cue's view by `seed`.
pub fn render(
    model: &Mesh,
    cue: &CueConfig,
    bg: Option<Asset>,
    texture: Option<Asset>,
    seed: u64,
) -> Result<RenderedImage, RenderError> {
    cue.validate()?;
    if model.is_empty() {
        return Err(MeshError::EmptyMesh.into());
    }
    if cue.bg_mode.needs_image() && bg.is_none() {
        return Err(RenderError::MissingPool("background"));
    }
    let texture = match cue.tx_mode {
        TxMode::RealRgb => Some(texture.ok_or(RenderError::MissingPool("texture"))?),
        TxMode::UniformGray => None,
    };

    let mut canonical = mesh::fit_to_unit(model)?;
    if texture.is_some() {
        canonical = mesh::generate_uv(&canonical, UvScheme::Cylindrical)?;
    }
    let view = perturb_pose(&cue.view, cue.perturb_range_deg, seed);
    let posed = mesh::apply_view(&canonical, &view)?;

    let (w, h) = (cue.width as f64, cue.height as f64);
    let projected: Vec<[f64; 3]> = posed
        .vertices
        .iter()
        .map(|p| {
            let depth = CAMERA_DISTANCE - p[2];
            [p[0] / depth, p[1] / depth, 1.0 / depth]
        })
        .collect();
    let used = posed.faces.iter().flatten().map(|&i| projected[i]);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in used {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let (span_x, span_y) = (hi[0] - lo[0], hi[1] - lo[1]);
    let scale = if span_y > 1e-12 {
        cue.fill_fraction * h / span_y
    } else if span_x > 1e-12 {
        cue.fill_fraction * w / span_x
    } else {
        return Err(RenderError::EmptyRender);
    };
    let (cx, cy) = (0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]));
    let screen: Vec<ScreenVertex> = projected
        .iter()
        .map(|p| ScreenVertex::new(0.5 * w + scale * (p[0] - cx), 0.5 * h - scale * (p[1] - cy), p[2]))
        .collect();

    let mut fb = Framebuffer::new(background_for(cue, bg)?);
    let gray = UNIFORM_GRAY as f64;
    for (fi, face) in posed.faces.iter().enumerate() {
        let [a, b, c] = face.map(|i| posed.vertices[i]);
        let intensity = face_intensity(a, b, c);
        let tri = face.map(|i| screen[i]);
        match (texture, &canonical.uvs) {
            (Some(tex), Some(uvs)) => {
                let corners = uvs[fi];
                let (tw, th) = (tex.image.width() as f64, tex.image.height() as f64);
                fb.draw(tri, |wts| {
                    let u: f64 = (0..3).map(|k| wts[k] * corners[k][0]).sum();
                    let v: f64 = (0..3).map(|k| wts[k] * corners[k][1]).sum();
                    let texel = tex.image.sample_bilinear(u * tw, (1.0 - v) * th);
                    texel.map(|t| round_u8(t * intensity))
                });
            }
            _ => {
                let g = round_u8(gray * intensity);
                fb.draw(tri, |_| [g, g, g]);
            }
        }
    }

    let bbox = derive_bbox(&fb.mask).map_err(|_| RenderError::EmptyRender)?;
    Ok(RenderedImage {
        rgb: fb.color,
        mask: fb.mask,
        bbox,
        provenance: Provenance {
            model: model.name.clone(),
            bg_mode: cue.bg_mode,
            tx_mode: cue.tx_mode,
            width: cue.width,
            height: cue.height,
            fill_fraction: cue.fill_fraction,
            base_view: cue.view.label,
            yaw: view.yaw,
            pitch: view.pitch,
            roll: view.roll,
            bg_id: bg.filter(|_| cue.bg_mode.needs_image()).map(|a| a.id.to_string()),
            texture_id: texture.map(|a| a.id.to_string()),
            seed,
        },
    })
}

/// Re-renders from a provenance record: the stored angles are used verbatim
/// with no further perturbation.
pub fn rerender(
    model: &Mesh,
    provenance: &Provenance,
    bg: Option<Asset>,
    texture: Option<Asset>,
) -> Result<RenderedImage, RenderError> {
    let cue = CueConfig {
        bg_mode: provenance.bg_mode,
        tx_mode: provenance.tx_mode,
        view: ViewPreset {
            label: provenance.base_view,
            yaw: provenance.yaw,
            pitch: provenance.pitch,
            roll: provenance.roll,
        },
        perturb_range_deg: 0.0,
        width: provenance.width,
        height: provenance.height,
        fill_fraction: provenance.fill_fraction,
    };
    render(model, &cue, bg, texture, provenance.seed)
}
