//! Procedural toy asset pools: three categories of simple CAD-like meshes
//! (cube, cylinder-assembly, cone-assembly) with four shape variants each,
//! plus chromatic background and texture images.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{self, CategoryPool, DatasetError, PoolImage, Pools};
use crate::mesh::{self, Mesh};
use crate::raster::{round_u8, RgbImage};
use crate::seed;

pub const TOY_CATEGORIES: [&str; 3] = ["cube", "cylinder-assembly", "cone-assembly"];
pub const MODELS_PER_CATEGORY: usize = 4;
pub const BACKGROUNDS_PER_CATEGORY: usize = 8;
pub const TEXTURES_PER_CATEGORY: usize = 5;

const SEGMENTS: usize = 24;
const BACKGROUND_SIZE: usize = 64;
const TEXTURE_SIZE: usize = 48;

pub fn toy_categories() -> Vec<String> {
    TOY_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

#[derive(Default)]
struct Builder {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

/// Unit axis plus two unit vectors spanning its normal plane.
fn frame(axis: usize) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let mut e = [[0.0; 3]; 3];
    for (i, v) in e.iter_mut().enumerate() {
        v[(axis + i) % 3] = 1.0;
    }
    (e[0], e[1], e[2])
}

fn add(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + b[0] * s, a[1] + b[1] * s, a[2] + b[2] * s]
}

impl Builder {
    fn vertex(&mut self, v: [f64; 3]) -> usize {
        self.vertices.push(v);
        self.vertices.len() - 1
    }

    fn quad(&mut self, a: usize, b: usize, c: usize, d: usize) {
        self.faces.push([a, b, c]);
        self.faces.push([a, c, d]);
    }

    fn cuboid(&mut self, center: [f64; 3], size: [f64; 3]) {
        let base = self.vertices.len();
        for i in 0..8 {
            let sign = |bit: usize| if i >> bit & 1 == 1 { 0.5 } else { -0.5 };
            self.vertex([
                center[0] + sign(0) * size[0],
                center[1] + sign(1) * size[1],
                center[2] + sign(2) * size[2],
            ]);
        }
        let v = |i: usize| base + i;
        for (a, b, c, d) in [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)] {
            self.quad(v(a), v(b), v(c), v(d));
        }
    }

    /// Frustum along `axis` from `start` with the given end radii; a zero top
    /// radius makes a cone. Both ends are capped.
    fn frustum(&mut self, start: [f64; 3], axis: usize, length: f64, r0: f64, r1: f64) {
        let (a, u, w) = frame(axis);
        let end = add(start, a, length);
        let ring = |b: &mut Builder, c: [f64; 3], r: f64| -> Vec<usize> {
            (0..SEGMENTS)
                .map(|k| {
                    let t = TAU * k as f64 / SEGMENTS as f64;
                    b.vertex(add(add(c, u, r * t.cos()), w, r * t.sin()))
                })
                .collect()
        };
        let bottom = ring(self, start, r0);
        let c0 = self.vertex(start);
        let c1 = self.vertex(end);
        if r1 > 0.0 {
            let top = ring(self, end, r1);
            for k in 0..SEGMENTS {
                let n = (k + 1) % SEGMENTS;
                self.quad(bottom[k], bottom[n], top[n], top[k]);
                self.faces.push([c1, top[n], top[k]]);
                self.faces.push([c0, bottom[k], bottom[n]]);
            }
        } else {
            for k in 0..SEGMENTS {
                let n = (k + 1) % SEGMENTS;
                self.faces.push([bottom[k], bottom[n], c1]);
                self.faces.push([c0, bottom[k], bottom[n]]);
            }
        }
    }

    fn finish(self, name: String) -> Mesh {
        Mesh::new(name, self.vertices, self.faces)
    }
}

fn cube_variant(i: usize) -> Builder {
    let sizes = [[1.0, 1.0, 1.0], [1.3, 1.0, 0.8], [0.9, 1.2, 1.1], [1.2, 0.85, 1.2]];
    let mut b = Builder::default();
    b.cuboid([0.0; 3], sizes[i % sizes.len()]);
    b
}

/// Axle along x with a wheel at each end; at most 1.3 times wider than tall
/// so height-based framing keeps it inside the image.
fn cylinder_variant(i: usize) -> Builder {
    let (axle_r, len, wheel_r, wheel_w) = [(0.12, 1.1, 0.45, 0.2), (0.15, 1.0, 0.42, 0.22), (0.1, 1.2, 0.5, 0.18), (0.14, 0.95, 0.38, 0.25)][i % 4];
    let mut b = Builder::default();
    b.frustum([-len / 2.0, 0.0, 0.0], 0, len, axle_r, axle_r);
    b.frustum([-len / 2.0, 0.0, 0.0], 0, wheel_w, wheel_r, wheel_r);
    b.frustum([len / 2.0 - wheel_w, 0.0, 0.0], 0, wheel_w, wheel_r, wheel_r);
    b
}

/// Cone on a cylindrical base with a short arm sticking out along +x.
fn cone_variant(i: usize) -> Builder {
    let (base_r, base_h, cone_r, cone_h, arm) = [(0.5, 0.3, 0.45, 1.2, 0.35), (0.6, 0.2, 0.55, 1.0, 0.3), (0.45, 0.4, 0.4, 1.4, 0.4), (0.55, 0.25, 0.5, 0.9, 0.25)][i % 4];
    let mut b = Builder::default();
    b.frustum([0.0, 0.0, 0.0], 1, base_h, base_r, base_r);
    b.frustum([0.0, base_h, 0.0], 1, cone_h, cone_r, 0.0);
    b.cuboid([base_r + arm / 2.0, base_h / 2.0, 0.0], [arm, base_h * 0.6, base_h * 0.6]);
    b
}

/// The toy models of one category, named `<category>/v<i>` and passed
/// through OBJ text as a file-loaded model would be.
pub fn toy_models(category: &str) -> Vec<Mesh> {
    let make: fn(usize) -> Builder = match category {
        "cube" => cube_variant,
        "cylinder-assembly" => cylinder_variant,
        "cone-assembly" => cone_variant,
        _ => return Vec::new(),
    };
    (0..MODELS_PER_CATEGORY)
        .map(|i| {
            let name = format!("{category}/v{i}");
            let mut m = mesh::parse_obj(&make(i).finish(name.clone()).to_obj()).expect("toy mesh is valid OBJ");
            m.name = name;
            m
        })
        .collect()
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = rng.gen_range(40.0..215.0);
    }
    // Keep every asset clearly chromatic.
    let k = rng.gen_range(0..3);
    c[k] = if c[k] > 128.0 { c[k] + 35.0 } else { c[k] - 35.0 };
    c
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
}

/// Smooth two-color gradient with a few soft-edged blobs.
pub fn toy_background(seed_value: u64) -> RgbImage {
    let mut rng = seed::rng(seed_value);
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let angle = rng.gen_range(0.0..TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..3)
        .map(|_| {
            let s = BACKGROUND_SIZE as f64;
            (random_color(&mut rng), rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(0.1 * s..0.3 * s))
        })
        .collect();
    let n = BACKGROUND_SIZE as f64;
    RgbImage::from_fn(BACKGROUND_SIZE, BACKGROUND_SIZE, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let t = (((fx / n - 0.5) * dx + (fy / n - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
        let mut c = mix(c0, c1, t);
        for &(bc, bx, by, r) in &blobs {
            let d = ((fx - bx).powi(2) + (fy - by).powi(2)).sqrt() / r;
            let alpha = 0.5 * (1.0 - d).clamp(0.0, 1.0).min(2.0 * (1.0 - d).max(0.0));
            c = mix(c, bc, alpha);
        }
        c.map(round_u8)
    })
}

/// Two-color stripes or checks.
pub fn toy_texture(seed_value: u64) -> RgbImage {
    let mut rng = seed::rng(seed_value);
    let c0 = random_color(&mut rng);
    let shift: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(-60.0..60.0));
    let c1 = [0, 1, 2].map(|c| (c0[c] + shift[c]).clamp(0.0, 255.0));
    let period = rng.gen_range(8.0..16.0);
    let checks = rng.gen_bool(0.4);
    let angle = rng.gen_range(0.0..TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    RgbImage::from_fn(TEXTURE_SIZE, TEXTURE_SIZE, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let on = if checks {
            ((fx / period) as i64 + (fy / period) as i64) % 2 == 0
        } else {
            (((fx * dx + fy * dy) / period).rem_euclid(2.0)) < 1.0
        };
        (if on { c0 } else { c1 }).map(round_u8)
    })
}

/// All toy pools; asset seeds derive from `seed_value`.
pub fn toy_pools(seed_value: u64) -> Pools {
    let mut pools = Pools::default();
    for cat in TOY_CATEGORIES {
        let h = seed::hash_str(cat);
        let image = |kind: &str, i: usize, f: fn(u64) -> RgbImage| PoolImage {
            id: format!("{kind}/{cat}/{kind}_{i:02}.ppm"),
            image: f(seed::derive(seed_value, &[h, seed::hash_str(kind), i as u64])),
        };
        pools.categories.insert(
            cat.to_string(),
            CategoryPool {
                models: toy_models(cat),
                backgrounds: (0..BACKGROUNDS_PER_CATEGORY).map(|i| image("backgrounds", i, toy_background)).collect(),
                textures: (0..TEXTURES_PER_CATEGORY).map(|i| image("textures", i, toy_texture)).collect(),
            },
        );
    }
    pools
}

/// Writes the toy pools in the standard on-disk layout.
pub fn write_toy_assets(root: &Path, seed_value: u64) -> Result<(), DatasetError> {
    dataset::write_pools(&toy_pools(seed_value), root)
}
