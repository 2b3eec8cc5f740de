//! Asset pools, virtual dataset generation, real-annotation ingestion, patch
//! sampling and few-shot subsets.
//!
//! Pool layout under a root directory:
//!
//! ```text
//! models/<category>/<model>.obj
//! backgrounds/<category>/*.ppm
//! textures/<category>/*.ppm
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::detect::{iou, ProposalSource};
use crate::mesh::{self, Mesh, ViewLabel, ViewPreset};
use crate::raster::{ImageError, RgbImage};
use crate::render::{self, Asset, CueConfig, Provenance, RenderError};
use crate::seed;

/// Negatives must overlap every same-category ground-truth box by less than this.
pub const NEGATIVE_IOU: f64 = 0.3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("category {0:?} has no models")]
    MissingCategory(String),
    #[error("unreadable asset {path}: {reason}")]
    UnreadableAsset { path: String, reason: String },
    #[error("category {category:?} needs {what} images for this cue but the pool is empty")]
    MissingPool { category: String, what: &'static str },
    #[error("render failed for {category:?} image {index}: {source}")]
    Render {
        category: String,
        index: usize,
        #[source]
        source: RenderError,
    },
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("missing image {0}")]
    MissingImage(String),
    #[error("invalid dataset spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A pool image with a stable identifier (its path relative to the pool root).
#[derive(Clone, Debug)]
pub struct PoolImage {
    pub id: String,
    pub image: RgbImage,
}

impl PoolImage {
    pub fn asset(&self) -> Asset<'_> {
        Asset {
            id: &self.id,
            image: &self.image,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CategoryPool {
    /// Sorted by model name.
    pub models: Vec<Mesh>,
    pub backgrounds: Vec<PoolImage>,
    pub textures: Vec<PoolImage>,
}

impl CategoryPool {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.models.len(), self.backgrounds.len(), self.textures.len())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Pools {
    pub categories: BTreeMap<String, CategoryPool>,
}

impl Pools {
    pub fn get(&self, category: &str) -> Option<&CategoryPool> {
        self.categories.get(category)
    }

    /// Checks that every category has models and the images its cue needs.
    pub fn require(&self, categories: &[String], cue: &CueConfig) -> Result<(), DatasetError> {
        for cat in categories {
            let pool = self
                .get(cat)
                .filter(|p| !p.models.is_empty())
                .ok_or_else(|| DatasetError::MissingCategory(cat.clone()))?;
            if cue.bg_mode.needs_image() && pool.backgrounds.is_empty() {
                return Err(DatasetError::MissingPool {
                    category: cat.clone(),
                    what: "background",
                });
            }
            if cue.tx_mode.needs_image() && pool.textures.is_empty() {
                return Err(DatasetError::MissingPool {
                    category: cat.clone(),
                    what: "texture",
                });
            }
        }
        Ok(())
    }

    /// Finds a model by its provenance name (`<category>/<stem>`).
    pub fn model(&self, name: &str) -> Option<&Mesh> {
        let (cat, _) = name.split_once('/')?;
        self.get(cat)?.models.iter().find(|m| m.name == name)
    }

    pub fn image(&self, id: &str) -> Option<&PoolImage> {
        self.categories
            .values()
            .flat_map(|p| p.backgrounds.iter().chain(&p.textures))
            .find(|p| p.id == id)
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, DatasetError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn relative_id(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Loads models, backgrounds and textures for `categories` from `root`.
/// Empty background/texture pools are allowed here; [`Pools::require`]
/// checks them against a cue.
pub fn load_pools(root: &Path, categories: &[String]) -> Result<Pools, DatasetError> {
    let mut pools = Pools::default();
    for cat in categories {
        let mut pool = CategoryPool::default();
        for path in sorted_files(&root.join("models").join(cat), "obj")? {
            let unreadable = |reason: String| DatasetError::UnreadableAsset {
                path: path.display().to_string(),
                reason,
            };
            let text = fs::read_to_string(&path).map_err(|e| unreadable(e.to_string()))?;
            let mut m = mesh::parse_obj(&text).map_err(|e| unreadable(e.to_string()))?;
            if m.is_empty() || m.faces.is_empty() {
                return Err(unreadable("model has no geometry".into()));
            }
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            m.name = format!("{cat}/{stem}");
            pool.models.push(m);
        }
        if pool.models.is_empty() {
            return Err(DatasetError::MissingCategory(cat.clone()));
        }
        for (kind, dest) in [("backgrounds", &mut pool.backgrounds), ("textures", &mut pool.textures)] {
            for path in sorted_files(&root.join(kind).join(cat), "ppm")? {
                let image = RgbImage::read_ppm(&path).map_err(|e| DatasetError::UnreadableAsset {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
                dest.push(PoolImage {
                    id: relative_id(root, &path),
                    image,
                });
            }
        }
        let (m, b, t) = pool.sizes();
        log::info!("pool {cat}: {m} models, {b} backgrounds, {t} textures");
        pools.categories.insert(cat.clone(), pool);
    }
    Ok(pools)
}

/// Writes pools back to disk in the standard layout.
pub fn write_pools(pools: &Pools, root: &Path) -> Result<(), DatasetError> {
    for (cat, pool) in &pools.categories {
        let dir = root.join("models").join(cat);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for m in &pool.models {
            let stem = m.name.rsplit('/').next().unwrap_or(&m.name);
            let path = dir.join(format!("{stem}.obj"));
            fs::write(&path, m.to_obj()).map_err(io_err(&path))?;
        }
        for img in pool.backgrounds.iter().chain(&pool.textures) {
            img.image.write_ppm(&root.join(&img.id))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub categories: Vec<String>,
    pub images_per_category: usize,
    pub models_per_category_fraction: f64,
    pub views_enabled: Vec<ViewLabel>,
    pub cue: CueConfig,
    pub global_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            categories: Vec::new(),
            images_per_category: 100,
            models_per_category_fraction: 1.0,
            views_enabled: vec![ViewLabel::Front, ViewLabel::Side, ViewLabel::Intra],
            cue: CueConfig::default(),
            global_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::BadSpec(m));
        if self.categories.is_empty() {
            return bad("no categories".into());
        }
        let unique: BTreeSet<&String> = self.categories.iter().collect();
        if unique.len() != self.categories.len() {
            return bad("duplicate category names".into());
        }
        if self.images_per_category == 0 {
            return bad("images_per_category must be >= 1".into());
        }
        let f = self.models_per_category_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("models fraction {f} outside (0,1]"));
        }
        if self.views_enabled.is_empty() {
            return bad("no views enabled".into());
        }
        if self.views_enabled.contains(&ViewLabel::Custom) {
            return bad("views must be named presets".into());
        }
        self.cue.validate().map_err(|e| DatasetError::BadSpec(e.to_string()))
    }

    /// Number of models kept by the shape-ablation cut (at least one).
    pub fn models_kept(&self, available: usize) -> usize {
        ((self.models_per_category_fraction * available as f64).ceil() as usize).clamp(1, available.max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Virtual,
    Real,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GtBox {
    pub category: String,
    pub xmin: i32,
    pub ymin: i32,
    pub xmax: i32,
    pub ymax: i32,
}

impl GtBox {
    pub fn new(category: impl Into<String>, b: BBox) -> Self {
        Self {
            category: category.into(),
            xmin: b.xmin,
            ymin: b.ymin,
            xmax: b.xmax,
            ymax: b.ymax,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox {
            xmin: self.xmin,
            ymin: self.ymin,
            xmax: self.xmax,
            ymax: self.ymax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub source: Source,
    pub boxes: Vec<GtBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Categories appearing in any box, sorted.
    pub fn categories(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().flat_map(|e| e.boxes.iter().map(|b| b.category.as_str())).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn ground_truth(&self) -> crate::eval::GroundTruth {
        crate::eval::ground_truth(
            self.entries
                .iter()
                .flat_map(|e| e.boxes.iter().map(move |b| (e.image.as_str(), b.category.as_str(), b.bbox()))),
        )
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.image.as_str()) {
                return Err(DatasetError::BadSpec(format!("duplicate image path {}", e.image)));
            }
            if let Some(b) = e.boxes.iter().find(|b| !b.bbox().fits(e.width, e.height)) {
                return Err(DatasetError::BadSpec(format!("box {} outside {}", b.bbox(), e.image)));
            }
            if e.source == Source::Virtual && e.provenance.is_none() {
                return Err(DatasetError::BadSpec(format!("virtual entry {} lacks provenance", e.image)));
            }
        }
        Ok(())
    }

    /// Union with another manifest, sorted by image path.
    pub fn merged(&self, other: &DatasetManifest) -> DatasetManifest {
        let mut entries: Vec<ManifestEntry> = self.entries.iter().chain(&other.entries).cloned().collect();
        entries.sort_by(|a, b| a.image.cmp(&b.image));
        entries.dedup_by(|a, b| a.image == b.image);
        DatasetManifest { entries }
    }

    pub fn to_json(&self) -> String {
        let mut out = String::from("[\n");
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push_str(if i + 1 < self.entries.len() { ",\n" } else { "\n" });
        }
        out.push_str("]\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        Ok(Self {
            entries: serde_json::from_str(text)?,
        })
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, self.to_json()).map_err(io_err(path))
    }

    /// Annotation CSV (`image,category,xmin,ymin,xmax,ymax`), one row per box.
    pub fn to_annotation_csv(&self) -> String {
        let mut out = String::from("image,category,xmin,ymin,xmax,ymax\n");
        for e in &self.entries {
            for b in &e.boxes {
                out.push_str(&format!("{},{},{},{},{},{}\n", e.image, b.category, b.xmin, b.ymin, b.xmax, b.ymax));
            }
        }
        out
    }
}

/// Where pipeline images live, addressed by manifest path.
pub trait ImageStore: Sync {
    fn put(&self, path: &str, image: &RgbImage) -> Result<(), DatasetError>;
    fn get(&self, path: &str) -> Result<Arc<RgbImage>, DatasetError>;
}

#[derive(Default)]
pub struct MemoryStore {
    images: Mutex<HashMap<String, Arc<RgbImage>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.images.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageStore for MemoryStore {
    fn put(&self, path: &str, image: &RgbImage) -> Result<(), DatasetError> {
        self.images.lock().unwrap().insert(path.to_string(), Arc::new(image.clone()));
        Ok(())
    }

    fn get(&self, path: &str) -> Result<Arc<RgbImage>, DatasetError> {
        self.images
            .lock()
            .unwrap()
            .get(path)
            .cloned()
            .ok_or_else(|| DatasetError::MissingImage(path.to_string()))
    }
}

/// PPM files under a root directory.
pub struct DirStore {
    pub root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ImageStore for DirStore {
    fn put(&self, path: &str, image: &RgbImage) -> Result<(), DatasetError> {
        Ok(image.write_ppm(&self.root.join(path))?)
    }

    fn get(&self, path: &str) -> Result<Arc<RgbImage>, DatasetError> {
        let full = self.root.join(path);
        if !full.is_file() {
            return Err(DatasetError::MissingImage(full.display().to_string()));
        }
        Ok(Arc::new(RgbImage::read_ppm(&full)?))
    }
}

/// Seed of image `index` of `category`.
pub fn image_seed(global_seed: u64, category: &str, index: usize) -> u64 {
    seed::derive(global_seed, &[seed::hash_str(category), index as u64])
}

/// The model/view/asset choice for one virtual image.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderJob {
    pub category: String,
    pub index: usize,
    pub model_index: usize,
    pub view: ViewLabel,
    pub background: Option<usize>,
    pub texture: Option<usize>,
    pub render_seed: u64,
}

impl RenderJob {
    pub fn path(&self) -> String {
        format!("virtual/{0}/{0}_{1:05}.ppm", self.category, self.index)
    }
}

/// Lays out every render: models round-robin over the kept prefix, views
/// cycling once per pass over the models, assets and perturbation drawn from
/// the per-image seed.
pub fn plan_renders(spec: &DatasetSpec, pools: &Pools) -> Result<Vec<RenderJob>, DatasetError> {
    spec.validate()?;
    pools.require(&spec.categories, &spec.cue)?;
    let mut jobs = Vec::with_capacity(spec.categories.len() * spec.images_per_category);
    for cat in &spec.categories {
        let pool = &pools.categories[cat];
        let kept = spec.models_kept(pool.models.len());
        let views = spec.views_enabled.len();
        for index in 0..spec.images_per_category {
            let s = image_seed(spec.global_seed, cat, index);
            let mut rng = seed::rng(s);
            let background = spec
                .cue
                .bg_mode
                .needs_image()
                .then(|| rng.gen_range(0..pool.backgrounds.len()));
            let texture = spec
                .cue
                .tx_mode
                .needs_image()
                .then(|| rng.gen_range(0..pool.textures.len()));
            jobs.push(RenderJob {
                category: cat.clone(),
                index,
                model_index: index % kept,
                view: spec.views_enabled[(index / kept) % views],
                background,
                texture,
                render_seed: seed::derive(s, &[1]),
            });
        }
    }
    Ok(jobs)
}

pub fn render_job(spec: &DatasetSpec, pools: &Pools, job: &RenderJob) -> Result<render::RenderedImage, DatasetError> {
    let pool = &pools.categories[&job.category];
    let mut cue = spec.cue.clone();
    cue.view = ViewPreset::named(job.view);
    let bg = job.background.map(|i| pool.backgrounds[i].asset());
    let tx = job.texture.map(|i| pool.textures[i].asset());
    render::render(&pool.models[job.model_index], &cue, bg, tx, job.render_seed).map_err(|source| {
        DatasetError::Render {
            category: job.category.clone(),
            index: job.index,
            source,
        }
    })
}

/// Renders `images_per_category` images for each category into `store` and
/// returns the manifest, sorted by image path.
pub fn build_virtual_dataset(
    spec: &DatasetSpec,
    pools: &Pools,
    store: &dyn ImageStore,
) -> Result<DatasetManifest, DatasetError> {
    let jobs = plan_renders(spec, pools)?;
    let mut entries = jobs
        .par_iter()
        .map(|job| {
            let r = render_job(spec, pools, job)?;
            let path = job.path();
            store.put(&path, &r.rgb)?;
            Ok(ManifestEntry {
                image: path,
                width: r.rgb.width(),
                height: r.rgb.height(),
                source: Source::Virtual,
                boxes: vec![GtBox::new(job.category.clone(), r.bbox)],
                provenance: Some(r.provenance),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    entries.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(DatasetManifest { entries })
}

/// Re-renders a virtual entry from its provenance alone.
pub fn rerender_entry(entry: &ManifestEntry, pools: &Pools) -> Result<RgbImage, DatasetError> {
    let prov = entry
        .provenance
        .as_ref()
        .ok_or_else(|| DatasetError::BadSpec(format!("{} has no provenance", entry.image)))?;
    let model = pools
        .model(&prov.model)
        .ok_or_else(|| DatasetError::MissingCategory(prov.model.clone()))?;
    let lookup = |id: &Option<String>| -> Result<Option<Asset<'_>>, DatasetError> {
        id.as_ref()
            .map(|id| {
                pools
                    .image(id)
                    .map(PoolImage::asset)
                    .ok_or_else(|| DatasetError::MissingImage(id.clone()))
            })
            .transpose()
    };
    let r = render::rerender(model, prov, lookup(&prov.bg_id)?, lookup(&prov.texture_id)?).map_err(|source| {
        DatasetError::Render {
            category: entry.boxes.first().map(|b| b.category.clone()).unwrap_or_default(),
            index: 0,
            source,
        }
    })?;
    Ok(r.rgb)
}

/// Reads an annotation CSV (`image,category,xmin,ymin,xmax,ymax`, header
/// required, half-open integer boxes). Images are resolved against
/// `image_root` and must be readable PPMs so boxes can be bounds-checked.
pub fn ingest_real_annotations(csv_path: &Path, image_root: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(csv_path).map_err(io_err(csv_path))?;
    parse_annotations(&text, image_root)
}

pub fn parse_annotations(text: &str, image_root: &Path) -> Result<DatasetManifest, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| DatasetError::BadRow {
        line: 1,
        reason: e.to_string(),
    })?;
    let expected = ["image", "category", "xmin", "ymin", "xmax", "ymax"];
    if header.iter().map(str::trim).collect::<Vec<_>>() != expected {
        return Err(DatasetError::BadRow {
            line: 1,
            reason: format!("header must be {}", expected.join(",")),
        });
    }
    let mut grouped: BTreeMap<String, (usize, Vec<GtBox>)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DatasetError::BadRow {
            line,
            reason: e.to_string(),
        })?;
        let bad = |reason: String| DatasetError::BadRow { line, reason };
        if rec.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", rec.len())));
        }
        let mut c = [0i32; 4];
        for (k, slot) in c.iter_mut().enumerate() {
            let f = rec[k + 2].trim();
            *slot = f.parse().map_err(|_| bad(format!("non-integer coordinate {f:?}")))?;
        }
        let b = BBox::new(c[0], c[1], c[2], c[3]).ok_or_else(|| bad(format!("invalid box {c:?}")))?;
        let category = rec[1].trim();
        if category.is_empty() {
            return Err(bad("empty category".into()));
        }
        grouped
            .entry(rec[0].trim().to_string())
            .or_insert_with(|| (line, Vec::new()))
            .1
            .push(GtBox::new(category, b));
    }
    let mut entries = Vec::with_capacity(grouped.len());
    for (image, (line, boxes)) in grouped {
        let full = image_root.join(&image);
        if !full.is_file() {
            return Err(DatasetError::MissingImage(full.display().to_string()));
        }
        let img = RgbImage::read_ppm(&full)?;
        if let Some(b) = boxes.iter().find(|b| !b.bbox().fits(img.width(), img.height())) {
            return Err(DatasetError::BadRow {
                line,
                reason: format!("box {} outside {}x{} image {image}", b.bbox(), img.width(), img.height()),
            });
        }
        entries.push(ManifestEntry {
            image,
            width: img.width(),
            height: img.height(),
            source: Source::Real,
            boxes,
            provenance: None,
        });
    }
    Ok(DatasetManifest { entries })
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Patch {
    pub image: String,
    pub bbox: BBox,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub per_image_negatives: usize,
    pub negative_iou: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSet {
    pub positives: Vec<Patch>,
    pub negatives: Vec<Patch>,
    pub policy: SamplingPolicy,
}

/// True when `region` overlaps every `category` box in `entry` by less than
/// the negative threshold.
pub fn is_negative_for(entry: &ManifestEntry, category: &str, region: &BBox) -> bool {
    entry
        .boxes
        .iter()
        .filter(|b| b.category == category)
        .all(|b| iou(&b.bbox(), region) < NEGATIVE_IOU)
}

/// Positives are the ground-truth boxes. For every image and every category
/// in `categories`, up to `per_image_negatives` proposals overlapping that
/// category's boxes by less than 0.3 are drawn as negatives.
pub fn sample_patches(
    manifest: &DatasetManifest,
    categories: &[String],
    per_image_negatives: usize,
    proposals: &ProposalSource,
    seed_value: u64,
) -> PatchSet {
    let positives = manifest
        .entries
        .iter()
        .flat_map(|e| {
            e.boxes.iter().map(move |b| Patch {
                image: e.image.clone(),
                bbox: b.bbox(),
                category: b.category.clone(),
            })
        })
        .collect();
    let negatives = manifest
        .entries
        .par_iter()
        .flat_map_iter(|e| {
            let candidates = proposals.proposals(&e.image, e.width, e.height);
            categories
                .iter()
                .flat_map(|cat| {
                    let mut eligible: Vec<BBox> =
                        candidates.iter().copied().filter(|r| is_negative_for(e, cat, r)).collect();
                    let s = seed::derive(seed_value, &[seed::hash_str(&e.image), seed::hash_str(cat)]);
                    eligible.shuffle(&mut seed::rng(s));
                    eligible.truncate(per_image_negatives);
                    eligible.into_iter().map(|bbox| Patch {
                        image: e.image.clone(),
                        bbox,
                        category: cat.clone(),
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect();
    PatchSet {
        positives,
        negatives,
        policy: SamplingPolicy {
            per_image_negatives,
            negative_iou: NEGATIVE_IOU,
            seed: seed_value,
        },
    }
}

/// Picks images per category until `k` boxes of that category are covered.
/// The per-category visiting order depends only on the seed, so subsets for
/// growing `k` are nested.
pub fn subsample_fewshot(manifest: &DatasetManifest, categories: &[String], k: usize, seed_value: u64) -> DatasetManifest {
    if k == 0 {
        return DatasetManifest::default();
    }
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    for cat in categories {
        let mut order: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.boxes.iter().any(|b| &b.category == cat))
            .map(|(i, _)| i)
            .collect();
        order.shuffle(&mut seed::rng(seed::derive(seed_value, &[seed::hash_str(cat)])));
        let mut covered = 0;
        for i in order {
            if covered >= k {
                break;
            }
            covered += manifest.entries[i].boxes.iter().filter(|b| &b.category == cat).count();
            chosen.insert(i);
        }
        if covered < k {
            log::warn!("category {cat:?} has only {covered} boxes, fewer than k={k}");
        }
    }
    let mut entries: Vec<ManifestEntry> = chosen.into_iter().map(|i| manifest.entries[i].clone()).collect();
    entries.sort_by(|a, b| a.image.cmp(&b.image));
    DatasetManifest { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::GridSpec;
    use crate::render::{BgMode, TxMode};

    fn tri_mesh(name: &str) -> Mesh {
        Mesh::new(
            name,
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.2], [0.3, 1.0, 0.0], [0.5, 0.4, 1.0]],
            vec![[0, 1, 2], [0, 1, 3], [1, 2, 3], [0, 2, 3]],
        )
    }

    fn pools(cats: &[&str], models: usize, bgs: usize, txs: usize) -> Pools {
        let mut p = Pools::default();
        for (ci, cat) in cats.iter().enumerate() {
            let img = |kind: &str, i: usize| PoolImage {
                id: format!("{kind}/{cat}/{i}.ppm"),
                image: RgbImage::from_fn(20, 20, move |x, y| [(x * 12) as u8, (y * 12) as u8, (ci * 60 + i * 30) as u8]),
            };
            p.categories.insert(
                cat.to_string(),
                CategoryPool {
                    models: (0..models).map(|i| tri_mesh(&format!("{cat}/m{i}"))).collect(),
                    backgrounds: (0..bgs).map(|i| img("backgrounds", i)).collect(),
                    textures: (0..txs).map(|i| img("textures", i)).collect(),
                },
            );
        }
        p
    }

    fn spec(cats: &[&str], n: usize) -> DatasetSpec {
        DatasetSpec {
            categories: cats.iter().map(|s| s.to_string()).collect(),
            images_per_category: n,
            cue: CueConfig {
                width: 32,
                height: 32,
                ..CueConfig::default()
            },
            global_seed: 17,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn build_counts_and_determinism() {
        let p = pools(&["a", "b"], 3, 2, 2);
        let s = spec(&["a", "b"], 7);
        let store = MemoryStore::new();
        let m = build_virtual_dataset(&s, &p, &store).unwrap();
        assert_eq!(m.len(), 14);
        assert_eq!(store.len(), 14);
        m.validate().unwrap();
        for e in &m.entries {
            assert_eq!(e.boxes.len(), 1);
            assert!(e.image.starts_with(&format!("virtual/{}/", e.boxes[0].category)));
        }
        let again = build_virtual_dataset(&s, &p, &MemoryStore::new()).unwrap();
        assert_eq!(m.to_json(), again.to_json());
    }

    #[test]
    fn provenance_reproduces_pixels() {
        let p = pools(&["a"], 2, 2, 3);
        let s = spec(&["a"], 4);
        let store = MemoryStore::new();
        let m = build_virtual_dataset(&s, &p, &store).unwrap();
        for e in &m.entries {
            assert_eq!(*store.get(&e.image).unwrap(), rerender_entry(e, &p).unwrap());
        }
    }

    #[test]
    fn model_fraction_keeps_sorted_prefix() {
        let p = pools(&["a"], 4, 1, 1);
        let mut s = spec(&["a"], 12);
        s.models_per_category_fraction = 0.5;
        let m = build_virtual_dataset(&s, &p, &MemoryStore::new()).unwrap();
        let used: BTreeSet<String> = m.entries.iter().map(|e| e.provenance.clone().unwrap().model).collect();
        assert_eq!(used, ["a/m0", "a/m1"].iter().map(|s| s.to_string()).collect());
        assert_eq!(s.models_kept(4), 2);
        assert_eq!(s.models_kept(3), 2);
        s.models_per_category_fraction = 0.01;
        assert_eq!(s.models_kept(10), 1);
    }

    #[test]
    fn views_cycle_per_model_pass() {
        let p = pools(&["a"], 2, 1, 1);
        let mut s = spec(&["a"], 6);
        s.views_enabled = vec![ViewLabel::Front, ViewLabel::Side];
        let jobs = plan_renders(&s, &p).unwrap();
        let layout: Vec<(usize, ViewLabel)> = jobs.iter().map(|j| (j.model_index, j.view)).collect();
        use ViewLabel::*;
        assert_eq!(layout, vec![(0, Front), (1, Front), (0, Side), (1, Side), (0, Front), (1, Front)]);
    }

    #[test]
    fn spec_and_pool_errors() {
        let p = pools(&["a"], 1, 0, 0);
        let mut s = spec(&["a"], 2);
        s.cue.bg_mode = BgMode::White;
        s.cue.tx_mode = TxMode::UniformGray;
        assert!(build_virtual_dataset(&s, &p, &MemoryStore::new()).is_ok());
        s.cue.bg_mode = BgMode::RealRgb;
        assert!(matches!(
            build_virtual_dataset(&s, &p, &MemoryStore::new()),
            Err(DatasetError::MissingPool { what: "background", .. })
        ));
        let s = spec(&["boat"], 2);
        assert!(matches!(plan_renders(&s, &p), Err(DatasetError::MissingCategory(c)) if c == "boat"));
        let mut s = spec(&["a"], 2);
        s.views_enabled.clear();
        assert!(matches!(plan_renders(&s, &p), Err(DatasetError::BadSpec(_))));
    }

    fn real_manifest(images: &[(&str, &[(&str, (i32, i32, i32, i32))])]) -> DatasetManifest {
        DatasetManifest {
            entries: images
                .iter()
                .map(|(name, boxes)| ManifestEntry {
                    image: name.to_string(),
                    width: 64,
                    height: 64,
                    source: Source::Real,
                    boxes: boxes
                        .iter()
                        .map(|(c, (a, b, cc, d))| GtBox::new(*c, BBox::new(*a, *b, *cc, *d).unwrap()))
                        .collect(),
                    provenance: None,
                })
                .collect(),
        }
    }

    #[test]
    fn patches_respect_overlap_rules() {
        let m = real_manifest(&[
            ("full", &[("a", (0, 0, 64, 64))]),
            ("part", &[("a", (10, 10, 40, 40)), ("b", (30, 30, 60, 60))]),
        ]);
        let cats = vec!["a".to_string(), "b".to_string()];
        let props = ProposalSource::Grid(GridSpec {
            scales: vec![40.0, 48.0],
            aspect_ratios: vec![1.0],
            stride_fraction: 0.25,
        });
        let ps = sample_patches(&m, &cats, 5, &props, 3);
        assert_eq!(ps.positives.len(), 3);
        assert!(!ps.negatives.iter().any(|n| n.image == "full" && n.category == "a"));
        assert!(ps.negatives.iter().any(|n| n.image == "full" && n.category == "b"));
        for n in &ps.negatives {
            let e = m.entries.iter().find(|e| e.image == n.image).unwrap();
            for g in e.boxes.iter().filter(|g| g.category == n.category) {
                let inter = g.bbox().intersection_area(&n.bbox) as f64;
                let uni = (g.bbox().area() + n.bbox.area()) as f64 - inter;
                assert!(inter / uni < 0.3);
            }
        }
        assert!(ps.negatives.iter().filter(|n| n.image == "part" && n.category == "a").count() <= 5);
        assert_eq!(ps, sample_patches(&m, &cats, 5, &props, 3));
    }

    #[test]
    fn fewshot_counts_and_nesting() {
        let cats: Vec<String> = (0..20).map(|i| format!("c{i:02}")).collect();
        let mut entries = Vec::new();
        for (ci, c) in cats.iter().enumerate() {
            for j in 0..30 {
                entries.push(ManifestEntry {
                    image: format!("img_{ci:02}_{j:02}.ppm"),
                    width: 64,
                    height: 64,
                    source: Source::Real,
                    boxes: vec![GtBox::new(c.clone(), BBox::new(1, 1, 20, 20).unwrap())],
                    provenance: None,
                });
            }
        }
        let m = DatasetManifest { entries };
        assert!(subsample_fewshot(&m, &cats, 0, 1).is_empty());
        let r5 = subsample_fewshot(&m, &cats, 5, 1);
        assert_eq!(r5.len(), 100);
        let r10 = subsample_fewshot(&m, &cats, 10, 1);
        let r20 = subsample_fewshot(&m, &cats, 20, 1);
        let names = |m: &DatasetManifest| m.entries.iter().map(|e| e.image.clone()).collect::<BTreeSet<_>>();
        assert!(names(&r5).is_subset(&names(&r10)));
        assert!(names(&r10).is_subset(&names(&r20)));
        assert_eq!(r10, subsample_fewshot(&m, &cats, 10, 1));
    }

    #[test]
    fn fewshot_shares_multi_object_images() {
        let m = real_manifest(&[
            ("x", &[("a", (0, 0, 5, 5)), ("b", (5, 5, 9, 9))]),
            ("y", &[("a", (0, 0, 5, 5))]),
        ]);
        let cats = vec!["a".to_string(), "b".to_string()];
        let r = subsample_fewshot(&m, &cats, 2, 0);
        assert_eq!(r.len(), 2);
        // Fewer boxes than k: everything is taken.
        assert_eq!(subsample_fewshot(&m, &cats, 9, 0).len(), 2);
    }

    #[test]
    fn annotation_csv_grouping_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(40, 30).write_ppm(&dir.path().join("img/a.ppm")).unwrap();
        RgbImage::new(40, 30).write_ppm(&dir.path().join("img/b.ppm")).unwrap();
        let csv = "image,category,xmin,ymin,xmax,ymax\nimg/a.ppm,car,0,0,10,10\nimg/b.ppm,dog,1,2,3,4\nimg/a.ppm,cat,5,5,40,30\n";
        let m = parse_annotations(csv, dir.path()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].boxes.len(), 2);
        assert_eq!(m.entries[0].source, Source::Real);
        m.validate().unwrap();

        let back = parse_annotations(&m.to_annotation_csv(), dir.path()).unwrap();
        assert_eq!(back, m);

        let bad = "image,category,xmin,ymin,xmax,ymax\nimg/a.ppm,car,10,0,10,10\n";
        assert!(matches!(parse_annotations(bad, dir.path()), Err(DatasetError::BadRow { line: 2, .. })));
        let outside = "image,category,xmin,ymin,xmax,ymax\nimg/a.ppm,car,0,0,41,10\n";
        assert!(matches!(parse_annotations(outside, dir.path()), Err(DatasetError::BadRow { .. })));
        let missing = "image,category,xmin,ymin,xmax,ymax\nimg/zz.ppm,car,0,0,4,4\n";
        assert!(matches!(parse_annotations(missing, dir.path()), Err(DatasetError::MissingImage(_))));
        assert!(matches!(parse_annotations("a,b\n", dir.path()), Err(DatasetError::BadRow { line: 1, .. })));
    }

    #[test]
    fn pools_round_trip_through_disk() {
        let p = pools(&["car"], 2, 3, 2);
        let dir = tempfile::tempdir().unwrap();
        write_pools(&p, dir.path()).unwrap();
        let cats = vec!["car".to_string()];
        let loaded = load_pools(dir.path(), &cats).unwrap();
        assert_eq!(loaded.get("car").unwrap().sizes(), (2, 3, 2));
        assert_eq!(loaded.get("car").unwrap().models[1].name, "car/m1");
        let missing = vec!["boat".to_string()];
        assert!(matches!(load_pools(dir.path(), &missing), Err(DatasetError::MissingCategory(c)) if c == "boat"));
    }

    #[test]
    fn manifest_json_shape() {
        let m = real_manifest(&[("x", &[("a", (0, 0, 5, 5))])]);
        let json = m.to_json();
        assert!(json.contains(r#""boxes":[{"category":"a","xmin":0,"ymin":0,"xmax":5,"ymax":5}]"#));
        assert!(json.contains(r#""source":"real""#));
        assert_eq!(DatasetManifest::from_json(&json).unwrap(), m);
    }
}
