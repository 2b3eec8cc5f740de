//! Declarative ablation runs: generate, featurize, train, detect and evaluate
//! once per cell, then tabulate per-category AP and mAP across cells.
//!
//! Plans are INI files. Every section and key is optional except
//! `[plan] kind` and `[plan] categories`; paths are relative to the plan file.
//!
//! ```ini
//! [plan]
//! name = toy-cues
//! kind = cue-matrix        ; cue-matrix | view-ablation | shape-ablation | fewshot | size-curve
//! seed = 7
//! categories = cube, cylinder-assembly, cone-assembly
//! assets = toy             ; "toy" or a pool root directory
//!
//! [cells]
//! cues = RR-RR, W-UG       ; cue-matrix
//! views = front | front,side | front,side,intra
//! fractions = 1.0, 0.5
//! k = 0, 5, 10, 20
//! sizes = 200, 2000
//! ```
//!
//! The remaining sections (`dataset`, `features`, `proposals`, `train`,
//! `detect`, `test`, `real`) are listed in [`ExperimentPlan::resolved`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ini::{EscapePolicy, Ini};
use rayon::prelude::*;
use thiserror::Error;

use crate::bbox::BBox;
use crate::dataset::{self, DatasetError, DatasetManifest, DatasetSpec, ImageStore, MemoryStore, Pools};
use crate::detect::{self, Detection, DetectParams, GridSpec, ProposalSource};
use crate::detector::{self, DetectorError, LinearModel, SvmParams, TrainSet};
use crate::eval::{self, fmt4, EvalReport};
use crate::features::{patch_key, FeatureError, FeatureTable, Featurizer, HogFeaturizer, HogParams, TableFeaturizer};
use crate::mesh::ViewLabel;
use crate::raster::RgbImage;
use crate::render::{BgMode, CueCell, CueConfig, TxMode};
use crate::{seed, toy};

/// Failure classes, mapped one-to-one onto CLI exit codes.
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("asset error: {0}")]
    Asset(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Asset(_) => 3,
            ExperimentError::Runtime(_) => 4,
        }
    }
}

impl From<DatasetError> for ExperimentError {
    fn from(e: DatasetError) -> Self {
        let msg = e.to_string();
        match e {
            DatasetError::BadSpec(_) | DatasetError::BadRow { .. } => ExperimentError::Config(msg),
            DatasetError::MissingCategory(_)
            | DatasetError::UnreadableAsset { .. }
            | DatasetError::MissingPool { .. }
            | DatasetError::MissingImage(_)
            | DatasetError::Image(_) => ExperimentError::Asset(msg),
            DatasetError::Render { .. } | DatasetError::Io { .. } | DatasetError::Json(_) => {
                ExperimentError::Runtime(msg)
            }
        }
    }
}

impl From<DetectorError> for ExperimentError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::BadParams(_) | DetectorError::SpaceMismatch { .. } => ExperimentError::Config(e.to_string()),
            DetectorError::Feature(FeatureError::MissingPatch(_)) => ExperimentError::Asset(e.to_string()),
            _ => ExperimentError::Runtime(e.to_string()),
        }
    }
}

impl From<FeatureError> for ExperimentError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::BadParams(_) => ExperimentError::Config(e.to_string()),
            FeatureError::Io { .. } => ExperimentError::Runtime(e.to_string()),
            _ => ExperimentError::Asset(e.to_string()),
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanKind {
    CueMatrix,
    ViewAblation,
    ShapeAblation,
    FewShot,
    SizeCurve,
}

impl PlanKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanKind::CueMatrix => "cue-matrix",
            PlanKind::ViewAblation => "view-ablation",
            PlanKind::ShapeAblation => "shape-ablation",
            PlanKind::FewShot => "fewshot",
            PlanKind::SizeCurve => "size-curve",
        }
    }

    fn parse(s: &str) -> Result<Self, ExperimentError> {
        Ok(match s {
            "cue-matrix" => PlanKind::CueMatrix,
            "view-ablation" => PlanKind::ViewAblation,
            "shape-ablation" => PlanKind::ShapeAblation,
            "fewshot" => PlanKind::FewShot,
            "size-curve" => PlanKind::SizeCurve,
            _ => return Err(ExperimentError::Config(format!("unknown plan kind {s:?}"))),
        })
    }

    /// Resolved-config keys allowed to differ between cells of this kind.
    fn knob_keys(self) -> &'static [&'static str] {
        match self {
            PlanKind::CueMatrix => &["dataset.bg", "dataset.tx"],
            PlanKind::ViewAblation => &["dataset.views", "dataset.renders_per_view"],
            PlanKind::ShapeAblation => &["dataset.models_fraction"],
            PlanKind::FewShot => &["fewshot.k", "fewshot.virtual"],
            PlanKind::SizeCurve => &["dataset.images_per_category", "dataset.renders_per_view"],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AssetSource {
    Toy { seed: u64 },
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSpace {
    Hog(HogFeaturizer),
    External { table: PathBuf, l2: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub svm: SvmParams,
    pub negatives_per_image: usize,
    pub mining_rounds: usize,
    pub mining_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            svm: SvmParams::default(),
            negatives_per_image: 10,
            mining_rounds: 1,
            mining_cap: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealSource {
    pub annotations: PathBuf,
    pub image_root: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TestSource {
    Virtual {
        images_per_category: usize,
        seed: u64,
        cell: CueCell,
        views: Vec<ViewLabel>,
    },
    Real(RealSource),
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellKnob {
    Cue(CueCell),
    Views(Vec<ViewLabel>),
    Fraction(f64),
    FewShot { k: usize, with_virtual: bool },
    Size(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub name: String,
    pub kind: PlanKind,
    pub seed: u64,
    pub assets: AssetSource,
    /// Baseline training spec; cells override one knob of it.
    pub base: DatasetSpec,
    pub features: FeatureSpace,
    pub grid: GridSpec,
    pub proposals_csv: Option<PathBuf>,
    pub train: TrainConfig,
    pub detect: DetectParams,
    pub iou_threshold: f64,
    pub test: TestSource,
    pub real: Option<RealSource>,
    pub knobs: Vec<CellKnob>,
    pub parallel_cells: bool,
}

/// One resolved cell: its label, the virtual spec (if any) and the few-shot k.
#[derive(Clone, Debug, PartialEq)]
pub struct CellPlan {
    pub label: String,
    pub virtual_spec: Option<DatasetSpec>,
    pub fewshot_k: Option<usize>,
}

fn list(s: &str, sep: char) -> Vec<String> {
    s.split(sep).map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

fn views_label(views: &[ViewLabel]) -> String {
    views.iter().map(|v| v.as_str()).collect::<Vec<_>>().join("+")
}

fn parse_views(s: &str) -> Result<Vec<ViewLabel>, ExperimentError> {
    let views = list(s, ',')
        .iter()
        .map(|v| match v.parse::<ViewLabel>() {
            Ok(ViewLabel::Custom) | Err(_) => Err(ExperimentError::Config(format!("unknown view {v:?}"))),
            Ok(l) => Ok(l),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if views.is_empty() {
        return Err(ExperimentError::Config("empty view set".into()));
    }
    Ok(views)
}

/// Typed access to one INI section that rejects unknown keys.
struct Section<'a> {
    name: &'static str,
    props: Option<&'a ini::Properties>,
    used: std::cell::RefCell<BTreeSet<String>>,
}

impl<'a> Section<'a> {
    fn new(ini: &'a Ini, name: &'static str) -> Self {
        Self {
            name,
            props: ini.section(Some(name)),
            used: Default::default(),
        }
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.used.borrow_mut().insert(key.to_string());
        self.props.and_then(|p| p.get(key)).map(str::trim)
    }

    fn bad(&self, key: &str, v: &str, what: &str) -> ExperimentError {
        ExperimentError::Config(format!("[{}] {key} = {v:?}: expected {what}", self.name))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T, what: &str) -> Result<T, ExperimentError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, v, what)),
        }
    }

    fn floats(&self, key: &str, default: Vec<f64>) -> Result<Vec<f64>, ExperimentError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => list(v, ',')
                .iter()
                .map(|x| x.parse().map_err(|_| self.bad(key, v, "comma-separated numbers")))
                .collect(),
        }
    }

    fn finish(&self) -> Result<(), ExperimentError> {
        if let Some(p) = self.props {
            let used = self.used.borrow();
            if let Some((k, _)) = p.iter().find(|(k, _)| !used.contains(*k)) {
                return Err(ExperimentError::Config(format!("[{}] unknown key {k:?}", self.name)));
            }
        }
        Ok(())
    }
}

const SECTIONS: [&str; 9] = ["plan", "cells", "dataset", "features", "proposals", "train", "detect", "test", "real"];

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::load_with_seed(path, None)
    }

    pub fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read plan {}: {e}", path.display())))?;
        Self::parse_with_seed(&text, path.parent().unwrap_or(Path::new(".")), seed)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        Self::parse_with_seed(text, base_dir, None)
    }

    /// Like [`ExperimentPlan::parse`], with `seed` replacing `[plan] seed`.
    pub fn parse_with_seed(text: &str, base_dir: &Path, seed: Option<u64>) -> Result<Self, ExperimentError> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| ExperimentError::Config(format!("plan syntax: {e}")))?;
        if let Some(s) = ini.sections().flatten().find(|s| !SECTIONS.contains(s)) {
            return Err(ExperimentError::Config(format!("unknown section [{s}]")));
        }
        if !ini.general_section().is_empty() {
            return Err(ExperimentError::Config("keys outside a section".into()));
        }
        let path = |p: &str| base_dir.join(p);
        let cfg = |m: String| ExperimentError::Config(m);

        let plan = Section::new(&ini, "plan");
        let kind = PlanKind::parse(plan.raw("kind").ok_or_else(|| cfg("[plan] kind is required".into()))?)?;
        let name = plan.raw("name").unwrap_or(kind.as_str()).to_string();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(cfg(format!("plan name {name:?} must be [A-Za-z0-9._-]+")));
        }
        let seed_value: u64 = plan.parse("seed", 0, "an unsigned integer")?;
        let seed_value = seed.unwrap_or(seed_value);
        let categories = list(plan.raw("categories").unwrap_or(""), ',');
        let assets = match plan.raw("assets").unwrap_or("toy") {
            "toy" => AssetSource::Toy {
                seed: plan.parse("toy_seed", 1, "an unsigned integer")?,
            },
            dir => AssetSource::Dir(path(dir)),
        };
        if matches!(assets, AssetSource::Dir(_)) && plan.raw("toy_seed").is_some() {
            return Err(cfg("[plan] toy_seed only applies to assets = toy".into()));
        }
        let parallel_cells = plan.parse("parallel_cells", false, "true or false")?;
        plan.finish()?;

        let ds = Section::new(&ini, "dataset");
        let defaults = DatasetSpec::default();
        let cue_defaults = CueConfig::default();
        let bg: BgMode = ds.parse("bg", BgMode::RealRgb, "RR, W or RG")?;
        let tx: TxMode = ds.parse("tx", TxMode::RealRgb, "RR or UG")?;
        let base = DatasetSpec {
            categories,
            images_per_category: ds.parse("images_per_category", defaults.images_per_category, "a count")?,
            models_per_category_fraction: ds.parse("models_fraction", 1.0, "a number in (0,1]")?,
            views_enabled: match ds.raw("views") {
                Some(v) => parse_views(v)?,
                None => defaults.views_enabled.clone(),
            },
            cue: CueConfig {
                bg_mode: bg,
                tx_mode: tx,
                perturb_range_deg: ds.parse("perturb", cue_defaults.perturb_range_deg, "degrees")?,
                width: ds.parse("width", cue_defaults.width, "pixels")?,
                height: ds.parse("height", cue_defaults.height, "pixels")?,
                fill_fraction: ds.parse("fill", cue_defaults.fill_fraction, "a number in (0,1]")?,
                ..cue_defaults
            },
            global_seed: seed_value,
        };
        ds.finish()?;
        base.validate().map_err(|e| cfg(e.to_string()))?;

        let fs_ = Section::new(&ini, "features");
        let hog_defaults = HogParams::default();
        let features = match fs_.raw("space").unwrap_or("hog") {
            "hog" => {
                let patch = fs_.parse("patch", hog_defaults.patch_width, "pixels")?;
                let params = HogParams {
                    cell_size: fs_.parse("cell_size", hog_defaults.cell_size, "pixels")?,
                    block_size: fs_.parse("block_size", hog_defaults.block_size, "cells")?,
                    block_stride: fs_.parse("block_stride", hog_defaults.block_stride, "cells")?,
                    orientations: fs_.parse("orientations", hog_defaults.orientations, "a count")?,
                    patch_width: patch,
                    patch_height: patch,
                };
                params.validate()?;
                let context: f64 = fs_.parse("context", 0.0, "a non-negative fraction")?;
                if !(context >= 0.0 && context.is_finite()) {
                    return Err(cfg(format!("[features] context {context} must be >= 0")));
                }
                FeatureSpace::Hog(HogFeaturizer { params, context })
            }
            "external" => FeatureSpace::External {
                table: path(fs_.raw("table").ok_or_else(|| cfg("[features] external space needs table".into()))?),
                l2: fs_.parse("l2", false, "true or false")?,
            },
            other => return Err(cfg(format!("unknown feature space {other:?}"))),
        };
        fs_.finish()?;

        let ps = Section::new(&ini, "proposals");
        let grid_defaults = GridSpec::default();
        let grid = GridSpec {
            scales: ps.floats("scales", grid_defaults.scales)?,
            aspect_ratios: ps.floats("ratios", grid_defaults.aspect_ratios)?,
            stride_fraction: ps.parse("stride", grid_defaults.stride_fraction, "a fraction")?,
        };
        let proposals_csv = ps.raw("csv").map(path);
        ps.finish()?;

        let ts = Section::new(&ini, "train");
        let td = TrainConfig::default();
        let train = TrainConfig {
            svm: SvmParams {
                c: ts.parse("c", td.svm.c, "a positive number")?,
                tol: ts.parse("tol", td.svm.tol, "a positive number")?,
                max_epochs: ts.parse("max_epochs", td.svm.max_epochs, "a count")?,
                seed: seed::derive(seed_value, &[seed::hash_str("svm")]),
            },
            negatives_per_image: ts.parse("negatives_per_image", td.negatives_per_image, "a count")?,
            mining_rounds: ts.parse("mining_rounds", td.mining_rounds, "a count")?,
            mining_cap: ts.parse("mining_cap", td.mining_cap, "a count")?,
        };
        ts.finish()?;
        if !(train.svm.c > 0.0 && train.svm.tol > 0.0) {
            return Err(cfg("[train] c and tol must be positive".into()));
        }

        let dsec = Section::new(&ini, "detect");
        let dd = DetectParams::default();
        let detect = DetectParams {
            nms_threshold: dsec.parse("nms", dd.nms_threshold, "a number in [0,1]")?,
            score_floor: dsec.parse("score_floor", dd.score_floor, "a number")?,
        };
        let iou_threshold = dsec.parse("iou", 0.5, "a number in (0,1]")?;
        dsec.finish()?;

        let tsec = Section::new(&ini, "test");
        let test = match tsec.raw("source").unwrap_or("virtual") {
            "virtual" => {
                let cell = CueCell {
                    bg: tsec.parse("bg", BgMode::RealRgb, "RR, W or RG")?,
                    tx: tsec.parse("tx", TxMode::RealRgb, "RR or UG")?,
                };
                let test_seed: u64 = tsec.parse("seed", seed::derive(seed_value, &[seed::hash_str("test")]), "an unsigned integer")?;
                if test_seed == seed_value {
                    return Err(cfg("[test] seed must differ from the training seed".into()));
                }
                TestSource::Virtual {
                    images_per_category: tsec.parse("images_per_category", 20, "a count")?,
                    seed: test_seed,
                    cell,
                    views: match tsec.raw("views") {
                        Some(v) => parse_views(v)?,
                        None => vec![ViewLabel::Front, ViewLabel::Side, ViewLabel::Intra],
                    },
                }
            }
            "real" => {
                let src = match (tsec.raw("annotations"), tsec.raw("image_root")) {
                    (Some(a), Some(r)) => RealSource {
                        annotations: path(a),
                        image_root: path(r),
                    },
                    _ => return Err(cfg("[test] real source needs annotations and image_root".into())),
                };
                TestSource::Real(src)
            }
            other => return Err(cfg(format!("unknown test source {other:?}"))),
        };
        tsec.finish()?;

        let rs = Section::new(&ini, "real");
        let real = match (rs.raw("annotations"), rs.raw("image_root")) {
            (Some(a), Some(r)) => Some(RealSource {
                annotations: path(a),
                image_root: path(r),
            }),
            (None, None) => None,
            _ => return Err(cfg("[real] needs both annotations and image_root".into())),
        };
        rs.finish()?;

        let cs = Section::new(&ini, "cells");
        let knobs = match kind {
            PlanKind::CueMatrix => list(cs.raw("cues").unwrap_or("RR-RR,RR-UG,W-RR,W-UG,RG-RR,RG-UG"), ',')
                .iter()
                .map(|c| c.parse().map(CellKnob::Cue).map_err(|_| cfg(format!("unknown cue cell {c:?}"))))
                .collect::<Result<Vec<_>, _>>()?,
            PlanKind::ViewAblation => list(cs.raw("views").unwrap_or("front | front,side | front,side,intra"), '|')
                .iter()
                .map(|v| parse_views(v).map(CellKnob::Views))
                .collect::<Result<Vec<_>, _>>()?,
            PlanKind::ShapeAblation => cs
                .floats("fractions", vec![1.0, 0.5])?
                .into_iter()
                .map(|f| {
                    if f > 0.0 && f <= 1.0 {
                        Ok(CellKnob::Fraction(f))
                    } else {
                        Err(cfg(format!("model fraction {f} outside (0,1]")))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?,
            PlanKind::FewShot => {
                let ks = list(cs.raw("k").unwrap_or("0,5,10,20"), ',')
                    .iter()
                    .map(|k| k.parse::<usize>().map_err(|_| cfg(format!("bad k {k:?}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                ks.into_iter()
                    .flat_map(|k| {
                        let mut v = vec![CellKnob::FewShot { k, with_virtual: true }];
                        if k > 0 {
                            v.push(CellKnob::FewShot { k, with_virtual: false });
                        }
                        v
                    })
                    .collect()
            }
            PlanKind::SizeCurve => {
                let mut sizes = list(cs.raw("sizes").unwrap_or("200,2000"), ',')
                    .iter()
                    .map(|s| s.parse::<usize>().map_err(|_| cfg(format!("bad size {s:?}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                sizes.sort_unstable();
                sizes.dedup();
                if let Some(s) = sizes.iter().find(|&&s| s < base.categories.len()) {
                    return Err(cfg(format!("size {s} is smaller than the category count")));
                }
                sizes.into_iter().map(CellKnob::Size).collect()
            }
        };
        // Keys for other kinds are tolerated so one file can drive several runs.
        for k in ["cues", "views", "fractions", "k", "sizes"] {
            cs.raw(k);
        }
        cs.finish()?;
        if knobs.is_empty() {
            return Err(cfg("plan has no cells".into()));
        }
        if kind == PlanKind::FewShot && real.is_none() {
            return Err(cfg("fewshot plans need a [real] section".into()));
        }

        let plan = ExperimentPlan {
            name,
            kind,
            seed: seed_value,
            assets,
            base,
            features,
            grid,
            proposals_csv,
            train,
            detect,
            iou_threshold,
            test,
            real,
            knobs,
            parallel_cells,
        };
        let labels: Vec<String> = plan.cells()?.into_iter().map(|c| c.label).collect();
        let unique: BTreeSet<String> = labels.iter().map(|l| dir_name(l)).collect();
        if unique.len() != labels.len() {
            return Err(cfg("cell labels are not unique".into()));
        }
        Ok(plan)
    }

    /// Expands the knobs into concrete cells.
    pub fn cells(&self) -> Result<Vec<CellPlan>, ExperimentError> {
        let n_cats = self.base.categories.len();
        let cells = self
            .knobs
            .iter()
            .map(|knob| {
                let mut spec = self.base.clone();
                let (label, fewshot_k, with_virtual) = match knob {
                    CellKnob::Cue(c) => {
                        spec.cue.bg_mode = c.bg;
                        spec.cue.tx_mode = c.tx;
                        (c.label(), None, true)
                    }
                    CellKnob::Views(v) => {
                        spec.views_enabled = v.clone();
                        (views_label(v), None, true)
                    }
                    CellKnob::Fraction(f) => {
                        spec.models_per_category_fraction = *f;
                        (format!("models-{f}"), None, true)
                    }
                    CellKnob::FewShot { k, with_virtual } => {
                        let label = if *with_virtual { format!("R{k}+V") } else { format!("R{k}") };
                        (label, Some(*k), *with_virtual)
                    }
                    CellKnob::Size(s) => {
                        spec.images_per_category = (s / n_cats).max(1);
                        (s.to_string(), None, true)
                    }
                };
                CellPlan {
                    label,
                    virtual_spec: with_virtual.then_some(spec),
                    fewshot_k,
                }
            })
            .collect();
        Ok(cells)
    }

    fn plan_entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let mut out = vec![
            ("plan", "name", self.name.clone()),
            ("plan", "kind", self.kind.as_str().to_string()),
            ("plan", "seed", self.seed.to_string()),
            ("plan", "categories", self.base.categories.join(",")),
        ];
        match &self.assets {
            AssetSource::Toy { seed } => {
                out.push(("plan", "assets", "toy".into()));
                out.push(("plan", "toy_seed", seed.to_string()));
            }
            AssetSource::Dir(d) => out.push(("plan", "assets", d.display().to_string())),
        }
        out.push(("plan", "parallel_cells", self.parallel_cells.to_string()));
        match &self.features {
            FeatureSpace::Hog(h) => {
                let p = &h.params;
                out.push(("features", "space", "hog".into()));
                out.push(("features", "space_id", h.space_id()));
                out.push(("features", "context", h.context.to_string()));
                out.push(("features", "cell_size", p.cell_size.to_string()));
                out.push(("features", "block_size", p.block_size.to_string()));
                out.push(("features", "block_stride", p.block_stride.to_string()));
                out.push(("features", "orientations", p.orientations.to_string()));
                out.push(("features", "patch", p.patch_width.to_string()));
            }
            FeatureSpace::External { table, l2 } => {
                out.push(("features", "space", "external".into()));
                out.push(("features", "table", table.display().to_string()));
                out.push(("features", "l2", l2.to_string()));
            }
        }
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        out.push(("proposals", "scales", join(&self.grid.scales)));
        out.push(("proposals", "ratios", join(&self.grid.aspect_ratios)));
        out.push(("proposals", "stride", self.grid.stride_fraction.to_string()));
        if let Some(csv) = &self.proposals_csv {
            out.push(("proposals", "csv", csv.display().to_string()));
        }
        let t = &self.train;
        out.push(("train", "c", t.svm.c.to_string()));
        out.push(("train", "tol", t.svm.tol.to_string()));
        out.push(("train", "max_epochs", t.svm.max_epochs.to_string()));
        out.push(("train", "svm_seed", t.svm.seed.to_string()));
        out.push(("train", "negatives_per_image", t.negatives_per_image.to_string()));
        out.push(("train", "negative_iou", dataset::NEGATIVE_IOU.to_string()));
        out.push(("train", "mining_rounds", t.mining_rounds.to_string()));
        out.push(("train", "mining_cap", t.mining_cap.to_string()));
        out.push(("detect", "nms", self.detect.nms_threshold.to_string()));
        out.push(("detect", "score_floor", self.detect.score_floor.to_string()));
        out.push(("detect", "iou", self.iou_threshold.to_string()));
        match &self.test {
            TestSource::Virtual {
                images_per_category,
                seed,
                cell,
                views,
            } => {
                out.push(("test", "source", "virtual".into()));
                out.push(("test", "images_per_category", images_per_category.to_string()));
                out.push(("test", "seed", seed.to_string()));
                out.push(("test", "bg", cell.bg.code().into()));
                out.push(("test", "tx", cell.tx.code().into()));
                out.push(("test", "views", views.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(",")));
            }
            TestSource::Real(r) => {
                out.push(("test", "source", "real".into()));
                out.push(("test", "annotations", r.annotations.display().to_string()));
                out.push(("test", "image_root", r.image_root.display().to_string()));
            }
        }
        if let Some(r) = &self.real {
            out.push(("real", "annotations", r.annotations.display().to_string()));
            out.push(("real", "image_root", r.image_root.display().to_string()));
        }
        out
    }

    fn spec_entries(spec: Option<&DatasetSpec>) -> Vec<(&'static str, &'static str, String)> {
        let Some(s) = spec else {
            return vec![("dataset", "virtual", "none".into())];
        };
        let per_view = s.images_per_category / s.views_enabled.len();
        vec![
            ("dataset", "images_per_category", s.images_per_category.to_string()),
            ("dataset", "models_fraction", s.models_per_category_fraction.to_string()),
            ("dataset", "views", s.views_enabled.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(",")),
            // Views cycle per pass over the models, so each view gets this many
            // renders (the remainder goes to the earliest views).
            ("dataset", "renders_per_view", per_view.to_string()),
            ("dataset", "bg", s.cue.bg_mode.code().into()),
            ("dataset", "tx", s.cue.tx_mode.code().into()),
            ("dataset", "width", s.cue.width.to_string()),
            ("dataset", "height", s.cue.height.to_string()),
            ("dataset", "fill", s.cue.fill_fraction.to_string()),
            ("dataset", "perturb", s.cue.perturb_range_deg.to_string()),
            ("dataset", "global_seed", s.global_seed.to_string()),
        ]
    }

    /// Every effective setting of one cell as `section.key -> value`.
    pub fn resolved(&self, cell: &CellPlan) -> BTreeMap<String, String> {
        let mut entries = self.plan_entries();
        entries.push(("cell", "label", cell.label.clone()));
        if self.kind == PlanKind::FewShot {
            entries.push(("fewshot", "k", cell.fewshot_k.unwrap_or(0).to_string()));
            entries.push(("fewshot", "virtual", cell.virtual_spec.is_some().to_string()));
            entries.extend(Self::spec_entries(Some(&self.base)));
        } else {
            entries.extend(Self::spec_entries(cell.virtual_spec.as_ref()));
        }
        entries.into_iter().map(|(s, k, v)| (format!("{s}.{k}"), v)).collect()
    }

    /// Asserts that cells differ only in this plan kind's knob.
    pub fn check_isolation(&self, cells: &[CellPlan]) -> Result<(), ExperimentError> {
        let Some(first) = cells.first() else {
            return Ok(());
        };
        let base = self.resolved(first);
        let allowed: BTreeSet<&str> = self.kind.knob_keys().iter().copied().chain(["cell.label"]).collect();
        for cell in &cells[1..] {
            let other = self.resolved(cell);
            let keys: BTreeSet<&String> = base.keys().chain(other.keys()).collect();
            let differing = keys.into_iter().find(|k| base.get(*k) != other.get(*k) && !allowed.contains(k.as_str()));
            if let Some(k) = differing {
                return Err(ExperimentError::Config(format!(
                    "cells {:?} and {:?} differ in {k}, which is not the {} knob",
                    first.label,
                    cell.label,
                    self.kind.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Writes `section.key` entries as INI text, preserving order.
pub fn resolved_ini(entries: &BTreeMap<String, String>) -> String {
    let mut ini = Ini::new();
    for (key, value) in entries {
        let (section, k) = key.split_once('.').unwrap_or(("plan", key));
        ini.with_section(Some(section)).set(k, value.as_str());
    }
    let mut out = Vec::new();
    ini.write_to_policy(&mut out, EscapePolicy::Nothing).expect("in-memory write");
    String::from_utf8(out).expect("utf-8")
}

fn dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.+".contains(c) { c } else { '_' })
        .collect()
}

/// Images keyed by manifest path.
pub type ImageMap = HashMap<String, Arc<RgbImage>>;

pub fn load_images(manifest: &DatasetManifest, store: &dyn ImageStore) -> Result<ImageMap, DatasetError> {
    manifest
        .entries
        .par_iter()
        .map(|e| Ok((e.image.clone(), store.get(&e.image)?)))
        .collect()
}

fn image<'a>(images: &'a ImageMap, path: &str) -> Result<&'a RgbImage, ExperimentError> {
    images
        .get(path)
        .map(|a| a.as_ref())
        .ok_or_else(|| ExperimentError::Asset(format!("image {path} not loaded")))
}

/// Trains one detector per category: ground-truth positives against sampled
/// negatives and other categories' positives, then hard-negative mining over
/// every negative-eligible proposal of the training images.
#[allow(clippy::too_many_arguments)]
pub fn train_detectors(
    manifest: &DatasetManifest,
    images: &ImageMap,
    categories: &[String],
    featurizer: &dyn Featurizer,
    proposals: &ProposalSource,
    cfg: &TrainConfig,
    seed_value: u64,
) -> Result<Vec<LinearModel>, ExperimentError> {
    if manifest.is_empty() {
        return Err(ExperimentError::Config("empty training manifest".into()));
    }
    let patches = dataset::sample_patches(
        manifest,
        categories,
        cfg.negatives_per_image,
        proposals,
        seed::derive(seed_value, &[seed::hash_str("negatives")]),
    );
    let featurize = |image_path: &str, b: &BBox| -> Result<Vec<f64>, ExperimentError> {
        Ok(featurizer.featurize(image_path, image(images, image_path)?, b)?.values)
    };
    let pos: Vec<Vec<f64>> = patches.positives.par_iter().map(|p| featurize(&p.image, &p.bbox)).collect::<Result<_, _>>()?;
    let neg: Vec<Vec<f64>> = patches.negatives.par_iter().map(|p| featurize(&p.image, &p.bbox)).collect::<Result<_, _>>()?;
    let entries: HashMap<&str, &dataset::ManifestEntry> = manifest.entries.iter().map(|e| (e.image.as_str(), e)).collect();
    let space = featurizer.space_id();

    let mut sets: Vec<TrainSet> = categories
        .iter()
        .map(|cat| {
            let mut set = TrainSet::new(space.clone());
            for (p, f) in patches.positives.iter().zip(&pos) {
                let key = patch_key(&p.image, &p.bbox);
                if &p.category == cat {
                    set.push(key, f.clone(), 1);
                } else if dataset::is_negative_for(entries[p.image.as_str()], cat, &p.bbox) {
                    set.push(key, f.clone(), -1);
                }
            }
            for (p, f) in patches.negatives.iter().zip(&neg) {
                if &p.category == cat {
                    set.push(patch_key(&p.image, &p.bbox), f.clone(), -1);
                }
            }
            set
        })
        .collect();
    drop((pos, neg));

    let mut models: Vec<LinearModel> = categories
        .par_iter()
        .zip(&sets)
        .map(|(cat, set)| detector::train_svm(cat, set, &cfg.svm))
        .collect::<Result<_, _>>()?;

    for round in 0..cfg.mining_rounds {
        let (pools, counts) = mining_pass(manifest, images, categories, featurizer, proposals, &models, &sets, cfg.mining_cap)?;
        models = models
            .into_par_iter()
            .zip(sets.par_iter_mut())
            .zip(pools.into_par_iter().zip(counts.into_par_iter()))
            .map(|((model, set), (pool, count))| {
                let mut m = detector::mine_hard_negatives(&model, set, &pool, 1, cfg.mining_cap, &cfg.svm)?;
                if let Some(last) = m.train.mining.last_mut() {
                    last.2 = count;
                }
                Ok(m)
            })
            .collect::<Result<_, DetectorError>>()?;
        log::info!(
            "mining round {}: {}",
            round + 1,
            models.iter().map(|m| format!("{}={}", m.category, m.train.n_neg)).collect::<Vec<_>>().join(" ")
        );
    }
    Ok(models)
}

type Candidates = Vec<Vec<(f64, String, Vec<f64>)>>;

fn keep_top(list: &mut Vec<(f64, String, Vec<f64>)>, cap: usize) {
    list.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    list.truncate(cap);
}

/// One streaming pass over all training proposals. Returns, per category, the
/// top `cap` new candidates inside the margin and the total count inside it.
#[allow(clippy::too_many_arguments)]
fn mining_pass(
    manifest: &DatasetManifest,
    images: &ImageMap,
    categories: &[String],
    featurizer: &dyn Featurizer,
    proposals: &ProposalSource,
    models: &[LinearModel],
    sets: &[TrainSet],
    cap: usize,
) -> Result<(Vec<Vec<(String, Vec<f64>)>>, Vec<usize>), ExperimentError> {
    let present: Vec<HashSet<&str>> = sets.iter().map(|s| s.ids.iter().map(String::as_str).collect()).collect();
    let n = categories.len();
    let empty = || (vec![Vec::new(); n], vec![0usize; n]);
    let (cands, counts): (Candidates, Vec<usize>) = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<(Candidates, Vec<usize>), ExperimentError> {
            let img = image(images, &e.image)?;
            let (mut cands, mut counts) = empty();
            let mut boxes = proposals.proposals(&e.image, e.width, e.height);
            boxes.sort();
            boxes.dedup();
            for b in boxes {
                let eligible: Vec<usize> = (0..n).filter(|&ci| dataset::is_negative_for(e, &categories[ci], &b)).collect();
                if eligible.is_empty() {
                    continue;
                }
                let v = featurizer.featurize(&e.image, img, &b)?.values;
                let key = patch_key(&e.image, &b);
                for ci in eligible {
                    let s = models[ci].decision(&v);
                    if s > -1.0 {
                        counts[ci] += 1;
                        if !present[ci].contains(key.as_str()) {
                            cands[ci].push((s, key.clone(), v.clone()));
                        }
                    }
                }
            }
            cands.iter_mut().for_each(|c| keep_top(c, cap));
            Ok((cands, counts))
        })
        .try_reduce(empty, |(mut ca, mut na), (cb, nb)| {
            for ((a, b), (x, y)) in ca.iter_mut().zip(cb).zip(na.iter_mut().zip(nb)) {
                a.extend(b);
                keep_top(a, cap);
                *x += y;
            }
            Ok((ca, na))
        })?;
    let pools = cands.into_iter().map(|c| c.into_iter().map(|(_, id, f)| (id, f)).collect()).collect();
    Ok((pools, counts))
}

/// Runs every model over every image of the manifest.
pub fn detect_manifest(
    manifest: &DatasetManifest,
    images: &ImageMap,
    models: &[LinearModel],
    featurizer: &dyn Featurizer,
    proposals: &ProposalSource,
    params: &DetectParams,
) -> Result<Vec<Detection>, ExperimentError> {
    let mut out = Vec::new();
    for e in &manifest.entries {
        let boxes = proposals.proposals(&e.image, e.width, e.height);
        out.extend(detect::detect_image(&e.image, image(images, &e.image)?, models, featurizer, &boxes, params)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub report: EvalReport,
}

/// One row per cell: label, per-category AP in plan order, mAP.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub name: String,
    pub categories: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl ResultTable {
    pub fn map(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label).map(|r| r.report.map)
    }

    fn header(&self) -> Vec<String> {
        std::iter::once("cell".to_string())
            .chain(self.categories.iter().cloned())
            .chain(std::iter::once("mAP".to_string()))
            .collect()
    }

    /// Formatted cells of each row; categories without ground truth are empty.
    fn body(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                std::iter::once(r.label.clone())
                    .chain(self.categories.iter().map(|c| r.report.ap(c).map(fmt4).unwrap_or_default()))
                    .chain(std::iter::once(fmt4(r.report.map)))
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header()).expect("in-memory csv");
        for row in self.body() {
            w.write_record(&row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let header = self.header();
        writeln!(out, "| {} |", header.join(" | ")).unwrap();
        writeln!(out, "|{}", "---|".repeat(header.len())).unwrap();
        for row in self.body() {
            writeln!(out, "| {} |", row.join(" | ")).unwrap();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

/// Writes `<table name>.csv` / `.md` into `dir` and returns the paths.
pub fn emit_report(tables: &[ResultTable], formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    if tables.is_empty() {
        return Err(ExperimentError::Config("no tables to emit".into()));
    }
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut paths = Vec::new();
    for t in tables {
        for f in formats {
            let (ext, text) = match f {
                ReportFormat::Csv => ("csv", t.to_csv()),
                ReportFormat::Markdown => ("md", t.to_markdown()),
            };
            let path = dir.join(format!("{}.{ext}", dir_name(&t.name)));
            fs::write(&path, text).map_err(io_error(&path))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Everything one cell produced.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: CellPlan,
    pub train_manifest: DatasetManifest,
    pub models: Vec<LinearModel>,
    pub detections: Vec<Detection>,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub table: ResultTable,
    pub test_manifest: DatasetManifest,
    pub cells: Vec<CellOutcome>,
}

/// A built virtual dataset and its images.
type Built = (DatasetManifest, ImageMap);

struct Context {
    pools: Pools,
    featurizer: Box<dyn Featurizer>,
    proposals: ProposalSource,
    test: Built,
    real: Option<Built>,
    built: std::sync::Mutex<HashMap<String, Arc<Built>>>,
}

fn build(spec: &DatasetSpec, pools: &Pools) -> Result<Built, ExperimentError> {
    let store = MemoryStore::new();
    let manifest = dataset::build_virtual_dataset(spec, pools, &store)?;
    let images = load_images(&manifest, &store)?;
    Ok((manifest, images))
}

/// Moves every image path under `prefix/` so sets from different sources
/// never collide in one image map.
fn prefixed((mut manifest, images): Built, prefix: &str) -> Built {
    manifest.entries.iter_mut().for_each(|e| e.image = format!("{prefix}/{}", e.image));
    let images = images.into_iter().map(|(k, v)| (format!("{prefix}/{k}"), v)).collect();
    (manifest, images)
}

fn ingest(src: &RealSource) -> Result<Built, ExperimentError> {
    if !src.annotations.is_file() {
        return Err(ExperimentError::Asset(format!("annotation file {} not found", src.annotations.display())));
    }
    let manifest = dataset::ingest_real_annotations(&src.annotations, &src.image_root)?;
    let images = load_images(&manifest, &dataset::DirStore::new(&src.image_root))?;
    Ok((manifest, images))
}

impl ExperimentPlan {
    fn load_pools(&self) -> Result<Pools, ExperimentError> {
        Ok(match &self.assets {
            AssetSource::Toy { seed } => {
                let pools = toy::toy_pools(*seed);
                if let Some(c) = self.base.categories.iter().find(|c| pools.get(c).is_none()) {
                    return Err(ExperimentError::Asset(format!("toy assets have no category {c:?}")));
                }
                pools
            }
            AssetSource::Dir(root) => dataset::load_pools(root, &self.base.categories)?,
        })
    }

    fn test_spec(&self) -> Option<DatasetSpec> {
        match &self.test {
            TestSource::Virtual {
                images_per_category,
                seed,
                cell,
                views,
            } => {
                let mut spec = self.base.clone();
                spec.images_per_category = *images_per_category;
                spec.global_seed = *seed;
                spec.cue.bg_mode = cell.bg;
                spec.cue.tx_mode = cell.tx;
                spec.views_enabled = views.clone();
                spec.models_per_category_fraction = 1.0;
                Some(spec)
            }
            TestSource::Real(_) => None,
        }
    }

    /// Loads and checks every asset the plan references before any rendering.
    fn prepare(&self, cells: &[CellPlan]) -> Result<Context, ExperimentError> {
        let pools = self.load_pools()?;
        for spec in cells.iter().filter_map(|c| c.virtual_spec.as_ref()).chain(self.test_spec().as_ref()) {
            pools.require(&spec.categories, &spec.cue)?;
        }
        let featurizer: Box<dyn Featurizer> = match &self.features {
            FeatureSpace::Hog(h) => Box::new(h.clone()),
            FeatureSpace::External { table, l2 } => Box::new(TableFeaturizer {
                table: FeatureTable::read(table)?,
                l2: *l2,
            }),
        };
        let proposals = match &self.proposals_csv {
            None => ProposalSource::Grid(self.grid.clone()),
            Some(p) => {
                let file = fs::File::open(p).map_err(|e| ExperimentError::Asset(format!("{}: {e}", p.display())))?;
                ProposalSource::External {
                    boxes: detect::read_proposals_csv(file).map_err(|e| ExperimentError::Asset(e.to_string()))?,
                    fallback: Some(self.grid.clone()),
                }
            }
        };
        let real = self.real.as_ref().map(ingest).transpose()?.map(|b| prefixed(b, "real"));
        let test = match (&self.test, self.test_spec()) {
            (_, Some(spec)) => {
                prefixed(build(&spec, &pools)?, "test")
            }
            (TestSource::Real(src), None) => ingest(src)?,
            _ => unreachable!("virtual tests always have a spec"),
        };
        if test.0.is_empty() {
            return Err(ExperimentError::Asset("test set is empty".into()));
        }
        Ok(Context {
            pools,
            featurizer,
            proposals,
            test,
            real,
            built: Default::default(),
        })
    }

    fn virtual_set(&self, ctx: &Context, spec: &DatasetSpec) -> Result<Arc<Built>, ExperimentError> {
        let key = serde_json::to_string(spec).expect("spec serializes");
        if let Some(b) = ctx.built.lock().unwrap().get(&key) {
            return Ok(b.clone());
        }
        let b = Arc::new(build(spec, &ctx.pools)?);
        ctx.built.lock().unwrap().insert(key, b.clone());
        Ok(b)
    }

    fn run_cell(&self, ctx: &Context, cell: &CellPlan) -> Result<CellOutcome, ExperimentError> {
        log::info!("cell {}: building training set", cell.label);
        let mut manifest = DatasetManifest::default();
        let mut images = ImageMap::new();
        if let Some(spec) = &cell.virtual_spec {
            let b = self.virtual_set(ctx, spec)?;
            manifest = b.0.clone();
            images.extend(b.1.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        if let (Some(k), Some((real, real_images))) = (cell.fewshot_k, &ctx.real) {
            let subset = dataset::subsample_fewshot(real, &self.base.categories, k, seed::derive(self.seed, &[seed::hash_str("fewshot")]));
            for e in &subset.entries {
                images.insert(e.image.clone(), real_images[&e.image].clone());
            }
            manifest = manifest.merged(&subset);
        }
        if manifest.is_empty() {
            return Err(ExperimentError::Config(format!("cell {} has no training images", cell.label)));
        }
        let categories = &self.base.categories;
        log::info!("cell {}: training on {} images", cell.label, manifest.len());
        let models = train_detectors(&manifest, &images, categories, ctx.featurizer.as_ref(), &ctx.proposals, &self.train, self.seed)?;
        log::info!("cell {}: detecting on {} test images", cell.label, ctx.test.0.len());
        let detections = detect_manifest(&ctx.test.0, &ctx.test.1, &models, ctx.featurizer.as_ref(), &ctx.proposals, &self.detect)?;
        let report = eval::evaluate(&detections, &ctx.test.0.ground_truth(), categories, self.iou_threshold)
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
        log::info!("cell {}: mAP {}", cell.label, fmt4(report.map));
        Ok(CellOutcome {
            cell: cell.clone(),
            train_manifest: manifest,
            models,
            detections,
            report,
        })
    }

    /// Runs every cell and, when `out_dir` is given, writes
    /// `<out_dir>/<plan name>/` with the resolved configs, manifests, images,
    /// models, detections and the report table.
    pub fn run(&self, out_dir: Option<&Path>, formats: &[ReportFormat]) -> Result<ExperimentOutcome, ExperimentError> {
        let cells = self.cells()?;
        self.check_isolation(&cells)?;
        let ctx = self.prepare(&cells)?;
        let outcomes: Vec<CellOutcome> = if self.parallel_cells {
            cells.par_iter().map(|c| self.run_cell(&ctx, c)).collect::<Result<_, _>>()?
        } else {
            cells.iter().map(|c| self.run_cell(&ctx, c)).collect::<Result<_, _>>()?
        };
        let table = ResultTable {
            name: self.name.clone(),
            categories: self.base.categories.clone(),
            rows: outcomes
                .iter()
                .map(|o| TableRow {
                    label: o.cell.label.clone(),
                    report: o.report.clone(),
                })
                .collect(),
        };
        let outcome = ExperimentOutcome {
            table,
            test_manifest: ctx.test.0.clone(),
            cells: outcomes,
        };
        if let Some(dir) = out_dir {
            self.write_outputs(&outcome, &ctx, &dir.join(dir_name(&self.name)), formats)?;
        }
        Ok(outcome)
    }

    fn write_outputs(&self, o: &ExperimentOutcome, ctx: &Context, root: &Path, formats: &[ReportFormat]) -> Result<(), ExperimentError> {
        let write = |path: &Path, text: &str| -> Result<(), ExperimentError> {
            if let Some(p) = path.parent() {
                fs::create_dir_all(p).map_err(io_error(p))?;
            }
            fs::write(path, text).map_err(io_error(path))
        };
        let write_images = |manifest: &DatasetManifest, images: &ImageMap, dir: &Path| -> Result<(), ExperimentError> {
            manifest
                .entries
                .par_iter()
                .filter(|e| e.source == dataset::Source::Virtual)
                .try_for_each(|e| {
                    images[&e.image]
                        .write_ppm(&dir.join(&e.image))
                        .map_err(|err| ExperimentError::Runtime(err.to_string()))
                })
        };
        let plan_level: BTreeMap<String, String> =
            self.plan_entries().into_iter().map(|(s, k, v)| (format!("{s}.{k}"), v)).collect();
        write(&root.join("resolved.ini"), &resolved_ini(&plan_level))?;
        ctx.test.0.write(&root.join("test").join("manifest.json"))?;
        write_images(&ctx.test.0, &ctx.test.1, &root.join("test").join("images"))?;
        for cell in &o.cells {
            let dir = root.join("cells").join(dir_name(&cell.cell.label));
            write(&dir.join("resolved.ini"), &resolved_ini(&self.resolved(&cell.cell)))?;
            cell.train_manifest.write(&dir.join("manifest.json"))?;
            if let Some(spec) = &cell.cell.virtual_spec {
                write_images(&cell.train_manifest, &self.virtual_set(ctx, spec)?.1, &dir.join("images"))?;
            }
            for m in &cell.models {
                m.write(&dir.join("models").join(format!("{}.json", dir_name(&m.category))))?;
            }
            let mut det = Vec::new();
            detect::write_detections_csv(&mut det, &cell.detections).map_err(io_error(&dir))?;
            write(&dir.join("detections.csv"), std::str::from_utf8(&det).expect("utf-8"))?;
            write(&dir.join("eval.csv"), &cell.report.to_csv())?;
            write(&dir.join("eval.json"), &cell.report.to_json())?;
        }
        emit_report(std::slice::from_ref(&o.table), formats, root)?;
        Ok(())
    }
}

fn expect_kind(plan: &ExperimentPlan, kind: PlanKind) -> Result<(), ExperimentError> {
    if plan.kind != kind {
        return Err(ExperimentError::Config(format!(
            "plan {:?} is a {} plan, not {}",
            plan.name,
            plan.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(())
}

pub fn run_cue_matrix(plan: &ExperimentPlan, out_dir: Option<&Path>) -> Result<ExperimentOutcome, ExperimentError> {
    expect_kind(plan, PlanKind::CueMatrix)?;
    plan.run(out_dir, &[ReportFormat::Csv, ReportFormat::Markdown])
}

pub fn run_view_ablation(plan: &ExperimentPlan, out_dir: Option<&Path>) -> Result<ExperimentOutcome, ExperimentError> {
    expect_kind(plan, PlanKind::ViewAblation)?;
    plan.run(out_dir, &[ReportFormat::Csv, ReportFormat::Markdown])
}

pub fn run_shape_ablation(plan: &ExperimentPlan, out_dir: Option<&Path>) -> Result<ExperimentOutcome, ExperimentError> {
    expect_kind(plan, PlanKind::ShapeAblation)?;
    plan.run(out_dir, &[ReportFormat::Csv, ReportFormat::Markdown])
}

pub fn run_fewshot(plan: &ExperimentPlan, out_dir: Option<&Path>) -> Result<ExperimentOutcome, ExperimentError> {
    expect_kind(plan, PlanKind::FewShot)?;
    plan.run(out_dir, &[ReportFormat::Csv, ReportFormat::Markdown])
}

pub fn run_size_curve(plan: &ExperimentPlan, out_dir: Option<&Path>) -> Result<ExperimentOutcome, ExperimentError> {
    expect_kind(plan, PlanKind::SizeCurve)?;
    plan.run(out_dir, &[ReportFormat::Csv, ReportFormat::Markdown])
}
