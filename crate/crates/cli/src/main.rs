use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cuesynth::dataset::{self, DatasetManifest, DatasetSpec, DirStore, PoolImage};
use cuesynth::detect::{self, DetectParams, GridSpec, ProposalSource};
use cuesynth::detector::{LinearModel, SvmParams};
use cuesynth::eval;
use cuesynth::experiment::{self, ExperimentError, ExperimentPlan, ReportFormat, TrainConfig};
use cuesynth::features::{FeatureTable, Featurizer, HogFeaturizer, HogParams, TableFeaturizer};
use cuesynth::mesh::{self, ViewLabel, ViewPreset};
use cuesynth::render::{self, CueCell, CueConfig};
use cuesynth::{seed, toy, RgbImage};

type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Parser)]
#[command(name = "cuesynth", version, about = "Synthetic detection data from CAD models, HOG + linear SVM detectors, VOC-style evaluation")]
struct Cli {
    /// Global seed; overrides `[plan] seed` for experiments.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Report formats, comma separated: csv, markdown, json.
    #[arg(long, global = true, value_delimiter = ',', default_value = "csv")]
    format: Vec<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one model under one cue configuration.
    Render(RenderArgs),
    /// Render a virtual training set from an asset pool directory.
    GenDataset(GenArgs),
    /// Compute HOG features for ground-truth boxes and proposals into a FEAT1 file.
    ExtractFeatures(ExtractArgs),
    /// Import externally computed features (FEAT1 or CSV `id,v1,...`) into a FEAT1 file.
    ImportFeatures(ImportArgs),
    /// Train one linear SVM per category.
    Train(TrainArgs),
    /// Run trained models over a manifest's images.
    Detect(DetectArgs),
    /// Score detections against a manifest's ground truth.
    Eval(EvalArgs),
    /// Run an experiment plan end to end.
    Experiment(ExperimentArgs),
    /// Write the bundled procedural toy assets in pool layout.
    ToyAssets(ToyArgs),
}

#[derive(Args)]
struct CueArgs {
    /// Background/texture cell, e.g. RR-RR or W-UG.
    #[arg(long, default_value = "RR-RR")]
    cue: String,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 0.7)]
    fill: f64,
    /// Pose perturbation range in degrees.
    #[arg(long, default_value_t = 15.0)]
    perturb: f64,
}

impl CueArgs {
    fn config(&self) -> Result<CueConfig> {
        let cell: CueCell = self.cue.parse().map_err(ExperimentError::Config)?;
        let cue = CueConfig {
            bg_mode: cell.bg,
            tx_mode: cell.tx,
            perturb_range_deg: self.perturb,
            width: self.width,
            height: self.height,
            fill_fraction: self.fill,
            ..CueConfig::default()
        };
        cue.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(cue)
    }
}

#[derive(Args)]
struct RenderArgs {
    /// OBJ model file.
    #[arg(long)]
    model: PathBuf,
    /// Background PPM (needed by RR and RG backgrounds).
    #[arg(long)]
    background: Option<PathBuf>,
    /// Texture PPM (needed by RR textures).
    #[arg(long)]
    texture: Option<PathBuf>,
    #[arg(long, default_value = "front")]
    view: String,
    #[command(flatten)]
    cue: CueArgs,
}

#[derive(Args)]
struct GenArgs {
    /// Pool root with models/, backgrounds/ and textures/.
    #[arg(long)]
    assets: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    categories: Vec<String>,
    #[arg(long, default_value_t = 100)]
    images_per_category: usize,
    #[arg(long, default_value_t = 1.0)]
    models_fraction: f64,
    #[arg(long, value_delimiter = ',', default_value = "front,side,intra")]
    views: Vec<String>,
    #[command(flatten)]
    cue: CueArgs,
}

#[derive(Args)]
struct ProposalArgs {
    /// Proposal CSV (`image,xmin,ymin,xmax,ymax`); images missing from it use the grid.
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "32,48,64,80,96")]
    scales: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0.25)]
    stride: f64,
}

impl ProposalArgs {
    fn source(&self) -> Result<ProposalSource> {
        let grid = GridSpec {
            scales: self.scales.clone(),
            aspect_ratios: self.ratios.clone(),
            stride_fraction: self.stride,
        };
        Ok(match &self.proposals {
            None => ProposalSource::Grid(grid),
            Some(p) => ProposalSource::External {
                boxes: detect::read_proposals_csv(fs::File::open(input(p)?).map_err(asset(p))?)
                    .map_err(|e| ExperimentError::Asset(format!("{}: {e}", p.display())))?,
                fallback: Some(grid),
            },
        })
    }
}

#[derive(Args)]
struct FeatureArgs {
    /// Imported FEAT1 table to use instead of HOG.
    #[arg(long)]
    features: Option<PathBuf>,
    /// L2-normalize imported features.
    #[arg(long)]
    l2: bool,
    /// HOG context padding, as a fraction of the box on every side.
    #[arg(long, default_value_t = 0.0)]
    context: f64,
}

impl FeatureArgs {
    fn featurizer(&self) -> Result<Box<dyn Featurizer>> {
        Ok(match &self.features {
            Some(p) => Box::new(TableFeaturizer {
                table: FeatureTable::read(input(p)?)?,
                l2: self.l2,
            }),
            None => Box::new(hog(self.context)?),
        })
    }
}

fn hog(context: f64) -> Result<HogFeaturizer> {
    if !(context >= 0.0 && context.is_finite()) {
        return Err(ExperimentError::Config(format!("context {context} must be >= 0")));
    }
    Ok(HogFeaturizer {
        params: HogParams::default(),
        context,
    })
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory image paths resolve against (default: the manifest's directory).
    #[arg(long)]
    image_root: Option<PathBuf>,
}

impl ManifestArgs {
    fn load(&self) -> Result<(DatasetManifest, experiment::ImageMap)> {
        let manifest = DatasetManifest::read(input(&self.manifest)?).map_err(|e| ExperimentError::Asset(e.to_string()))?;
        manifest.validate()?;
        let root = self.root();
        let images = experiment::load_images(&manifest, &DirStore::new(root))?;
        Ok((manifest, images))
    }

    fn root(&self) -> PathBuf {
        self.image_root
            .clone()
            .unwrap_or_else(|| self.manifest.parent().map(Path::to_path_buf).unwrap_or_default())
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[command(flatten)]
    proposals: ProposalArgs,
    /// Only ground-truth boxes, no proposals.
    #[arg(long)]
    gt_only: bool,
    #[arg(long, default_value_t = 0.0)]
    context: f64,
}

#[derive(Args)]
struct ImportArgs {
    /// FEAT1 binary or CSV with `id,v1,...,vd` rows (no header).
    input: PathBuf,
    /// Space id for CSV input.
    #[arg(long, default_value = "ext")]
    space_id: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    /// Categories to train (default: all in the manifest).
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    proposals: ProposalArgs,
    #[arg(long, default_value_t = 0.01)]
    c: f64,
    #[arg(long, default_value_t = 10)]
    negatives_per_image: usize,
    #[arg(long, default_value_t = 1)]
    mining_rounds: usize,
    #[arg(long, default_value_t = 500)]
    mining_cap: usize,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    /// Model JSON files, or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    proposals: ProposalArgs,
    #[arg(long, default_value_t = detect::DEFAULT_NMS_THRESHOLD)]
    nms: f64,
    #[arg(long, default_value_t = detect::DEFAULT_SCORE_FLOOR)]
    score_floor: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Detections CSV.
    #[arg(long)]
    detections: PathBuf,
    /// Manifest holding the ground truth.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    #[arg(long, default_value_t = eval::DEFAULT_IOU)]
    iou: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    plan: PathBuf,
    /// Run cells concurrently.
    #[arg(long)]
    parallel_cells: bool,
}

#[derive(Args)]
struct ToyArgs {
    /// Seed of the procedural backgrounds and textures.
    #[arg(long, default_value_t = 1)]
    asset_seed: u64,
}

fn input(p: &Path) -> Result<&Path> {
    if p.exists() {
        Ok(p)
    } else {
        Err(ExperimentError::Asset(format!("{} not found", p.display())))
    }
}

fn asset(p: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Asset(format!("{}: {e}", p.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| ExperimentError::Runtime(format!("{}: {e}", path.display())))
}

fn read_image(p: &Path) -> Result<RgbImage> {
    RgbImage::read_ppm(input(p)?).map_err(|e| ExperimentError::Asset(format!("{}: {e}", p.display())))
}

fn parse_view(s: &str) -> Result<ViewLabel> {
    match s.parse::<ViewLabel>() {
        Ok(ViewLabel::Custom) | Err(_) => Err(ExperimentError::Config(format!("unknown view {s:?}"))),
        Ok(v) => Ok(v),
    }
}

fn cmd_render(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let mut cue = a.cue.config()?;
    cue.view = ViewPreset::named(parse_view(&a.view)?);
    let text = fs::read_to_string(input(&a.model)?).map_err(asset(&a.model))?;
    let mut model = mesh::parse_obj(&text).map_err(|e| ExperimentError::Asset(format!("{}: {e}", a.model.display())))?;
    model.name = a.model.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let load = |p: &Option<PathBuf>| -> Result<Option<PoolImage>> {
        p.as_ref()
            .map(|p| {
                Ok(PoolImage {
                    id: p.display().to_string(),
                    image: read_image(p)?,
                })
            })
            .transpose()
    };
    let (bg, tx) = (load(&a.background)?, load(&a.texture)?);
    let r = render::render(&model, &cue, bg.as_ref().map(PoolImage::asset), tx.as_ref().map(PoolImage::asset), cli.seed.unwrap_or(0))
        .map_err(|e| match e {
            render::RenderError::BadConfig(_) | render::RenderError::MissingPool(_) => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Runtime(e.to_string()),
        })?;
    let out = cli.out_dir.join("render.ppm");
    write(&out, r.rgb.encode_ppm())?;
    let meta = serde_json::json!({ "bbox": r.bbox, "provenance": r.provenance });
    write(&cli.out_dir.join("render.json"), serde_json::to_string_pretty(&meta).expect("json"))?;
    println!("{} bbox {},{},{},{}", out.display(), r.bbox.xmin, r.bbox.ymin, r.bbox.xmax, r.bbox.ymax);
    Ok(())
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let pools = dataset::load_pools(input(&a.assets)?, &a.categories)?;
    let spec = DatasetSpec {
        categories: a.categories.clone(),
        images_per_category: a.images_per_category,
        models_per_category_fraction: a.models_fraction,
        views_enabled: a.views.iter().map(|v| parse_view(v)).collect::<Result<_>>()?,
        cue: a.cue.config()?,
        global_seed: cli.seed.unwrap_or(0),
    };
    let manifest = dataset::build_virtual_dataset(&spec, &pools, &DirStore::new(&cli.out_dir))?;
    let path = cli.out_dir.join("manifest.json");
    manifest.write(&path)?;
    write(&cli.out_dir.join("spec.json"), serde_json::to_string_pretty(&spec).expect("json"))?;
    println!("{} images -> {}", manifest.len(), path.display());
    Ok(())
}

fn cmd_extract(cli: &Cli, a: &ExtractArgs) -> Result<()> {
    let (manifest, images) = a.manifest.load()?;
    let hog = hog(a.context)?;
    let proposals = a.proposals.source()?;
    let mut table = FeatureTable::new(hog.space_id(), hog.params.dim());
    for e in &manifest.entries {
        let mut boxes: Vec<_> = e.boxes.iter().map(|b| b.bbox()).collect();
        if !a.gt_only {
            boxes.extend(proposals.proposals(&e.image, e.width, e.height));
        }
        boxes.sort();
        boxes.dedup();
        for b in boxes {
            let v = hog.featurize(&e.image, &images[&e.image], &b)?;
            table.push(cuesynth::features::patch_key(&e.image, &b), v.values)?;
        }
    }
    let path = cli.out_dir.join("features.feat");
    fs::create_dir_all(&cli.out_dir).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    table.write(&path)?;
    println!("{} vectors of dim {} ({}) -> {}", table.len(), table.dim(), table.space_id(), path.display());
    Ok(())
}

fn cmd_import(cli: &Cli, a: &ImportArgs) -> Result<()> {
    let bytes = fs::read(input(&a.input)?).map_err(asset(&a.input))?;
    let table = if bytes.starts_with(b"FEAT1") {
        FeatureTable::decode(&bytes)?
    } else {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(bytes.as_slice());
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| ExperimentError::Asset(e.to_string()))?;
            let mut fields = rec.iter();
            let mut id = fields.next().unwrap_or_default().to_string();
            // Unquoted patch keys `image@x0,y0,x1,y1` spill over four fields.
            if let Some(at) = id.find('@') {
                while id[at..].matches(',').count() < 3 {
                    let Some(f) = fields.next() else { break };
                    id.push(',');
                    id.push_str(f);
                }
            }
            let values = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| ExperimentError::Asset(format!("line {}: {e}", i + 1)))?;
            if values.is_empty() {
                return Err(ExperimentError::Asset(format!("line {}: no feature values", i + 1)));
            }
            rows.push((id, values));
        }
        FeatureTable::from_rows(&a.space_id, rows)?
    };
    let path = cli.out_dir.join("features.feat");
    fs::create_dir_all(&cli.out_dir).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    table.write(&path)?;
    println!("{} vectors of dim {} ({}) -> {}", table.len(), table.dim(), table.space_id(), path.display());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let (manifest, images) = a.manifest.load()?;
    let categories = if a.categories.is_empty() { manifest.categories() } else { a.categories.clone() };
    let s = cli.seed.unwrap_or(0);
    let cfg = TrainConfig {
        svm: SvmParams {
            c: a.c,
            seed: seed::derive(s, &[seed::hash_str("svm")]),
            ..SvmParams::default()
        },
        negatives_per_image: a.negatives_per_image,
        mining_rounds: a.mining_rounds,
        mining_cap: a.mining_cap,
    };
    let featurizer = a.features.featurizer()?;
    let models = experiment::train_detectors(&manifest, &images, &categories, featurizer.as_ref(), &a.proposals.source()?, &cfg, s)?;
    let dir = cli.out_dir.join("models");
    for m in &models {
        let path = dir.join(format!("{}.json", m.category));
        m.write(&path)?;
        println!("{} ({} pos, {} neg) -> {}", m.category, m.train.n_pos, m.train.n_neg, path.display());
    }
    Ok(())
}

fn model_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if input(p)?.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(asset(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_detect(cli: &Cli, a: &DetectArgs) -> Result<()> {
    let models = model_files(&a.models)?
        .iter()
        .map(|p| LinearModel::read(p).map_err(|e| ExperimentError::Asset(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if models.is_empty() {
        return Err(ExperimentError::Asset("no model files found".into()));
    }
    let (manifest, images) = a.manifest.load()?;
    let params = DetectParams {
        nms_threshold: a.nms,
        score_floor: a.score_floor,
    };
    let featurizer = a.features.featurizer()?;
    let dets = experiment::detect_manifest(&manifest, &images, &models, featurizer.as_ref(), &a.proposals.source()?, &params)?;
    let mut buf = Vec::new();
    detect::write_detections_csv(&mut buf, &dets).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    let path = cli.out_dir.join("detections.csv");
    write(&path, buf)?;
    println!("{} detections -> {}", dets.len(), path.display());
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let file = fs::File::open(input(&a.detections)?).map_err(asset(&a.detections))?;
    let dets = detect::read_detections_csv(file).map_err(|e| ExperimentError::Asset(format!("{}: {e}", a.detections.display())))?;
    let manifest = DatasetManifest::read(input(&a.manifest)?).map_err(|e| ExperimentError::Asset(e.to_string()))?;
    let categories = if a.categories.is_empty() { manifest.categories() } else { a.categories.clone() };
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(ExperimentError::Config(format!("iou {} outside (0,1]", a.iou)));
    }
    let report = eval::evaluate(&dets, &manifest.ground_truth(), &categories, a.iou).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    write(&cli.out_dir.join("eval.csv"), report.to_csv())?;
    write(&cli.out_dir.join("eval.json"), report.to_json())?;
    for f in &cli.format {
        match f.as_str() {
            "json" => println!("{}", report.to_json()),
            "markdown" | "md" => {
                println!("| category | AP |\n|---|---|");
                for c in &report.categories {
                    println!("| {} | {} |", c.category, eval::fmt4(c.ap));
                }
                println!("| mAP | {} |", eval::fmt4(report.map));
            }
            _ => print!("{}", report.to_csv()),
        }
    }
    Ok(())
}

fn cmd_experiment(cli: &Cli, a: &ExperimentArgs) -> Result<()> {
    let mut plan = ExperimentPlan::load_with_seed(&a.plan, cli.seed)?;
    plan.parallel_cells |= a.parallel_cells;
    let formats = report_formats(&cli.format)?;
    let outcome = plan.run(Some(&cli.out_dir), &formats)?;
    print!("{}", outcome.table.to_markdown());
    println!("outputs in {}", cli.out_dir.join(&plan.name).display());
    Ok(())
}

/// Table formats for experiments; per-cell JSON reports are always written.
fn report_formats(names: &[String]) -> Result<Vec<ReportFormat>> {
    names.iter().filter(|f| *f != "json").map(|f| f.parse().map_err(ExperimentError::Config)).collect()
}

fn cmd_toy(cli: &Cli, a: &ToyArgs) -> Result<()> {
    toy::write_toy_assets(&cli.out_dir, a.asset_seed)?;
    println!("toy pools for {} -> {}", toy::toy_categories().join(", "), cli.out_dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    }
    for f in &cli.format {
        if !matches!(f.as_str(), "csv" | "markdown" | "md" | "json") {
            return Err(ExperimentError::Config(format!("unknown format {f:?}")));
        }
    }
    match &cli.command {
        Command::Render(a) => cmd_render(cli, a),
        Command::GenDataset(a) => cmd_gen(cli, a),
        Command::ExtractFeatures(a) => cmd_extract(cli, a),
        Command::ImportFeatures(a) => cmd_import(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Detect(a) => cmd_detect(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Experiment(a) => cmd_experiment(cli, a),
        Command::ToyAssets(a) => cmd_toy(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cuesynth: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
