//! Small end-to-end runs of every plan kind on the toy assets.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use cuesynth::dataset::{self, DatasetManifest, DirStore, Source};
use cuesynth::experiment::*;
use cuesynth::mesh::ViewLabel;
use cuesynth::toy;

const CATS: &str = "cube, cylinder-assembly, cone-assembly";

/// A tiny plan: 64x64 renders, two proposal scales, one test image per category.
fn plan_text(kind: &str, cells: &str, extra: &str) -> String {
    format!(
        "[plan]\nname = tiny\nkind = {kind}\nseed = 11\ncategories = {CATS}\n\
         [cells]\n{cells}\n\
         [dataset]\nimages_per_category = 3\nwidth = 64\nheight = 64\n\
         [features]\ncontext = 0.125\n\
         [proposals]\nscales = 32, 48\nratios = 1\n\
         [train]\nc = 0.1\nnegatives_per_image = 4\nmining_cap = 20\n\
         [test]\nimages_per_category = 1\nseed = 12\n{extra}"
    )
}

fn plan(kind: &str, cells: &str, extra: &str, dir: &Path) -> ExperimentPlan {
    ExperimentPlan::parse(&plan_text(kind, cells, extra), dir).unwrap()
}

fn models_used(m: &DatasetManifest, category: &str) -> BTreeSet<String> {
    m.entries
        .iter()
        .filter(|e| e.boxes[0].category == category)
        .map(|e| e.provenance.as_ref().unwrap().model.clone())
        .collect()
}

#[test]
fn cue_matrix_writes_every_artifact() {
    let out = tempfile::tempdir().unwrap();
    let p = plan("cue-matrix", "cues = RR-RR, W-UG", "", out.path());
    let o = run_cue_matrix(&p, Some(out.path())).unwrap();

    assert_eq!(o.table.rows.len(), 2);
    assert_eq!(o.test_manifest.len(), 3);
    assert!(o.test_manifest.entries.iter().all(|e| e.image.starts_with("test/")));
    for c in &o.cells {
        assert_eq!(c.train_manifest.len(), 9);
        assert_eq!(c.models.len(), 3);
        assert!(c.report.map.is_finite());
        assert!(c.detections.iter().all(|d| d.image.starts_with("test/")));
    }
    // The W-UG training images carry no colour at all.
    let wug = &o.cells[1];
    assert!(wug.train_manifest.entries.iter().all(|e| {
        let prov = e.provenance.as_ref().unwrap();
        prov.bg_id.is_none() && prov.texture_id.is_none()
    }));

    let root = out.path().join("tiny");
    for f in ["resolved.ini", "tiny.csv", "tiny.md", "test/manifest.json", "test/images/test/virtual/cube/cube_00000.ppm"] {
        assert!(root.join(f).is_file(), "{f}");
    }
    for label in ["RR-RR", "W-UG"] {
        let dir = root.join("cells").join(label);
        for f in ["resolved.ini", "manifest.json", "detections.csv", "eval.csv", "eval.json", "models/cube.json", "models/cone-assembly.json"] {
            assert!(dir.join(f).is_file(), "{label}/{f}");
        }
        let manifest = DatasetManifest::read(&dir.join("manifest.json")).unwrap();
        assert_eq!(manifest.len(), 9);
        for e in &manifest.entries {
            assert!(dir.join("images").join(&e.image).is_file());
        }
    }
    let csv = fs::read_to_string(root.join("tiny.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("cell,cube,cylinder-assembly,cone-assembly,mAP"));
    assert_eq!(csv, o.table.to_csv());

    // Cells resolve to configs that differ only in the cue.
    let a = fs::read_to_string(root.join("cells/RR-RR/resolved.ini")).unwrap();
    let b = fs::read_to_string(root.join("cells/W-UG/resolved.ini")).unwrap();
    let diff: Vec<(&str, &str)> = a.lines().zip(b.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(diff, [("label=RR-RR", "label=W-UG"), ("bg=RR", "bg=W"), ("tx=RR", "tx=UG")]);
}

#[test]
fn view_ablation_keeps_counts_and_filters_views() {
    let text = plan_text("view-ablation", "views = front | front, side | front, side, intra", "").replace("images_per_category = 3", "images_per_category = 12");
    let p = ExperimentPlan::parse(&text, Path::new(".")).unwrap();
    let o = run_view_ablation(&p, None).unwrap();
    let labels: Vec<&str> = o.table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["front", "front+side", "front+side+intra"]);
    for c in &o.cells {
        for cat in toy::toy_categories() {
            let n = c.train_manifest.entries.iter().filter(|e| e.boxes[0].category == cat).count();
            assert_eq!(n, 12, "{} {cat}", c.cell.label);
        }
    }
    let front = &o.cells[0].train_manifest;
    for e in &front.entries {
        let prov = e.provenance.as_ref().unwrap();
        assert_eq!(prov.base_view, ViewLabel::Front);
        assert!(prov.yaw.abs() <= 15.0 && prov.pitch.abs() <= 15.0, "{prov:?}");
    }
    // Views cycle once per pass over the 4 models: 4 renders per view.
    let all = &o.cells[2].train_manifest;
    for v in [ViewLabel::Front, ViewLabel::Side, ViewLabel::Intra] {
        let n = all.entries.iter().filter(|e| e.provenance.as_ref().unwrap().base_view == v).count();
        assert_eq!(n, 4 * 3, "{v:?}");
    }
}

#[test]
fn shape_ablation_cuts_the_model_prefix() {
    let p = plan("shape-ablation", "fractions = 1.0, 0.5, 0.01", "", Path::new("."));
    let o = run_shape_ablation(&p, None).unwrap();
    let n_models = toy::toy_models("cube").len();
    let kept: Vec<usize> = o.cells.iter().map(|c| models_used(&c.train_manifest, "cube").len()).collect();
    // 3 images per category cycle through at most 3 models.
    assert_eq!(kept, [3.min(n_models), n_models.div_ceil(2), 1]);
    let half = models_used(&o.cells[1].train_manifest, "cube");
    let all: Vec<String> = toy::toy_models("cube").into_iter().map(|m| m.name).collect();
    assert_eq!(half.into_iter().collect::<Vec<_>>(), all[..n_models.div_ceil(2)]);

    // Fraction 1.0 is the cue-matrix baseline cell, image for image.
    let base = plan("cue-matrix", "cues = RR-RR", "", Path::new("."));
    let b = base.run(None, &[]).unwrap();
    assert_eq!(b.cells[0].train_manifest, o.cells[0].train_manifest);
    assert_eq!(b.cells[0].report, o.cells[0].report);
}

#[test]
fn fewshot_subsets_nest_and_mix_with_virtual() {
    let dir = tempfile::tempdir().unwrap();
    let real_root = dir.path().join("photos");
    let mut spec = dataset::DatasetSpec {
        categories: toy::toy_categories(),
        images_per_category: 4,
        global_seed: 99,
        ..Default::default()
    };
    spec.cue.width = 64;
    spec.cue.height = 64;
    let real = dataset::build_virtual_dataset(&spec, &toy::toy_pools(1), &DirStore::new(&real_root)).unwrap();
    fs::write(dir.path().join("real.csv"), real.to_annotation_csv()).unwrap();

    let p = plan("fewshot", "k = 0, 1, 3", "[real]\nannotations = real.csv\nimage_root = photos\n", dir.path());
    let out = dir.path().join("out");
    let o = run_fewshot(&p, Some(&out)).unwrap();
    let labels: Vec<&str> = o.table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["R0+V", "R1+V", "R1", "R3+V", "R3"]);

    let read = |label: &str| DatasetManifest::read(&out.join("tiny/cells").join(label).join("manifest.json")).unwrap();
    let real_part = |m: &DatasetManifest| -> BTreeSet<String> {
        m.entries.iter().filter(|e| e.source == Source::Real).map(|e| e.image.clone()).collect()
    };
    assert!(real_part(&read("R0+V")).is_empty());
    assert_eq!(read("R0+V").len(), 9);
    let (r1, r3) = (real_part(&read("R1")), real_part(&read("R3")));
    assert!(r1.is_subset(&r3));
    assert_eq!(r1.len(), 3);
    assert_eq!(r3.len(), 9);
    assert_eq!(real_part(&read("R3+V")), r3);
    assert_eq!(read("R3+V").len(), 9 + 9);
    assert!(r3.iter().all(|i| i.starts_with("real/")));
    // Virtual-free cells hold nothing else.
    assert_eq!(read("R3").len(), r3.len());
}

#[test]
fn size_curve_scales_per_category_counts() {
    let p = plan("size-curve", "sizes = 9, 3", "", Path::new("."));
    let out = tempfile::tempdir().unwrap();
    let o = run_size_curve(&p, Some(out.path())).unwrap();
    let labels: Vec<&str> = o.table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["3", "9"]);
    assert_eq!(o.cells[0].train_manifest.len(), 3);
    assert_eq!(o.cells[1].train_manifest.len(), 9);
    let csv = fs::read_to_string(out.path().join("tiny/tiny.csv")).unwrap();
    let first: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first, ["3", "9"]);
}

#[test]
fn missing_assets_fail_before_rendering() {
    let dir = tempfile::tempdir().unwrap();
    toy::write_toy_assets(&dir.path().join("assets"), 1).unwrap();
    fs::remove_dir_all(dir.path().join("assets/backgrounds/cube")).unwrap();
    let text = plan_text("cue-matrix", "cues = W-UG, RR-RR", "").replace("seed = 11\n", "seed = 11\nassets = assets\n");
    let p = ExperimentPlan::parse(&text, dir.path()).unwrap();
    let out = dir.path().join("out");
    let err = p.run(Some(&out), &[ReportFormat::Csv]).unwrap_err();
    assert!(matches!(err, ExperimentError::Asset(_)), "{err:?}");
    assert!(!out.exists(), "nothing may be written on a fail-fast error");

    // W-UG alone needs no backgrounds, but the default RR-RR test set does.
    let text = text.replace("cues = W-UG, RR-RR", "cues = W-UG");
    let p = ExperimentPlan::parse(&text, dir.path()).unwrap();
    assert!(matches!(p.run(None, &[]), Err(ExperimentError::Asset(_))));

    let text = plan_text("fewshot", "k = 1", "[real]\nannotations = missing.csv\nimage_root = photos\n");
    let p = ExperimentPlan::parse(&text, dir.path()).unwrap();
    let err = p.run(None, &[]).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err:?}");
}
