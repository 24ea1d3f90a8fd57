use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use occluder::augment::AugmentSpec;
use occluder::config::RunConfig;
use occluder::data::{generate_synthetic_scene, load_vgg_annotations, read_manifest, split_dataset, write_manifest, ImageRecord, ManifestRecord};
use occluder::evaluation::{average_precision, coco_summary, group_by_image, pr_curve_csv, summary_csv, summary_text, PrPoint, SummaryRow};
use occluder::inference::{detect_dataset, read_dump, write_dump, DetectMode};
use occluder::learning::{augmented_sample, load_pretrained, read_loss_csv, Trainer, LOSS_CSV};
use occluder::model::Model;

use crate::plot::{line_chart, smooth, Chart, Series};
use crate::{GlobalArgs, ModeArg};

const META_FILE: &str = "run_meta.json";
const SUMMARY_JSON: &str = "summary.json";
const PR_CSV: &str = "pr_iou50.csv";
pub const DUMP_FILE: &str = "detections.jsonl";

fn resolve(g: &GlobalArgs) -> Result<RunConfig> {
    if g.device != "cpu" {
        bail!("device `{}` is not available; only `cpu` is supported", g.device);
    }
    let cfg = RunConfig::load(&g.preset, g.config.as_deref(), std::env::vars())?;
    let seed = g.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn require_out(g: &GlobalArgs) -> Result<&Path> {
    g.out.as_deref().context("--out is required for this command")
}

fn write_meta(dir: &Path, cfg: &RunConfig, g: &GlobalArgs, command: &str) -> Result<()> {
    let mut meta = cfg.metadata(&g.preset);
    meta["command"] = command.into();
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    fs::write(dir.join("config.toml"), toml::to_string(cfg)?)?;
    Ok(())
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_records(manifest: &Path) -> Result<Vec<ImageRecord>> {
    let recs = read_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let base = manifest_dir(manifest);
    recs.iter().map(|r| r.load(&base).with_context(|| format!("loading image for `{}`", r.image_id))).collect()
}

/// Writes images under `out/images` plus `manifest.jsonl` and the split
/// manifests.
fn write_dataset(out: &Path, records: &[ImageRecord], cfg: &RunConfig) -> Result<()> {
    let images = out.join("images");
    fs::create_dir_all(&images)?;
    let mut manifest = Vec::with_capacity(records.len());
    for r in records {
        let rel = format!("images/{}.png", r.image_id);
        r.pixels.save(out.join(&rel)).with_context(|| format!("writing {rel}"))?;
        manifest.push(ManifestRecord::from_record(r, rel));
    }
    write_manifest(&out.join("manifest.jsonl"), &manifest)?;
    if manifest.len() >= 3 {
        let (train, val, test) = split_dataset(manifest, cfg.dataset.split, cfg.seed)?;
        write_manifest(&out.join("train.jsonl"), &train)?;
        write_manifest(&out.join("val.jsonl"), &val)?;
        write_manifest(&out.join("test.jsonl"), &test)?;
    }
    Ok(())
}

pub fn synth(g: &GlobalArgs) -> Result<()> {
    let cfg = resolve(g)?;
    let out = require_out(g)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let records: Vec<ImageRecord> =
        (0..cfg.dataset.scenes as u64).map(|i| generate_synthetic_scene(&cfg.synth, i)).collect::<Result<_, _>>()?;
    write_dataset(out, &records, &cfg)?;
    write_meta(out, &cfg, g, "synth")?;
    info!("wrote {} scenes to {}", records.len(), out.display());
    Ok(())
}

pub fn ingest(g: &GlobalArgs, vgg: &Path) -> Result<()> {
    let cfg = resolve(g)?;
    let out = require_out(g)?;
    let (records, report) = load_vgg_annotations(vgg).with_context(|| format!("ingesting {}", vgg.display()))?;
    fs::create_dir_all(out)?;
    write_dataset(out, &records, &cfg)?;
    write_meta(out, &cfg, g, "ingest")?;
    info!("ingested {report:?}");
    Ok(())
}

pub fn augment(g: &GlobalArgs, manifest: &Path, copies: usize, families: Option<&str>) -> Result<()> {
    let cfg = resolve(g)?;
    let out = require_out(g)?;
    let mut spec: AugmentSpec = cfg.train.augment.clone();
    if let Some(name) = families {
        spec.families = AugmentSpec::preset(name)?.families;
    }
    spec.validate()?;
    let pool = load_records(manifest)?;
    fs::create_dir_all(out)?;
    let mut outs = Vec::with_capacity(pool.len() * copies);
    for (i, r) in pool.iter().enumerate() {
        for c in 0..copies {
            let mut a = augmented_sample(r, &pool, &spec, (i * copies + c) as u64);
            a.image_id = format!("{}_aug{c}", r.image_id);
            a.annotation.image_id = a.image_id.clone();
            outs.push(a);
        }
    }
    write_dataset(out, &outs, &cfg)?;
    write_meta(out, &cfg, g, "augment")?;
    info!("wrote {} augmented images to {}", outs.len(), out.display());
    Ok(())
}

pub fn train(g: &GlobalArgs, manifest: &Path) -> Result<()> {
    let cfg = resolve(g)?;
    let out = require_out(g)?;
    let data = load_records(manifest)?;
    if data.is_empty() {
        bail!("manifest {} has no images", manifest.display());
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let transfer = match &cfg.transfer.checkpoint {
        Some(path) => {
            let ck = Model::read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            Some(load_pretrained(&ck, &mut model, cfg.transfer.replace_heads, cfg.seed)?)
        }
        None => None,
    };
    fs::create_dir_all(out)?;
    write_meta(out, &cfg, g, "train")?;
    if let Some(rep) = transfer {
        fs::write(out.join("transfer_report.json"), serde_json::to_string_pretty(&rep)?)?;
    }
    let mut trainer = Trainer::resume_or_new(model, cfg.train.clone(), out)?;
    let log = trainer.run(&data, Some(out))?;
    if let Some(last) = log.last() {
        info!("finished at iteration {} (objective {:.4})", trainer.iter, last.objective);
    }
    Ok(())
}

pub fn infer(g: &GlobalArgs, checkpoint: &Path, manifest: &Path, mode: Option<ModeArg>) -> Result<()> {
    let cfg = resolve(g)?;
    let out = require_out(g)?;
    let model = Model::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let records = load_records(manifest)?;
    let mut icfg = cfg.inference;
    if let Some(m) = mode {
        icfg.mode = match m {
            ModeArg::Union => DetectMode::Union,
            ModeArg::OccluderOnly => DetectMode::OccluderOnly,
            ModeArg::Occludee => DetectMode::Occludee,
        };
    }
    let dump = detect_dataset(&model, &records, &icfg)?;
    fs::create_dir_all(out)?;
    write_dump(&out.join(DUMP_FILE), &dump)?;
    write_meta(out, &cfg, g, "infer")?;
    info!("{} detections over {} images", dump.len(), records.len());
    Ok(())
}

pub fn eval(g: &GlobalArgs, dump_path: &Path, manifest: &Path, name: Option<String>, step: &str) -> Result<()> {
    let cfg = resolve(g)?;
    let out = require_out(g)?;
    let dump = read_dump(dump_path)?;
    let gts: Vec<_> = read_manifest(manifest)?.iter().map(ManifestRecord::annotation).collect();
    let summary = coco_summary(&dump, &gts, &cfg.eval)?;
    let curve = average_precision(&group_by_image(&dump, &gts)?, 0.5, cfg.eval.max_dets).curve;
    let model = name.unwrap_or_else(|| dump_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let row = SummaryRow { model, step: step.to_string(), summary };
    fs::create_dir_all(out)?;
    fs::write(out.join(SUMMARY_JSON), serde_json::to_string_pretty(&row)?)?;
    fs::write(out.join("summary.csv"), summary_csv(std::slice::from_ref(&row))?)?;
    let text = summary_text(std::slice::from_ref(&row));
    fs::write(out.join("summary.txt"), &text)?;
    fs::write(out.join(PR_CSV), pr_curve_csv(&curve))?;
    let series = [Series { name: row.model.clone(), points: curve.iter().map(|p| (p.recall, p.precision)).collect() }];
    fs::write(out.join("pr_iou50.svg"), line_chart(&pr_chart(), &series))?;
    print!("{text}");
    Ok(())
}

fn pr_chart() -> Chart<'static> {
    Chart { title: "Precision-recall at IoU 0.5", x_label: "recall", y_label: "precision", x_range: Some((0.0, 1.0)), y_range: Some((0.0, 1.0)) }
}

fn read_pr_csv(path: &Path) -> Result<Vec<PrPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Each run directory holds `eval/summary.json` (from `eval --out RUN/eval`)
/// and optionally `loss.csv` from training.
pub fn report(g: &GlobalArgs, runs: &[PathBuf]) -> Result<()> {
    let out = require_out(g)?;
    let mut rows = Vec::new();
    let mut pr = Vec::new();
    let mut loss = Vec::new();
    for dir in runs {
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        let summary_path = dir.join("eval").join(SUMMARY_JSON);
        let text = fs::read_to_string(&summary_path).with_context(|| format!("reading {}", summary_path.display()))?;
        let mut row: SummaryRow = serde_json::from_str(&text).with_context(|| format!("parsing {}", summary_path.display()))?;
        row.model = name.clone();
        rows.push(row);
        let pr_path = dir.join("eval").join(PR_CSV);
        if pr_path.exists() {
            let pts = read_pr_csv(&pr_path)?;
            pr.push(Series { name: name.clone(), points: pts.iter().map(|p| (p.recall, p.precision)).collect() });
        }
        let loss_path = dir.join(LOSS_CSV);
        if loss_path.exists() {
            let recs = read_loss_csv(&loss_path)?;
            let pts: Vec<(f64, f64)> = recs.iter().map(|r| (r.iter as f64, r.objective)).collect();
            loss.push(Series { name, points: smooth(&pts, 50) });
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("comparison.csv"), summary_csv(&rows)?)?;
    let text = summary_text(&rows);
    fs::write(out.join("comparison.txt"), &text)?;
    fs::write(out.join("pr_curves.svg"), line_chart(&pr_chart(), &pr))?;
    let loss_chart = Chart { title: "Training objective (moving average, 50 iterations)", x_label: "iteration", y_label: "loss", x_range: None, y_range: None };
    fs::write(out.join("loss_curves.svg"), line_chart(&loss_chart, &loss))?;
    print!("{text}");
    Ok(())
}
