//! Acceptance checks. Runs sequentially (no libtest harness) so trained
//! models can be shared, and prints one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

use occluder::augment::AugmentSpec;
use occluder::config::RunConfig;
use occluder::data::{generate_synthetic_scene, max_pair_overlap, Annotation, ImageRecord, Palette, SynthConfig, DEFAULT_TAU_OCC};
use occluder::evaluation::{coco_summary, f1_score, iou_thresholds, summarize, EvalConfig, EvalImage, EvalSummary};
use occluder::geometry::{fes_expand, iou, nms_indices, BBox, Branch, FesConfig};
use occluder::inference::{detect_dataset, DetectMode, DumpRecord, InferenceConfig};
use occluder::learning::{
    image_losses, load_pretrained, record_losses, sample_balanced, total_loss, LossWeights, RoiSource, RoiTarget, SamplerConfig,
    TrainConfig, Trainer,
};
use occluder::model::{is_head_param, Model, ModelConfig};
use occluder::nn::Graph;

/// Training iterations of every desk-scale run.
const DESK_ITERS: usize = 1500;
const TRAIN_SCENES: u64 = 500;
const TEST_SCENES: u64 = 100;
const SEEDS: [u64; 3] = [0, 1, 2];
/// Test scenes with a pair at least this overlapped form the heavy subset.
const HEAVY_OVERLAP: f64 = 0.25;
/// Size of the most-overlapped subset reported alongside the heavy one.
const SEVERE_SCENES: usize = 25;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn line(id: u32, name: &str, o: &Outcome, secs: f64) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id:>2} {verdict} {name}: {} ({secs:.1}s)", o.detail);
    let _ = out.flush();
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------- 1

/// Pixel-count IoU for integer-aligned boxes on a 100x100 grid.
fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |bx: &BBox, x: f64, y: f64| x > bx.x1 && x < bx.x2 && y > bx.y1 && y < bx.y2;
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..100 {
        for x in 0..100 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (ia, ib) = (inside(a, px, py), inside(b, px, py));
            inter += u32::from(ia && ib);
            union += u32::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        f64::from(inter) / f64::from(union)
    }
}

fn int_box(rng: &mut ChaCha8Rng, max: u32) -> BBox {
    let (x, y) = (rng.gen_range(0..max - 1), rng.gen_range(0..max - 1));
    let (w, h) = (rng.gen_range(1..=(max - x).min(40)), rng.gen_range(1..=(max - y).min(40)));
    BBox::new(f64::from(x), f64::from(y), f64::from(x + w), f64::from(y + h))
}

fn brute_nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let best = *alive.iter().max_by(|&&a, &&b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).unwrap();
        keep.push(best);
        alive.retain(|&j| j != best && iou(&boxes[best], &boxes[j]) <= thr);
    }
    keep
}

fn geometry_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (int_box(&mut rng, 100), int_box(&mut rng, 100));
        worst = worst.max((iou(&a, &b) - raster_iou(&a, &b)).abs());
    }
    let mut nms_bad = 0;
    for _ in 0..200 {
        let n = rng.gen_range(0..=20);
        let boxes: Vec<BBox> = (0..n).map(|_| int_box(&mut rng, 60)).collect();
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6u32)) / 6.0).collect();
        let thr = rng.gen_range(0.1..0.9);
        if nms_indices(&boxes, &scores, thr) != brute_nms(&boxes, &scores, thr) {
            nms_bad += 1;
        }
    }
    outcome(worst <= 1e-6 && nms_bad == 0, format!("max |iou - raster| = {worst:.2e} over 1000 pairs; nms mismatches {nms_bad}/200"))
}

// ---------------------------------------------------------------- 2

fn fes_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let size = (256u32, 192u32);
    let mut bad = 0;
    for i in 0..500 {
        let t = 1 + (i % 3) as u32;
        let x = rng.gen_range(-20.0..250.0);
        let y = rng.gen_range(-20.0..180.0);
        let p = BBox::new(x, y, x + rng.gen_range(1.0..120.0), y + rng.gen_range(1.0..120.0));
        let cfg = FesConfig::with_steps(t);
        let ex = fes_expand(&p, &cfg, size);
        let clipped = p.clip(256.0, 192.0);
        let ok = ex.len() == cfg.k as usize + 1 && ex[0] == clipped && ex.iter().all(|e| e.contains(&clipped));
        bad += usize::from(!ok);
    }
    outcome(bad == 0, format!("{bad}/500 proposals violate count, identity or containment"))
}

// ---------------------------------------------------------------- 3

/// Independent greedy matcher: detections in the given order, each taking the
/// free ground truth of maximal IoU (first on ties).
fn oracle_match(dets: &[BBox], gts: &[BBox], thr: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for d in dets {
        let mut best = None;
        let mut best_iou = thr;
        for (j, g) in gts.iter().enumerate() {
            let v = iou(d, g);
            if !used[j] && v >= best_iou && best.is_none_or(|_| v > best_iou) {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            used[j] = true;
            tp += 1;
        }
    }
    tp
}

/// Exhaustive PR oracle: re-matches from scratch at every distinct score.
fn oracle_summary(images: &[EvalImage], max_dets: usize) -> EvalSummary {
    let n_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    let ranked: Vec<Vec<(BBox, f64)>> = images
        .iter()
        .map(|im| {
            let mut idx: Vec<usize> = (0..im.dets.len()).collect();
            idx.sort_by(|&a, &b| im.dets[b].1.total_cmp(&im.dets[a].1).then(a.cmp(&b)));
            idx.truncate(max_dets);
            idx.iter().map(|&i| im.dets[i]).collect()
        })
        .collect();
    let mut thresholds: Vec<f64> = ranked.iter().flatten().map(|d| d.1).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let counts_at = |iou_thr: f64, min_score: f64| -> (usize, usize) {
        let mut tp = 0;
        let mut n = 0;
        for (im, dets) in images.iter().zip(&ranked) {
            let kept: Vec<BBox> = dets.iter().filter(|d| d.1 >= min_score).map(|d| d.0).collect();
            n += kept.len();
            tp += oracle_match(&kept, &im.gts, iou_thr);
        }
        (tp, n)
    };
    let mut aps = Vec::new();
    let mut ars = Vec::new();
    for thr in iou_thresholds() {
        let points: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&s| {
                let (tp, n) = counts_at(thr, s);
                (tp as f64 / n_gt as f64, tp as f64 / n as f64)
            })
            .collect();
        let mut sum = 0.0;
        for t in 0..=100 {
            let r = t as f64 / 100.0;
            sum += points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        }
        aps.push(sum / 101.0);
        let (tp, _) = counts_at(thr, f64::NEG_INFINITY);
        ars.push(tp as f64 / n_gt as f64);
    }
    let (tp, n) = counts_at(0.5, 0.5);
    let p = if n == 0 { 0.0 } else { tp as f64 / n as f64 };
    let r = tp as f64 / n_gt as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    EvalSummary {
        ap: mean(&aps),
        ap50: aps[0],
        ap75: aps[5],
        ar: mean(&ars),
        ar50: ars[0],
        ar75: ars[5],
        precision: p,
        recall: r,
        f1: f1_score(p, r),
        defined: true,
        max_dets,
        per_iou: Vec::new(),
        counts: Default::default(),
    }
}

/// Scene `i`: up to 10 boxes over 1-3 images, detections jittered from the
/// ground truth plus false positives, scores on a coarse grid to force ties.
fn metric_scene(i: u64) -> (Vec<DumpRecord>, Vec<Annotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + i);
    let n_images = rng.gen_range(1..=3);
    let mut budget = 10usize;
    let mut dump = Vec::new();
    let mut gts = Vec::new();
    for im in 0..n_images {
        let id = format!("s{i}_{im}");
        let n = rng.gen_range(usize::from(im == 0)..=budget.min(5));
        budget -= n;
        let boxes: Vec<BBox> = (0..n).map(|_| int_box(&mut rng, 100)).collect();
        for b in &boxes {
            for _ in 0..rng.gen_range(0..=2) {
                let j = |rng: &mut ChaCha8Rng| f64::from(rng.gen_range(-4..=4i32));
                let d = BBox::new(b.x1 + j(&mut rng), b.y1 + j(&mut rng), b.x2 + j(&mut rng), b.y2 + j(&mut rng));
                if d.is_valid() && d.area() > 0.0 {
                    dump.push((id.clone(), d));
                }
            }
        }
        for _ in 0..rng.gen_range(0..=3) {
            dump.push((id.clone(), int_box(&mut rng, 100)));
        }
        gts.push(Annotation::new(id, boxes.clone(), vec![1; boxes.len()], DEFAULT_TAU_OCC));
    }
    let dump = dump
        .into_iter()
        .map(|(id, b)| DumpRecord {
            image_id: id,
            bbox: b.to_array(),
            score: f64::from(rng.gen_range(1..=8u32)) / 8.0,
            label: 1,
            branch: Branch::Occludee,
            expansion_index: Some(0),
        })
        .collect();
    (dump, gts)
}

fn metric_oracle() -> Outcome {
    let cfg = EvalConfig::default();
    let mut mismatched = Vec::new();
    let mut non_monotone = 0;
    for i in 0..50 {
        let (dump, gts) = metric_scene(i);
        let got = coco_summary(&dump, &gts, &cfg).expect("ids match");
        let images: Vec<EvalImage> = gts
            .iter()
            .map(|a| EvalImage {
                image_id: a.image_id.clone(),
                dets: dump.iter().filter(|d| d.image_id == a.image_id).map(|d| (d.bbox(), d.score)).collect(),
                gts: a.boxes.clone(),
            })
            .collect();
        let want = oracle_summary(&images, cfg.max_dets);
        let pairs = [
            (got.ap, want.ap),
            (got.ap50, want.ap50),
            (got.ap75, want.ap75),
            (got.ar, want.ar),
            (got.ar50, want.ar50),
            (got.ar75, want.ar75),
            (got.precision, want.precision),
            (got.recall, want.recall),
            (got.f1, want.f1),
        ];
        if pairs.iter().any(|(a, b)| a != b) {
            mismatched.push(i);
        }
        if got.per_iou.windows(2).any(|w| w[1].ap > w[0].ap) || summarize(&images, &cfg) != got {
            non_monotone += 1;
        }
    }
    outcome(
        mismatched.is_empty() && non_monotone == 0,
        format!("exact mismatches on scenes {mismatched:?}; AP monotonicity violations {non_monotone}/50"),
    )
}

// ---------------------------------------------------------------- 4

/// Worst per-tensor relative error between the analytic gradient and central
/// differences at step `h`, for the tiny configuration with every parameter
/// jittered off its initialization (zero biases put ReLUs exactly on a kink).
fn gradient_error(seed: u64, h: f64) -> (f64, String, usize) {
    let mut model = Model::new(ModelConfig::tiny_check(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.05).unwrap();
    for (_, t) in model.params.iter_mut() {
        for v in t.data.iter_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    let boxes = vec![BBox::new(4.0, 5.0, 16.0, 17.0), BBox::new(11.0, 9.0, 23.0, 21.0), BBox::new(20.0, 2.0, 28.0, 10.0)];
    let ann = Annotation::new("g", boxes, vec![1; 3], DEFAULT_TAU_OCC);
    let pixels = RgbImage::from_fn(32, 28, |x, y| image::Rgb([(x * 7 + y) as u8, (y * 9) as u8, ((x * y) % 251) as u8]));
    let record = ImageRecord { image_id: "g".into(), pixels, annotation: ann };
    let mut cfg: TrainConfig = RunConfig::preset("desk").unwrap().train;
    cfg.weights = LossWeights::from_lambda1(0.5).unwrap();
    // One occluded foreground RoI and one background RoI.
    let rois = [BBox::new(5.0, 5.0, 16.0, 16.0), BBox::new(0.0, 20.0, 8.0, 27.0)];

    let objective = |m: &Model| -> f64 {
        let mut g = Graph::inference(&m.params);
        let nodes = record_losses(&mut g, m, &record, &cfg, RoiSource::Fixed(&rois), 5).unwrap();
        g.scalar(nodes.objective)
    };
    let grads = {
        let mut g = Graph::new(&model.params);
        let nodes = record_losses(&mut g, &model, &record, &cfg, RoiSource::Fixed(&rois), 5).unwrap();
        assert!(g.scalar(nodes.occludee[0].1) > 0.0, "occludee box term must be active");
        g.backward(nodes.objective)
    };
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut worst = (0.0f64, String::new(), 0usize);
    for name in &names {
        let len = model.params.get(name).unwrap().data.len();
        let analytic = grads.get(name).map(|t| t.data.clone()).unwrap_or_else(|| vec![0.0; len]);
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            let orig = model.params.get(name).unwrap().data[i];
            model.params.get_mut(name).unwrap().data[i] = orig + h;
            let up = objective(&model);
            model.params.get_mut(name).unwrap().data[i] = orig - h;
            let down = objective(&model);
            model.params.get_mut(name).unwrap().data[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        worst.2 += len;
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        if rel > worst.0 {
            worst = (rel, name.clone(), worst.2);
        }
    }
    worst
}

fn gradient_check() -> Outcome {
    let (rel, name, scalars) = gradient_error(11, 1e-4);
    // Instances whose 1e-4 stencil crosses a ReLU kink, checked at a finer step.
    let fine: Vec<(u64, f64)> = [0, 6, 8].iter().map(|&s| (s, gradient_error(s, 1e-6).0)).collect();
    let fine_ok = fine.iter().all(|&(_, e)| e <= 1e-3);
    let fine_txt: Vec<String> = fine.iter().map(|(s, e)| format!("seed {s} {e:.1e}")).collect();
    outcome(
        rel <= 1e-3 && fine_ok,
        format!("{scalars} scalars, h=1e-4: worst relative error {rel:.2e} ({name}); h=1e-6 on {}", fine_txt.join(", ")),
    )
}

// ---------------------------------------------------------------- 5

fn loss_algebra() -> Outcome {
    let sc = SynthConfig { seed: 5, ..Default::default() };
    let record = generate_synthetic_scene(&sc, 0).unwrap();
    let model = Model::new(ModelConfig::desk(), 3).unwrap();
    let base: TrainConfig = RunConfig::preset("desk").unwrap().train;
    let (b, _) = image_losses(&model, &record, &base, RoiSource::Sampled, 9, false).unwrap();
    let occ = (b.occluder_cls, b.occluder_bbox);
    let at = |l: f64| total_loss(occ, &b.occludee_terms, &LossWeights::from_lambda1(l).unwrap()).unwrap().total;
    let (t1, t0) = (at(1.0), at(0.0));
    let mut worst = 0.0f64;
    for l in [1.0, 0.75, 0.5, 0.25, 0.0] {
        worst = worst.max((at(l) - (l * t1 + (1.0 - l) * t0)).abs());
        // The graph-level loss agrees with the value-level one.
        let cfg = TrainConfig { weights: LossWeights::from_lambda1(l).unwrap(), ..base.clone() };
        let (bl, _) = image_losses(&model, &record, &cfg, RoiSource::Sampled, 9, false).unwrap();
        worst = worst.max((bl.total - at(l)).abs());
    }

    let cfg = TrainConfig { weights: LossWeights::from_lambda1(1.0).unwrap(), ..base };
    let data = vec![record];
    let mut trainer = Trainer::new(model.clone(), cfg).unwrap();
    trainer.step(&data).unwrap();
    let mut changed_occludee = Vec::new();
    let mut occluder_moved = false;
    for (name, t) in trainer.model.params.iter() {
        let before = model.params.get(name).unwrap();
        if name.starts_with("occludee.") || name.starts_with("context.") {
            if t != before {
                changed_occludee.push(name.to_string());
            }
        } else if name.starts_with("occluder.") && t != before {
            occluder_moved = true;
        }
    }
    outcome(
        worst <= 1e-9 && changed_occludee.is_empty() && occluder_moved,
        format!("max linearity residual {worst:.2e}; occludee/context params changed at lambda1=1: {changed_occludee:?}"),
    )
}

// ---------------------------------------------------------------- 6

fn sampler_balance() -> Outcome {
    let mut targets = Vec::new();
    for i in 0..1200 {
        let (class, occluded) = match i % 6 {
            0 => (Some(1), true),
            1 => (Some(1), false),
            _ => (Some(0), false),
        };
        targets.push(RoiTarget { class, gt_index: class.filter(|&c| c > 0).map(|_| 0), deltas: None, occluded, iou: 0.0 });
    }
    let cfg = SamplerConfig::default();
    let mut fractions = Vec::new();
    for seed in 0..100 {
        let keep = sample_balanced(&targets, &cfg, seed);
        let fg: Vec<&RoiTarget> = keep.iter().map(|&i| &targets[i]).filter(|t| t.is_foreground()).collect();
        let occ = fg.iter().filter(|t| t.occluded).count();
        fractions.push(occ as f64 / fg.len() as f64);
    }
    let all_half = fractions.iter().all(|&f| f == 0.5);
    outcome(all_half, format!("foreground occluded fraction in [{:.3}, {:.3}] over 100 draws", fractions.iter().cloned().fold(1.0, f64::min), fractions.iter().cloned().fold(0.0, f64::max)))
}

// ---------------------------------------------------------------- 7-10

struct Desk {
    train: Vec<ImageRecord>,
    test: Vec<ImageRecord>,
    heavy: Vec<ImageRecord>,
    severe: Vec<ImageRecord>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Subset {
    Test,
    Heavy,
    Severe,
}

/// Precision, recall and F1 at the operating point.
#[derive(Clone, Copy)]
struct Prf {
    p: f64,
    r: f64,
    f1: f64,
}

fn desk_data() -> Desk {
    let sc = SynthConfig { seed: 2024, ..Default::default() };
    let train = (0..TRAIN_SCENES).map(|i| generate_synthetic_scene(&sc, i).unwrap()).collect();
    let test: Vec<ImageRecord> = (TRAIN_SCENES..TRAIN_SCENES + TEST_SCENES).map(|i| generate_synthetic_scene(&sc, i).unwrap()).collect();
    let heavy = test.iter().filter(|r| max_pair_overlap(&r.annotation.boxes) >= HEAVY_OVERLAP).cloned().collect();
    let mut by_overlap: Vec<&ImageRecord> = test.iter().collect();
    by_overlap.sort_by(|a, b| max_pair_overlap(&b.annotation.boxes).total_cmp(&max_pair_overlap(&a.annotation.boxes)));
    let severe = by_overlap[..SEVERE_SCENES].iter().map(|&r| r.clone()).collect();
    Desk { train, test, heavy, severe }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
struct RunKey {
    /// Hundredths of lambda1.
    lambda: u32,
    t: u32,
    augment: &'static str,
    seed: u64,
}

struct Runs {
    models: BTreeMap<RunKey, Model>,
    scores: BTreeMap<(RunKey, Subset, &'static str), Prf>,
}

impl Runs {
    fn get(&mut self, key: RunKey, data: &[ImageRecord]) -> &Model {
        self.models.entry(key).or_insert_with(|| {
            let started = Instant::now();
            let mut rc = RunConfig::preset("desk").unwrap().with_seed(key.seed);
            rc.model.fes = FesConfig::with_steps(key.t);
            rc.train.weights = LossWeights::from_lambda1(f64::from(key.lambda) / 100.0).unwrap();
            rc.train.schedule.total_iters = DESK_ITERS;
            rc.train.augment.families = AugmentSpec::preset(key.augment).unwrap().families;
            let model = Model::new(rc.model.clone(), key.seed).unwrap();
            let mut trainer = Trainer::new(model, rc.train).unwrap();
            trainer.run(data, None).unwrap();
            eprintln!("trained {key:?} in {:.0}s", started.elapsed().as_secs_f64());
            trainer.model
        })
    }
}

impl Runs {
    /// Operating-point scores of run `key` on a test subset.
    fn score(&mut self, key: RunKey, desk: &Desk, subset: Subset, mode: DetectMode) -> Prf {
        let tag = match mode {
            DetectMode::Occludee => "occludee",
            DetectMode::Union => "union",
            DetectMode::OccluderOnly => "occluder",
        };
        if let Some(&v) = self.scores.get(&(key, subset, tag)) {
            return v;
        }
        let set = match subset {
            Subset::Test => &desk.test,
            Subset::Heavy => &desk.heavy,
            Subset::Severe => &desk.severe,
        };
        let v = score_on(self.get(key, &desk.train), set, mode);
        self.scores.insert((key, subset, tag), v);
        v
    }

    fn f1(&mut self, key: RunKey, desk: &Desk, subset: Subset, mode: DetectMode) -> f64 {
        self.score(key, desk, subset, mode).f1
    }
}

fn score_on(model: &Model, set: &[ImageRecord], mode: DetectMode) -> Prf {
    let cfg = InferenceConfig { mode, ..Default::default() };
    let dump = detect_dataset(model, set, &cfg).unwrap();
    let gts: Vec<Annotation> = set.iter().map(|r| r.annotation.clone()).collect();
    let s = coco_summary(&dump, &gts, &EvalConfig::default()).unwrap();
    Prf { p: s.precision, r: s.recall, f1: s.f1 }
}

/// Occludee-branch run at λ₁ = 0.5 with `t` expansion steps.
fn relational(t: u32, augment: &'static str, seed: u64) -> RunKey {
    RunKey { lambda: 50, t, augment, seed }
}

fn occlusion_advantage(desk: &Desk, runs: &mut Runs) -> Outcome {
    let baseline = |seed| RunKey { lambda: 100, t: 1, augment: "base", seed };
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for seed in SEEDS {
        let ours = runs.score(relational(1, "base", seed), desk, Subset::Heavy, DetectMode::Occludee);
        let base = runs.score(baseline(seed), desk, Subset::Heavy, DetectMode::OccluderOnly);
        gaps.push(ours.f1 - base.f1);
        detail.push(format!("{:.3}/{:.3} (P {:.3}/{:.3}, R {:.3}/{:.3})", ours.f1, base.f1, ours.p, base.p, ours.r, base.r));
    }
    let m = median(gaps);
    // Diagnostic only: the same comparison on the most-overlapped scenes.
    let severe: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            runs.f1(relational(1, "base", s), desk, Subset::Severe, DetectMode::Occludee)
                - runs.f1(baseline(s), desk, Subset::Severe, DetectMode::OccluderOnly)
        })
        .collect();
    outcome(
        m >= 0.03,
        format!(
            "heavy subset ({} scenes) F1 ours/baseline per seed {}; median gap {m:+.4} (need >= +0.03); top {SEVERE_SCENES} scenes by pair IoU median gap {:+.4}",
            desk.heavy.len(),
            detail.join(", "),
            median(severe)
        ),
    )
}

fn step_ablation(desk: &Desk, runs: &mut Runs) -> Outcome {
    let mut per_t = Vec::new();
    for t in 1..=3 {
        let f: Vec<f64> = SEEDS.iter().map(|&s| runs.f1(relational(t, "base", s), desk, Subset::Test, DetectMode::Occludee)).collect();
        per_t.push(median(f));
    }
    let pass = per_t[0] >= per_t[1].max(per_t[2]) - 0.01;
    outcome(pass, format!("median F1 t=1 {:.4}, t=2 {:.4}, t=3 {:.4} (need t=1 >= max - 0.01)", per_t[0], per_t[1], per_t[2]))
}

fn augmentation_trend(desk: &Desk, runs: &mut Runs) -> Outcome {
    let aug: Vec<f64> = SEEDS.iter().map(|&s| runs.f1(relational(1, "gt_cst_mixup", s), desk, Subset::Test, DetectMode::Occludee)).collect();
    let base: Vec<f64> = SEEDS.iter().map(|&s| runs.f1(relational(1, "base", s), desk, Subset::Test, DetectMode::Occludee)).collect();
    let (a, b) = (median(aug), median(base));
    outcome(a >= b - 0.005, format!("median F1 GT+CST+Mixup {a:.4} vs base {b:.4} (need >= base - 0.005)"))
}

fn transfer_learning(desk: &Desk, runs: &mut Runs) -> Outcome {
    const FINETUNE_ITERS: usize = 100;
    let source = runs.get(relational(1, "base", 0), &desk.train).clone();
    let ck = source.to_checkpoint(serde_json::Value::Null);

    // Surgery contract.
    let mut probe = Model::new(ModelConfig::desk(), 99).unwrap();
    let report = load_pretrained(&ck, &mut probe, true, 99).unwrap();
    let backbone_exact = probe.params.iter().filter(|(n, _)| n.starts_with("backbone.")).all(|(n, t)| t == ck.params.get(n).unwrap());
    let heads_fresh = probe.params.iter().filter(|(n, _)| is_head_param(n) && n.ends_with(".w")).all(|(n, t)| t != ck.params.get(n).unwrap());

    let target_cfg = SynthConfig { seed: 77, palette: Palette::Yellow, ..Default::default() };
    let target: Vec<ImageRecord> = (0..200).map(|i| generate_synthetic_scene(&target_cfg, i).unwrap()).collect();
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for seed in SEEDS {
        let mut rc = RunConfig::preset("desk").unwrap().with_seed(seed);
        rc.train.schedule.total_iters = FINETUNE_ITERS;
        let mut pretrained = Model::new(ModelConfig::desk(), seed).unwrap();
        load_pretrained(&ck, &mut pretrained, true, seed).unwrap();
        let scratch = Model::new(ModelConfig::desk(), seed).unwrap();
        let mean_loss = |m: Model| {
            let mut t = Trainer::new(m, rc.train.clone()).unwrap();
            let log = t.run(&target, None).unwrap();
            log.iter().map(|r| r.objective).sum::<f64>() / log.len() as f64
        };
        let (p, s) = (mean_loss(pretrained), mean_loss(scratch));
        gaps.push(p - s);
        detail.push(format!("{p:.3}/{s:.3}"));
    }
    let m = median(gaps);
    outcome(
        backbone_exact && heads_fresh && m <= 0.0,
        format!(
            "backbone bit-exact {backbone_exact}, heads re-drawn {heads_fresh} ({} replaced); mean loss over first {FINETUNE_ITERS} iters pretrained/scratch {}; median diff {m:+.4}",
            report.replaced.len(),
            detail.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 11

fn determinism(desk: &Desk, runs: &mut Runs) -> Outcome {
    let sc = SynthConfig { seed: 31, ..Default::default() };
    let a: Vec<ImageRecord> = (0..20).map(|i| generate_synthetic_scene(&sc, i).unwrap()).collect();
    let b: Vec<ImageRecord> = (0..20).map(|i| generate_synthetic_scene(&sc, i).unwrap()).collect();
    let data_same = a == b;

    let rc = RunConfig::preset("desk").unwrap().with_seed(4);
    let first = |_: ()| Trainer::new(Model::new(rc.model.clone(), 4).unwrap(), rc.train.clone()).unwrap().preview(&a).unwrap();
    let loss_same = first(()) == first(());

    let model = runs.get(relational(1, "base", 0), &desk.train).clone();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path, serde_json::Value::Null).unwrap();
    let reloaded = Model::load(&path).unwrap();
    let cfg = InferenceConfig::default();
    let set = &desk.test[..20];
    let d1 = detect_dataset(&model, set, &cfg).unwrap();
    let d2 = detect_dataset(&model, set, &cfg).unwrap();
    let d3 = detect_dataset(&reloaded, set, &cfg).unwrap();
    let dump_same = d1 == d2 && d1 == d3;
    outcome(data_same && loss_same && dump_same, format!("datasets {data_same}, first-iteration losses {loss_same}, dumps {dump_same} ({} detections)", d1.len()))
}

fn main() {
    let mut failures = Vec::new();
    let mut run = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        line(id, name, &o, t.elapsed().as_secs_f64());
        if !o.pass {
            failures.push(id);
        }
    };
    run(1, "geometry oracle", &mut geometry_oracle);
    run(2, "FES contract", &mut fes_contract);
    run(3, "metric oracle", &mut metric_oracle);
    run(4, "gradient check", &mut gradient_check);
    run(5, "loss algebra", &mut loss_algebra);
    run(6, "balanced sampler", &mut sampler_balance);

    let desk = desk_data();
    let mut runs = Runs { models: BTreeMap::new(), scores: BTreeMap::new() };
    run(7, "desk occlusion advantage", &mut || occlusion_advantage(&desk, &mut runs));
    run(8, "step ablation trend", &mut || step_ablation(&desk, &mut runs));
    run(9, "augmentation trend", &mut || augmentation_trend(&desk, &mut runs));
    run(10, "transfer-learning surgery", &mut || transfer_learning(&desk, &mut runs));
    run(11, "determinism", &mut || determinism(&desk, &mut runs));

    if !failures.is_empty() {
        eprintln!("failed criteria: {failures:?}");
        std::process::exit(1);
    }
}
