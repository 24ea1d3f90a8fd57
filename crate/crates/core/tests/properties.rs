use image::RgbImage;
use proptest::prelude::*;

use occluder::augment::{apply_geometric, mixup, transform_box, GeometricParams};
use occluder::data::{label_occlusion_cases, split_dataset, Annotation, ImageRecord, DEFAULT_TAU_OCC};
use occluder::evaluation::{average_precision, f1_score, precision_recall_f1, summarize, EvalConfig, EvalImage};
use occluder::geometry::{apply_deltas, encode_deltas, fes_expand, iou, nms_indices, BBox, FesConfig};
use occluder::inference::{select_best, Candidate};
use occluder::learning::{assign_targets, ConfusionCounts};

fn int_box(max: u32) -> impl Strategy<Value = BBox> {
    (0..max, 0..max, 1..max / 2, 1..max / 2).prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
}

fn real_box() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..80.0f64, 1.0..80.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

/// Pixel-count IoU for integer-aligned boxes.
fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x1 && x < bx.x2 && y >= bx.y1 && y < bx.y2;
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..200 {
        for x in 0..200 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (ia, ib) = (inside(a, px, py), inside(b, px, py));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Suppression by repeated arg-max over the survivors.
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

fn record(boxes: Vec<BBox>, w: u32, h: u32, shade: u8) -> ImageRecord {
    let n = boxes.len();
    ImageRecord {
        image_id: format!("r{shade}"),
        pixels: RgbImage::from_fn(w, h, |x, y| image::Rgb([(x as u8).wrapping_mul(3), shade, (y as u8).wrapping_mul(5)])),
        annotation: Annotation::new(format!("r{shade}"), boxes, vec![1; n], DEFAULT_TAU_OCC),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_matches_raster(a in int_box(120), b in int_box(120)) {
        prop_assert!((iou(&a, &b) - raster_iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn iou_symmetric_and_bounded(a in real_box(), b in real_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_matches_brute_force(boxes in prop::collection::vec(int_box(60), 0..20), seed in any::<u64>(), thr in 0.1..0.9f64) {
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..boxes.len()).map(|i| ((seed >> (i % 60)) & 7) as f64 / 8.0).collect();
        prop_assert_eq!(nms_indices(&boxes, &scores, thr), brute_nms(&boxes, &scores, thr));
    }

    #[test]
    fn fes_contract(p in real_box(), t in 1u32..=3) {
        let size = (256, 256);
        let cfg = FesConfig::with_steps(t);
        let ex = fes_expand(&p, &cfg, size);
        prop_assert_eq!(ex.len(), 9);
        let clipped = p.clip(256.0, 256.0);
        prop_assert_eq!(ex[0], clipped);
        for e in &ex {
            prop_assert!(e.contains(&clipped), "{e:?} vs {clipped:?}");
        }
    }

    #[test]
    fn delta_round_trip(a in real_box(), b in real_box()) {
        let d = encode_deltas(&a, &b).unwrap();
        let r = apply_deltas(&a, &d);
        for (u, v) in r.to_array().iter().zip(b.to_array()) {
            prop_assert!((u - v).abs() < 1e-6, "{r:?} vs {b:?}");
        }
    }

    #[test]
    fn occlusion_flags_follow_permutation(boxes in prop::collection::vec(real_box(), 0..10), seed in any::<u64>()) {
        let flags = label_occlusion_cases(&boxes, 0.05);
        let mut perm: Vec<usize> = (0..boxes.len()).collect();
        perm.sort_by_key(|&i| (seed.rotate_left(i as u32 * 7)) ^ i as u64);
        let permuted: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
        let pf = label_occlusion_cases(&permuted, 0.05);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(pf[k], flags[i]);
        }
    }

    #[test]
    fn split_is_a_partition(n in 3usize..200, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (a, b, c) = split_dataset(items.clone(), (0.7, 0.15, 0.15), seed).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, items.clone());
        prop_assert_eq!(split_dataset(items, (0.7, 0.15, 0.15), seed).unwrap(), (a, b, c));
    }

    #[test]
    fn geometric_boxes_follow_the_corner_map(boxes in prop::collection::vec(int_box(40), 1..5), rot in -10.0..10.0f64, flip in any::<bool>()) {
        let r = record(boxes.clone(), 96, 80, 1);
        let params = GeometricParams { rotation_deg: rot, flip_h: flip, ..Default::default() };
        let out = apply_geometric(&r, &params, DEFAULT_TAU_OCC);
        let m = params.matrix(96, 80);
        let expected: Vec<BBox> = boxes.iter().map(|b| transform_box(&m, b).clip(96.0, 80.0)).filter(|b| b.area() > 0.0).collect();
        prop_assert_eq!(&out.annotation.boxes, &expected);
        prop_assert_eq!(out.annotation.occluded.clone(), label_occlusion_cases(&expected, DEFAULT_TAU_OCC));
        prop_assert_eq!(out.pixels.dimensions(), (96, 80));
    }

    #[test]
    fn mixup_is_symmetric(ba in prop::collection::vec(int_box(40), 0..4), bb in prop::collection::vec(int_box(40), 0..4), k in 0u32..=16) {
        let alpha = f64::from(k) / 16.0;
        let (a, b) = (record(ba, 48, 48, 10), record(bb, 48, 48, 200));
        let ab = mixup(&a, &b, alpha, DEFAULT_TAU_OCC);
        let ba = mixup(&b, &a, 1.0 - alpha, DEFAULT_TAU_OCC);
        prop_assert_eq!(&ab.pixels, &ba.pixels);
        let key = |v: &[BBox]| { let mut s: Vec<[u64; 4]> = v.iter().map(|b| b.to_array().map(f64::to_bits)).collect(); s.sort_unstable(); s };
        prop_assert_eq!(key(&ab.annotation.boxes), key(&ba.annotation.boxes));
    }

    #[test]
    fn ap_monotone_in_iou(gts in prop::collection::vec(int_box(100), 1..8), jitter in prop::collection::vec((0u32..6, 0u32..6, 0u32..100), 1..10)) {
        let dets: Vec<(BBox, f64)> = jitter.iter().enumerate().map(|(i, &(dx, dy, s))| {
            let g = gts[i % gts.len()];
            (BBox::new(g.x1 + f64::from(dx), g.y1 + f64::from(dy), g.x2 + f64::from(dx), g.y2), f64::from(s) / 100.0)
        }).collect();
        let im = vec![EvalImage { image_id: "a".into(), dets, gts }];
        let s = summarize(&im, &EvalConfig::default());
        for w in s.per_iou.windows(2) {
            prop_assert!(w[1].ap <= w[0].ap + 1e-12);
            prop_assert!(w[1].ar <= w[0].ar + 1e-12);
        }
        prop_assert!(s.ap <= s.ap50 + 1e-12);
        prop_assert_eq!(s.f1, f1_score(s.precision, s.recall));
    }

    #[test]
    fn ap_ignores_order_among_equal_scores(gts in prop::collection::vec(int_box(100), 1..6), picks in prop::collection::vec((0usize..6, 0u32..3, 0u32..4), 1..10), rot in 0usize..10) {
        let dets: Vec<(BBox, f64)> = picks.iter().map(|&(g, dx, s)| {
            let b = gts[g % gts.len()];
            (BBox::new(b.x1 + f64::from(dx), b.y1, b.x2 + f64::from(dx), b.y2), f64::from(s) / 4.0)
        }).collect();
        let mut shuffled = dets.clone();
        shuffled.rotate_left(rot % dets.len());
        let a = average_precision(&[EvalImage { image_id: "a".into(), dets, gts: gts.clone() }], 0.5, 100).ap;
        let b = average_precision(&[EvalImage { image_id: "a".into(), dets: shuffled, gts }], 0.5, 100).ap;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn f1_invariant(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let (p, r, f) = precision_recall_f1(ConfusionCounts { tp, fp, tn: 0, fn_ });
        let expected = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        prop_assert_eq!(f, expected);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn assignment_is_permutation_invariant(props in prop::collection::vec(int_box(80), 1..12), gts in prop::collection::vec(int_box(80), 1..5), rot in 0usize..12) {
        let ann = Annotation::new("a", gts.clone(), vec![1; gts.len()], DEFAULT_TAU_OCC);
        let mut rotated = props.clone();
        let r = rot % props.len();
        rotated.rotate_left(r);
        let a = assign_targets(&props, &ann, 0.5, 0.3).unwrap();
        let b = assign_targets(&rotated, &ann, 0.5, 0.3).unwrap();
        for i in 0..props.len() {
            prop_assert_eq!(&b[i], &a[(i + r) % props.len()]);
        }
    }

    #[test]
    fn select_best_dominates(scores in prop::collection::vec(0.0..1.0f64, 1..12)) {
        let cands: Vec<Candidate> = scores.iter().map(|&s| Candidate { anchor: BBox::new(5.0, 5.0, 20.0, 20.0), scores: vec![1.0 - s, s], deltas: [0.0; 4] }).collect();
        let d = select_best(0, &cands, &[10.0, 10.0, 5.0, 5.0], (64, 64)).unwrap();
        prop_assert!(scores.iter().all(|&s| d.score >= s));
        let first = scores.iter().position(|&s| s == d.score).unwrap();
        prop_assert_eq!(d.expansion_index, Some(first));
    }
}
