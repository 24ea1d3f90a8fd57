use crate::geometry::BBox;

pub const DEFAULT_TAU_OCC: f64 = 0.05;

/// Flags box `i` when some other box covers at least `tau_occ` of its area.
/// Both members of an overlapping pair are flagged when each clears the bar.
pub fn label_occlusion_cases(boxes: &[BBox], tau_occ: f64) -> Vec<bool> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, bi)| {
            let area = bi.area();
            area > 0.0
                && boxes
                    .iter()
                    .enumerate()
                    .any(|(j, bj)| j != i && bi.intersection(bj) / area >= tau_occ)
        })
        .collect()
}

/// Intersection divided by the smaller of the two areas.
pub fn overlap_over_smaller(a: &BBox, b: &BBox) -> f64 {
    let smaller = a.area().min(b.area());
    if smaller <= 0.0 {
        0.0
    } else {
        a.intersection(b) / smaller
    }
}

/// Largest pairwise [`overlap_over_smaller`] in a box list (0 for fewer than two).
pub fn max_pair_overlap(boxes: &[BBox]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in boxes.iter().enumerate() {
        for b in &boxes[i + 1..] {
            best = best.max(overlap_over_smaller(a, b));
        }
    }
    best
}
