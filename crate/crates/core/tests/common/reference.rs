//! Slow, direct implementations used as oracles. Boxes are assumed to have
//! integer corners so overlaps can be counted exactly on the unit grid.

use duda_core::detector::{Detection, FeatureMap};
use duda_core::BoundingBox;

/// `(intersection, union)` in unit cells.
pub fn overlap_cells(a: &BoundingBox, b: &BoundingBox) -> (i64, i64) {
    let cells = |b: &BoundingBox| {
        let mut v = Vec::new();
        for y in b.y_min as i64..b.y_max as i64 {
            for x in b.x_min as i64..b.x_max as i64 {
                v.push((x, y));
            }
        }
        v
    };
    let (ca, cb) = (cells(a), cells(b));
    let inter = ca.iter().filter(|p| cb.contains(p)).count() as i64;
    (inter, ca.len() as i64 + cb.len() as i64 - inter)
}

pub fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut top = remaining[0];
        for &i in &remaining {
            if dets[i].score > dets[top].score || (dets[i].score == dets[top].score && i < top) {
                top = i;
            }
        }
        kept.push(dets[top].clone());
        remaining.retain(|&i| {
            if i == top {
                return false;
            }
            if dets[i].class_id != dets[top].class_id {
                return true;
            }
            let (inter, union) = overlap_cells(&dets[i].bbox, &dets[top].bbox);
            // IoU > thr, compared exactly
            (inter as f64) <= thr * union as f64
        });
    }
    kept
}

pub fn match_reference(dets: &[Detection], gts: &[BoundingBox], thr: f64) -> Vec<bool> {
    let mut flags = vec![false; dets.len()];
    let mut done = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    for _ in 0..dets.len() {
        let mut top = None::<usize>;
        for i in (0..dets.len()).filter(|&i| !done[i]) {
            if top.is_none_or(|t| dets[i].score > dets[t].score) {
                top = Some(i);
            }
        }
        let i = top.expect("an unprocessed detection remains");
        done[i] = true;
        let mut best: Option<(usize, (i64, i64))> = None;
        for j in (0..gts.len()).filter(|&j| !taken[j]) {
            let (inter, union) = overlap_cells(&dets[i].bbox, &gts[j]);
            // inter / union >= thr, and strictly better than the best so far
            if (inter as f64) < thr * union as f64 {
                continue;
            }
            if best.is_none_or(|(_, (bi, bu))| inter * bu > bi * union) {
                best = Some((j, (inter, union)));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    flags
}

pub fn ap_reference(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut v = scored.to_vec();
    v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n = v.len();
    let mut recall = vec![0.0; n];
    let mut precision = vec![0.0; n];
    for k in 0..n {
        let tp = v[..=k].iter().filter(|x| x.1).count() as f64;
        recall[k] = tp / n_gt as f64;
        precision[k] = tp / (k + 1) as f64;
    }
    let mut ap = 0.0;
    for i in 0..n {
        let prev = if i == 0 { 0.0 } else { recall[i - 1] };
        let interp = (0..n)
            .filter(|&j| recall[j] >= recall[i])
            .map(|j| precision[j])
            .fold(0.0, f64::max);
        ap += (recall[i] - prev) * interp;
    }
    ap
}

/// Box index owning each cell: cell centers inside the central half of a box,
/// smallest area first, then lowest index.
pub fn assignment_reference(boxes: &[BoundingBox], grid: (usize, usize), stride: usize) -> Vec<Option<usize>> {
    let s = stride as f64;
    let mut out = Vec::new();
    for i in 0..grid.0 {
        for j in 0..grid.1 {
            let (x, y) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            let mut candidates: Vec<(f64, usize)> = boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| {
                    let (cx, cy) = ((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0);
                    let (hw, hh) = ((b.x_max - b.x_min) / 4.0, (b.y_max - b.y_min) / 4.0);
                    cx - hw <= x && x < cx + hw && cy - hh <= y && y < cy + hh
                })
                .map(|(k, b)| ((b.x_max - b.x_min) * (b.y_max - b.y_min), k))
                .collect();
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out.push(candidates.first().map(|c| c.1));
        }
    }
    out
}

/// Mean feature over cells whose centers fall inside `b`, or the cell with
/// the nearest center when none does. Expects a single-image `[C, H, W]` map.
pub fn pool_reference(f: &FeatureMap, b: &BoundingBox) -> Vec<f64> {
    let shape = f.values.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let s = f.stride as f64;
    let at = |ch: usize, i: usize, j: usize| f.values.data()[(ch * h + i) * w + j];
    let mut sum = vec![0.0; c];
    let mut count = 0;
    for i in 0..h {
        for j in 0..w {
            let (x, y) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            if x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max {
                count += 1;
                for (ch, v) in sum.iter_mut().enumerate() {
                    *v += at(ch, i, j);
                }
            }
        }
    }
    if count > 0 {
        return sum.into_iter().map(|v| v / count as f64).collect();
    }
    let (bx, by) = ((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0);
    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            let d = (x - bx).powi(2) + (y - by).powi(2);
            if d < best.0 {
                best = (d, i, j);
            }
        }
    }
    (0..c).map(|ch| at(ch, best.1, best.2)).collect()
}
