//! Detection metrics: greedy matching, all-point AP@0.5, mAP and run
//! comparison tables.

use crate::boxes::BoundingBox;
use crate::checkpoint::Checkpoint;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::model::{Model, EVAL_SCORE_THRESHOLD};
use crate::scenegen::{Dataset, LabeledImage, Split};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

pub use crate::boxes::iou;

pub const MATCH_IOU: f64 = 0.5;

/// TP/FP flag per detection (in input order) for one image and one class.
/// Detections are visited by descending score, ties by lower index; each
/// takes the unmatched ground truth of highest IoU, ties by lower index,
/// provided that IoU reaches `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[BoundingBox], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = iou(&dets[i].bbox, gt);
            if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    flags
}

/// All-point interpolated AP of `(score, is_tp)` pairs; `None` when `n_gt == 0`.
/// Equal scores are ranked false positives first, so the result depends only
/// on the multiset of pairs.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut v = scored.to_vec();
    v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut tp = 0usize;
    let precision: Vec<f64> = v
        .iter()
        .enumerate()
        .map(|(k, &(_, is_tp))| {
            tp += is_tp as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    // recall rises by 1/n_gt at each true positive, so AP is the mean over
    // ground truth of the interpolated precision where it was found
    let mut sum = 0.0;
    let mut envelope = 0.0f64;
    for (&(_, is_tp), &p) in v.iter().zip(&precision).rev() {
        envelope = envelope.max(p);
        if is_tp {
            sum += envelope;
        }
    }
    let ap = sum / n_gt as f64;
    Some(ap.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub n_images: usize,
    pub n_gt: usize,
    pub n_det: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP@0.5 for every class with at least one ground-truth box.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map50: f64,
    pub counts: EvalCounts,
    pub split: String,
    pub checkpoint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn table(&self) -> String {
        let mut s = format!("split {}  checkpoint {}\n", self.split, self.checkpoint);
        for (c, ap) in &self.per_class_ap {
            let _ = writeln!(s, "  class {c:<3} AP50 {ap:.4}");
        }
        let _ = writeln!(
            s,
            "  mAP50 {:.4}  ({} images, {} gt, {} detections)",
            self.map50, self.counts.n_images, self.counts.n_gt, self.counts.n_det
        );
        s
    }
}

/// Score given detections against ground truth, one entry per image.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<BoundingBox>],
    split: &str,
    checkpoint: &str,
) -> Result<EvalReport> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Batch(format!(
            "{} detection lists for {} images",
            detections.len(),
            ground_truth.len()
        )));
    }
    let mut scored: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for (dets, gts) in detections.iter().zip(ground_truth) {
        let classes: BTreeSet<usize> = dets
            .iter()
            .map(|d| d.class_id)
            .chain(gts.iter().map(|b| b.class_id))
            .collect();
        for c in classes {
            let d: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
            let g: Vec<BoundingBox> = gts.iter().filter(|b| b.class_id == c).copied().collect();
            *n_gt.entry(c).or_default() += g.len();
            let flags = match_detections(&d, &g, MATCH_IOU);
            scored
                .entry(c)
                .or_default()
                .extend(d.iter().map(|d| d.score).zip(flags));
        }
    }
    let per_class_ap: BTreeMap<usize, f64> = n_gt
        .iter()
        .filter_map(|(&c, &n)| average_precision(scored.get(&c).map_or(&[][..], Vec::as_slice), n).map(|ap| (c, ap)))
        .collect();
    let map50 = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(EvalReport {
        per_class_ap,
        map50,
        counts: EvalCounts {
            n_images: ground_truth.len(),
            n_gt: n_gt.values().sum(),
            n_det: detections.iter().map(Vec::len).sum(),
        },
        split: split.to_string(),
        checkpoint: checkpoint.to_string(),
    })
}

/// Decode at score 0.05, NMS at IoU 0.5, and score against the labels.
pub fn evaluate_model(model: &Model, images: &[LabeledImage], split: &str, checkpoint: &str) -> Result<EvalReport> {
    let px: Vec<_> = images.iter().map(|x| &x.pixels).collect();
    let dets = if px.is_empty() {
        Vec::new()
    } else {
        model.detect(&px, EVAL_SCORE_THRESHOLD)?
    };
    let gts: Vec<Vec<BoundingBox>> = images.iter().map(|x| x.boxes.clone()).collect();
    evaluate_detections(&dets, &gts, split, checkpoint)
}

/// Evaluate a checkpoint file on a labeled split of a dataset.
pub fn evaluate(checkpoint: &Path, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let images = dataset.labeled(split)?;
    let model = Checkpoint::load(checkpoint)?.model()?;
    evaluate_model(&model, &images, split.name(), &checkpoint.display().to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    /// AP per class of [`Comparison::classes`]; `None` if the run has no entry.
    pub ap: Vec<Option<f64>>,
    pub map50: f64,
    /// Differences to the first row.
    pub ap_delta: Vec<Option<f64>>,
    pub map50_delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub split: String,
    pub classes: Vec<usize>,
    pub rows: Vec<ComparisonRow>,
}

/// Per-class and overall differences of every report to the first one.
pub fn compare(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Batch(format!("need at least 2 reports, got {}", reports.len())));
    }
    let split = &reports[0].split;
    if let Some(r) = reports.iter().find(|r| &r.split != split) {
        return Err(Error::SplitMismatch(format!("{} vs {}", split, r.split)));
    }
    let classes: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.per_class_ap.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let base = &reports[0];
    let rows = reports
        .iter()
        .map(|r| {
            let ap: Vec<Option<f64>> = classes.iter().map(|c| r.per_class_ap.get(c).copied()).collect();
            let ap_delta = classes
                .iter()
                .zip(&ap)
                .map(|(c, a)| Some(a.as_ref()? - base.per_class_ap.get(c)?))
                .collect();
            ComparisonRow {
                name: r.checkpoint.clone(),
                ap,
                map50: r.map50,
                ap_delta,
                map50_delta: r.map50 - base.map50,
            }
        })
        .collect();
    Ok(Comparison {
        split: split.clone(),
        classes,
        rows,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Comparison {
    /// Long-format CSV: `run,metric,value,delta` with `metric` either `map50`
    /// or `ap_<class>`. Values are written at full precision.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["split", "run", "metric", "value", "delta"])?;
        for r in &self.rows {
            for (i, c) in self.classes.iter().enumerate() {
                w.write_record([
                    self.split.clone(),
                    r.name.clone(),
                    format!("ap_{c}"),
                    cell(r.ap[i]),
                    cell(r.ap_delta[i]),
                ])?;
            }
            w.write_record([
                self.split.clone(),
                r.name.clone(),
                "map50".into(),
                r.map50.to_string(),
                r.map50_delta.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let parse = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Config(format!("bad number {s:?} in comparison CSV")))
            }
        };
        let mut split = String::new();
        let mut classes: Vec<usize> = Vec::new();
        let mut rows: Vec<ComparisonRow> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let (sp, run, metric, value, delta) = (&rec[0], &rec[1], &rec[2], &rec[3], &rec[4]);
            split = sp.to_string();
            if rows.last().is_none_or(|r| r.name != run) {
                rows.push(ComparisonRow {
                    name: run.to_string(),
                    ap: Vec::new(),
                    map50: 0.0,
                    ap_delta: Vec::new(),
                    map50_delta: 0.0,
                });
            }
            let row = rows.last_mut().expect("row pushed above");
            if metric == "map50" {
                row.map50 = parse(value)?.unwrap_or(0.0);
                row.map50_delta = parse(delta)?.unwrap_or(0.0);
            } else if let Some(c) = metric.strip_prefix("ap_").and_then(|c| c.parse().ok()) {
                if rows.len() == 1 {
                    classes.push(c);
                }
                let row = rows.last_mut().expect("row pushed above");
                row.ap.push(parse(value)?);
                row.ap_delta.push(parse(delta)?);
            } else {
                return Err(Error::Config(format!("unknown metric {metric:?} in comparison CSV")));
            }
        }
        Ok(Self { split, classes, rows })
    }

    /// Aligned plain-text table, four decimals.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let fmt_delta = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:+.4}"));
        let mut header = vec!["run".to_string()];
        header.extend(self.classes.iter().map(|c| format!("AP50[{c}]")));
        header.extend(["mAP50".to_string(), "dmAP50".to_string()]);
        let mut lines = vec![header];
        for r in &self.rows {
            let mut l = vec![r.name.clone()];
            l.extend(
                r.ap.iter()
                    .zip(&r.ap_delta)
                    .map(|(a, d)| format!("{} ({})", fmt(*a), fmt_delta(*d))),
            );
            l.push(fmt(Some(r.map50)));
            l.push(fmt_delta(Some(r.map50_delta)));
            lines.push(l);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].len()).max().unwrap_or(0))
            .collect();
        let mut s = format!("split {}\n", self.split);
        for l in lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}
