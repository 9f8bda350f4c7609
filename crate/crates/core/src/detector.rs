//! A minimal anchor-free single-stage detector.
//!
//! Four 3×3 convolution blocks reduce the image by a total stride of 8 to a
//! single feature level. A per-cell head predicts class logits, an
//! objectness logit and `(l, t, r, b)` distances from the cell center, in
//! stride units, through `exp`.

use crate::autograd::{sigmoid, Graph, ParamStore, Var};
use crate::boxes::{iou, BoundingBox};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Grad, Init};
use crate::pixels::{stack, PixelGrid};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fraction of each box side, around its center, whose cells count as positive.
pub const CENTER_SAMPLING: f64 = 0.5;
/// Box offsets are clamped to this magnitude before `exp`.
const MAX_LOG_OFFSET: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Output channels of each backbone block.
    pub widths: Vec<usize>,
    /// Stride of each backbone block.
    pub strides: Vec<usize>,
    pub head_hidden: usize,
    /// Initial objectness bias.
    pub objectness_prior: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            widths: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            head_hidden: 64,
            objectness_prior: -2.0,
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("at least one backbone block")
    }

    pub fn head_outputs(&self) -> usize {
        self.num_classes + 5
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(
                "backbone widths and strides must be non-empty and equal length".into(),
            ));
        }
        if self.num_classes == 0 || self.strides.contains(&0) || self.widths.contains(&0) {
            return Err(Error::Config("detector sizes must be positive".into()));
        }
        Ok(())
    }
}

/// A `(C, H_f, W_f)` feature grid, possibly batched as `(N, C, H_f, W_f)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim(self.values.shape().len() - 3)
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.values.shape();
        (s[s.len() - 2], s[s.len() - 1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub config: DetectorConfig,
    pub blocks: Vec<Conv2d>,
    pub head_hidden: Conv2d,
    pub head_out: Conv2d,
}

impl Detector {
    pub fn new(store: &mut ParamStore, config: DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut cin = 3;
        for (i, (&w, &s)) in config.widths.iter().zip(&config.strides).enumerate() {
            blocks.push(Conv2d::new(
                store,
                &format!("backbone.{i}"),
                cin,
                w,
                3,
                s,
                Init::He,
                rng,
            ));
            cin = w;
        }
        let head_hidden = Conv2d::new(store, "head.hidden", cin, config.head_hidden, 1, 1, Init::He, rng);
        let head_out = Conv2d::new(
            store,
            "head.out",
            config.head_hidden,
            config.head_outputs(),
            1,
            1,
            Init::Normal(0.01),
            rng,
        );
        store.get_mut(head_out.bias).data_mut()[config.num_classes] = config.objectness_prior;
        Ok(Self {
            config,
            blocks,
            head_hidden,
            head_out,
        })
    }

    /// Check that `(h, w)` is divisible by the stride and return the grid size.
    pub fn grid_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.config.stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::Shape(format!("image {h}x{w} is not divisible by stride {s}")));
        }
        Ok((h / s, w / s))
    }

    /// Backbone on an `[N, 3, H, W]` input node.
    pub fn backbone(&self, g: &mut Graph, store: &ParamStore, x: Var, grad: Grad) -> Var {
        let mut h = x;
        for block in &self.blocks {
            let c = block.forward(g, store, h, grad);
            h = g.relu(c);
        }
        h
    }

    /// Head on a backbone feature node; output `[N, K + 5, H_f, W_f]`.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, features: Var, grad: Grad) -> Var {
        let hidden = self.head_hidden.forward(g, store, features, grad);
        let hidden = g.relu(hidden);
        self.head_out.forward(g, store, hidden, grad)
    }

    /// Feature map of a single image, without gradients.
    pub fn backbone_forward(&self, store: &ParamStore, image: &PixelGrid) -> Result<FeatureMap> {
        self.grid_for(image.height(), image.width())?;
        let mut g = Graph::new();
        let x = g.input(network_input(&[image]));
        let f = self.backbone(&mut g, store, x, Grad::Freeze);
        let v = g.value(f).clone();
        let s = v.shape().to_vec();
        Ok(FeatureMap {
            values: v.reshape(&s[1..]),
            stride: self.config.stride(),
        })
    }

    /// Raw predictions and backbone features for a batch, without gradients.
    pub fn predict(&self, store: &ParamStore, images: &[&PixelGrid]) -> Result<(RawPredictions, FeatureMap)> {
        let (h, w) = (images[0].height(), images[0].width());
        self.grid_for(h, w)?;
        let mut g = Graph::new();
        let x = g.input(network_input(images));
        let f = self.backbone(&mut g, store, x, Grad::Freeze);
        let out = self.head(&mut g, store, f, Grad::Freeze);
        Ok((
            RawPredictions::new(
                g.value(out).clone(),
                self.config.num_classes,
                self.config.stride(),
                (h, w),
            )?,
            FeatureMap {
                values: g.value(f).clone(),
                stride: self.config.stride(),
            },
        ))
    }
}

/// Images centered around zero, stacked as `[N, 3, H, W]`.
pub fn network_input(images: &[&PixelGrid]) -> Tensor {
    stack(images).map(|v| v - 0.5)
}

/// Head output for a batch: `[N, K + 5, H_f, W_f]` with channels
/// `0..K` class logits, `K` objectness, `K+1..K+5` log `(l, t, r, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPredictions {
    pub values: Tensor,
    pub num_classes: usize,
    pub stride: usize,
    pub image_size: (usize, usize),
}

impl RawPredictions {
    pub fn new(values: Tensor, num_classes: usize, stride: usize, image_size: (usize, usize)) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[1] != num_classes + 5 {
            return Err(Error::Shape(format!(
                "head output {s:?} does not match {num_classes} classes"
            )));
        }
        if s[2] * stride != image_size.0 || s[3] * stride != image_size.1 {
            return Err(Error::Shape(format!(
                "grid {s:?} inconsistent with image {image_size:?}"
            )));
        }
        Ok(Self {
            values,
            num_classes,
            stride,
            image_size,
        })
    }

    pub fn batch(&self) -> usize {
        self.values.dim(0)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.dim(2), self.values.dim(3))
    }

    #[inline]
    pub fn index(&self, n: usize, ch: usize, cell: usize) -> usize {
        let (h, w) = self.grid();
        (n * (self.num_classes + 5) + ch) * h * w + cell
    }

    pub fn at(&self, n: usize, ch: usize, cell: usize) -> f64 {
        self.values.data()[self.index(n, ch, cell)]
    }

    pub fn objectness_channel(&self) -> usize {
        self.num_classes
    }

    pub fn offset_channel(&self, side: usize) -> usize {
        self.num_classes + 1 + side
    }
}

/// Per-image training targets on the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub grid: (usize, usize),
    pub stride: usize,
    /// Index of the assigned box per cell, row-major.
    pub assigned: Vec<Option<usize>>,
    pub class_id: Vec<usize>,
    /// `(l, t, r, b)` distances from the cell center in stride units.
    pub ltrb: Vec<[f64; 4]>,
}

impl TargetMaps {
    pub fn num_positive(&self) -> usize {
        self.assigned.iter().filter(|a| a.is_some()).count()
    }

    pub fn is_positive(&self, cell: usize) -> bool {
        self.assigned[cell].is_some()
    }
}

pub fn cell_center(cell: usize, grid: (usize, usize), stride: usize) -> (f64, f64) {
    let (i, j) = (cell / grid.1, cell % grid.1);
    ((j as f64 + 0.5) * stride as f64, (i as f64 + 0.5) * stride as f64)
}

/// Central region of a box that makes cells positive.
pub fn central_region(b: &BoundingBox) -> BoundingBox {
    let (cx, cy) = b.center();
    let (hw, hh) = (0.5 * CENTER_SAMPLING * b.width(), 0.5 * CENTER_SAMPLING * b.height());
    BoundingBox::new(cx - hw, cy - hh, cx + hw, cy + hh, b.class_id)
}

/// Center-sampling assignment: a cell is positive iff its center lies in the
/// central region of some box; overlaps go to the smaller box, then to the
/// lower index.
pub fn assign_targets(boxes: &[BoundingBox], grid: (usize, usize), stride: usize) -> TargetMaps {
    let cells = grid.0 * grid.1;
    let regions: Vec<BoundingBox> = boxes.iter().map(central_region).collect();
    let mut assigned = vec![None; cells];
    let mut class_id = vec![0; cells];
    let mut ltrb = vec![[0.0; 4]; cells];
    for cell in 0..cells {
        let (x, y) = cell_center(cell, grid, stride);
        let mut best: Option<usize> = None;
        for (k, r) in regions.iter().enumerate() {
            if r.contains_point(x, y) && best.is_none_or(|b| boxes[k].area() < boxes[b].area()) {
                best = Some(k);
            }
        }
        if let Some(k) = best {
            let b = &boxes[k];
            let s = stride as f64;
            assigned[cell] = Some(k);
            class_id[cell] = b.class_id;
            ltrb[cell] = [
                (x - b.x_min) / s,
                (y - b.y_min) / s,
                (b.x_max - x) / s,
                (b.y_max - y) / s,
            ];
        }
    }
    TargetMaps {
        grid,
        stride,
        assigned,
        class_id,
        ltrb,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionLoss {
    pub total: f64,
    pub objectness: f64,
    pub class: f64,
    pub box_iou: f64,
    /// Gradient of `total` with respect to the raw prediction tensor.
    pub grad: Tensor,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn offset_exp(o: f64) -> (f64, f64) {
    if o.abs() > MAX_LOG_OFFSET {
        (o.clamp(-MAX_LOG_OFFSET, MAX_LOG_OFFSET).exp(), 0.0)
    } else {
        let e = o.exp();
        (e, e)
    }
}

/// `−ln IoU` of two `(l, t, r, b)` boxes sharing an anchor point, plus its
/// gradient with respect to the predicted distances.
pub fn ltrb_iou_loss(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [pl, pt, pr, pb] = pred;
    let [tl, tt, tr, tb] = target;
    let pw = pl + pr;
    let ph = pt + pb;
    let area_p = pw * ph;
    let area_t = (tl + tr) * (tt + tb);
    let iw = pl.min(tl) + pr.min(tr);
    let ih = pt.min(tt) + pb.min(tb);
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let loss = union.ln() - inter.ln();
    let d_inter = [
        if pl < tl { ih } else { 0.0 },
        if pt < tt { iw } else { 0.0 },
        if pr < tr { ih } else { 0.0 },
        if pb < tb { iw } else { 0.0 },
    ];
    let d_area = [ph, pw, ph, pw];
    let mut grad = [0.0; 4];
    for s in 0..4 {
        grad[s] = (d_area[s] - d_inter[s]) / union - d_inter[s] / inter;
    }
    (loss, grad)
}

/// Objectness BCE (mean over cells) + class cross-entropy (mean over
/// positives) + IoU loss (mean over positives), equally weighted.
pub fn detection_loss(preds: &RawPredictions, targets: &[TargetMaps]) -> Result<DetectionLoss> {
    let (gh, gw) = preds.grid();
    if targets.len() != preds.batch() {
        return Err(Error::Shape(format!(
            "{} target maps for a batch of {}",
            targets.len(),
            preds.batch()
        )));
    }
    if let Some(t) = targets.iter().find(|t| t.grid != (gh, gw)) {
        return Err(Error::Shape(format!(
            "target grid {:?} vs prediction grid {:?}",
            t.grid,
            (gh, gw)
        )));
    }
    let cells = gh * gw;
    let k = preds.num_classes;
    let n_cells = (preds.batch() * cells) as f64;
    let n_pos: usize = targets.iter().map(TargetMaps::num_positive).sum();
    let mut grad = Tensor::zeros(preds.values.shape());
    let (mut obj, mut cls, mut bx) = (0.0, 0.0, 0.0);
    let mut logits = vec![0.0; k];
    for (n, t) in targets.iter().enumerate() {
        for cell in 0..cells {
            let oi = preds.index(n, preds.objectness_channel(), cell);
            let z = preds.values.data()[oi];
            let y = if t.is_positive(cell) { 1.0 } else { 0.0 };
            obj += softplus(z) - y * z;
            grad.data_mut()[oi] = (sigmoid(z) - y) / n_cells;
            if !t.is_positive(cell) {
                continue;
            }
            let inv_pos = 1.0 / n_pos as f64;
            for (c, l) in logits.iter_mut().enumerate() {
                *l = preds.at(n, c, cell);
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z_sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let lse = m + z_sum.ln();
            let target_class = t.class_id[cell];
            cls += lse - logits[target_class];
            for (c, l) in logits.iter().enumerate() {
                let p = (l - lse).exp();
                let onehot = if c == target_class { 1.0 } else { 0.0 };
                grad.data_mut()[preds.index(n, c, cell)] = (p - onehot) * inv_pos;
            }
            let mut dist = [0.0; 4];
            let mut ddist = [0.0; 4];
            for side in 0..4 {
                (dist[side], ddist[side]) = offset_exp(preds.at(n, preds.offset_channel(side), cell));
            }
            let (l, g) = ltrb_iou_loss(dist, t.ltrb[cell]);
            bx += l;
            for side in 0..4 {
                grad.data_mut()[preds.index(n, preds.offset_channel(side), cell)] = g[side] * ddist[side] * inv_pos;
            }
        }
    }
    let objectness = obj / n_cells;
    let (class, box_iou) = if n_pos == 0 {
        (0.0, 0.0)
    } else {
        (cls / n_pos as f64, bx / n_pos as f64)
    };
    Ok(DetectionLoss {
        total: objectness + class + box_iou,
        objectness,
        class,
        box_iou,
        grad,
    })
}

/// Record the detection loss on the tape as a function of the head output.
pub fn detection_loss_node(
    g: &mut Graph,
    head: Var,
    preds: &RawPredictions,
    targets: &[TargetMaps],
) -> Result<(Var, DetectionLoss)> {
    let loss = detection_loss(preds, targets)?;
    let v = g.scalar_fn(loss.total, &[head], vec![loss.grad.clone()]);
    Ok((v, loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_id: usize,
}

/// Per-image detections with score strictly above `score_threshold`.
pub fn decode(preds: &RawPredictions, score_threshold: f64) -> Vec<Vec<Detection>> {
    let (gh, gw) = preds.grid();
    let (ih, iw) = preds.image_size;
    let s = preds.stride as f64;
    let k = preds.num_classes;
    (0..preds.batch())
        .map(|n| {
            let mut out = Vec::new();
            for cell in 0..gh * gw {
                let objectness = sigmoid(preds.at(n, k, cell));
                let logits: Vec<f64> = (0..k).map(|c| preds.at(n, c, cell)).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                let (best, _) =
                    logits.iter().enumerate().fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (c, &l)| if l > acc.1 { (c, l) } else { acc },
                    );
                let score = objectness / z;
                if score <= score_threshold {
                    continue;
                }
                let (cx, cy) = cell_center(cell, (gh, gw), preds.stride);
                let d: Vec<f64> = (0..4)
                    .map(|side| offset_exp(preds.at(n, k + 1 + side, cell)).0 * s)
                    .collect();
                let bbox = BoundingBox::new(
                    (cx - d[0]).clamp(0.0, iw as f64),
                    (cy - d[1]).clamp(0.0, ih as f64),
                    (cx + d[2]).clamp(0.0, iw as f64),
                    (cy + d[3]).clamp(0.0, ih as f64),
                    best,
                );
                if bbox.is_valid() {
                    out.push(Detection {
                        bbox,
                        score,
                        class_id: best,
                    });
                }
            }
            out
        })
        .collect()
}

/// Greedy per-class non-maximum suppression. Candidates are visited by
/// descending score, ties by lower input index; a candidate is dropped when
/// it overlaps an already kept box of its class with IoU above the threshold.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}
