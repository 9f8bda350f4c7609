//! Instance-level weather alignment.
//!
//! Each labeled source image is paired with a weather-corrupted copy. Because
//! corruptions are photometric, the ground-truth boxes are shared by both
//! views, so every box yields a positive pair of instance features. Features
//! are pooled over the box, projected onto the unit sphere and trained with
//! an in-batch InfoNCE loss in both directions.

use crate::autograd::{Graph, ParamStore, Var};
use crate::boxes::BoundingBox;
use crate::corruption::{corrupt, CorruptionRecord, WeatherRanges};
use crate::detector::{cell_center, network_input, Detector, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::{Grad, Init, Linear};
use crate::scenegen::LabeledImage;
use crate::seed::derive_seed;
use crate::seed::rng_for;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Clean,
    Weather,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFeature {
    pub vector: Vec<f64>,
    pub source_box: BoundingBox,
    pub image_id: usize,
    pub view: View,
}

/// Unit-norm projection of an instance feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub z: Vec<f64>,
}

impl Embedding {
    pub fn dot(&self, other: &Embedding) -> f64 {
        self.z.iter().zip(&other.z).map(|(a, b)| a * b).sum()
    }
}

/// Clean copy and weather-corrupted copy of a source image. The weather
/// parameters are drawn from `weather` with `seed`.
pub fn make_views(x: &LabeledImage, weather: &WeatherRanges, seed: u64) -> Result<(LabeledImage, LabeledImage)> {
    let mut rng = rng_for(seed, &[0]);
    let params = weather.sample(&mut rng);
    let record = CorruptionRecord {
        style: None,
        weather: Some(params),
        seed: rng.random(),
    };
    let (pixels, record) = corrupt(&x.pixels, &record)?;
    let weather_view = LabeledImage {
        pixels,
        boxes: x.boxes.clone(),
        domain: x.domain,
        corruption: Some(record),
    };
    Ok((x.clone(), weather_view))
}

/// Flat indices of the cells pooled for a box: those whose centers lie in
/// the box, or else the single cell whose center is nearest to the box
/// center (lowest index on ties).
pub fn pooled_cells(b: &BoundingBox, grid: (usize, usize), stride: usize) -> Vec<usize> {
    let centers = (0..grid.0 * grid.1).map(|c| (c, cell_center(c, grid, stride)));
    let cells: Vec<usize> = centers
        .clone()
        .filter(|&(_, (x, y))| b.contains_point(x, y))
        .map(|(c, _)| c)
        .collect();
    if !cells.is_empty() {
        return cells;
    }
    let (bx, by) = b.center();
    let nearest = centers
        .map(|(c, (x, y))| (c, (x - bx).powi(2) + (y - by).powi(2)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    vec![nearest.0]
}

/// Mean feature column over the box's pooled cells of an unbatched map.
pub fn pool_instance(f: &FeatureMap, b: &BoundingBox, image_id: usize, view: View) -> InstanceFeature {
    let (c, (h, w)) = (f.channels(), f.grid());
    let cells = pooled_cells(b, (h, w), f.stride);
    let plane = h * w;
    let vector = (0..c)
        .map(|ch| {
            cells
                .iter()
                .map(|&cell| f.values.data()[ch * plane + cell])
                .sum::<f64>()
                / cells.len() as f64
        })
        .collect();
    InstanceFeature {
        vector,
        source_box: *b,
        image_id,
        view,
    }
}

/// Two-layer MLP head followed by L2 normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub hidden: Linear,
    pub out: Linear,
}

impl Projector {
    pub fn new(store: &mut ParamStore, in_dim: usize, hidden: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(store, "proj.hidden", in_dim, hidden, Init::He, rng),
            out: Linear::new(store, "proj.out", hidden, embed_dim, Init::He, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, grad: Grad) -> Var {
        let h = self.hidden.forward(g, store, x, grad);
        let h = g.relu(h);
        let z = self.out.forward(g, store, h, grad);
        g.l2_normalize(z, NORM_EPS)
    }

    pub fn project(&self, store: &ParamStore, v: &InstanceFeature) -> Embedding {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, v.vector.len()], v.vector.clone()));
        let z = self.forward(&mut g, store, x, Grad::Freeze);
        Embedding {
            z: g.value(z).data().to_vec(),
        }
    }
}

/// InfoNCE over dot-product similarities with in-batch negatives, plus its
/// gradients with respect to both `[B, D]` inputs.
pub fn info_nce_with_grad(anchors: &Tensor, positives: &Tensor, tau: f64) -> Result<(f64, Tensor, Tensor)> {
    if anchors.shape() != positives.shape() || anchors.shape().len() != 2 {
        return Err(Error::Batch(format!(
            "anchor/positive shapes differ: {:?} vs {:?}",
            anchors.shape(),
            positives.shape()
        )));
    }
    let (b, d) = (anchors.dim(0), anchors.dim(1));
    if b < 2 {
        return Err(Error::Batch(format!("InfoNCE needs at least 2 pairs, got {b}")));
    }
    if !(tau > 0.0) {
        return Err(Error::ParamDomain(format!("temperature must be > 0, got {tau}")));
    }
    let mut ga = Tensor::zeros(anchors.shape());
    let mut gp = Tensor::zeros(positives.shape());
    let mut loss = 0.0;
    let mut logits = vec![0.0; b];
    for i in 0..b {
        let a = anchors.row(i);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = a.iter().zip(positives.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - logits[i];
        for (j, l) in logits.iter().enumerate() {
            let p = (l - lse).exp();
            let ds = (p - if i == j { 1.0 } else { 0.0 }) / (tau * b as f64);
            for k in 0..d {
                ga.data_mut()[i * d + k] += ds * positives.data()[j * d + k];
                gp.data_mut()[j * d + k] += ds * anchors.data()[i * d + k];
            }
        }
    }
    Ok((loss / b as f64, ga, gp))
}

/// `mean_i −ln(exp(s_ii/τ) / Σ_j exp(s_ij/τ))` with `s_ij = anchors[i]·positives[j]`.
pub fn info_nce(anchors: &[Embedding], positives: &[Embedding], tau: f64) -> Result<f64> {
    if anchors.len() != positives.len() {
        return Err(Error::Batch(format!(
            "{} anchors vs {} positives",
            anchors.len(),
            positives.len()
        )));
    }
    let to_tensor = |e: &[Embedding]| {
        let d = e.first().map_or(0, |x| x.z.len());
        Tensor::from_vec(&[e.len(), d], e.iter().flat_map(|x| x.z.iter().copied()).collect())
    };
    Ok(info_nce_with_grad(&to_tensor(anchors), &to_tensor(positives), tau)?.0)
}

pub fn info_nce_on_tape(g: &mut Graph, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    let (loss, ga, gp) = info_nce_with_grad(g.value(anchors), g.value(positives), tau)?;
    Ok(g.scalar_fn(loss, &[anchors, positives], vec![ga, gp]))
}

/// Symmetric InfoNCE between matching rows of two embedding batches.
pub fn symmetric_info_nce_on_tape(g: &mut Graph, clean: Var, weather: Var, tau: f64) -> Result<Var> {
    let fwd = info_nce_on_tape(g, clean, weather, tau)?;
    let bwd = info_nce_on_tape(g, weather, clean, tau)?;
    Ok(g.combine(&[(fwd, 0.5), (bwd, 0.5)]))
}

/// Pooling groups `(image index, cells)` for every box of a batch, in order.
pub fn instance_groups(boxes: &[Vec<BoundingBox>], grid: (usize, usize), stride: usize) -> Vec<(usize, Vec<usize>)> {
    boxes
        .iter()
        .enumerate()
        .flat_map(|(img, bs)| bs.iter().map(move |b| (img, pooled_cells(b, grid, stride))))
        .collect()
}

/// Mean cosine similarity between matching rows of two unit-norm batches.
pub fn mean_pair_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.dim(0);
    (0..n)
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum::<f64>())
        .sum::<f64>()
        / n as f64
}

/// Result of one weather alignment evaluation; `None` loss means the batch
/// held fewer than two instances and the branch was skipped.
#[derive(Clone, Debug)]
pub struct WeatherLossOutput {
    pub loss: Option<f64>,
    pub clean: Option<Tensor>,
    pub weather: Option<Tensor>,
    pub pos_cosine: Option<f64>,
}

impl WeatherLossOutput {
    pub fn skipped() -> Self {
        Self {
            loss: None,
            clean: None,
            weather: None,
            pos_cosine: None,
        }
    }
}

/// Pooled `[M, C]` instance features of every box of `images`, from the
/// clean feature node `clean` and from a weather view built per image with
/// seed `derive_seed(seed, [i])`. `None` when the images hold no boxes.
#[allow(clippy::too_many_arguments)]
pub fn instance_pairs(
    g: &mut Graph,
    store: &ParamStore,
    detector: &Detector,
    images: &[LabeledImage],
    clean: Var,
    weather: &WeatherRanges,
    seed: u64,
    grad: Grad,
) -> Result<Option<(Var, Var)>> {
    let boxes: Vec<Vec<BoundingBox>> = images.iter().map(|x| x.boxes.clone()).collect();
    let s = g.value(clean).shape().to_vec();
    let groups = instance_groups(&boxes, (s[2], s[3]), detector.config.stride());
    if groups.is_empty() {
        return Ok(None);
    }
    let mut views = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        views.push(make_views(img, weather, derive_seed(seed, &[i as u64]))?.1);
    }
    let xw = g.input(network_input(&views.iter().map(|x| &x.pixels).collect::<Vec<_>>()));
    let fw = detector.backbone(g, store, xw, grad);
    let pc = g.pool_cells(clean, groups.clone());
    let pw = g.pool_cells(fw, groups);
    Ok(Some((pc, pw)))
}

/// Project stacked clean and weather instance rows and apply the symmetric
/// InfoNCE loss; skipped when there are fewer than two instances.
pub fn contrast_pairs(
    g: &mut Graph,
    store: &ParamStore,
    projector: &Projector,
    pairs: &[(Var, Var)],
    tau: f64,
    grad: Grad,
) -> Result<(Option<Var>, WeatherLossOutput)> {
    let n: usize = pairs.iter().map(|&(c, _)| g.value(c).dim(0)).sum();
    if n < 2 {
        return Ok((None, WeatherLossOutput::skipped()));
    }
    let clean: Vec<Var> = pairs.iter().map(|p| p.0).collect();
    let weather: Vec<Var> = pairs.iter().map(|p| p.1).collect();
    let pc = g.concat_rows(&clean);
    let pw = g.concat_rows(&weather);
    let zc = projector.forward(g, store, pc, grad);
    let zw = projector.forward(g, store, pw, grad);
    let loss = symmetric_info_nce_on_tape(g, zc, zw, tau)?;
    let (zc, zw) = (g.value(zc).clone(), g.value(zw).clone());
    let out = WeatherLossOutput {
        loss: Some(g.value(loss).item()),
        pos_cosine: Some(mean_pair_cosine(&zc, &zw)),
        clean: Some(zc),
        weather: Some(zw),
    };
    Ok((Some(loss), out))
}
