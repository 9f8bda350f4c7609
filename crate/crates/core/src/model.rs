//! The full network: detector, style branch and instance projector sharing
//! one parameter store.

use crate::autograd::{Graph, ParamStore};
use crate::corruption::WeatherRanges;
use crate::detector::{decode, nms, Detection, Detector, DetectorConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::Grad;
use crate::pixels::PixelGrid;
use crate::scenegen::LabeledImage;
use crate::seed::{derive_seed, rng_for};
use crate::style_align::{GatePlacement, StyleBranch};
use crate::tensor::Tensor;
use crate::weather_contrast::{
    contrast_pairs, instance_groups, instance_pairs, make_views, mean_pair_cosine, Projector, WeatherLossOutput,
};
use serde::{Deserialize, Serialize};

/// Score threshold used when decoding for evaluation.
pub const EVAL_SCORE_THRESHOLD: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub attention_reduction: usize,
    pub gate_placement: GatePlacement,
    pub disc_hidden: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            attention_reduction: 4,
            gate_placement: GatePlacement::default(),
            disc_hidden: 64,
            proj_hidden: 64,
            embed_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.attention_reduction == 0 || self.disc_hidden == 0 || self.proj_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub detector: Detector,
    pub style: StyleBranch,
    pub projector: Projector,
}

impl Model {
    /// Fresh model; all initial weights derive from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, &[0x1417]);
        let detector = Detector::new(&mut store, config.detector.clone(), &mut rng)?;
        let c = config.detector.feature_channels();
        let style = StyleBranch::new(
            &mut store,
            c,
            config.attention_reduction,
            config.disc_hidden,
            config.gate_placement,
            &mut rng,
        );
        let projector = Projector::new(&mut store, c, config.proj_hidden, config.embed_dim, &mut rng);
        Ok(Self {
            config,
            store,
            detector,
            style,
            projector,
        })
    }

    /// Per-image detections after decoding above `score_threshold` and NMS.
    pub fn detect(&self, images: &[&PixelGrid], score_threshold: f64) -> Result<Vec<Vec<Detection>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let (preds, _) = self.detector.predict(&self.store, chunk)?;
            out.extend(decode(&preds, score_threshold).iter().map(|d| nms(d, NMS_IOU)));
        }
        Ok(out)
    }

    /// Batched backbone features `(N, C, H_f, W_f)`.
    pub fn features(&self, images: &[&PixelGrid]) -> Result<FeatureMap> {
        let (h, w) = (images[0].height(), images[0].width());
        self.detector.grid_for(h, w)?;
        let mut g = Graph::new();
        let x = g.input(crate::detector::network_input(images));
        let f = self.detector.backbone(&mut g, &self.store, x, Grad::Freeze);
        Ok(FeatureMap {
            values: g.value(f).clone(),
            stride: self.detector.config.stride(),
        })
    }

    /// Symmetric InfoNCE between clean and weather views of every box of
    /// `batch`, without gradients.
    pub fn weather_alignment_loss(
        &self,
        batch: &[LabeledImage],
        weather: &WeatherRanges,
        seed: u64,
        tau: f64,
    ) -> Result<WeatherLossOutput> {
        if batch.is_empty() {
            return Ok(WeatherLossOutput::skipped());
        }
        let mut g = Graph::new();
        let x = g.input(crate::detector::network_input(
            &batch.iter().map(|x| &x.pixels).collect::<Vec<_>>(),
        ));
        let f = self.detector.backbone(&mut g, &self.store, x, Grad::Freeze);
        let pairs = instance_pairs(
            &mut g,
            &self.store,
            &self.detector,
            batch,
            f,
            weather,
            seed,
            Grad::Freeze,
        )?;
        let pairs: Vec<_> = pairs.into_iter().collect();
        Ok(contrast_pairs(&mut g, &self.store, &self.projector, &pairs, tau, Grad::Freeze)?.1)
    }

    /// Mean cosine similarity between pooled backbone features of each
    /// ground-truth instance in its clean view and in a weather view.
    pub fn instance_cosine(&self, images: &[LabeledImage], weather: &WeatherRanges, seed: u64) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (chunk_id, chunk) in images.chunks(EVAL_BATCH).enumerate() {
            let mut views = Vec::with_capacity(chunk.len());
            for (i, img) in chunk.iter().enumerate() {
                let s = derive_seed(seed, &[(chunk_id * EVAL_BATCH + i) as u64]);
                views.push(make_views(img, weather, s)?.1);
            }
            let clean = self.features(&chunk.iter().map(|x| &x.pixels).collect::<Vec<_>>())?;
            let corrupted = self.features(&views.iter().map(|x| &x.pixels).collect::<Vec<_>>())?;
            let boxes: Vec<_> = chunk.iter().map(|x| x.boxes.clone()).collect();
            let groups = instance_groups(&boxes, clean.grid(), clean.stride);
            if groups.is_empty() {
                continue;
            }
            let n = groups.len();
            let a = unit_rows(&pool(&clean, &groups));
            let b = unit_rows(&pool(&corrupted, &groups));
            total += mean_pair_cosine(&a, &b) * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(Error::Batch("no instances to compare".into()));
        }
        Ok(total / count as f64)
    }
}

fn pool(f: &FeatureMap, groups: &[(usize, Vec<usize>)]) -> Tensor {
    let mut g = Graph::new();
    let x = g.input(f.values.clone());
    let p = g.pool_cells(x, groups.to_vec());
    g.value(p).clone()
}

fn unit_rows(t: &Tensor) -> Tensor {
    let d = t.dim(1);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(crate::weather_contrast::NORM_EPS);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}
