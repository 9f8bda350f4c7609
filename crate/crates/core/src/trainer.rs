//! Joint training: detection loss on labeled source batches plus the two
//! alignment losses, optimized with SGD and momentum.
//!
//! Every step draws one source batch and one target batch. All randomness of
//! step `t` (batch indices, weather views) derives from `(seed, t)`, so a run
//! resumed from a checkpoint continues exactly as the uninterrupted run.

use crate::autograd::{Graph, Var};
use crate::boxes::BoundingBox;
use crate::checkpoint::{describe, Checkpoint, CheckpointHeader, RngState, FORMAT_VERSION};
use crate::corruption::WeatherRanges;
use crate::detector::{assign_targets, detection_loss_node, network_input, RawPredictions};
use crate::error::{Error, Result};
use crate::evaluator::evaluate_model;
use crate::model::{Model, ModelConfig};
use crate::nn::Grad;
use crate::pixels::PixelGrid;
use crate::scenegen::{write_atomic, Dataset, Domain, LabeledImage, Split};
use crate::seed::{derive_seed, rng_for};
use crate::style_align::GrlConfig;
use crate::tensor::Tensor;
use crate::weather_contrast::{contrast_pairs, instance_pairs};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_VIEWS: u64 = 3;
const STREAM_TARGET_VIEWS: u64 = 4;

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SourceOnly,
    StyleOnly,
    WeatherOnly,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SourceOnly, Mode::StyleOnly, Mode::WeatherOnly, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::StyleOnly => "style_only",
            Mode::WeatherOnly => "weather_only",
            Mode::Full => "full",
        }
    }

    pub fn uses_style(self) -> bool {
        matches!(self, Mode::StyleOnly | Mode::Full)
    }

    pub fn uses_weather(self) -> bool {
        matches!(self, Mode::WeatherOnly | Mode::Full)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown mode {s:?}; expected one of source_only, style_only, weather_only, full"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Images per domain per step.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient norm limit.
    pub clip_norm: f64,
    pub lambda_sty: f64,
    pub lambda_wea: f64,
    /// Final gradient reversal strength.
    pub lambda_max: f64,
    pub tau: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Validate on source_test every this many steps (and at the last step).
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Weather ranges for the corrupted view of each instance.
    pub views: WeatherRanges,
    /// Also contrast instances of confident detections on target images.
    pub target_pseudo_boxes: bool,
    pub pseudo_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            clip_norm: 10.0,
            lambda_sty: 1.0,
            lambda_wea: 0.5,
            lambda_max: 0.1,
            tau: 0.2,
            seed: 0,
            mode: Mode::Full,
            eval_every: 250,
            checkpoint_every: 500,
            views: WeatherRanges::default(),
            target_pseudo_boxes: false,
            pseudo_threshold: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        for (name, v) in [
            ("lambda_sty", self.lambda_sty),
            ("lambda_wea", self.lambda_wea),
            ("lambda_max", self.lambda_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be at least 1".into());
        }
        self.views.validate()
    }

    pub fn grl(&self) -> GrlConfig {
        GrlConfig {
            lambda_max: self.lambda_max,
        }
    }
}

/// Labeled images drawn from one split.
#[derive(Clone, Debug)]
pub struct SourceBatch {
    pub split: Split,
    pub images: Vec<LabeledImage>,
}

/// Pixels only; a target batch cannot carry labels.
#[derive(Clone, Debug)]
pub struct TargetBatch {
    pub split: Split,
    pub images: Vec<PixelGrid>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossComponents {
    pub det: f64,
    pub det_objectness: f64,
    pub det_class: f64,
    pub det_box: f64,
    /// Zero when the style branch is inactive.
    pub sty: f64,
    /// Zero when the weather branch is inactive or had fewer than two instances.
    pub wea: f64,
    pub total: f64,
    pub grl_lambda: f64,
    pub pos_cosine: Option<f64>,
    /// Discriminator accuracy on this step's batches.
    pub disc_accuracy: Option<f64>,
}

impl LossComponents {
    fn all_finite(&self) -> bool {
        [self.det, self.sty, self.wea, self.total].iter().all(|v| v.is_finite())
    }
}

impl fmt::Display for LossComponents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L_det={} (obj={} cls={} box={}) L_sty={} L_wea={} total={} grl_lambda={}",
            self.det,
            self.det_objectness,
            self.det_class,
            self.det_box,
            self.sty,
            self.wea,
            self.total,
            self.grl_lambda
        )
    }
}

/// Everything a run needs to continue: step counter, parameters, momentum
/// buffers, RNG position and best validation score so far.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    pub velocity: Vec<Tensor>,
    pub rng: RngState,
    pub best_val_map: Option<f64>,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, config: &TrainConfig) -> Result<Self> {
        let model = Model::new(model_config, derive_seed(config.seed, &[0]))?;
        let velocity = model
            .store
            .ids()
            .map(|id| Tensor::zeros(model.store.get(id).shape()))
            .collect();
        Ok(Self {
            step: 0,
            model,
            velocity,
            rng: RngState {
                seed: config.seed,
                counter: 0,
            },
            best_val_map: None,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let store = &self.model.store;
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: self.model.config.clone(),
                train: config.clone(),
                step: self.step,
                rng: self.rng,
                best_val_map: self.best_val_map,
                tensors: describe(store),
            },
            params: store.ids().map(|id| store.get(id).clone()).collect(),
            velocity: self.velocity.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        Ok(Self {
            step: ckpt.header.step,
            model,
            velocity: ckpt.velocity.clone(),
            rng: ckpt.header.rng,
            best_val_map: ckpt.header.best_val_map,
        })
    }
}

fn check_batches(source: &SourceBatch, target: &TargetBatch) -> Result<()> {
    if source.split != Split::SourceTrain {
        return Err(Error::LabelLeak(format!(
            "source batch must come from source_train, got {}",
            source.split
        )));
    }
    if target.split != Split::TargetTrain {
        return Err(Error::LabelLeak(format!(
            "target batch must come from target_train, got {}",
            target.split
        )));
    }
    if source.images.is_empty() {
        return Err(Error::Batch("empty source batch".into()));
    }
    Ok(())
}

struct Forward {
    graph: Graph,
    root: Var,
    components: LossComponents,
}

fn forward(model: &Model, source: &SourceBatch, target: &TargetBatch, step: u64, cfg: &TrainConfig) -> Result<Forward> {
    check_batches(source, target)?;
    let det = &model.detector;
    let store = &model.store;
    let stride = det.config.stride();
    let src_px: Vec<&PixelGrid> = source.images.iter().map(|x| &x.pixels).collect();
    let (h, w) = (src_px[0].height(), src_px[0].width());
    let grid = det.grid_for(h, w)?;

    let mut g = Graph::new();
    let xs = g.input(network_input(&src_px));
    let fs = det.backbone(&mut g, store, xs, Grad::Track);
    let head = det.head(&mut g, store, fs, Grad::Track);
    let preds = RawPredictions::new(g.value(head).clone(), det.config.num_classes, stride, (h, w))?;
    let targets: Vec<_> = source
        .images
        .iter()
        .map(|x| assign_targets(&x.boxes, grid, stride))
        .collect();
    let (l_det, det_parts) = detection_loss_node(&mut g, head, &preds, &targets)?;

    let grl_lambda = if cfg.mode.uses_style() {
        cfg.grl().lambda_at(step, cfg.steps)
    } else {
        0.0
    };
    let mut terms = vec![(l_det, 1.0)];
    let mut components = LossComponents {
        det: det_parts.total,
        det_objectness: det_parts.objectness,
        det_class: det_parts.class,
        det_box: det_parts.box_iou,
        sty: 0.0,
        wea: 0.0,
        total: 0.0,
        grl_lambda,
        pos_cosine: None,
        disc_accuracy: None,
    };

    let needs_target_features = cfg.mode.uses_style() || (cfg.mode.uses_weather() && cfg.target_pseudo_boxes);
    let ft = if needs_target_features && !target.images.is_empty() {
        let tgt_px: Vec<&PixelGrid> = target.images.iter().collect();
        let xt = g.input(network_input(&tgt_px));
        Some(det.backbone(&mut g, store, xt, Grad::Track))
    } else {
        None
    };

    if cfg.mode.uses_style() {
        let ft = ft.ok_or_else(|| Error::Batch("style alignment needs a non-empty target batch".into()))?;
        let (l_sty, out) = model
            .style
            .loss_on_tape(&mut g, store, fs, ft, grl_lambda, Grad::Track)?;
        components.sty = out.loss;
        components.disc_accuracy = Some(out.accuracy());
        terms.push((l_sty, cfg.lambda_sty));
    }

    if cfg.mode.uses_weather() {
        let mut pairs = Vec::new();
        let seed = derive_seed(cfg.seed, &[STREAM_VIEWS, step]);
        pairs.extend(instance_pairs(
            &mut g,
            store,
            det,
            &source.images,
            fs,
            &cfg.views,
            seed,
            Grad::Track,
        )?);
        if let (true, Some(ft)) = (cfg.target_pseudo_boxes, ft) {
            let pseudo: Vec<LabeledImage> = target
                .images
                .iter()
                .map(|px| LabeledImage {
                    pixels: px.clone(),
                    boxes: pseudo_boxes(model, px, cfg.pseudo_threshold),
                    domain: Domain::TargetAdverse,
                    corruption: None,
                })
                .collect();
            let seed = derive_seed(cfg.seed, &[STREAM_TARGET_VIEWS, step]);
            pairs.extend(instance_pairs(
                &mut g,
                store,
                det,
                &pseudo,
                ft,
                &cfg.views,
                seed,
                Grad::Track,
            )?);
        }
        let (l_wea, out) = contrast_pairs(&mut g, store, &model.projector, &pairs, cfg.tau, Grad::Track)?;
        if let Some(l_wea) = l_wea {
            components.wea = out.loss.unwrap_or(0.0);
            components.pos_cosine = out.pos_cosine;
            terms.push((l_wea, cfg.lambda_wea));
        }
    }

    let root = if terms.len() == 1 { l_det } else { g.combine(&terms) };
    components.total = g.value(root).item();
    Ok(Forward {
        graph: g,
        root,
        components,
    })
}

/// `L = L_det + λ_sty·L_sty + λ_wea·L_wea` with the terms the mode enables.
pub fn total_loss(
    source: &SourceBatch,
    target: &TargetBatch,
    state: &TrainState,
    config: &TrainConfig,
) -> Result<LossComponents> {
    Ok(forward(&state.model, source, target, state.step, config)?.components)
}

/// One SGD step with momentum (`v ← μv + g`, `θ ← θ − lr·v`) after clipping
/// the global gradient norm.
pub fn train_step(
    state: &mut TrainState,
    source: &SourceBatch,
    target: &TargetBatch,
    config: &TrainConfig,
) -> Result<LossComponents> {
    let fwd = forward(&state.model, source, target, state.step, config)?;
    let components = fwd.components;
    if !components.all_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            components: components.to_string(),
        });
    }
    let grads = fwd.graph.backward(fwd.root).param_grads(&state.model.store);
    let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            components: format!("{components} grad_norm={norm}"),
        });
    }
    let scale = if norm > config.clip_norm {
        config.clip_norm / norm
    } else {
        1.0
    };
    let ids: Vec<_> = state.model.store.ids().collect();
    for (id, (v, gr)) in ids.into_iter().zip(state.velocity.iter_mut().zip(&grads)) {
        match gr {
            Some(gr) => {
                for (vi, gi) in v.data_mut().iter_mut().zip(gr.data()) {
                    *vi = config.momentum * *vi + scale * gi;
                }
            }
            None => v.data_mut().iter_mut().for_each(|vi| *vi *= config.momentum),
        }
        let p = state.model.store.get_mut(id);
        for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
            *pi -= config.lr * vi;
        }
    }
    state.step += 1;
    state.rng.counter = state.step;
    Ok(components)
}

/// Detections above `score_threshold` after NMS, as boxes.
pub fn pseudo_boxes(model: &Model, image: &PixelGrid, score_threshold: f64) -> Vec<BoundingBox> {
    model
        .detect(&[image], score_threshold)
        .map(|mut d| d.remove(0).into_iter().map(|d| d.bbox).collect())
        .unwrap_or_default()
}

/// Training inputs. Target images are loaded without labels.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Vec<LabeledImage>,
    pub target: Vec<PixelGrid>,
    pub val: Vec<LabeledImage>,
}

impl TrainData {
    pub fn load(dataset: &Dataset) -> Result<Self> {
        Ok(Self {
            source: dataset.labeled(Split::SourceTrain)?,
            target: dataset.unlabeled(Split::TargetTrain)?,
            val: dataset.labeled(Split::SourceTest)?,
        })
    }

    /// Batches for `step`, drawn without replacement within each domain.
    pub fn batches(&self, config: &TrainConfig, step: u64) -> Result<(SourceBatch, TargetBatch)> {
        if self.source.is_empty() {
            return Err(Error::Batch("source_train is empty".into()));
        }
        let pick = |n: usize, stream: u64| -> Vec<usize> {
            if n == 0 {
                return Vec::new();
            }
            let mut rng = rng_for(config.seed, &[stream, step]);
            sample(&mut rng, n, config.batch_size.min(n)).into_vec()
        };
        Ok((
            SourceBatch {
                split: Split::SourceTrain,
                images: pick(self.source.len(), STREAM_SOURCE)
                    .into_iter()
                    .map(|i| self.source[i].clone())
                    .collect(),
            },
            TargetBatch {
                split: Split::TargetTrain,
                images: pick(self.target.len(), STREAM_TARGET)
                    .into_iter()
                    .map(|i| self.target[i].clone())
                    .collect(),
            },
        ))
    }
}

/// One metrics CSV row; empty cells mean "not measured at this step".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    #[serde(rename = "L_det")]
    pub l_det: f64,
    #[serde(rename = "L_sty")]
    pub l_sty: f64,
    #[serde(rename = "L_wea")]
    pub l_wea: f64,
    pub total: f64,
    pub grl_lambda: f64,
    pub pos_cosine: Option<f64>,
    pub val_map: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "step",
            "L_det",
            "L_sty",
            "L_wea",
            "total",
            "grl_lambda",
            "pos_cosine",
            "val_map",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.ckpt"))
}

/// Run `config.steps` optimizer steps (continuing from `resume` if given),
/// validating on source_test and writing metrics and checkpoints under
/// `out_dir`.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainSummary> {
    config.validate()?;
    let data = TrainData::load(dataset)?;
    train_on(config, model_config, &data, out_dir, resume)
}

pub fn train_on(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &TrainData,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let (mut state, mut rows) = match resume {
        Some(ckpt) => {
            let state = TrainState::from_checkpoint(ckpt)?;
            let rows = if metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|r| r.step <= state.step)
                    .collect()
            } else {
                Vec::new()
            };
            (state, rows)
        }
        None => (TrainState::new(model_config.clone(), config)?, Vec::new()),
    };
    let mut best_checkpoint = None;
    let mut final_checkpoint = checkpoint_path(out_dir, state.step);
    while state.step < config.steps {
        let (src, tgt) = data.batches(config, state.step)?;
        let c = match train_step(&mut state, &src, &tgt, config) {
            Ok(c) => c,
            Err(e) => {
                write_atomic(&metrics_path, &metrics_csv(&rows)?)?;
                return Err(e);
            }
        };
        let step = state.step;
        let last = step == config.steps;
        let val_map = if (step % config.eval_every == 0 || last) && !data.val.is_empty() {
            Some(evaluate_model(&state.model, &data.val, Split::SourceTest.name(), "")?.map50)
        } else {
            None
        };
        rows.push(MetricsRow {
            step,
            l_det: c.det,
            l_sty: c.sty,
            l_wea: c.wea,
            total: c.total,
            grl_lambda: c.grl_lambda,
            pos_cosine: c.pos_cosine,
            val_map,
        });
        if let Some(m) = val_map {
            if state.best_val_map.is_none_or(|b| m > b) {
                state.best_val_map = Some(m);
                let path = out_dir.join(BEST_CHECKPOINT);
                state.to_checkpoint(config).save(&path)?;
                best_checkpoint = Some(path);
            }
        }
        if step % config.checkpoint_every == 0 || last {
            final_checkpoint = checkpoint_path(out_dir, step);
            state.to_checkpoint(config).save(&final_checkpoint)?;
            write_atomic(&metrics_path, &metrics_csv(&rows)?)?;
        }
    }
    write_atomic(&metrics_path, &metrics_csv(&rows)?)?;
    Ok(TrainSummary {
        state,
        rows,
        final_checkpoint,
        best_checkpoint,
    })
}
