//! Image-level style alignment.
//!
//! Style is summarized by per-channel spatial statistics (mean, std) of the
//! last backbone feature map. An attention gate computed from those
//! statistics reweights channels, and a domain discriminator tries to tell
//! source from target from the gated statistics. A gradient reversal layer
//! between the gate and the discriminator turns the discriminator's
//! objective into an alignment signal for the backbone and the gate.

use crate::autograd::{sigmoid, Graph, ParamStore, Var};
use crate::detector::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Grad, Init, Linear};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const STYLE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StyleStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn concat(&self) -> Vec<f64> {
        self.mean.iter().chain(&self.std).copied().collect()
    }
}

/// Per-channel spatial mean and `sqrt(variance + STYLE_EPS)` of an unbatched map.
pub fn style_stats(f: &FeatureMap) -> Result<StyleStats> {
    let s = f.values.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("style_stats expects (C, H, W), got {s:?}")));
    }
    let plane = s[1] * s[2];
    if plane < 2 {
        return Err(Error::Shape(format!(
            "spatial size {plane} is too small for statistics"
        )));
    }
    let (mut mean, mut std) = (Vec::with_capacity(s[0]), Vec::with_capacity(s[0]));
    for ch in f.values.data().chunks(plane) {
        let m = ch.iter().sum::<f64>() / plane as f64;
        let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
        mean.push(m);
        std.push((var + STYLE_EPS).sqrt());
    }
    Ok(StyleStats { mean, std })
}

/// Channel gate, each weight in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w: Vec<f64>,
}

/// Gradient reversal strength with the usual warm-up
/// `λ(t) = λ_max · (2 / (1 + exp(−10 t / T)) − 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlConfig {
    pub lambda_max: f64,
}

impl GrlConfig {
    pub fn lambda_at(&self, step: u64, total_steps: u64) -> f64 {
        let p = step as f64 / total_steps.max(1) as f64;
        self.lambda_max * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
    }
}

/// Which side of the gradient reversal the attention gate sits on. The loss
/// value is the same either way; only the gate's training signal differs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePlacement {
    /// `D(grl(gate(s) ⊙ s))`: the gate is trained with the feature extractor.
    FeatureSide,
    /// `D(gate(r) ⊙ r)` with `r = grl(s)`: the gate is trained with the
    /// discriminator and picks the channels it finds most domain-specific.
    #[default]
    DiscriminatorSide,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleBranch {
    pub channels: usize,
    pub placement: GatePlacement,
    pub attn_hidden: Linear,
    pub attn_out: Linear,
    pub disc_hidden: Linear,
    pub disc_out: Linear,
}

/// Intermediate values of one adversarial style loss evaluation.
#[derive(Clone, Debug)]
pub struct StyleLossOutput {
    pub loss: f64,
    /// Discriminator logits, source rows first.
    pub logits: Vec<f64>,
    pub n_source: usize,
}

impl StyleLossOutput {
    /// Fraction of images the discriminator assigns to the right domain.
    pub fn accuracy(&self) -> f64 {
        let correct = self
            .logits
            .iter()
            .enumerate()
            .filter(|&(i, &z)| (i < self.n_source) == (z < 0.0))
            .count();
        correct as f64 / self.logits.len() as f64
    }
}

impl StyleBranch {
    /// Attention bottleneck is `channels / reduction`; output layers start at zero.
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        reduction: usize,
        disc_hidden: usize,
        placement: GatePlacement,
        rng: &mut impl Rng,
    ) -> Self {
        let bottleneck = (channels / reduction.max(1)).max(1);
        Self {
            channels,
            placement,
            attn_hidden: Linear::new(store, "style.attn.hidden", 2 * channels, bottleneck, Init::He, rng),
            attn_out: Linear::new(store, "style.attn.out", bottleneck, channels, Init::Zeros, rng),
            disc_hidden: Linear::new(store, "style.disc.hidden", 2 * channels, disc_hidden, Init::He, rng),
            disc_out: Linear::new(store, "style.disc.out", disc_hidden, 1, Init::Zeros, rng),
        }
    }

    /// `[N, 2C]` statistics → `[N, C]` gate.
    pub fn attention(&self, g: &mut Graph, store: &ParamStore, stats: Var, grad: Grad) -> Var {
        let h = self.attn_hidden.forward(g, store, stats, grad);
        let h = g.relu(h);
        let z = self.attn_out.forward(g, store, h, grad);
        g.sigmoid(z)
    }

    /// `concat(w ⊙ mean, w ⊙ std)` for a batched feature node `[N, C, H, W]`.
    pub fn gated_stats(&self, g: &mut Graph, store: &ParamStore, features: Var, grad: Grad) -> Var {
        let mean = g.channel_mean(features);
        let std = g.channel_std(features, STYLE_EPS);
        self.gate(g, store, mean, std, grad)
    }

    fn gate(&self, g: &mut Graph, store: &ParamStore, mean: Var, std: Var, grad: Grad) -> Var {
        let stats = g.concat(&[mean, std]);
        let w = self.attention(g, store, stats, grad);
        let gm = g.mul(w, mean);
        let gs = g.mul(w, std);
        g.concat(&[gm, gs])
    }

    /// Gated statistics with the gradient reversal inserted according to
    /// [`GatePlacement`].
    pub fn reversed_gated_stats(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        lambda: f64,
        grad: Grad,
    ) -> Var {
        match self.placement {
            GatePlacement::FeatureSide => {
                let gated = self.gated_stats(g, store, features, grad);
                g.grl(gated, lambda)
            }
            GatePlacement::DiscriminatorSide => {
                let mean = g.channel_mean(features);
                let std = g.channel_std(features, STYLE_EPS);
                let mean = g.grl(mean, lambda);
                let std = g.grl(std, lambda);
                self.gate(g, store, mean, std, grad)
            }
        }
    }

    /// `[N, 2C]` → `[N, 1]` domain logits (target = 1).
    pub fn discriminate(&self, g: &mut Graph, store: &ParamStore, gated: Var, grad: Grad) -> Var {
        let h = self.disc_hidden.forward(g, store, gated, grad);
        let h = g.relu(h);
        self.disc_out.forward(g, store, h, grad)
    }

    /// Adversarial loss on the tape:
    /// `mean BCE(D(grl(gated(source))), 0) + mean BCE(D(grl(gated(target))), 1)`.
    pub fn loss_on_tape(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        source: Var,
        target: Var,
        lambda: f64,
        grad: Grad,
    ) -> Result<(Var, StyleLossOutput)> {
        let (cs, ct) = (g.value(source).dim(1), g.value(target).dim(1));
        if cs != ct || cs != self.channels {
            return Err(Error::Shape(format!(
                "style branch expects {} channels, got source {cs} / target {ct}",
                self.channels
            )));
        }
        let rs = self.reversed_gated_stats(g, store, source, lambda, grad);
        let rt = self.reversed_gated_stats(g, store, target, lambda, grad);
        let zs = self.discriminate(g, store, rs, grad);
        let zt = self.discriminate(g, store, rt, grad);
        let ls = bce_with_logits(g, zs, 0.0);
        let lt = bce_with_logits(g, zt, 1.0);
        let total = g.combine(&[(ls, 1.0), (lt, 1.0)]);
        let logits = g.value(zs).data().iter().chain(g.value(zt).data()).copied().collect();
        Ok((
            total,
            StyleLossOutput {
                loss: g.value(total).item(),
                logits,
                n_source: g.value(zs).len(),
            },
        ))
    }

    /// Attention gate for one set of statistics.
    pub fn style_attention(&self, store: &ParamStore, s: &StyleStats) -> AttentionWeights {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 2 * s.channels()], s.concat()));
        let w = self.attention(&mut g, store, x, Grad::Freeze);
        AttentionWeights {
            w: g.value(w).data().to_vec(),
        }
    }

    /// Discriminator logit for one gated statistics vector of length `2C`.
    pub fn discriminate_vector(&self, store: &ParamStore, gated: &[f64]) -> f64 {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, gated.len()], gated.to_vec()));
        let z = self.discriminate(&mut g, store, x, Grad::Freeze);
        g.value(z).item()
    }

    /// Loss value for batched `(N, C, H, W)` source and target maps.
    pub fn adversarial_style_loss(
        &self,
        store: &ParamStore,
        source: &FeatureMap,
        target: &FeatureMap,
        lambda: f64,
    ) -> Result<StyleLossOutput> {
        let mut g = Graph::new();
        let s = g.input(source.values.clone());
        let t = g.input(target.values.clone());
        Ok(self.loss_on_tape(&mut g, store, s, t, lambda, Grad::Freeze)?.1)
    }
}

/// Mean binary cross-entropy of a logit column against a constant label.
pub fn bce_with_logits(g: &mut Graph, logits: Var, label: f64) -> Var {
    let z = g.value(logits);
    let n = z.len() as f64;
    let mut grad = Tensor::zeros(z.shape());
    let mut loss = 0.0;
    for (gv, &zi) in grad.data_mut().iter_mut().zip(z.data()) {
        let sp = if zi > 0.0 {
            zi + (-zi).exp().ln_1p()
        } else {
            zi.exp().ln_1p()
        };
        loss += sp - label * zi;
        *gv = (sigmoid(zi) - label) / n;
    }
    g.scalar_fn(loss / n, &[logits], vec![grad])
}
