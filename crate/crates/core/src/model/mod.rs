//! Dual-head classifier constrained by the label tree.
//!
//! ```text
//! X ─► [conv3x3 → gain → ReLU → avgpool2] × B ─► map ─► GAP ─► f_l ─► C_ID
//!                                                 └─► conv3x3 → gain → ReLU ─► GAP ─► f_h ─► C_AG
//! ```
//!
//! The section-ID loss constrains the low-level feature `f_l`, the
//! attribute-group loss constrains the high-level feature `f_h`, and the
//! training objective is `λ·L_ID + (1−λ)·L_AG`. Both losses backpropagate
//! through the shared backbone. `f_h` is the embedding used for scoring.

pub mod conv;
pub mod gradcheck;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::LogMelSpectrogram;
use crate::error::{HmicError, Result};
use conv::{avg_pool2, avg_pool2_backward, conv_backward, conv_forward, global_avg_pool};

pub use gradcheck::{gradient_check, GradCheckReport};
pub use train::{train, EpochLog, TrainConfig, TrainLog, TrainingSample};

/// Which heads drive the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Both heads, weighted by λ.
    #[default]
    Hmic,
    /// Section-ID head only (λ = 1); the AG head and `f_h` conv stay at init.
    DomainOnly,
    /// Attribute-group head only (λ = 0).
    AttributeOnly,
}

impl std::str::FromStr for Ablation {
    type Err = HmicError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hmic" => Ok(Ablation::Hmic),
            "domain_only" => Ok(Ablation::DomainOnly),
            "attribute_only" => Ok(Ablation::AttributeOnly),
            other => Err(HmicError::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub n_frames: usize,
    /// Output channels of each backbone block; the last one is `d_l`.
    pub backbone_channels: Vec<usize>,
    /// `d_h`.
    pub head_channels: usize,
    /// Fixed multiplier applied after every conv, standing in for a
    /// normalization layer.
    pub block_gain: f64,
    /// `S`, number of section-ID classes.
    pub n_sections: usize,
    /// `M_total`, number of attribute-group classes.
    pub n_groups: usize,
    pub lambda: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(HmicError::Config("backbone needs at least one non-empty block".into()));
        }
        if self.head_channels == 0 || self.n_sections == 0 || self.n_groups == 0 {
            return Err(HmicError::Config("head and class counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(HmicError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.block_gain.is_finite() && self.block_gain > 0.0) {
            return Err(HmicError::Config("block_gain must be positive".into()));
        }
        let (h, w) = self.map_shape();
        if h == 0 || w == 0 {
            return Err(HmicError::Config(format!(
                "{}x{} input is too small for {} pooling blocks",
                self.n_mels,
                self.n_frames,
                self.backbone_channels.len()
            )));
        }
        Ok(())
    }

    pub fn d_low(&self) -> usize {
        *self.backbone_channels.last().unwrap()
    }

    pub fn d_high(&self) -> usize {
        self.head_channels
    }

    /// Spatial size of the map after the backbone.
    pub fn map_shape(&self) -> (usize, usize) {
        self.backbone_channels
            .iter()
            .fold((self.n_mels, self.n_frames), |(h, w), _| (h / 2, w / 2))
    }

    /// Loss weights `(w_id, w_ag)` after applying the ablation mode.
    pub fn head_weights(&self) -> (f64, f64) {
        match self.ablation {
            Ablation::Hmic => (self.lambda, 1.0 - self.lambda),
            Ablation::DomainOnly => (1.0, 0.0),
            Ablation::AttributeOnly => (0.0, 1.0),
        }
    }

    fn tensor_specs(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in self.backbone_channels.iter().enumerate() {
            specs.push(TensorSpec::new(format!("backbone/{i}/weight"), vec![c_out, c_in, 3, 3], c_in * 9));
            specs.push(TensorSpec::new(format!("backbone/{i}/bias"), vec![c_out], c_in * 9));
            c_in = c_out;
        }
        let (dl, dh) = (self.d_low(), self.d_high());
        specs.push(TensorSpec::new("head/weight".into(), vec![dh, dl, 3, 3], dl * 9));
        specs.push(TensorSpec::new("head/bias".into(), vec![dh], dl * 9));
        specs.push(TensorSpec::new("id_classifier/weight".into(), vec![self.n_sections, dl], dl));
        specs.push(TensorSpec::new("id_classifier/bias".into(), vec![self.n_sections], dl));
        specs.push(TensorSpec::new("ag_classifier/weight".into(), vec![self.n_groups, dh], dh));
        specs.push(TensorSpec::new("ag_classifier/bias".into(), vec![self.n_groups], dh));
        let mut offset = 0;
        for s in &mut specs {
            s.offset = offset;
            offset += s.len();
        }
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    fan_in: usize,
}

impl TensorSpec {
    fn new(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        TensorSpec { name, shape, offset: 0, fan_in }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable weights in one flat buffer, addressed through named
/// tensor specs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    specs: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        let n = specs.iter().map(TensorSpec::len).sum();
        Ok(ModelParams { config, specs, data: vec![0.0; n] })
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]` for every weight and bias.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut p = ModelParams::zeros(config)?;
        for spec in &p.specs {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            for v in &mut p.data[spec.offset..spec.offset + spec.len()] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(p)
    }

    /// Rebuilds parameters from named tensors, e.g. out of a checkpoint.
    pub fn from_tensors(config: ModelConfig, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut p = ModelParams::zeros(config)?;
        for spec in &p.specs {
            let (_, shape, data) = tensors
                .iter()
                .find(|(name, _, _)| *name == spec.name)
                .ok_or_else(|| HmicError::Checkpoint(format!("missing tensor `{}`", spec.name)))?;
            if *shape != spec.shape {
                return Err(HmicError::Checkpoint(format!(
                    "tensor `{}` has shape {shape:?}, expected {:?}",
                    spec.name, spec.shape
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(HmicError::Checkpoint(format!("tensor `{}` is not finite", spec.name)));
            }
            p.data[spec.offset..spec.offset + spec.len()].copy_from_slice(data);
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, idx: usize) -> &[f64] {
        let s = &self.specs[idx];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&[f64]> {
        self.specs.iter().position(|s| s.name == name).map(|i| self.tensor(i))
    }

    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.specs.iter().find(|s| s.name == name)?;
        Some(&mut self.data[s.offset..s.offset + s.len()])
    }

    /// `(name, shape, values)` for every tensor, in layout order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.specs
            .iter()
            .map(|s| (s.name.as_str(), s.shape.as_slice(), &self.data[s.offset..s.offset + s.len()]))
    }

    fn n_blocks(&self) -> usize {
        self.config.backbone_channels.len()
    }

    fn idx_head(&self) -> usize {
        2 * self.n_blocks()
    }

    fn idx_id(&self) -> usize {
        2 * self.n_blocks() + 2
    }

    fn idx_ag(&self) -> usize {
        2 * self.n_blocks() + 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub f_low: Vec<f64>,
    pub f_high: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub loss_id: f64,
    pub loss_ag: f64,
    pub loss_total: f64,
}

struct BlockCache {
    c_in: usize,
    h: usize,
    w: usize,
    cols: Vec<f64>,
    pre: Vec<f64>,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    head: BlockCache,
    map_hw: usize,
    features: FeaturePair,
}

fn check_input(x: &LogMelSpectrogram, config: &ModelConfig) -> Result<()> {
    if x.n_mels != config.n_mels || x.n_frames != config.n_frames {
        return Err(HmicError::shape(format!(
            "model expects {}x{} input, got {}x{}",
            config.n_mels, config.n_frames, x.n_mels, x.n_frames
        )));
    }
    Ok(())
}

fn forward_cached(x: &LogMelSpectrogram, params: &ModelParams) -> ForwardCache {
    let cfg = &params.config;
    let gain = cfg.block_gain;
    let (mut h, mut w) = (x.n_mels, x.n_frames);
    let mut act = x.values.clone();
    let mut c_in = 1;
    let mut blocks = Vec::with_capacity(cfg.backbone_channels.len());
    for (i, &c_out) in cfg.backbone_channels.iter().enumerate() {
        let (pre, cols) = conv_forward(&act, c_in, h, w, params.tensor(2 * i), params.tensor(2 * i + 1));
        let relu: Vec<f64> = pre.iter().map(|&z| (gain * z).max(0.0)).collect();
        act = avg_pool2(&relu, c_out, h, w);
        blocks.push(BlockCache { c_in, h, w, cols, pre });
        c_in = c_out;
        h /= 2;
        w /= 2;
    }
    let map_hw = h * w;
    let f_low = global_avg_pool(&act, c_in, map_hw);
    let ih = params.idx_head();
    let (pre, cols) = conv_forward(&act, c_in, h, w, params.tensor(ih), params.tensor(ih + 1));
    let relu: Vec<f64> = pre.iter().map(|&z| (gain * z).max(0.0)).collect();
    let f_high = global_avg_pool(&relu, cfg.head_channels, map_hw);
    ForwardCache {
        blocks,
        head: BlockCache { c_in, h, w, cols, pre },
        map_hw,
        features: FeaturePair { f_low, f_high },
    }
}

/// Computes `(f_l, f_h)` for one input.
pub fn forward_features(x: &LogMelSpectrogram, params: &ModelParams) -> Result<FeaturePair> {
    check_input(x, &params.config)?;
    Ok(forward_cached(x, params).features)
}

fn linear(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| b + weight[r * d..(r + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

/// Raw logits of the two linear classifiers.
pub fn classify(fp: &FeaturePair, params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = &params.config;
    if fp.f_low.len() != cfg.d_low() || fp.f_high.len() != cfg.d_high() {
        return Err(HmicError::shape(format!(
            "features have dims ({}, {}), model expects ({}, {})",
            fp.f_low.len(),
            fp.f_high.len(),
            cfg.d_low(),
            cfg.d_high()
        )));
    }
    let (id, ag) = (params.idx_id(), params.idx_ag());
    Ok((
        linear(params.tensor(id), params.tensor(id + 1), &fp.f_low),
        linear(params.tensor(ag), params.tensor(ag + 1), &fp.f_high),
    ))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(HmicError::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[label]).max(0.0))
}

/// Per-head cross-entropy and the λ-weighted total.
pub fn loss(
    logits_id: &[f64],
    logits_ag: &[f64],
    l_id: usize,
    l_ag: usize,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(HmicError::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let loss_id = cross_entropy(logits_id, l_id)?;
    let loss_ag = cross_entropy(logits_ag, l_ag)?;
    Ok(LossBreakdown { loss_id, loss_ag, loss_total: lambda * loss_id + (1.0 - lambda) * loss_ag })
}

/// A labelled input for batch loss and gradient computation.
#[derive(Debug, Clone, Copy)]
pub struct LabelledInput<'a> {
    pub x: &'a LogMelSpectrogram,
    pub l_id: usize,
    pub l_ag: usize,
}

fn check_labels(sample: &LabelledInput<'_>, cfg: &ModelConfig) -> Result<()> {
    check_input(sample.x, cfg)?;
    if sample.l_id >= cfg.n_sections || sample.l_ag >= cfg.n_groups {
        return Err(HmicError::invalid(format!(
            "labels ({}, {}) outside model classes ({}, {})",
            sample.l_id, sample.l_ag, cfg.n_sections, cfg.n_groups
        )));
    }
    Ok(())
}

/// Batch-mean losses with the model's configured head weights.
pub fn batch_loss(batch: &[LabelledInput<'_>], params: &ModelParams) -> Result<LossBreakdown> {
    let (w_id, w_ag) = params.config.head_weights();
    batch_loss_weighted(batch, params, w_id, w_ag)
}

pub(crate) fn batch_loss_weighted(
    batch: &[LabelledInput<'_>],
    params: &ModelParams,
    w_id: f64,
    w_ag: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(HmicError::invalid("empty batch"));
    }
    let (mut lid, mut lag) = (0.0, 0.0);
    for s in batch {
        check_labels(s, &params.config)?;
        let fp = forward_cached(s.x, params).features;
        let (zi, za) = classify(&fp, params)?;
        lid += cross_entropy(&zi, s.l_id)?;
        lag += cross_entropy(&za, s.l_ag)?;
    }
    let n = batch.len() as f64;
    let (lid, lag) = (lid / n, lag / n);
    Ok(LossBreakdown { loss_id: lid, loss_ag: lag, loss_total: w_id * lid + w_ag * lag })
}

/// Gradient of `w_id·mean(L_ID) + w_ag·mean(L_AG)` over the batch with
/// respect to every parameter, in the flat layout of [`ModelParams`].
pub fn batch_gradient(
    batch: &[LabelledInput<'_>],
    params: &ModelParams,
    w_id: f64,
    w_ag: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(HmicError::invalid("empty batch"));
    }
    let mut grad = vec![0.0; params.data.len()];
    let (mut lid, mut lag) = (0.0, 0.0);
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        check_labels(s, &params.config)?;
        let (li, la) = accumulate_sample_gradient(s, params, w_id * scale, w_ag * scale, &mut grad)?;
        lid += li;
        lag += la;
    }
    let (lid, lag) = (lid * scale, lag * scale);
    Ok((LossBreakdown { loss_id: lid, loss_ag: lag, loss_total: w_id * lid + w_ag * lag }, grad))
}

fn spec_range(params: &ModelParams, idx: usize) -> std::ops::Range<usize> {
    let s = &params.specs[idx];
    s.offset..s.offset + s.len()
}

/// Two disjoint mutable tensor slices out of the flat gradient buffer.
fn weight_and_bias<'g>(
    grad: &'g mut [f64],
    params: &ModelParams,
    idx: usize,
) -> (&'g mut [f64], &'g mut [f64]) {
    let w = spec_range(params, idx);
    let b = spec_range(params, idx + 1);
    debug_assert_eq!(w.end, b.start);
    let (left, right) = grad[w.start..b.end].split_at_mut(w.len());
    (left, right)
}

fn accumulate_sample_gradient(
    sample: &LabelledInput<'_>,
    params: &ModelParams,
    w_id: f64,
    w_ag: f64,
    grad: &mut [f64],
) -> Result<(f64, f64)> {
    let cfg = &params.config;
    let gain = cfg.block_gain;
    let cache = forward_cached(sample.x, params);
    let fp = &cache.features;
    let (zi, za) = classify(fp, params)?;
    let loss_id = cross_entropy(&zi, sample.l_id)?;
    let loss_ag = cross_entropy(&za, sample.l_ag)?;

    let mut d_zi = softmax(&zi);
    d_zi[sample.l_id] -= 1.0;
    d_zi.iter_mut().for_each(|v| *v *= w_id);
    let mut d_za = softmax(&za);
    d_za[sample.l_ag] -= 1.0;
    d_za.iter_mut().for_each(|v| *v *= w_ag);

    let (dl, dh) = (cfg.d_low(), cfg.d_high());
    let mut d_flow = vec![0.0; dl];
    let mut d_fhigh = vec![0.0; dh];
    for (idx, d_logits, feat, d_feat) in [
        (params.idx_id(), &d_zi, &fp.f_low, &mut d_flow),
        (params.idx_ag(), &d_za, &fp.f_high, &mut d_fhigh),
    ] {
        let weight = params.tensor(idx);
        let d = feat.len();
        let (gw, gb) = weight_and_bias(grad, params, idx);
        for (r, &g) in d_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[r] += g;
            for j in 0..d {
                gw[r * d + j] += g * feat[j];
                d_feat[j] += g * weight[r * d + j];
            }
        }
    }

    // head: f_h = GAP(relu(gain * conv(map)))
    let map_hw = cache.map_hw;
    let head = &cache.head;
    let d_pre: Vec<f64> = head
        .pre
        .iter()
        .enumerate()
        .map(|(i, &z)| if gain * z > 0.0 { gain * d_fhigh[i / map_hw] / map_hw as f64 } else { 0.0 })
        .collect();
    let ih = params.idx_head();
    let (gw, gb) = weight_and_bias(grad, params, ih);
    let mut d_map = conv_backward(&d_pre, &head.cols, head.c_in, head.h, head.w, params.tensor(ih), gw, gb, true)
        .expect("input gradient requested");
    // f_l = GAP(map)
    for (i, v) in d_map.iter_mut().enumerate() {
        *v += d_flow[i / map_hw] / map_hw as f64;
    }

    for (i, block) in cache.blocks.iter().enumerate().rev() {
        let c_out = cfg.backbone_channels[i];
        let d_relu = avg_pool2_backward(&d_map, c_out, block.h, block.w);
        let d_pre: Vec<f64> = block
            .pre
            .iter()
            .zip(&d_relu)
            .map(|(&z, &g)| if gain * z > 0.0 { gain * g } else { 0.0 })
            .collect();
        let (gw, gb) = weight_and_bias(grad, params, 2 * i);
        let d_in = conv_backward(
            &d_pre,
            &block.cols,
            block.c_in,
            block.h,
            block.w,
            params.tensor(2 * i),
            gw,
            gb,
            i > 0,
        );
        if let Some(d) = d_in {
            d_map = d;
        }
    }
    Ok((loss_id, loss_ag))
}
