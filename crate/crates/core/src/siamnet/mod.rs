//! Micro-scale Siamese U-Net for pixel-wise change detection.
//!
//! Both acquisitions run through one shared encoder: `t0` and `t1` are
//! stacked along the batch axis, so every encoder weight (and every encoder
//! batch-norm statistic) is literally the same object for the two branches.
//! Branch features are joined by folding the two batch halves into channels.
//!
//! ```text
//! enc0: conv3x3            in  → w0      side
//! enc_i: conv3x3 stride 2  w_{i-1} → w_i side / 2^i       (i = 1..=stages)
//! d = fold(enc_stages)                                    2·w_stages channels
//! dec_i: up2(d) ++ fold(enc_i) → conv3x3 → w_i            (i = stages-1..=0)
//! head: conv1x1 w0 → 2 logits
//! ```
//! Every 3×3 convolution is followed by batch norm and relu.

use std::collections::BTreeMap;

use gradkit::{adam_step, he_uniform, AdamState, NormStats, ParameterSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::synthdata::{augment, TilePair, Transform};

pub mod checkpoint;

pub const CLASSES: usize = 2;
pub const BN_MOMENTUM: f64 = gradkit::ops::norm::DEFAULT_MOMENTUM;
pub const BN_EPSILON: f64 = gradkit::ops::norm::DEFAULT_EPSILON;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiamUNetConfig {
    pub in_channels: usize,
    pub tile_side: usize,
    /// Encoder width per resolution level, `stages + 1` entries.
    pub widths: Vec<usize>,
    pub stages: usize,
    pub seed: u64,
}

impl Default for SiamUNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            tile_side: 16,
            widths: vec![8, 16, 32],
            stages: 2,
            seed: 0,
        }
    }
}

impl SiamUNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelConfig(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.widths.len() != self.stages + 1 {
            return bad(format!(
                "{} widths given for {} stages (need stages + 1)",
                self.widths.len(),
                self.stages
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return bad(format!("widths must be positive, got {:?}", self.widths));
        }
        let factor = 1usize << self.stages;
        if self.tile_side == 0 || self.tile_side % factor != 0 {
            return bad(format!(
                "tile side {} not divisible by 2^{} = {factor}",
                self.tile_side, self.stages
            ));
        }
        Ok(())
    }

    /// Same architecture, ignoring the seed.
    pub fn same_architecture(&self, other: &Self) -> bool {
        (self.in_channels, self.tile_side, &self.widths, self.stages)
            == (other.in_channels, other.tile_side, &other.widths, other.stages)
    }

    fn conv_layers(&self) -> Vec<ConvLayer> {
        let w = &self.widths;
        let mut layers = vec![ConvLayer::new("enc0", self.in_channels, w[0])];
        for i in 1..=self.stages {
            layers.push(ConvLayer::new(&format!("enc{i}"), w[i - 1], w[i]));
        }
        let mut below = 2 * w[self.stages];
        for i in (0..self.stages).rev() {
            layers.push(ConvLayer::new(&format!("dec{i}"), below + 2 * w[i], w[i]));
            below = w[i];
        }
        layers
    }
}

struct ConvLayer {
    name: String,
    in_ch: usize,
    out_ch: usize,
}

impl ConvLayer {
    fn new(name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            name: name.to_string(),
            in_ch,
            out_ch,
        }
    }
}

/// Per-pixel class probabilities of one tile, stored `H×W×2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMap {
    side: usize,
    probs: Vec<f64>,
}

impl ChangeMap {
    pub fn new(side: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != side * side * CLASSES {
            return Err(Error::Shape(format!(
                "change map of side {side} needs {} values, got {}",
                side * side * CLASSES,
                probs.len()
            )));
        }
        Ok(Self { side, probs })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Interleaved `H×W×2` probabilities.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, y: usize, x: usize, class: usize) -> f64 {
        self.probs[(y * self.side + x) * CLASSES + class]
    }

    /// Probability of change for every pixel, row-major.
    pub fn change_probs(&self) -> Vec<f64> {
        self.probs.chunks(CLASSES).map(|p| p[1]).collect()
    }

    fn from_planar(planar: &[f64], side: usize) -> Self {
        let plane = side * side;
        let mut probs = vec![0.0; plane * CLASSES];
        for c in 0..CLASSES {
            for p in 0..plane {
                probs[p * CLASSES + c] = planar[c * plane + p];
            }
        }
        Self { side, probs }
    }
}

/// How batch norm is evaluated during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    EvalDeterministic,
    EvalStochastic,
}

/// Per-layer batch-norm statistics (mean, biased variance).
pub type NormStatsMap = BTreeMap<String, (Vec<f64>, Vec<f64>)>;

#[derive(Clone, Copy)]
enum StatSource<'a> {
    Batch,
    Running,
    Fixed(&'a NormStatsMap),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Model parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SiamUNet {
    config: SiamUNetConfig,
    params: ParameterSet,
    running: BTreeMap<String, RunningStats>,
}

/// Builds a freshly initialised network. Convolutions use He-uniform weights
/// drawn from the config seed; batch norm starts at identity.
pub fn build(config: &SiamUNetConfig) -> Result<SiamUNet> {
    config.validate()?;
    let mut rng = seed::rng(config.seed, &[stream::INIT]);
    let mut params = ParameterSet::new(config.seed);
    let mut running = BTreeMap::new();
    for layer in config.conv_layers() {
        let fan_in = layer.in_ch * 9;
        params.insert(
            format!("{}.conv.w", layer.name),
            he_uniform(&[layer.out_ch, layer.in_ch, 3, 3], fan_in, &mut rng),
        )?;
        params.insert(format!("{}.bn.gamma", layer.name), Tensor::full(&[layer.out_ch], 1.0))?;
        params.insert(format!("{}.bn.beta", layer.name), Tensor::zeros(&[layer.out_ch]))?;
        running.insert(
            layer.name.clone(),
            RunningStats {
                mean: vec![0.0; layer.out_ch],
                var: vec![1.0; layer.out_ch],
            },
        );
    }
    let w0 = config.widths[0];
    params.insert("head.w", he_uniform(&[CLASSES, w0, 1, 1], w0, &mut rng))?;
    params.insert("head.b", Tensor::zeros(&[CLASSES]))?;
    Ok(SiamUNet {
        config: config.clone(),
        params,
        running,
    })
}

/// Stacks the two acquisitions of each tile into `2N×C×S×S` (all `t0`, then all `t1`).
pub fn stack_pairs(tiles: &[&TilePair], in_channels: usize) -> Result<Tensor> {
    let Some(first) = tiles.first() else {
        return Err(Error::Shape("empty tile batch".into()));
    };
    let side = first.side();
    let per = in_channels * side * side;
    let mut data = Vec::with_capacity(2 * tiles.len() * per);
    for t in tiles {
        if t.side() != side {
            return Err(Error::Shape(format!(
                "tile {} has side {}, expected {side}",
                t.id,
                t.side()
            )));
        }
        data.extend_from_slice(t.t0.data());
    }
    for t in tiles {
        data.extend_from_slice(t.t1.data());
    }
    if data.len() != 2 * tiles.len() * per {
        return Err(Error::Shape(format!("tiles do not have {in_channels} channels")));
    }
    Ok(Tensor::new(vec![2 * tiles.len(), in_channels, side, side], data)?)
}

fn stack_tensors(t0: &Tensor, t1: &Tensor) -> Result<Tensor> {
    if t0.shape() != t1.shape() {
        return Err(Error::Shape(format!(
            "t0 {:?} and t1 {:?} differ",
            t0.shape(),
            t1.shape()
        )));
    }
    Ok(Tensor::stack_batch(&[t0, t1])?)
}

impl SiamUNet {
    pub fn config(&self) -> &SiamUNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn running_stats(&self) -> &BTreeMap<String, RunningStats> {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut BTreeMap<String, RunningStats> {
        &mut self.running
    }

    /// Adds every parameter to `tape` as a leaf.
    pub fn param_leaves(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect()
    }

    /// Adds every parameter to `tape` as a constant, for inference.
    fn param_constants(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect()
    }

    fn check_input(&self, stacked: &Tensor) -> Result<()> {
        let (n2, c, h, w) = stacked.dims4()?;
        let s = self.config.tile_side;
        if n2 == 0 || n2 % 2 != 0 || c != self.config.in_channels || h != s || w != s {
            return Err(Error::Shape(format!(
                "input {:?} does not match {} channels at {s}x{s}",
                stacked.shape(),
                self.config.in_channels
            )));
        }
        Ok(())
    }

    fn graph(
        &self,
        tape: &mut Tape,
        leaves: &BTreeMap<String, Var>,
        stacked: Var,
        stats: StatSource<'_>,
        captured: &mut NormStatsMap,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut block = |tape: &mut Tape, name: &str, x: Var, stride: usize| -> Result<Var> {
            let w = leaves[&format!("{name}.conv.w")];
            let y = tape.conv2d(x, w, None, stride, 1)?;
            let gamma = leaves[&format!("{name}.bn.gamma")];
            let beta = leaves[&format!("{name}.bn.beta")];
            let ns = match stats {
                StatSource::Batch => NormStats::Batch,
                StatSource::Running => {
                    let r = &self.running[name];
                    NormStats::Fixed {
                        mean: &r.mean,
                        var: &r.var,
                    }
                }
                StatSource::Fixed(map) => {
                    let (m, v) = map
                        .get(name)
                        .ok_or_else(|| Error::Shape(format!("no statistics for layer {name}")))?;
                    NormStats::Fixed { mean: m, var: v }
                }
            };
            let (z, batch) = tape.batch_norm(y, gamma, beta, ns, BN_EPSILON)?;
            if let Some(b) = batch {
                captured.insert(name.to_string(), b);
            }
            Ok(tape.relu(z))
        };

        let mut skips = Vec::with_capacity(cfg.stages + 1);
        let mut x = block(tape, "enc0", stacked, 1)?;
        skips.push(x);
        for i in 1..=cfg.stages {
            x = block(tape, &format!("enc{i}"), x, 2)?;
            skips.push(x);
        }
        let mut d = tape.fold_batch(x)?;
        for i in (0..cfg.stages).rev() {
            let up = tape.upsample2(d)?;
            let skip = tape.fold_batch(skips[i])?;
            let cat = tape.concat_channels(&[up, skip])?;
            d = block(tape, &format!("dec{i}"), cat, 1)?;
        }
        Ok(tape.conv2d(d, leaves["head.w"], Some(leaves["head.b"]), 1, 0)?)
    }

    /// Records the full network on `tape` and returns the logits node
    /// (`N×2×S×S`). `stacked` holds `t0` samples followed by `t1` samples.
    /// In `Train` mode the captured batch statistics are returned.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        leaves: &BTreeMap<String, Var>,
        stacked: Var,
        mode: BnMode,
        reference: Option<&NormStatsMap>,
    ) -> Result<(Var, NormStatsMap)> {
        self.check_input(tape.value(stacked))?;
        let source = match (mode, reference) {
            (BnMode::Train, _) => StatSource::Batch,
            (BnMode::EvalDeterministic, _) => StatSource::Running,
            (BnMode::EvalStochastic, Some(r)) => StatSource::Fixed(r),
            (BnMode::EvalStochastic, None) => {
                return Err(
                    gradkit::GradError::BatchNorm("stochastic mode requires reference statistics".into()).into(),
                )
            }
        };
        let mut captured = NormStatsMap::new();
        let logits = self.graph(tape, leaves, stacked, source, &mut captured)?;
        Ok((logits, captured))
    }

    /// Batch-norm statistics induced by a reference batch of tile pairs.
    /// Needs at least two pairs.
    pub fn reference_stats(&self, ref_t0: &Tensor, ref_t1: &Tensor) -> Result<NormStatsMap> {
        let (n, ..) = ref_t0.dims4()?;
        if n < 2 {
            return Err(gradkit::GradError::BatchNorm(format!(
                "reference batch has {n} sample(s); at least 2 are needed for a batch variance"
            ))
            .into());
        }
        self.captured_stats(stack_tensors(ref_t0, ref_t1)?)
    }

    /// Like [`SiamUNet::reference_stats`] for a batch of tile pairs.
    pub fn reference_stats_for(&self, tiles: &[&TilePair]) -> Result<NormStatsMap> {
        if tiles.len() < 2 {
            return Err(gradkit::GradError::BatchNorm(format!(
                "reference batch has {} sample(s); at least 2 are needed for a batch variance",
                tiles.len()
            ))
            .into());
        }
        self.captured_stats(stack_pairs(tiles, self.config.in_channels)?)
    }

    fn captured_stats(&self, stacked: Tensor) -> Result<NormStatsMap> {
        let mut tape = Tape::new();
        let leaves = self.param_constants(&mut tape);
        let x = tape.constant(stacked);
        let (_, captured) = self.logits_on_tape(&mut tape, &leaves, x, BnMode::Train, None)?;
        Ok(captured)
    }

    fn probabilities(&self, stacked: Tensor, mode: BnMode, stats: Option<&NormStatsMap>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let leaves = self.param_constants(&mut tape);
        let x = tape.constant(stacked);
        let (logits, _) = self.logits_on_tape(&mut tape, &leaves, x, mode, stats)?;
        let p = tape.softmax(logits)?;
        Ok(tape.value(p).clone())
    }

    /// Change maps for a batch of pairs given as `N×C×S×S` tensors.
    ///
    /// `Train` mode normalises with the statistics of this batch without
    /// touching the running statistics. `EvalStochastic` draws statistics
    /// from `reference` (`(t0, t1)` of at least two pairs).
    pub fn forward(
        &self,
        t0: &Tensor,
        t1: &Tensor,
        mode: BnMode,
        reference: Option<(&Tensor, &Tensor)>,
    ) -> Result<Vec<ChangeMap>> {
        let stacked = stack_tensors(t0, t1)?;
        let stats = match (mode, reference) {
            (BnMode::EvalStochastic, Some((r0, r1))) => Some(self.reference_stats(r0, r1)?),
            _ => None,
        };
        let probs = self.probabilities(stacked, mode, stats.as_ref())?;
        Ok(split_maps(&probs, self.config.tile_side))
    }

    /// Change maps for tiles, evaluated in chunks. `stats` selects fixed
    /// statistics (Monte Carlo batch norm); `None` uses running statistics.
    pub fn predict_tiles(&self, tiles: &[&TilePair], stats: Option<&NormStatsMap>) -> Result<Vec<ChangeMap>> {
        const CHUNK: usize = 8;
        let mode = if stats.is_some() {
            BnMode::EvalStochastic
        } else {
            BnMode::EvalDeterministic
        };
        let mut maps = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(CHUNK) {
            let stacked = stack_pairs(chunk, self.config.in_channels)?;
            let probs = self.probabilities(stacked, mode, stats)?;
            maps.extend(split_maps(&probs, self.config.tile_side));
        }
        Ok(maps)
    }
}

fn split_maps(probs: &Tensor, side: usize) -> Vec<ChangeMap> {
    probs
        .data()
        .chunks(CLASSES * side * side)
        .map(|planar| ChangeMap::from_planar(planar, side))
        .collect()
}

/// Closed-form parameter count of the architecture.
pub fn parameter_count(config: &SiamUNetConfig) -> usize {
    config
        .conv_layers()
        .iter()
        .map(|l| l.out_ch * l.in_ch * 9 + 2 * l.out_ch)
        .sum::<usize>()
        + CLASSES * config.widths[0]
        + CLASSES
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over the whole run.
    Cosine,
}

impl LrSchedule {
    /// Learning-rate multiplier before step `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Extra epochs are run until at least this many optimiser steps are
    /// taken, so small labelled sets still train long enough.
    pub min_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub class_weights: [f64; CLASSES],
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            min_steps: 0,
            batch_size: 16,
            learning_rate: 1e-3,
            schedule: LrSchedule::Constant,
            class_weights: [1.0, 3.0],
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::TrainConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} < 2", self.batch_size));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0)) {
            return bad(format!("class weights {:?} must be positive", self.class_weights));
        }
        Ok(())
    }

    /// Epochs run on a labelled set of `n` tiles.
    pub fn epochs_for(&self, n: usize) -> usize {
        let per_epoch = batch_count(n, self.batch_size).max(1);
        self.epochs.max(self.min_steps.div_ceil(per_epoch))
    }
}

fn batch_count(n: usize, size: usize) -> usize {
    let full = n / size;
    match n % size {
        0 => full,
        1 if full > 0 => full,
        _ => full + 1,
    }
}

/// Splits a shuffled index list into batches, folding a trailing singleton
/// into the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Mini-batch Adam on weighted cross-entropy for
/// [`TrainConfig::epochs_for`] epochs. Returns the mean loss of every epoch. With augmentation on, each sample is independently left
/// as is or passed through one of the four transforms.
pub fn train(model: &mut SiamUNet, labeled: &[TilePair], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::TrainConfig("labelled set is empty".into()));
    }
    if let Some(t) = labeled.iter().find(|t| t.mask.is_none()) {
        return Err(Error::MissingMask(t.id));
    }
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut rng = seed::rng(cfg.seed, &[stream::SHUFFLE]);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let epochs = cfg.epochs_for(labeled.len());
    let total_steps = epochs * batch_count(labeled.len(), cfg.batch_size);
    let mut step = 0;
    let mut trace = Vec::with_capacity(epochs);
    let weights = cfg.class_weights.to_vec();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in batches(&order, cfg.batch_size) {
            let tiles: Vec<TilePair> = batch
                .iter()
                .map(|&i| {
                    let t = &labeled[i];
                    if cfg.augment {
                        match rng.gen_range(0..=Transform::ALL.len()) {
                            0 => t.clone(),
                            k => augment(t, Transform::ALL[k - 1]),
                        }
                    } else {
                        t.clone()
                    }
                })
                .collect();
            let refs: Vec<&TilePair> = tiles.iter().collect();
            let labels: Vec<usize> = tiles
                .iter()
                .flat_map(|t| {
                    t.mask
                        .as_ref()
                        .expect("checked above")
                        .data()
                        .iter()
                        .map(|&v| v as usize)
                })
                .collect();
            let stacked = stack_pairs(&refs, model.config.in_channels)?;

            let mut tape = Tape::new();
            let leaves = model.param_leaves(&mut tape);
            let x = tape.constant(stacked);
            let (logits, captured) = model.logits_on_tape(&mut tape, &leaves, x, BnMode::Train, None)?;
            let loss = tape.weighted_cross_entropy(logits, labels, weights.clone())?;
            total += tape.value(loss).data()[0] * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grads: BTreeMap<String, Tensor> = leaves
                .iter()
                .map(|(name, &v)| {
                    let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                    (name.clone(), g)
                })
                .collect();
            adam.learning_rate = cfg.learning_rate * cfg.schedule.factor(step, total_steps);
            step += 1;
            adam_step(&mut model.params, &grads, &mut adam)?;
            for (name, (mean, var)) in captured {
                let r = model.running.get_mut(&name).expect("layer exists");
                for (a, b) in r.mean.iter_mut().zip(&mean) {
                    *a = (1.0 - BN_MOMENTUM) * *a + BN_MOMENTUM * b;
                }
                for (a, b) in r.var.iter_mut().zip(&var) {
                    *a = (1.0 - BN_MOMENTUM) * *a + BN_MOMENTUM * b;
                }
            }
        }
        trace.push(total / labeled.len() as f64);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = SiamUNetConfig::default();
        assert!(c.validate().is_ok());
        c.tile_side = 18;
        assert!(matches!(build(&c), Err(Error::ModelConfig(m)) if m.contains("divisible")));
        c.tile_side = 16;
        c.widths = vec![8, 16];
        assert!(c.validate().is_err());
        c.widths = vec![8, 0, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn batch_count_matches_batches() {
        let order: Vec<usize> = (0..40).collect();
        for size in 2..9 {
            for n in 0..40 {
                assert_eq!(
                    batch_count(n, size),
                    batches(&order[..n], size).len(),
                    "n {n} size {size}"
                );
            }
        }
        let cfg = TrainConfig {
            epochs: 2,
            min_steps: 30,
            batch_size: 8,
            ..Default::default()
        };
        assert_eq!(cfg.epochs_for(20), 10);
        assert_eq!(cfg.epochs_for(1000), 2);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        assert_eq!(LrSchedule::Cosine.factor(0, 10), 1.0);
        assert!((LrSchedule::Cosine.factor(5, 10) - 0.5).abs() < 1e-15);
        assert!(LrSchedule::Cosine.factor(10, 10).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
    }

    #[test]
    fn batches_fold_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let sizes: Vec<usize> = batches(&order, 4).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 5]);
        let sizes: Vec<usize> = batches(&order[..1], 4).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![1]);
        let sizes: Vec<usize> = batches(&order[..8], 4).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4]);
    }

    #[test]
    fn change_map_layout() {
        let planar = vec![0.9, 0.8, 0.7, 0.6, 0.1, 0.2, 0.3, 0.4];
        let m = ChangeMap::from_planar(&planar, 2);
        assert_eq!(m.prob(0, 1, 0), 0.8);
        assert_eq!(m.prob(1, 0, 1), 0.3);
        assert_eq!(m.change_probs(), vec![0.1, 0.2, 0.3, 0.4]);
    }
}
