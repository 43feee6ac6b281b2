//! Uncertainty from explicit ensembles and Monte Carlo batch norm, and the
//! variance / entropy acquisition scores built on it.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::siamnet::{ChangeMap, SiamUNet, CLASSES};
use crate::synthdata::{TileId, TilePair};

/// Smallest probability fed to the logarithm in the entropy score.
pub const ENTROPY_CLAMP: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

/// `M` per-pixel class distributions for one tile, stored `M×H×W×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionStack {
    id: TileId,
    members: usize,
    side: usize,
    probs: Vec<f64>,
}

impl PredictionStack {
    pub fn new(id: TileId, members: usize, side: usize, probs: Vec<f64>) -> Result<Self> {
        if members == 0 {
            return Err(Error::Acquisition("a prediction stack needs at least one slice".into()));
        }
        if probs.len() != members * side * side * CLASSES {
            return Err(Error::Shape(format!(
                "stack of {members} slices at side {side} needs {} values, got {}",
                members * side * side * CLASSES,
                probs.len()
            )));
        }
        for (k, p) in probs.chunks(CLASSES).enumerate() {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::Acquisition(format!(
                    "tile {id}: pixel {} of slice {} is not a distribution: {p:?}",
                    k % (side * side),
                    k / (side * side)
                )));
            }
        }
        Ok(Self {
            id,
            members,
            side,
            probs,
        })
    }

    pub fn from_maps(id: TileId, maps: &[ChangeMap]) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::Acquisition("a prediction stack needs at least one slice".into()));
        };
        let side = first.side();
        if maps.iter().any(|m| m.side() != side) {
            return Err(Error::Shape(format!("tile {id}: slices of different sides")));
        }
        let probs = maps.iter().flat_map(|m| m.probs().iter().copied()).collect();
        Self::new(id, maps.len(), side, probs)
    }

    pub fn id(&self) -> TileId {
        self.id
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    /// Slice `m` as interleaved `H×W×C` probabilities.
    pub fn slice(&self, m: usize) -> &[f64] {
        let n = self.pixels() * CLASSES;
        &self.probs[m * n..(m + 1) * n]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Member-averaged prediction, `H×W×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanPrediction {
    pub side: usize,
    pub probs: Vec<f64>,
}

impl MeanPrediction {
    /// Mean probability of change per pixel, row-major.
    pub fn change_probs(&self) -> Vec<f64> {
        self.probs.chunks(CLASSES).map(|p| p[1]).collect()
    }
}

/// Calls `f(k, column)` for every probability index `k` with the `M` values
/// of that index in ascending order. Sorting makes every reduction over
/// members independent of slice order.
fn for_each_sorted_column(stack: &PredictionStack, mut f: impl FnMut(usize, &[f64])) {
    let n = stack.pixels() * CLASSES;
    let mut column = vec![0.0; stack.members];
    for k in 0..n {
        for (m, v) in column.iter_mut().enumerate() {
            *v = stack.probs[m * n + k];
        }
        column.sort_unstable_by(f64::total_cmp);
        f(k, &column);
    }
}

/// Mean of a sorted column, accumulated as offsets from its minimum so a
/// constant column gives back its value exactly.
fn column_mean(column: &[f64]) -> f64 {
    let lo = column[0];
    lo + column.iter().map(|v| v - lo).sum::<f64>() / column.len() as f64
}

pub fn mean_prediction(stack: &PredictionStack) -> MeanPrediction {
    let mut probs = vec![0.0; stack.pixels() * CLASSES];
    for_each_sorted_column(stack, |k, column| probs[k] = column_mean(column));
    MeanPrediction {
        side: stack.side,
        probs,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Variance,
    Entropy,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Variance => "variance",
            Metric::Entropy => "entropy",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Metric::Variance),
            "entropy" => Ok(Metric::Entropy),
            other => Err(Error::Acquisition(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcquisitionScore {
    pub id: TileId,
    pub score: f64,
    pub metric: Metric,
}

/// Tile mean of the per-pixel spread `(1/(M·C)) Σ_c Σ_m (p_mc − p̄_c)²`.
pub fn variance_score(stack: &PredictionStack) -> AcquisitionScore {
    let mut per_pixel = vec![0.0; stack.pixels()];
    for_each_sorted_column(stack, |k, column| {
        let mean = column_mean(column);
        per_pixel[k / CLASSES] += column.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>();
    });
    let norm = (stack.members * CLASSES) as f64;
    let total: f64 = per_pixel.iter().map(|s| s / norm).sum();
    AcquisitionScore {
        id: stack.id,
        score: total / stack.pixels() as f64,
        metric: Metric::Variance,
    }
}

/// Tile mean of the predictive entropy `−Σ_c p̄_c ln p̄_c` (natural log).
/// The logarithm sees `max(p̄_c, ENTROPY_CLAMP)`, so a zero class contributes 0.
pub fn entropy_score(stack: &PredictionStack) -> AcquisitionScore {
    let mean = mean_prediction(stack);
    let total: f64 = mean
        .probs
        .chunks(CLASSES)
        .map(|p| -p.iter().map(|&q| q * q.max(ENTROPY_CLAMP).ln()).sum::<f64>())
        .sum();
    AcquisitionScore {
        id: stack.id,
        score: total / stack.pixels() as f64,
        metric: Metric::Entropy,
    }
}

pub fn score(stack: &PredictionStack, metric: Metric) -> AcquisitionScore {
    match metric {
        Metric::Variance => variance_score(stack),
        Metric::Entropy => entropy_score(stack),
    }
}

/// Ids of the `n_add` highest scores, best first, ties by ascending id.
pub fn rank_and_select(scores: &[AcquisitionScore], n_add: usize) -> Result<Vec<TileId>> {
    if scores.is_empty() {
        return Err(Error::Acquisition("no scores to rank".into()));
    }
    if n_add == 0 {
        return Err(Error::Acquisition("n_add must be >= 1".into()));
    }
    let mut seen = BTreeSet::new();
    for s in scores {
        if !seen.insert(s.id) {
            return Err(Error::DuplicateTile(s.id));
        }
        if !s.score.is_finite() {
            return Err(Error::Acquisition(format!("tile {} has score {}", s.id, s.score)));
        }
    }
    let mut order: Vec<&AcquisitionScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    Ok(order.into_iter().take(n_add).map(|s| s.id).collect())
}

fn check_members(members: &[SiamUNet]) -> Result<()> {
    let Some(first) = members.first() else {
        return Err(Error::Acquisition("an ensemble needs at least one member".into()));
    };
    if let Some(m) = members.iter().find(|m| !m.config().same_architecture(first.config())) {
        return Err(Error::ModelConfig(format!(
            "ensemble members disagree on architecture: {:?} vs {:?}",
            first.config(),
            m.config()
        )));
    }
    Ok(())
}

fn transpose(id_maps: Vec<Vec<ChangeMap>>, tiles: &[&TilePair]) -> Result<Vec<PredictionStack>> {
    let members = id_maps.len();
    let mut per_tile: Vec<Vec<ChangeMap>> = (0..tiles.len()).map(|_| Vec::with_capacity(members)).collect();
    for maps in id_maps {
        for (slot, map) in per_tile.iter_mut().zip(maps) {
            slot.push(map);
        }
    }
    tiles
        .iter()
        .zip(per_tile)
        .map(|(t, maps)| PredictionStack::from_maps(t.id, &maps))
        .collect()
}

/// One deterministic slice per member, in member order, for every tile.
pub fn ensemble_predict_many(members: &[SiamUNet], tiles: &[&TilePair]) -> Result<Vec<PredictionStack>> {
    check_members(members)?;
    let maps = members
        .iter()
        .map(|m| m.predict_tiles(tiles, None))
        .collect::<Result<Vec<_>>>()?;
    transpose(maps, tiles)
}

pub fn ensemble_predict(members: &[SiamUNet], tile: &TilePair) -> Result<PredictionStack> {
    Ok(ensemble_predict_many(members, &[tile])?.remove(0))
}

/// Monte Carlo batch norm: pass `m` normalises with the statistics of an
/// independent random mini-batch of `batch` training tiles. Query tiles are
/// never part of a reference batch.
pub fn mcbn_predict_many(
    model: &SiamUNet,
    tiles: &[&TilePair],
    training: &[TilePair],
    passes: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<PredictionStack>> {
    if passes == 0 {
        return Err(Error::Acquisition("MCBN needs at least one pass".into()));
    }
    if batch < 2 {
        return Err(Error::Acquisition(format!("MCBN batch size {batch} < 2")));
    }
    let queries: BTreeSet<TileId> = tiles.iter().map(|t| t.id).collect();
    let candidates: Vec<&TilePair> = training.iter().filter(|t| !queries.contains(&t.id)).collect();
    if batch > candidates.len() {
        return Err(Error::Acquisition(format!(
            "MCBN batch size {batch} exceeds the {} available training tiles",
            candidates.len()
        )));
    }
    let mut rng = seed::rng(seed, &[seed::stream::MCBN]);
    let mut maps = Vec::with_capacity(passes);
    for _ in 0..passes {
        let mut picked = sample(&mut rng, candidates.len(), batch).into_vec();
        picked.sort_unstable();
        let refs: Vec<&TilePair> = picked.iter().map(|&i| candidates[i]).collect();
        let stats = model.reference_stats_for(&refs)?;
        maps.push(model.predict_tiles(tiles, Some(&stats))?);
    }
    transpose(maps, tiles)
}

pub fn mcbn_predict(
    model: &SiamUNet,
    tile: &TilePair,
    training: &[TilePair],
    passes: usize,
    batch: usize,
    seed: u64,
) -> Result<PredictionStack> {
    Ok(mcbn_predict_many(model, &[tile], training, passes, batch, seed)?.remove(0))
}
