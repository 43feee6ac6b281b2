//! The acquisition loop: train on the labelled set, score the pool, ask an
//! oracle for the top tiles' masks, move them over, repeat.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::acquire::{self, mcbn_predict_many, rank_and_select, Metric, PredictionStack};
use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::seed::{self, stream};
use crate::siamnet::{build, train, ChangeMap, SiamUNet, SiamUNetConfig, TrainConfig};
use crate::synthdata::{Mask, TileClass, TileId, TilePair};

/// Labelled tiles; every member carries its mask.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    tiles: Vec<TilePair>,
    ids: BTreeSet<TileId>,
}

impl LabeledSet {
    pub fn new(tiles: Vec<TilePair>) -> Result<Self> {
        let mut set = Self::default();
        for t in tiles {
            set.add(t)?;
        }
        Ok(set)
    }

    pub fn add(&mut self, tile: TilePair) -> Result<()> {
        if tile.mask.is_none() {
            return Err(Error::MissingMask(tile.id));
        }
        if !self.ids.insert(tile.id) {
            return Err(Error::DuplicateTile(tile.id));
        }
        self.tiles.push(tile);
        Ok(())
    }

    pub fn tiles(&self) -> &[TilePair] {
        &self.tiles
    }

    pub fn ids(&self) -> &BTreeSet<TileId> {
        &self.ids
    }

    pub fn contains(&self, id: TileId) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn changed_count(&self) -> usize {
        self.tiles
            .iter()
            .filter(|t| t.class() == Some(TileClass::Changed))
            .count()
    }
}

/// Unlabelled tiles. Masks are stripped on entry, so nothing downstream of
/// the pool can see them.
#[derive(Clone, Debug, Default)]
pub struct Pool {
    tiles: BTreeMap<TileId, TilePair>,
}

impl Pool {
    pub fn new(tiles: Vec<TilePair>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in tiles {
            let id = t.id;
            if map.insert(id, t.unlabelled()).is_some() {
                return Err(Error::DuplicateTile(id));
            }
        }
        Ok(Self { tiles: map })
    }

    /// Ids in ascending order.
    pub fn ids(&self) -> Vec<TileId> {
        self.tiles.keys().copied().collect()
    }

    pub fn tiles(&self) -> impl Iterator<Item = &TilePair> {
        self.tiles.values()
    }

    pub fn contains(&self, id: TileId) -> bool {
        self.tiles.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    fn remove(&mut self, id: TileId) -> Option<TilePair> {
        self.tiles.remove(&id)
    }
}

/// Held-out evaluation tiles. Inputs and pixel labels are kept apart: the
/// inputs carry no masks, and the labels are only read when scoring.
#[derive(Clone, Debug)]
pub struct TestSet {
    inputs: Vec<TilePair>,
    labels: Vec<bool>,
}

impl TestSet {
    pub fn new(tiles: Vec<TilePair>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut labels = Vec::new();
        let mut inputs = Vec::with_capacity(tiles.len());
        for t in tiles {
            if !seen.insert(t.id) {
                return Err(Error::DuplicateTile(t.id));
            }
            let mask = t.mask.as_ref().ok_or(Error::MissingMask(t.id))?;
            labels.extend(mask.data().iter().map(|&v| v == 1));
            inputs.push(t.unlabelled());
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &[TilePair] {
        &self.inputs
    }

    pub fn ids(&self) -> impl Iterator<Item = TileId> + '_ {
        self.inputs.iter().map(|t| t.id)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Pixel AUC of per-tile change probabilities given in input order.
    pub fn auc(&self, change_probs: &[Vec<f64>]) -> Result<f64> {
        if change_probs.len() != self.inputs.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} test tiles",
                change_probs.len(),
                self.inputs.len()
            )));
        }
        let flat: Vec<f64> = change_probs.iter().flatten().copied().collect();
        Ok(roc_auc(&flat, &self.labels)?.auc)
    }
}

/// Source of masks for queried tiles.
pub trait Oracle {
    /// Masks for `tiles`, in the same order.
    fn annotate(&mut self, tiles: &[&TilePair]) -> Result<Vec<Mask>>;

    /// Called before each round is trained.
    fn begin_iteration(&mut self, _iteration: usize) {}

    /// Called once the loop has finished.
    fn finish(&mut self) {}
}

/// Answers from stored ground truth. Asking twice for one tile is an error.
pub struct SimulatedOracle {
    masks: HashMap<TileId, Mask>,
    answered: BTreeSet<TileId>,
}

impl SimulatedOracle {
    /// Takes the masks of `tiles`; tiles without a mask are skipped.
    pub fn new<'a>(tiles: impl IntoIterator<Item = &'a TilePair>) -> Self {
        let masks = tiles
            .into_iter()
            .filter_map(|t| t.mask.clone().map(|m| (t.id, m)))
            .collect();
        Self {
            masks,
            answered: BTreeSet::new(),
        }
    }

    pub fn answered(&self) -> &BTreeSet<TileId> {
        &self.answered
    }
}

impl Oracle for SimulatedOracle {
    fn annotate(&mut self, tiles: &[&TilePair]) -> Result<Vec<Mask>> {
        tiles
            .iter()
            .map(|t| {
                if !self.answered.insert(t.id) {
                    return Err(Error::Oracle(format!("tile {} was already labelled", t.id)));
                }
                self.masks
                    .get(&t.id)
                    .cloned()
                    .ok_or_else(|| Error::Oracle(format!("no ground truth for tile {}", t.id)))
            })
            .collect()
    }
}

/// Why a submitted label was refused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rejection {
    NotPending(TileId),
    AlreadyLabelled(TileId),
    Malformed(String),
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::NotPending(id) => write!(f, "tile {id} is not awaiting a label"),
            Rejection::AlreadyLabelled(id) => write!(f, "tile {id} already has a label"),
            Rejection::Malformed(m) => write!(f, "malformed mask: {m}"),
        }
    }
}

#[derive(Debug, Default)]
struct QueueInner {
    pending: Vec<TileId>,
    received: HashMap<TileId, Mask>,
    labelled: BTreeSet<TileId>,
    iteration: usize,
    finished: bool,
    side: usize,
}

/// Snapshot of the queue for status reporting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QueueStatus {
    pub pending: usize,
    pub labelled: usize,
    pub iteration: usize,
    pub finished: bool,
}

/// Shared state between a [`QueueOracle`] and whoever submits labels.
#[derive(Clone, Debug)]
pub struct LabelQueue {
    inner: Arc<(Mutex<QueueInner>, Condvar)>,
}

impl LabelQueue {
    pub fn new(side: usize) -> Self {
        Self {
            inner: Arc::new((
                Mutex::new(QueueInner {
                    side,
                    ..Default::default()
                }),
                Condvar::new(),
            )),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, QueueInner> {
        self.inner.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Tiles awaiting a label, in query order.
    pub fn pending(&self) -> Vec<TileId> {
        let q = self.lock();
        q.pending
            .iter()
            .copied()
            .filter(|id| !q.received.contains_key(id))
            .collect()
    }

    pub fn status(&self) -> QueueStatus {
        let q = self.lock();
        QueueStatus {
            pending: q.pending.iter().filter(|id| !q.received.contains_key(id)).count(),
            labelled: q.labelled.len() + q.received.len(),
            iteration: q.iteration,
            finished: q.finished,
        }
    }

    pub fn side(&self) -> usize {
        self.lock().side
    }

    /// Accepts a mask for a pending tile. The first label for an id wins;
    /// later ones are rejected.
    pub fn submit(&self, id: TileId, mask: Mask) -> std::result::Result<(), Rejection> {
        let mut q = self.lock();
        if q.labelled.contains(&id) || q.received.contains_key(&id) {
            return Err(Rejection::AlreadyLabelled(id));
        }
        if !q.pending.contains(&id) {
            return Err(Rejection::NotPending(id));
        }
        if mask.side() != q.side {
            return Err(Rejection::Malformed(format!(
                "mask side {} does not match tile side {}",
                mask.side(),
                q.side
            )));
        }
        q.received.insert(id, mask);
        self.inner.1.notify_all();
        Ok(())
    }
}

/// Publishes queries on a [`LabelQueue`] and blocks until every one of
/// them has been labelled.
pub struct QueueOracle {
    queue: LabelQueue,
    store: Option<std::path::PathBuf>,
}

impl QueueOracle {
    pub fn new(queue: LabelQueue) -> Self {
        Self { queue, store: None }
    }

    /// Also writes every accepted mask to `<dir>/<id>.png`.
    pub fn with_store(queue: LabelQueue, dir: std::path::PathBuf) -> Self {
        Self {
            queue,
            store: Some(dir),
        }
    }

    pub fn queue(&self) -> &LabelQueue {
        &self.queue
    }
}

impl Oracle for QueueOracle {
    fn annotate(&mut self, tiles: &[&TilePair]) -> Result<Vec<Mask>> {
        let ids: Vec<TileId> = tiles.iter().map(|t| t.id).collect();
        let (lock, cvar) = &*self.queue.inner;
        let mut q = lock.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(id) = ids.iter().find(|id| q.labelled.contains(id) || q.pending.contains(id)) {
            return Err(Error::Oracle(format!("tile {id} was already queried")));
        }
        q.pending.extend(&ids);
        while !ids.iter().all(|id| q.received.contains_key(id)) {
            q = cvar.wait(q).unwrap_or_else(|e| e.into_inner());
        }
        let mut masks = Vec::with_capacity(ids.len());
        for id in &ids {
            masks.push(q.received.remove(id).expect("waited for it"));
            q.labelled.insert(*id);
        }
        q.pending.retain(|id| !ids.contains(id));
        drop(q);
        if let Some(dir) = &self.store {
            std::fs::create_dir_all(dir)?;
            for (id, m) in ids.iter().zip(&masks) {
                std::fs::write(dir.join(format!("{id}.png")), crate::corpus::mask_to_png(m)?)?;
            }
        }
        Ok(masks)
    }

    fn begin_iteration(&mut self, iteration: usize) {
        self.queue.lock().iteration = iteration;
    }

    fn finish(&mut self) {
        self.queue.lock().finished = true;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ensemble,
    Mcbn,
    Random,
    /// Random acquisition with an `M`-member ensemble as the predictor.
    RandomEnsemble,
    /// No acquisition: one training on a class-balanced set drawn from
    /// every initial and pool tile. Only the harness runs it.
    FullSupervision,
}

impl Method {
    /// Models trained per round.
    pub fn models(self, members: usize) -> usize {
        match self {
            Method::Ensemble | Method::RandomEnsemble => members,
            Method::Mcbn | Method::Random | Method::FullSupervision => 1,
        }
    }

    pub fn is_random(self) -> bool {
        matches!(self, Method::Random | Method::RandomEnsemble)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ensemble => "ensemble",
            Method::Mcbn => "mcbn",
            Method::Random => "random",
            Method::RandomEnsemble => "random-ensemble",
            Method::FullSupervision => "full-supervision",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ensemble" => Ok(Method::Ensemble),
            "mcbn" => Ok(Method::Mcbn),
            "random" => Ok(Method::Random),
            "random-ensemble" => Ok(Method::RandomEnsemble),
            "full-supervision" => Ok(Method::FullSupervision),
            other => Err(Error::Config(vec![format!("unknown method `{other}`")])),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    pub method: Method,
    pub metric: Metric,
    /// Ensemble size, or number of stochastic passes for MCBN.
    pub members: usize,
    pub n_add: usize,
    pub iterations: usize,
    /// Reference mini-batch size for MCBN.
    pub mcbn_batch: usize,
    pub model: SiamUNetConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.method == Method::FullSupervision {
            problems.push("full-supervision has no acquisition loop".to_string());
        }
        if self.n_add == 0 {
            problems.push("n_add must be >= 1".to_string());
        }
        if self.members == 0 {
            problems.push("members must be >= 1".to_string());
        }
        if self.method == Method::Ensemble && self.members < 2 {
            problems.push(format!("an ensemble needs at least 2 members, got {}", self.members));
        }
        if self.method == Method::Mcbn && self.mcbn_batch < 2 {
            problems.push(format!("MCBN batch size {} < 2", self.mcbn_batch));
        }
        if let Err(e) = self.model.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Outcome of one round: the models trained on the labelled set as it
/// stood at the start of the round, and their test AUC.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub labels_used: usize,
    pub auc: f64,
    /// Share of "changed" tiles in the labelled set.
    pub change_fraction: f64,
    /// Share of "changed" tiles among the tiles acquired so far.
    pub acquired_change_fraction: Option<f64>,
    pub pool_size: usize,
    /// Tiles acquired at the end of this round.
    pub selected: Vec<TileId>,
    /// Wall-clock time of the round; not part of any deterministic output.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct LoopState {
    pub iteration: usize,
    pub labeled: LabeledSet,
    pub pool: Pool,
    pub records: Vec<IterationRecord>,
    pub n_iterations: usize,
    pub n_add: usize,
    pub initial_size: usize,
    pub initial_changed: usize,
    /// Set when the pool ran dry before `n_iterations` rounds.
    pub exhausted: bool,
}

/// Fraction of "changed" tiles in the labelled set.
pub fn record_balance(state: &LoopState) -> Result<f64> {
    balance(&state.labeled)
}

fn balance(labeled: &LabeledSet) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::Acquisition("labelled set is empty".into()));
    }
    Ok(labeled.changed_count() as f64 / labeled.len() as f64)
}

/// Uniform draw of `n_add` pool ids without replacement, returned in
/// ascending id order; the whole pool when it is smaller.
pub fn acquire_random(pool: &Pool, n_add: usize, seed: u64) -> Result<Vec<TileId>> {
    if n_add == 0 {
        return Err(Error::Acquisition("n_add must be >= 1".into()));
    }
    let ids = pool.ids();
    if ids.len() <= n_add {
        return Ok(ids);
    }
    let mut rng = seed::rng(seed, &[stream::RANDOM_ACQUIRE]);
    let mut picked: Vec<TileId> = sample(&mut rng, ids.len(), n_add).into_iter().map(|i| ids[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Trains `count` models from their fixed seeded initialisations.
pub fn train_models(
    model: &SiamUNetConfig,
    train_cfg: &TrainConfig,
    labeled: &[TilePair],
    count: usize,
    seed: u64,
) -> Result<Vec<SiamUNet>> {
    (0..count as u64)
        .map(|member| {
            let mut net = build(&SiamUNetConfig {
                seed: seed::derive(seed, &[stream::INIT, member]),
                ..model.clone()
            })?;
            let cfg = TrainConfig {
                seed: seed::derive(seed, &[stream::SHUFFLE, member]),
                ..train_cfg.clone()
            };
            train(&mut net, labeled, &cfg)?;
            Ok(net)
        })
        .collect()
}

/// Test-set change probabilities: the member mean for ensembles, the
/// single model's deterministic prediction otherwise.
pub fn predict_test(models: &[SiamUNet], test: &TestSet) -> Result<Vec<Vec<f64>>> {
    let inputs: Vec<&TilePair> = test.inputs().iter().collect();
    if models.len() == 1 {
        return Ok(models[0]
            .predict_tiles(&inputs, None)?
            .iter()
            .map(ChangeMap::change_probs)
            .collect());
    }
    Ok(acquire::ensemble_predict_many(models, &inputs)?
        .iter()
        .map(|s| acquire::mean_prediction(s).change_probs())
        .collect())
}

fn check_disjoint(labeled: &LabeledSet, pool: &Pool, test: &TestSet) -> Result<()> {
    let test_ids: BTreeSet<TileId> = test.ids().collect();
    if let Some(id) = pool.ids().into_iter().find(|id| test_ids.contains(id)) {
        return Err(Error::PoolTestOverlap(id));
    }
    if let Some(&id) = labeled
        .ids()
        .iter()
        .find(|id| test_ids.contains(id) || pool.contains(**id))
    {
        return Err(Error::DuplicateTile(id));
    }
    Ok(())
}

fn select(
    cfg: &LoopConfig,
    models: &[SiamUNet],
    labeled: &LabeledSet,
    pool: &Pool,
    round: usize,
) -> Result<Vec<TileId>> {
    let round_seed = seed::derive(cfg.seed, &[round as u64]);
    if cfg.method.is_random() {
        return acquire_random(pool, cfg.n_add, round_seed);
    }
    let queries: Vec<&TilePair> = pool.tiles().collect();
    let stacks: Vec<PredictionStack> = match cfg.method {
        Method::Ensemble => acquire::ensemble_predict_many(models, &queries)?,
        Method::Mcbn => mcbn_predict_many(
            &models[0],
            &queries,
            labeled.tiles(),
            cfg.members,
            cfg.mcbn_batch,
            round_seed,
        )?,
        Method::Random | Method::RandomEnsemble | Method::FullSupervision => unreachable!(),
    };
    let scores: Vec<_> = stacks.iter().map(|s| acquire::score(s, cfg.metric)).collect();
    rank_and_select(&scores, cfg.n_add)
}

/// Runs the loop for `cfg.iterations` acquisition rounds (fewer if the pool
/// runs dry). Record `i` holds the models trained after `i` acquisitions.
pub fn run_loop(
    initial: LabeledSet,
    pool: Pool,
    test: &TestSet,
    oracle: &mut dyn Oracle,
    cfg: &LoopConfig,
) -> Result<LoopState> {
    run_loop_observed(initial, pool, test, oracle, cfg, &mut |_| {})
}

/// [`run_loop`] with a callback invoked on every record as soon as it exists.
pub fn run_loop_observed(
    initial: LabeledSet,
    pool: Pool,
    test: &TestSet,
    oracle: &mut dyn Oracle,
    cfg: &LoopConfig,
    observe: &mut dyn FnMut(&IterationRecord),
) -> Result<LoopState> {
    cfg.validate()?;
    if initial.is_empty() {
        return Err(Error::Acquisition("initial labelled set is empty".into()));
    }
    check_disjoint(&initial, &pool, test)?;
    let mut state = LoopState {
        iteration: 0,
        initial_size: initial.len(),
        initial_changed: initial.changed_count(),
        labeled: initial,
        pool,
        records: Vec::new(),
        n_iterations: cfg.iterations,
        n_add: cfg.n_add,
        exhausted: false,
    };
    let models_per_round = cfg.method.models(cfg.members);
    for round in 0..=cfg.iterations {
        let started = Instant::now();
        state.iteration = round;
        oracle.begin_iteration(round);
        let models = train_models(
            &cfg.model,
            &cfg.train,
            state.labeled.tiles(),
            models_per_round,
            cfg.seed,
        )?;
        let auc = test.auc(&predict_test(&models, test)?)?;
        let acquired = state.labeled.len() - state.initial_size;
        let acquired_changed = state.labeled.changed_count() - state.initial_changed;
        let mut record = IterationRecord {
            iteration: round,
            labels_used: state.labeled.len(),
            auc,
            change_fraction: balance(&state.labeled)?,
            acquired_change_fraction: (acquired > 0).then(|| acquired_changed as f64 / acquired as f64),
            pool_size: state.pool.len(),
            selected: Vec::new(),
            seconds: 0.0,
        };
        if round < cfg.iterations {
            if state.pool.is_empty() {
                state.exhausted = true;
            } else {
                let ids = select(cfg, &models, &state.labeled, &state.pool, round)?;
                let queried: Vec<TilePair> = ids
                    .iter()
                    .map(|&id| state.pool.remove(id).expect("selected from the pool"))
                    .collect();
                let refs: Vec<&TilePair> = queried.iter().collect();
                let masks = oracle.annotate(&refs)?;
                if masks.len() != queried.len() {
                    return Err(Error::Oracle(format!(
                        "asked for {} masks, got {}",
                        queried.len(),
                        masks.len()
                    )));
                }
                for (mut tile, mask) in queried.into_iter().zip(masks) {
                    if mask.side() != tile.side() {
                        return Err(Error::Oracle(format!(
                            "mask for tile {} has side {}, expected {}",
                            tile.id,
                            mask.side(),
                            tile.side()
                        )));
                    }
                    tile.mask = Some(mask);
                    state.labeled.add(tile)?;
                }
                record.selected = ids;
            }
        }
        record.seconds = started.elapsed().as_secs_f64();
        observe(&record);
        state.records.push(record);
        if state.exhausted {
            break;
        }
    }
    oracle.finish();
    Ok(state)
}
