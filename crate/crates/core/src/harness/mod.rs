//! Multi-seed experiments, the `N_add` sweep, and their on-disk results.

mod serve;

pub use serve::{serve_oracle, OracleServer};

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquire::Metric;
use crate::active_loop::{
    predict_test, run_loop_observed, train_models, IterationRecord, LabelQueue, LabeledSet, LoopConfig, Method, Pool,
    QueueOracle, SimulatedOracle, TestSet,
};
use crate::corpus::read_corpus;
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::siamnet::{LrSchedule, SiamUNetConfig, TrainConfig};
use crate::synthdata::{generate, split, ClassCounts, CorpusSpec, Split, TileClass, TilePair};

pub const CONFIG_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const SELECTIONS_FILE: &str = "selections.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    /// Generate the corpus in memory.
    Spec(CorpusSpec),
    /// Read a corpus written by `cartal gen`.
    Path(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitSource {
    /// A fresh split for every seed.
    PerSeed,
    /// The split tags stored in the corpus index, shared by every seed.
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum OracleKind {
    /// Ground-truth masks from the corpus.
    Simulated,
    /// Masks submitted over HTTP on the given port.
    Http { port: u16 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub corpus: CorpusSource,
    pub split: SplitSource,
    pub initial: ClassCounts,
    pub test: ClassCounts,
    pub method: Method,
    pub metric: Metric,
    pub members: usize,
    pub n_add: usize,
    pub iterations: usize,
    pub mcbn_batch: usize,
    pub model: SiamUNetConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Also train on every initial and pool tile and report that AUC.
    pub full_supervision: bool,
    /// Put wall-clock seconds into `results.csv`; off keeps it reproducible.
    pub record_wall_clock: bool,
    pub oracle: OracleKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            corpus: CorpusSource::Spec(CorpusSpec::default()),
            split: SplitSource::PerSeed,
            initial: ClassCounts::new(10, 10),
            test: ClassCounts::new(100, 100),
            method: Method::Ensemble,
            metric: Metric::Variance,
            members: 3,
            n_add: 20,
            iterations: 10,
            mcbn_batch: 8,
            model: SiamUNetConfig {
                widths: vec![4, 8, 16],
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 12,
                min_steps: 400,
                batch_size: 8,
                learning_rate: 1e-2,
                schedule: LrSchedule::Cosine,
                ..Default::default()
            },
            seeds: vec![0, 1, 2, 3, 4],
            full_supervision: false,
            record_wall_clock: false,
            oracle: OracleKind::Simulated,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn loop_config(&self, seed: u64) -> LoopConfig {
        LoopConfig {
            method: self.method,
            metric: self.metric,
            members: self.members,
            n_add: self.n_add,
            iterations: self.iterations,
            mcbn_batch: self.mcbn_batch,
            model: self.model.clone(),
            train: self.train.clone(),
            seed,
        }
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.version != CONFIG_VERSION {
            problems.push(format!("unsupported config version {}", self.version));
        }
        if self.seeds.is_empty() {
            problems.push("at least one seed is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            problems.push(format!("seed {s} is listed twice"));
        }
        if self.initial.total() == 0 {
            problems.push("the initial set is empty".into());
        }
        if self.test.changed == 0 || self.test.unchanged == 0 {
            problems.push("the test set needs tiles of both classes".into());
        }
        match &self.corpus {
            CorpusSource::Spec(spec) => {
                if let Err(e) = spec.validate() {
                    problems.push(e.to_string());
                }
                if spec.tile_side != self.model.tile_side {
                    problems.push(format!(
                        "corpus tile side {} differs from model tile side {}",
                        spec.tile_side, self.model.tile_side
                    ));
                }
                if self.split == SplitSource::Corpus {
                    problems.push("split `corpus` needs a corpus path".into());
                }
            }
            CorpusSource::Path(_) => {}
        }
        let loop_cfg = LoopConfig {
            method: if self.method == Method::FullSupervision {
                Method::Random
            } else {
                self.method
            },
            ..self.loop_config(0)
        };
        if let Err(Error::Config(p)) = loop_cfg.validate() {
            problems.extend(p);
        }
        if self.method == Method::FullSupervision && !matches!(self.oracle, OracleKind::Simulated) {
            problems.push("full-supervision needs the simulated oracle".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Mean, sample standard deviation and standard error over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Stat {
    /// The standard deviation uses `n - 1` and is 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            stderr: std / (n as f64).sqrt(),
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub labels_used: Stat,
    pub auc: Stat,
    pub change_fraction: Stat,
    /// Over the seeds that have acquired at least one tile.
    pub acquired_change_fraction: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullSupervision {
    /// Annotation effort charged to the baseline: every initial and pool tile.
    pub labels_used: usize,
    /// Size of the class-balanced set it trains on.
    pub training_tiles: usize,
    pub auc: Stat,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FullSupervisionRun {
    pub auc: f64,
    pub labels_used: usize,
    pub training_tiles: usize,
}

/// What one seed produced.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Fraction of changed tiles in this seed's pool.
    pub pool_prior: f64,
    pub records: Vec<IterationRecord>,
    pub exhausted: bool,
    pub full_supervision: Option<FullSupervisionRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub method: Method,
    pub metric: Metric,
    pub n_add: usize,
    pub seeds: Vec<u64>,
    /// Mean over seeds of the pool's changed-tile fraction.
    pub pool_prior: f64,
    pub iterations: Vec<IterationSummary>,
    pub final_labels: Vec<usize>,
    pub full_supervision: Option<FullSupervision>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub summary: ExperimentSummary,
    pub runs: Vec<SeedRun>,
}

struct LoadedCorpus {
    tiles: Vec<TilePair>,
    tagged: Option<Split>,
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<LoadedCorpus> {
    let (tiles, tagged) = match &cfg.corpus {
        CorpusSource::Spec(spec) => (generate(spec)?, None),
        CorpusSource::Path(dir) => {
            let corpus = read_corpus(dir)?;
            if corpus.index.tile_side != cfg.model.tile_side {
                return Err(Error::Config(vec![format!(
                    "corpus tile side {} differs from model tile side {}",
                    corpus.index.tile_side, cfg.model.tile_side
                )]));
            }
            let tagged = corpus.tagged_split();
            (corpus.tiles, Some(tagged))
        }
    };
    Ok(LoadedCorpus { tiles, tagged })
}

fn split_for(cfg: &ExperimentConfig, corpus: &LoadedCorpus, seed: u64) -> Result<Split> {
    match (cfg.split, &corpus.tagged) {
        (SplitSource::Corpus, Some(tagged)) => Ok(tagged.clone()),
        (SplitSource::Corpus, None) => Err(Error::Config(vec!["split `corpus` needs a corpus path".into()])),
        (SplitSource::PerSeed, _) => split(&corpus.tiles, cfg.initial, cfg.test, seed),
    }
}

/// Appends one row per record and flushes, so a crash keeps finished rows.
struct ResultWriters {
    results: csv::Writer<File>,
    timings: csv::Writer<File>,
    selections: csv::Writer<File>,
    wall_clock: bool,
}

impl ResultWriters {
    fn create(out: &Path, wall_clock: bool) -> Result<Self> {
        fs::create_dir_all(out)?;
        let open = |name: &str, header: &[&str]| -> Result<csv::Writer<File>> {
            let mut w = csv::Writer::from_path(out.join(name))?;
            w.write_record(header)?;
            w.flush()?;
            Ok(w)
        };
        Ok(Self {
            results: open(
                RESULTS_FILE,
                &["seed", "iteration", "labels_used", "auc", "change_fraction", "seconds"],
            )?,
            timings: open(TIMINGS_FILE, &["seed", "iteration", "seconds"])?,
            selections: open(SELECTIONS_FILE, &["seed", "iteration", "tile_id"])?,
            wall_clock,
        })
    }

    fn write(&mut self, seed: u64, r: &IterationRecord) -> Result<()> {
        let seconds = if self.wall_clock { r.seconds } else { 0.0 };
        self.results.write_record([
            seed.to_string(),
            r.iteration.to_string(),
            r.labels_used.to_string(),
            r.auc.to_string(),
            r.change_fraction.to_string(),
            format!("{seconds:.3}"),
        ])?;
        self.results.flush()?;
        self.timings
            .write_record([seed.to_string(), r.iteration.to_string(), format!("{:.3}", r.seconds)])?;
        self.timings.flush()?;
        for id in &r.selected {
            self.selections
                .write_record([seed.to_string(), r.iteration.to_string(), id.to_string()])?;
        }
        self.selections.flush()?;
        Ok(())
    }
}

/// All changed tiles of the initial set and pool plus as many unchanged
/// ones drawn at random, in id order.
pub fn balanced_training_set(s: &Split, seed: u64) -> Vec<TilePair> {
    let candidates = s.initial.iter().chain(&s.pool);
    let changed: Vec<&TilePair> = candidates
        .clone()
        .filter(|t| t.class() == Some(TileClass::Changed))
        .collect();
    let mut unchanged: Vec<&TilePair> = candidates.filter(|t| t.class() == Some(TileClass::Unchanged)).collect();
    unchanged.sort_by_key(|t| t.id);
    let mut rng = seed::rng(seed, &[stream::FULL_SUPERVISION]);
    let take = changed.len().min(unchanged.len());
    let mut out: Vec<TilePair> = changed.into_iter().cloned().collect();
    out.extend(
        rand::seq::index::sample(&mut rng, unchanged.len(), take)
            .into_iter()
            .map(|i| unchanged[i].clone()),
    );
    out.sort_by_key(|t| t.id);
    out
}

struct Baseline {
    record: IterationRecord,
    training_tiles: usize,
}

/// Trains `models` networks on the balanced set. The label count charged
/// is every initial and pool tile, since finding all changed tiles means
/// annotating all of them.
fn full_supervision(cfg: &ExperimentConfig, s: &Split, test: &TestSet, seed: u64, models: usize) -> Result<Baseline> {
    let started = std::time::Instant::now();
    let train_set = balanced_training_set(s, seed);
    let nets = train_models(
        &cfg.model,
        &cfg.train,
        &train_set,
        models,
        seed::derive(seed, &[stream::FULL_SUPERVISION]),
    )?;
    let auc = test.auc(&predict_test(&nets, test)?)?;
    let changed = train_set
        .iter()
        .filter(|t| t.class() == Some(TileClass::Changed))
        .count();
    Ok(Baseline {
        record: IterationRecord {
            iteration: 0,
            labels_used: s.initial.len() + s.pool.len(),
            auc,
            change_fraction: changed as f64 / train_set.len() as f64,
            acquired_change_fraction: None,
            pool_size: 0,
            selected: Vec::new(),
            seconds: started.elapsed().as_secs_f64(),
        },
        training_tiles: train_set.len(),
    })
}

fn pool_prior(pool: &[TilePair]) -> f64 {
    let changed = pool.iter().filter(|t| t.class() == Some(TileClass::Changed)).count();
    changed as f64 / pool.len().max(1) as f64
}

/// Runs every seed of `cfg` and writes `results.csv`, `timings.csv`,
/// `selections.csv` and `summary.json` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentResult> {
    cfg.validate()?;
    let tiles = load_corpus(cfg)?;
    let mut writers = ResultWriters::create(out, cfg.record_wall_clock)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let s = split_for(cfg, &tiles, seed)?;
        let test = TestSet::new(s.test.clone())?;
        if cfg.method == Method::FullSupervision {
            let b = full_supervision(cfg, &s, &test, seed, 1)?;
            writers.write(seed, &b.record)?;
            runs.push(SeedRun {
                seed,
                pool_prior: pool_prior(&s.pool),
                full_supervision: Some(FullSupervisionRun {
                    auc: b.record.auc,
                    labels_used: b.record.labels_used,
                    training_tiles: b.training_tiles,
                }),
                records: vec![b.record],
                exhausted: false,
            });
            continue;
        }
        let initial = LabeledSet::new(s.initial.clone())?;
        let pool = Pool::new(s.pool.clone())?;
        let loop_cfg = cfg.loop_config(seed);
        let mut failure = None;
        let mut observe = |r: &IterationRecord| {
            if failure.is_none() {
                failure = writers.write(seed, r).err();
            }
        };
        let state = match &cfg.oracle {
            OracleKind::Simulated => {
                let mut oracle = SimulatedOracle::new(&s.pool);
                run_loop_observed(initial, pool, &test, &mut oracle, &loop_cfg, &mut observe)?
            }
            OracleKind::Http { port } => {
                let queue = LabelQueue::new(cfg.model.tile_side);
                let server = serve_oracle(queue.clone(), &s.pool, ("0.0.0.0", *port))?;
                let mut oracle = QueueOracle::with_store(queue, out.join("labels").join(format!("seed_{seed}")));
                let state = run_loop_observed(initial, pool, &test, &mut oracle, &loop_cfg, &mut observe)?;
                server.stop();
                state
            }
        };
        if let Some(e) = failure {
            return Err(e);
        }
        let full = if cfg.full_supervision {
            let b = full_supervision(cfg, &s, &test, seed, cfg.method.models(cfg.members))?;
            Some(FullSupervisionRun {
                auc: b.record.auc,
                labels_used: b.record.labels_used,
                training_tiles: b.training_tiles,
            })
        } else {
            None
        };
        runs.push(SeedRun {
            seed,
            pool_prior: pool_prior(&s.pool),
            records: state.records,
            exhausted: state.exhausted,
            full_supervision: full,
        });
    }
    let summary = summarise(cfg, &runs);
    fs::write(out.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    Ok(ExperimentResult { summary, runs })
}

fn summarise(cfg: &ExperimentConfig, runs: &[SeedRun]) -> ExperimentSummary {
    let rounds = runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
    let iterations = (0..rounds)
        .map(|i| {
            let at: Vec<&IterationRecord> = runs.iter().filter_map(|r| r.records.get(i)).collect();
            let acquired: Vec<f64> = at.iter().filter_map(|r| r.acquired_change_fraction).collect();
            IterationSummary {
                iteration: i,
                labels_used: Stat::of(&at.iter().map(|r| r.labels_used as f64).collect::<Vec<_>>()),
                auc: Stat::of(&at.iter().map(|r| r.auc).collect::<Vec<_>>()),
                change_fraction: Stat::of(&at.iter().map(|r| r.change_fraction).collect::<Vec<_>>()),
                acquired_change_fraction: (!acquired.is_empty()).then(|| Stat::of(&acquired)),
            }
        })
        .collect();
    let full: Vec<FullSupervisionRun> = runs.iter().filter_map(|r| r.full_supervision).collect();
    ExperimentSummary {
        method: cfg.method,
        metric: cfg.metric,
        n_add: cfg.n_add,
        seeds: cfg.seeds.clone(),
        pool_prior: runs.iter().map(|r| r.pool_prior).sum::<f64>() / runs.len().max(1) as f64,
        iterations,
        final_labels: runs
            .iter()
            .map(|r| r.records.last().map_or(0, |x| x.labels_used))
            .collect(),
        full_supervision: full.last().map(|last| FullSupervision {
            labels_used: last.labels_used,
            training_tiles: last.training_tiles,
            auc: Stat::of(&full.iter().map(|f| f.auc).collect::<Vec<_>>()),
            per_seed: full.iter().map(|f| f.auc).collect(),
        }),
    }
}

/// Rounds needed to grow `initial` labels to at least `min_labels`.
pub fn iterations_for(min_labels: usize, initial: usize, n_add: usize) -> usize {
    min_labels.saturating_sub(initial).div_ceil(n_add.max(1))
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepEntry {
    pub n_add: usize,
    pub iterations: usize,
    /// True when every seed ended with at least `min_labels` labels.
    pub reached_target: bool,
    pub summary: ExperimentSummary,
}

/// Runs `cfg` once per `N_add` value into `out/nadd_<n>/`, each long enough
/// to reach `min_labels`, and writes `out/sweep.json`.
pub fn sweep_nadd(cfg: &ExperimentConfig, n_adds: &[usize], min_labels: usize, out: &Path) -> Result<Vec<SweepEntry>> {
    if n_adds.is_empty() || n_adds.contains(&0) {
        return Err(Error::Config(vec![format!(
            "N_add values {n_adds:?} must be non-empty and positive"
        )]));
    }
    let mut entries = Vec::with_capacity(n_adds.len());
    for &n_add in n_adds {
        let iterations = iterations_for(min_labels, cfg.initial.total(), n_add);
        let run_cfg = ExperimentConfig {
            n_add,
            iterations,
            ..cfg.clone()
        };
        let result = run_experiment(&run_cfg, &out.join(format!("nadd_{n_add}")))?;
        entries.push(SweepEntry {
            n_add,
            iterations,
            reached_target: result.summary.final_labels.iter().all(|&l| l >= min_labels),
            summary: result.summary,
        });
    }
    let mut f = File::create(out.join("sweep.json"))?;
    f.write_all(&serde_json::to_vec_pretty(&entries)?)?;
    Ok(entries)
}
