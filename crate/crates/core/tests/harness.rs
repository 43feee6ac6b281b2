use std::collections::BTreeMap;
use std::path::Path;

use cartal_core::active_loop::{Method, TestSet};
use cartal_core::harness::{
    balanced_training_set, run_experiment, sweep_nadd, CorpusSource, ExperimentConfig, ExperimentSummary, Stat,
    RESULTS_FILE, SELECTIONS_FILE, SUMMARY_FILE,
};
use cartal_core::siamnet::{SiamUNetConfig, TrainConfig};
use cartal_core::synthdata::{generate, split, ClassCounts, CorpusSpec, TileClass};
use cartal_core::Error;

fn corpus_spec() -> CorpusSpec {
    CorpusSpec {
        changed: 12,
        unchanged: 40,
        ignored: 0,
        seed: 8,
        ..Default::default()
    }
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        corpus: CorpusSource::Spec(corpus_spec()),
        initial: ClassCounts::new(2, 2),
        test: ClassCounts::new(3, 3),
        members: 2,
        n_add: 4,
        iterations: 2,
        mcbn_batch: 3,
        model: SiamUNetConfig {
            widths: vec![2, 4, 4],
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        },
        seeds: vec![0, 1, 2],
        ..Default::default()
    }
}

struct Row {
    seed: u64,
    iteration: usize,
    labels_used: usize,
    auc: f64,
    change_fraction: f64,
}

fn rows(dir: &Path) -> Vec<Row> {
    let mut r = csv::Reader::from_path(dir.join(RESULTS_FILE)).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        vec!["seed", "iteration", "labels_used", "auc", "change_fraction", "seconds"]
    );
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            Row {
                seed: rec[0].parse().unwrap(),
                iteration: rec[1].parse().unwrap(),
                labels_used: rec[2].parse().unwrap(),
                auc: rec[3].parse().unwrap(),
                change_fraction: rec[4].parse().unwrap(),
            }
        })
        .collect()
}

/// Mean, n-1 deviation and standard error, written out independently.
fn stats(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt(), var.sqrt() / n.sqrt())
}

fn close(s: &Stat, expect: (f64, f64, f64)) {
    assert!((s.mean - expect.0).abs() < 1e-12);
    assert!((s.std - expect.1).abs() < 1e-12);
    assert!((s.stderr - expect.2).abs() < 1e-12);
}

#[test]
fn summary_agrees_with_the_rows() {
    let out = tempfile::tempdir().unwrap();
    let result = run_experiment(&tiny(), out.path()).unwrap();
    let rows = rows(out.path());
    assert_eq!(rows.len(), 3 * 3);
    let summary: ExperimentSummary =
        serde_json::from_slice(&std::fs::read(out.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary, result.summary);
    let mut by_iter: BTreeMap<usize, Vec<&Row>> = BTreeMap::new();
    for r in &rows {
        by_iter.entry(r.iteration).or_default().push(r);
    }
    for (i, it) in summary.iterations.iter().enumerate() {
        let group = &by_iter[&i];
        assert_eq!(group.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(group.iter().all(|r| r.labels_used == 4 + 4 * i));
        close(&it.auc, stats(&group.iter().map(|r| r.auc).collect::<Vec<_>>()));
        close(
            &it.change_fraction,
            stats(&group.iter().map(|r| r.change_fraction).collect::<Vec<_>>()),
        );
    }
    for seed in 0..3 {
        let labels: Vec<usize> = rows.iter().filter(|r| r.seed == seed).map(|r| r.labels_used).collect();
        assert!(labels.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn identical_configs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        method: Method::Mcbn,
        ..tiny()
    };
    run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    for f in [RESULTS_FILE, SELECTIONS_FILE, SUMMARY_FILE] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn random_runs_write_one_row_per_round() {
    let out = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        method: Method::Random,
        seeds: vec![4],
        iterations: 3,
        ..tiny()
    };
    run_experiment(&cfg, out.path()).unwrap();
    assert_eq!(rows(out.path()).len(), 4);
}

#[test]
fn invalid_configs_fail_before_running() {
    let out = tempfile::tempdir().unwrap();
    let target = out.path().join("never");
    let cfg = ExperimentConfig {
        members: 1,
        seeds: vec![1, 1],
        ..tiny()
    };
    match run_experiment(&cfg, &target) {
        Err(Error::Config(p)) => assert_eq!(p.len(), 2, "{p:?}"),
        other => panic!("expected config errors, got {:?}", other.map(|_| ())),
    }
    assert!(!target.exists());
}

#[test]
fn sweep_reaches_the_label_target() {
    let out = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        method: Method::Random,
        seeds: vec![0, 1],
        ..tiny()
    };
    let entries = sweep_nadd(&cfg, &[2, 3, 5], 13, out.path()).unwrap();
    let iterations: Vec<usize> = entries.iter().map(|e| e.iterations).collect();
    assert_eq!(iterations, vec![5, 3, 2]);
    for e in &entries {
        assert!(e.reached_target);
        assert!(e.summary.final_labels.iter().all(|&l| l >= 13));
        assert!(out.path().join(format!("nadd_{}", e.n_add)).join(RESULTS_FILE).exists());
    }
    assert!(out.path().join("sweep.json").exists());
    assert!(sweep_nadd(&cfg, &[0], 13, out.path()).is_err());
}

#[test]
fn full_supervision_trains_on_a_balanced_set() {
    let tiles = generate(&corpus_spec()).unwrap();
    let s = split(&tiles, ClassCounts::new(2, 2), ClassCounts::new(3, 3), 0).unwrap();
    let set = balanced_training_set(&s, 0);
    let changed = set.iter().filter(|t| t.class() == Some(TileClass::Changed)).count();
    assert_eq!(changed, 12 - 3);
    assert_eq!(set.len(), 2 * changed);
    assert_eq!(
        set.iter().map(|t| t.id).collect::<Vec<_>>(),
        balanced_training_set(&s, 0).iter().map(|t| t.id).collect::<Vec<_>>()
    );
    let test_ids: Vec<u32> = s.test.iter().map(|t| t.id).collect();
    assert!(set.iter().all(|t| !test_ids.contains(&t.id)));

    let out = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        method: Method::FullSupervision,
        ..tiny()
    };
    let result = run_experiment(&cfg, out.path()).unwrap();
    let rows = rows(out.path());
    assert_eq!(rows.len(), 3);
    assert!(rows
        .iter()
        .all(|r| r.iteration == 0 && r.labels_used == 52 - 6 && r.change_fraction == 0.5));
    let full = result.summary.full_supervision.unwrap();
    assert_eq!((full.labels_used, full.training_tiles), (46, 18));
}

#[test]
fn test_inputs_carry_no_masks() {
    let tiles = generate(&corpus_spec()).unwrap();
    let test = TestSet::new(tiles[..6].to_vec()).unwrap();
    assert!(test.inputs().iter().all(|t| t.mask.is_none()));
}
