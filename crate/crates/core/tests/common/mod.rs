//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use cartal_core::acquire::PredictionStack;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Variance score by explicit loops over every index.
pub fn variance_by_loops(members: usize, side: usize, probs: &[f64]) -> f64 {
    let at = |m: usize, y: usize, x: usize, c: usize| probs[((m * side + y) * side + x) * 2 + c];
    let mut tile = 0.0;
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0;
            for c in 0..2 {
                let mut mean = 0.0;
                for m in 0..members {
                    mean += at(m, y, x, c);
                }
                mean /= members as f64;
                for m in 0..members {
                    let d = at(m, y, x, c) - mean;
                    acc += d * d;
                }
            }
            tile += acc / (2 * members) as f64;
        }
    }
    tile / (side * side) as f64
}

/// Entropy score by explicit loops over every index.
pub fn entropy_by_loops(members: usize, side: usize, probs: &[f64]) -> f64 {
    let at = |m: usize, y: usize, x: usize, c: usize| probs[((m * side + y) * side + x) * 2 + c];
    let mut tile = 0.0;
    for y in 0..side {
        for x in 0..side {
            let mut h = 0.0;
            for c in 0..2 {
                let mut mean = 0.0;
                for m in 0..members {
                    mean += at(m, y, x, c);
                }
                mean /= members as f64;
                if mean > 0.0 {
                    h -= mean * mean.max(1e-12).ln();
                }
            }
            tile += h;
        }
    }
    tile / (side * side) as f64
}

/// A random valid stack with `M ≤ 4` and side `≤ 3`, mixing continuous
/// probabilities with exact 0, ½ and 1 entries.
pub fn random_stack(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<f64>) {
    let members = rng.gen_range(1..=4);
    let side = rng.gen_range(1..=3);
    let mut probs = Vec::with_capacity(members * side * side * 2);
    for _ in 0..members * side * side {
        let p: f64 = match rng.gen_range(0..6) {
            0 => 0.0,
            1 => 1.0,
            2 => 0.5,
            _ => rng.gen(),
        };
        probs.push(1.0 - p);
        probs.push(p);
    }
    (members, side, probs)
}

pub fn to_stack(members: usize, side: usize, probs: Vec<f64>) -> PredictionStack {
    PredictionStack::new(0, members, side, probs).unwrap()
}

/// AUC by counting wins and half ties over every positive/negative pair.
pub fn auc_by_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// A random scored instance with both classes present and many ties.
pub fn random_auc_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.gen_range(2..=60);
        let levels = rng.gen_range(1..=8);
        let continuous = rng.gen_bool(0.3);
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            scores.push(if continuous {
                rng.gen::<f64>()
            } else {
                rng.gen_range(0..levels) as f64 / levels as f64
            });
            labels.push(rng.gen_bool(0.4));
        }
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}
