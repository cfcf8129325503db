//! Brute-force oracles and random instance generators shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use ecg_fusion::gbdt::{GbdtConfig, TreeNode};
use ecg_fusion::{EmbeddingSet, Matrix};
use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Test-side generator, deliberately a different algorithm from the one
/// used by the library.
pub struct Gen(Xoshiro256PlusPlus);

impl Gen {
    pub fn new(seed: u64) -> Self {
        Gen(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn unit(&mut self) -> f64 {
        (self.u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.u64() % n as u64) as usize
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self) -> f64 {
        let u = 1.0 - self.unit();
        let v = self.unit();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).sin()
    }

    pub fn bool(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

/// Labels with both classes present.
pub fn random_labels(g: &mut Gen, m: usize) -> Vec<u8> {
    loop {
        let p = g.range(0.1, 0.9);
        let labels: Vec<u8> = (0..m).map(|_| g.bool(p) as u8).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return labels;
        }
    }
}

/// Scores drawn from a small pool of values so that ties are common.
pub fn tied_scores(g: &mut Gen, m: usize) -> Vec<f64> {
    let pool: Vec<f64> = (0..1 + g.below(m.max(2))).map(|_| g.unit()).collect();
    (0..m)
        .map(|_| {
            if g.bool(0.5) {
                pool[g.below(pool.len())]
            } else {
                g.unit()
            }
        })
        .collect()
}

/// AUROC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                credit += 1.0;
            } else if si == sj {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

/// Average precision by sweeping every distinct score as a `>=` threshold,
/// from the highest down.
pub fn sweep_average_precision(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| s >= t && l == 1)
            .count() as f64;
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| s >= t && l == 0)
            .count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

/// Random regression-style dataset with a logistic label model. Some
/// columns are coarsely quantized so they carry repeated values.
pub fn gbdt_dataset(g: &mut Gen, n: usize, d: usize) -> (Matrix<f64>, Vec<u8>) {
    let w: Vec<f64> = (0..d).map(|_| g.normal()).collect();
    let quantized: Vec<bool> = (0..d).map(|_| g.bool(0.3)).collect();
    loop {
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..d)
                .map(|j| {
                    let v = g.normal();
                    if quantized[j] {
                        (v * 2.0).round() / 2.0
                    } else {
                        v
                    }
                })
                .collect();
            let z: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5 * g.normal();
            labels.push((z > 0.0) as u8);
            data.extend(row);
        }
        if labels.contains(&0) && labels.contains(&1) {
            return (Matrix::new(n, d, data).unwrap(), labels);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ReplayStats {
    pub splits: usize,
    pub leaves: usize,
    /// Nodes where the best candidate was not unique beyond rounding; the
    /// recorded split was then only required to reach the best gain.
    pub near_ties: usize,
}

struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Gain of one split together with the level under which it is rounding noise.
fn gain_of(
    cfg: &GbdtConfig,
    x: &Matrix<f64>,
    g: &[f64],
    h: &[f64],
    rows: &[usize],
    f: usize,
    t: f64,
) -> Option<(f64, f64)> {
    let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
    for &r in rows {
        if x.get(r, f) < t {
            gl += g[r];
            hl += h[r];
        } else {
            gr += g[r];
            hr += h[r];
        }
    }
    let mcw = cfg.min_child_weight - 1e-10 * (hl + hr);
    if hl < mcw || hr < mcw {
        return None;
    }
    let (gt, ht) = (gl + gr, hl + hr);
    let lam = cfg.reg_lambda;
    let children = gl * gl / (hl + lam) + gr * gr / (hr + lam);
    let parent = gt * gt / (ht + lam);
    Some((
        0.5 * (children - parent) - cfg.gamma,
        1e-10 * children.abs().max(parent.abs()),
    ))
}

/// Every admissible (feature, threshold, gain) at a node, thresholds being
/// midpoints between consecutive distinct values.
fn candidates(
    cfg: &GbdtConfig,
    x: &Matrix<f64>,
    g: &[f64],
    h: &[f64],
    rows: &[usize],
) -> Vec<Best> {
    let mut out = Vec::new();
    for f in 0..x.cols() {
        let mut vals: Vec<f64> = rows.iter().map(|&r| x.get(r, f)).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            if let Some((gain, noise)) = gain_of(cfg, x, g, h, rows, f, t) {
                if gain > noise {
                    out.push(Best {
                        gain,
                        feature: f,
                        threshold: t,
                    });
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn check_node(
    cfg: &GbdtConfig,
    x: &Matrix<f64>,
    g: &[f64],
    h: &[f64],
    rows: &[usize],
    node: &TreeNode<f64>,
    depth: usize,
    stats: &mut ReplayStats,
) -> Result<(), String> {
    let cands = if depth < cfg.max_depth {
        candidates(cfg, x, g, h, rows)
    } else {
        Vec::new()
    };
    let top = cands
        .iter()
        .map(|c| c.gain)
        .fold(f64::NEG_INFINITY, f64::max);
    match node {
        TreeNode::Leaf { weight } => {
            if !cands.is_empty() {
                return Err(format!(
                    "leaf at depth {depth} but a split with gain {top} exists"
                ));
            }
            let gs: f64 = rows.iter().map(|&r| g[r]).sum();
            let hs: f64 = rows.iter().map(|&r| h[r]).sum();
            let want = -gs / (hs + cfg.reg_lambda);
            if (weight - want).abs() > 1e-12 * want.abs().max(1.0) {
                return Err(format!("leaf weight {weight} differs from {want}"));
            }
            stats.leaves += 1;
            Ok(())
        }
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            if depth >= cfg.max_depth {
                return Err(format!(
                    "split at depth {depth} exceeds max_depth {}",
                    cfg.max_depth
                ));
            }
            if cands.is_empty() {
                return Err(format!(
                    "split at depth {depth} where no split has positive gain"
                ));
            }
            let tol = 1e-9 * top.abs().max(1e-300);
            let near: Vec<&Best> = cands.iter().filter(|c| c.gain >= top - tol).collect();
            let argmax = near[0];
            if near.len() == 1 {
                if argmax.feature != *feature || argmax.threshold != *threshold {
                    return Err(format!(
                        "recorded split (f{feature} < {threshold}) but oracle argmax is (f{} < {}) at depth {depth}",
                        argmax.feature, argmax.threshold
                    ));
                }
            } else {
                stats.near_ties += 1;
                let (recorded, _) = gain_of(cfg, x, g, h, rows, *feature, *threshold)
                    .ok_or_else(|| "recorded split violates min_child_weight".to_string())?;
                if recorded < top - tol {
                    return Err(format!("recorded gain {recorded} below best {top}"));
                }
            }
            stats.splits += 1;
            let (l, r): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&r| x.get(r, *feature) < *threshold);
            check_node(cfg, x, g, h, &l, left, depth + 1, stats)?;
            check_node(cfg, x, g, h, &r, right, depth + 1, stats)
        }
    }
}

/// Replays every boosting round of a model trained with
/// subsample = colsample = 1 and checks each node against exhaustive search.
pub fn replay_against_oracle(
    x: &Matrix<f64>,
    labels: &[u8],
    cfg: &GbdtConfig,
    trees: &[TreeNode<f64>],
) -> Result<ReplayStats, String> {
    let n = x.rows();
    let origin = (cfg.base_score / (1.0 - cfg.base_score)).ln();
    let mut raw = vec![0.0; n];
    let rows: Vec<usize> = (0..n).collect();
    let mut stats = ReplayStats::default();
    for (k, tree) in trees.iter().enumerate() {
        let p: Vec<f64> = raw
            .iter()
            .map(|&s| sigmoid(origin + cfg.learning_rate * s))
            .collect();
        let g: Vec<f64> = p.iter().zip(labels).map(|(&p, &y)| p - y as f64).collect();
        let h: Vec<f64> = p.iter().map(|&p| p * (1.0 - p)).collect();
        check_node(cfg, x, &g, &h, &rows, tree, 0, &mut stats)
            .map_err(|e| format!("round {k}: {e}"))?;
        for (i, s) in raw.iter_mut().enumerate() {
            *s += tree.predict(x.row(i));
        }
    }
    Ok(stats)
}

/// Mean training log-loss after each prefix of the ensemble, starting with
/// the empty prefix.
pub fn loss_curve(
    x: &Matrix<f64>,
    labels: &[u8],
    cfg: &GbdtConfig,
    trees: &[TreeNode<f64>],
) -> Vec<f64> {
    let origin = (cfg.base_score / (1.0 - cfg.base_score)).ln();
    let mut raw = vec![0.0; x.rows()];
    let loss = |raw: &[f64]| {
        raw.iter()
            .zip(labels)
            .map(|(&s, &y)| {
                let p = sigmoid(origin + cfg.learning_rate * s);
                -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / labels.len() as f64
    };
    let mut out = vec![loss(&raw)];
    for t in trees {
        for (i, s) in raw.iter_mut().enumerate() {
            *s += t.predict(x.row(i));
        }
        out.push(loss(&raw));
    }
    out
}

/// Random valid embedding set, including awkward ids and extreme floats.
pub fn random_set(g: &mut Gen) -> EmbeddingSet {
    let n = 1 + g.below(24);
    let d = 1 + g.below(12);
    let ids: Vec<String> = (0..n)
        .map(|i| match g.below(4) {
            0 => format!("r{i}"),
            1 => format!("ℓ-{i}-é"),
            2 => format!("{i}{}", "x".repeat(g.below(40))),
            _ => format!("id,{i} \"q\""),
        })
        .collect();
    let labels: Vec<u8> = (0..n).map(|_| g.below(2) as u8).collect();
    let data: Vec<f32> = (0..n * d)
        .map(|_| match g.below(6) {
            0 => 0.0,
            1 => -0.0,
            2 => f32::MAX * if g.bool(0.5) { 1.0 } else { -1.0 },
            3 => f32::from_bits(1 + g.below(1000) as u32),
            _ => (g.normal() * 1e3) as f32,
        })
        .collect();
    let tag = ["", "st_mem", "ecg_fm:cls", "fused"][g.below(4)];
    EmbeddingSet::new(ids, labels, Matrix::new(n, d, data).unwrap(), tag).unwrap()
}

/// Checks the invariants every successfully decoded set must satisfy.
pub fn set_is_valid(s: &EmbeddingSet) -> bool {
    let n = s.len();
    let mut ids: Vec<&String> = s.ids().iter().collect();
    ids.sort();
    ids.dedup();
    n > 0
        && s.dim() > 0
        && ids.len() == n
        && s.labels().len() == n
        && s.labels().iter().all(|&l| l <= 1)
        && s.features().rows() == n
        && s.features().as_slice().iter().all(|v| v.is_finite())
}
