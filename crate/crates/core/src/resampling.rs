//! Stratified reshuffling and the multi-arm benchmark driver.
//!
//! Every repeat draws one [`SplitPlan`] from the shared labels and all arms
//! (single sources and fused pairs) are trained and scored on that same
//! plan, so per-repeat results are paired across arms.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::fusion::{fuse, normalize_with_train_rows, MinMaxScaler};
use crate::gbdt::{self, GbdtConfig, GbdtModel};
use crate::metrics::{self, EvalResult, StdKind, SummaryStats};
use crate::rng::Xoshiro256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    /// SHA-256 over the little-endian u64 train indices, a separator, then the test indices.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &i in &self.train_indices {
            h.update((i as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
        for &i in &self.test_indices {
            h.update((i as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReshuffleSpec {
    pub n_repeats: usize,
    pub test_fraction: f64,
    pub base_seed: u64,
}

impl Default for ReshuffleSpec {
    fn default() -> Self {
        Self {
            n_repeats: 10,
            test_fraction: 0.2,
            base_seed: 0,
        }
    }
}

impl ReshuffleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_repeats == 0 {
            return Err(Error::Config("n_repeats must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn seed_for(&self, repeat: usize) -> u64 {
        self.base_seed.wrapping_add(repeat as u64)
    }
}

/// Test rows drawn from a stratum of `n_s` members: half-up rounding of
/// `n_s * test_fraction`, clamped to `[1, n_s - 1]`.
pub fn stratum_test_count(n_s: usize, test_fraction: f64) -> usize {
    let raw = (n_s as f64 * test_fraction + 0.5).floor() as usize;
    raw.clamp(1, n_s.saturating_sub(1).max(1))
}

/// Stratified train/test partition.
///
/// Strata are visited class 0 then class 1. Each stratum's indices, in
/// ascending order, get a Fisher–Yates prefix shuffle from one generator
/// seeded with `seed`; the prefix becomes test rows. Output indices are
/// ascending.
pub fn stratified_split(labels: &[u8], test_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if labels.len() < 4 {
        return Err(Error::Stratification(format!(
            "need at least 4 rows, got {}",
            labels.len()
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Stratification(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut strata: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        match l {
            0 | 1 => strata[l as usize].push(i),
            _ => {
                return Err(Error::Validation(format!(
                    "label {l} at index {i} is not 0 or 1"
                )))
            }
        }
    }
    for (class, s) in strata.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {class} has {} member(s); at least 2 are required",
                s.len()
            )));
        }
    }
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let mut is_test = vec![false; labels.len()];
    for stratum in strata.iter_mut() {
        let k = stratum_test_count(stratum.len(), test_fraction);
        rng.partial_shuffle(stratum, k);
        for &i in &stratum[..k] {
            is_test[i] = true;
        }
    }
    let (test_indices, train_indices): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&i| is_test[i]);
    Ok(SplitPlan {
        train_indices,
        test_indices,
        seed,
    })
}

/// A fused arm built from two named single arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusePair {
    pub name: String,
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmKind {
    Single { source_tag: String },
    Fused { a: String, b: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionScalers {
    pub repeat: usize,
    pub a: MinMaxScaler<f64>,
    pub b: MinMaxScaler<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    #[serde(flatten)]
    pub kind: ArmKind,
    pub dim: usize,
    pub results: Vec<EvalResult>,
    pub auroc: SummaryStats,
    pub aucpr: SummaryStats,
    pub split_digests: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub scalers: Vec<FusionScalers>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub repeat: usize,
    pub seed: u64,
    pub digest: String,
    pub n_train: usize,
    pub test_indices: Vec<usize>,
    pub test_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub aucpr_method: String,
    pub std_kind: StdKind,
    pub classifier: GbdtConfig,
    pub reshuffle: ReshuffleSpec,
    pub n_records: usize,
    pub n_pos: usize,
    pub splits: Vec<SplitRecord>,
    pub arms: Vec<ArmReport>,
}

impl BenchmarkReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }
}

/// Trained model and the exact test rows it was scored on.
#[derive(Clone, Debug)]
pub struct ArmArtifact {
    pub repeat: usize,
    pub arm: String,
    pub model: GbdtModel<f64>,
    pub test_set: EmbeddingSet,
}

/// Trains on the plan's train rows of `set` and scores its test rows.
/// Test rows never reach the classifier's fitting code.
pub fn fit_and_score(
    set: &EmbeddingSet,
    plan: &SplitPlan,
    config: &GbdtConfig,
) -> Result<(GbdtModel<f64>, EmbeddingSet, EvalResult)> {
    let train = set.select(&plan.train_indices)?;
    let test = set.select(&plan.test_indices)?;
    let model = gbdt::train(&train.features().cast::<f64>(), train.labels(), config)?;
    let scores = model.predict_proba(&test.features().cast::<f64>())?;
    let eval = metrics::evaluate(&scores, test.labels())?;
    Ok((model, test, eval))
}

/// Model, test rows, metrics, and the two per-source scalers of one fused fit.
pub type FusedOutcome = (
    GbdtModel<f64>,
    EmbeddingSet,
    EvalResult,
    MinMaxScaler<f64>,
    MinMaxScaler<f64>,
);

/// Normalizes each source with a scaler fitted on the plan's train rows,
/// concatenates, then trains and scores as [`fit_and_score`].
pub fn fuse_and_score(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    plan: &SplitPlan,
    config: &GbdtConfig,
) -> Result<FusedOutcome> {
    let (na, sa) = normalize_with_train_rows::<f64>(a, &plan.train_indices)?;
    let (nb, sb) = normalize_with_train_rows::<f64>(b, &plan.train_indices)?;
    let fused = fuse(&na, &nb)?;
    let (model, test, eval) = fit_and_score(&fused, plan, config)?;
    Ok((model, test, eval, sa, sb))
}

struct ArmOutcome {
    eval: EvalResult,
    scalers: Option<(MinMaxScaler<f64>, MinMaxScaler<f64>)>,
    artifact: Option<ArmArtifact>,
}

fn check_arms(arms: &[(String, EmbeddingSet)], fuse_pairs: &[FusePair]) -> Result<()> {
    let Some((_, first)) = arms.first() else {
        return Err(Error::Config("benchmark needs at least one arm".into()));
    };
    let mut names = HashSet::new();
    for (name, set) in arms {
        if !names.insert(name.as_str()) {
            return Err(Error::Config(format!("duplicate arm name {name:?}")));
        }
        if !set.is_aligned_with(first) {
            return Err(Error::Alignment(format!(
                "arm {name:?} does not share ids and labels with the first arm"
            )));
        }
    }
    for p in fuse_pairs {
        if !names.insert(p.name.as_str()) {
            return Err(Error::Config(format!("duplicate arm name {:?}", p.name)));
        }
        for part in [&p.a, &p.b] {
            if !arms.iter().any(|(n, _)| n == part) {
                return Err(Error::Config(format!(
                    "fused arm {:?} references unknown arm {part:?}",
                    p.name
                )));
            }
        }
    }
    Ok(())
}

pub fn run_benchmark(
    arms: &[(String, EmbeddingSet)],
    spec: &ReshuffleSpec,
    classifier: &GbdtConfig,
    fuse_pairs: &[FusePair],
) -> Result<BenchmarkReport> {
    Ok(run_benchmark_with_artifacts(arms, spec, classifier, fuse_pairs, false)?.0)
}

/// As [`run_benchmark`]; with `keep_artifacts` also returns every trained
/// model with its test rows, in (repeat, arm) order.
pub fn run_benchmark_with_artifacts(
    arms: &[(String, EmbeddingSet)],
    spec: &ReshuffleSpec,
    classifier: &GbdtConfig,
    fuse_pairs: &[FusePair],
    keep_artifacts: bool,
) -> Result<(BenchmarkReport, Vec<ArmArtifact>)> {
    spec.validate()?;
    classifier.validate()?;
    check_arms(arms, fuse_pairs)?;
    let reference = &arms[0].1;
    let lookup = |name: &str| &arms.iter().find(|(n, _)| n == name).expect("checked").1;

    // Repeats run in parallel; collect() keeps repeat order.
    let per_repeat: Vec<(SplitPlan, Vec<ArmOutcome>)> = (0..spec.n_repeats)
        .into_par_iter()
        .map(|repeat| {
            let wrap = |e: Error| Error::Repeat {
                index: repeat,
                source: Box::new(e),
            };
            let plan = stratified_split(
                reference.labels(),
                spec.test_fraction,
                spec.seed_for(repeat),
            )
            .map_err(wrap)?;
            let mut outcomes = Vec::with_capacity(arms.len() + fuse_pairs.len());
            for (name, set) in arms {
                let (model, test_set, eval) =
                    fit_and_score(set, &plan, classifier).map_err(wrap)?;
                let artifact = keep_artifacts.then(|| ArmArtifact {
                    repeat,
                    arm: name.clone(),
                    model,
                    test_set,
                });
                outcomes.push(ArmOutcome {
                    eval,
                    scalers: None,
                    artifact,
                });
            }
            for p in fuse_pairs {
                let (model, test_set, eval, sa, sb) =
                    fuse_and_score(lookup(&p.a), lookup(&p.b), &plan, classifier).map_err(wrap)?;
                let artifact = keep_artifacts.then(|| ArmArtifact {
                    repeat,
                    arm: p.name.clone(),
                    model,
                    test_set,
                });
                outcomes.push(ArmOutcome {
                    eval,
                    scalers: Some((sa, sb)),
                    artifact,
                });
            }
            Ok((plan, outcomes))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<_>>()?;

    let digests: Vec<String> = per_repeat.iter().map(|(p, _)| p.digest()).collect();
    let splits = per_repeat
        .iter()
        .enumerate()
        .map(|(repeat, (plan, _))| SplitRecord {
            repeat,
            seed: plan.seed,
            digest: digests[repeat].clone(),
            n_train: plan.train_indices.len(),
            test_indices: plan.test_indices.clone(),
            test_ids: plan
                .test_indices
                .iter()
                .map(|&i| reference.ids()[i].clone())
                .collect(),
        })
        .collect();

    let mut arm_meta: Vec<(String, ArmKind, usize)> = arms
        .iter()
        .map(|(n, s)| {
            (
                n.clone(),
                ArmKind::Single {
                    source_tag: s.source_tag().to_string(),
                },
                s.dim(),
            )
        })
        .collect();
    arm_meta.extend(fuse_pairs.iter().map(|p| {
        let dim = lookup(&p.a).dim() + lookup(&p.b).dim();
        (
            p.name.clone(),
            ArmKind::Fused {
                a: p.a.clone(),
                b: p.b.clone(),
            },
            dim,
        )
    }));

    let mut reports = Vec::with_capacity(arm_meta.len());
    for (k, (name, kind, dim)) in arm_meta.into_iter().enumerate() {
        let results: Vec<EvalResult> = per_repeat.iter().map(|(_, o)| o[k].eval).collect();
        let scalers = per_repeat
            .iter()
            .enumerate()
            .filter_map(|(repeat, (_, o))| {
                o[k].scalers
                    .clone()
                    .map(|(a, b)| FusionScalers { repeat, a, b })
            })
            .collect();
        let auroc: Vec<f64> = results.iter().map(|r| r.auroc).collect();
        let aucpr: Vec<f64> = results.iter().map(|r| r.aucpr).collect();
        reports.push(ArmReport {
            name,
            kind,
            dim,
            auroc: metrics::summarize(&auroc)?,
            aucpr: metrics::summarize(&aucpr)?,
            results,
            split_digests: digests.clone(),
            scalers,
        });
    }

    let artifacts = per_repeat
        .into_iter()
        .flat_map(|(_, outcomes)| outcomes.into_iter().filter_map(|o| o.artifact))
        .collect();
    let (_, n_pos) = reference.class_counts();
    let report = BenchmarkReport {
        aucpr_method: metrics::AUCPR_METHOD.to_string(),
        std_kind: StdKind::Sample,
        classifier: classifier.clone(),
        reshuffle: spec.clone(),
        n_records: reference.len(),
        n_pos,
        splits,
        arms: reports,
    };
    Ok((report, artifacts))
}
