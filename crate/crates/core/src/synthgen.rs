//! Synthetic paired embeddings with a closed-form Bayes AUROC.
//!
//! Model A sees the class signal only along axis 0 of its own space and
//! model B only along axis 0 of its space; every other coordinate is
//! label-independent noise. Concatenating the two views therefore combines
//! orthogonal signals, and the Bayes-optimal fused AUROC follows from the
//! Pythagorean sum of the two separations.

use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Xoshiro256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_records: usize,
    pub n_pos: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    /// Class-mean separation along A's signal axis.
    pub dprime_a: f64,
    /// Class-mean separation along B's signal axis.
    pub dprime_b: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_records: 5813,
            n_pos: 1207,
            dim_a: 64,
            dim_b: 64,
            dprime_a: 1.2,
            dprime_b: 1.6,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_records == 0 || self.n_pos >= self.n_records {
            return Err(Error::Validation(format!(
                "need 0 <= n_pos < n_records, got n_pos={} n_records={}",
                self.n_pos, self.n_records
            )));
        }
        if self.dim_a == 0 || self.dim_b == 0 {
            return Err(Error::Validation("dimensions must be at least 1".into()));
        }
        if !(self.dprime_a >= 0.0 && self.dprime_b >= 0.0)
            || !self.dprime_a.is_finite()
            || !self.dprime_b.is_finite()
        {
            return Err(Error::Validation(
                "separations must be finite and non-negative".into(),
            ));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Validation("noise_scale must be positive".into()));
        }
        Ok(())
    }

    /// Bayes AUROC of each view and of the fused view, in noise units.
    pub fn bayes_targets(&self) -> (f64, f64, f64) {
        let a = self.dprime_a / self.noise_scale;
        let b = self.dprime_b / self.noise_scale;
        (bayes_auroc(a), bayes_auroc(b), bayes_auroc(a.hypot(b)))
    }
}

/// Labels first (exactly `n_pos` ones, shuffled), then A's matrix row by
/// row, then B's, all from one generator.
pub fn generate(config: &SynthConfig) -> Result<(EmbeddingSet, EmbeddingSet)> {
    config.validate()?;
    let n = config.n_records;
    let mut rng = Xoshiro256::seed_from_u64(config.seed);
    let mut labels = vec![0u8; n];
    labels[..config.n_pos].fill(1);
    rng.shuffle(&mut labels);
    let ids: Vec<String> = (0..n).map(|i| format!("rec_{i:06}")).collect();

    let mut view = |dim: usize, dprime: f64| -> Result<Matrix<f32>> {
        let mut data = Vec::with_capacity(n * dim);
        for &l in &labels {
            let shift = if l == 1 { dprime / 2.0 } else { -dprime / 2.0 };
            for j in 0..dim {
                let signal = if j == 0 { shift } else { 0.0 };
                data.push((signal + config.noise_scale * rng.next_gaussian()) as f32);
            }
        }
        Matrix::new(n, dim, data)
    };
    let a = view(config.dim_a, config.dprime_a)?;
    let b = view(config.dim_b, config.dprime_b)?;
    Ok((
        EmbeddingSet::new(ids.clone(), labels.clone(), a, "synth-a")?,
        EmbeddingSet::new(ids, labels, b, "synth-b")?,
    ))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// AUROC of the optimal scorer for two unit-variance Gaussians whose means
/// differ by `dprime`: `Phi(dprime / sqrt 2)`.
pub fn bayes_auroc(dprime: f64) -> f64 {
    normal_cdf(dprime / std::f64::consts::SQRT_2)
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::embedding_store::{align, to_ebf_bytes};

    // Reference values from a 30-digit evaluation of the normal CDF.
    const PHI: [(f64, f64); 6] = [
        (0.0, 0.5),
        (1.0, 0.841_344_746_068_542_95),
        (-1.0, 0.158_655_253_931_457_05),
        (-3.0, 0.001_349_898_031_630_094_5),
        (3.5, 0.999_767_370_920_964_47),
        (std::f64::consts::SQRT_2, 0.921_350_396_474_857_43),
    ];

    #[test]
    fn cdf_matches_reference_values() {
        for (x, want) in PHI {
            assert!((normal_cdf(x) - want).abs() < 1e-15, "x={x}");
        }
    }

    #[test]
    fn bayes_examples() {
        assert_eq!(bayes_auroc(0.0), 0.5);
        assert!((bayes_auroc(2f64.sqrt()) - 0.841_344_746_068_542_95).abs() < 1e-15);
        assert!((bayes_auroc(1.0) - 0.760_249_938_906_523_27).abs() < 1e-15);
        assert!((bayes_auroc(1f64.hypot(1.0)) - 0.841_344_746_068_542_95).abs() < 1e-15);
        assert!((bayes_auroc(2.0) - 0.921_350_396_474_857_43).abs() < 1e-15);
    }

    #[test]
    fn default_shapes_and_counts() {
        let (a, b) = generate(&SynthConfig::default()).unwrap();
        assert_eq!((a.len(), a.dim(), b.len(), b.dim()), (5813, 64, 5813, 64));
        assert_eq!(a.class_counts(), (4606, 1207));
        assert!(a.is_aligned_with(&b));
        assert_eq!(a.ids()[0], "rec_000000");
        let (a2, b2) = align(&a, &b).unwrap();
        assert_eq!((&a2, &b2), (&a, &b));
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = SynthConfig {
            n_records: 200,
            n_pos: 40,
            dim_a: 4,
            dim_b: 3,
            ..Default::default()
        };
        let (a1, b1) = generate(&cfg).unwrap();
        let (a2, b2) = generate(&cfg).unwrap();
        assert_eq!(to_ebf_bytes(&a1), to_ebf_bytes(&a2));
        assert_eq!(to_ebf_bytes(&b1), to_ebf_bytes(&b2));
    }

    #[test]
    fn invalid_config() {
        let bad = SynthConfig {
            n_pos: 10,
            n_records: 10,
            ..Default::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            dim_b: 0,
            ..Default::default()
        };
        assert!(generate(&bad).is_err());
    }
}
