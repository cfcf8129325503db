//! Per-source min-max normalization and column-wise concatenation.

use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::Scalar;

/// Per-feature minima and maxima from a training matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler<T> {
    mins: Vec<T>,
    maxs: Vec<T>,
}

impl<T: Scalar> MinMaxScaler<T> {
    pub fn mins(&self) -> &[T] {
        &self.mins
    }

    pub fn maxs(&self) -> &[T] {
        &self.maxs
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }
}

pub fn fit_minmax<T: Scalar>(train: &Matrix<T>) -> Result<MinMaxScaler<T>> {
    if train.rows() == 0 || train.cols() == 0 {
        return Err(Error::Validation(
            "cannot fit a scaler on an empty matrix".into(),
        ));
    }
    let mut mins = train.row(0).to_vec();
    let mut maxs = mins.clone();
    for row in train.row_iter() {
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Validation(format!("non-finite value in column {j}")));
            }
            if v < mins[j] {
                mins[j] = v;
            }
            if v > maxs[j] {
                maxs[j] = v;
            }
        }
    }
    Ok(MinMaxScaler { mins, maxs })
}

/// Maps each column to `(x - min) / (max - min)`; zero-range columns map to 0.
/// Values outside the fitted range are not clamped.
pub fn apply_minmax<T: Scalar>(
    scaler: &MinMaxScaler<T>,
    features: &Matrix<T>,
) -> Result<Matrix<T>> {
    if features.cols() != scaler.dim() {
        return Err(Error::Validation(format!(
            "scaler fitted on {} columns, got {}",
            scaler.dim(),
            features.cols()
        )));
    }
    let mut out = features.clone();
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            let (lo, hi) = (scaler.mins[j], scaler.maxs[j]);
            let v = if hi > lo {
                (features.get(i, j) - lo) / (hi - lo)
            } else {
                T::zero()
            };
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Fits a scaler on `train_rows` of `set` and applies it to every row.
///
/// Rows outside `train_rows` never influence the scaler.
pub fn normalize_with_train_rows<T: Scalar>(
    set: &EmbeddingSet,
    train_rows: &[usize],
) -> Result<(EmbeddingSet, MinMaxScaler<T>)> {
    let train: Matrix<T> = set.features().select_rows(train_rows).cast();
    let scaler = fit_minmax(&train)?;
    let scaled = apply_minmax(&scaler, &set.features().cast())?;
    let tag = set.source_tag().to_string();
    let out = set.with_features(scaled.map(|v| v.to_f32().unwrap_or(f32::NAN)), tag)?;
    Ok((out, scaler))
}

/// Row-wise concatenation `[a | b]` of two aligned sets.
pub fn fuse(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<EmbeddingSet> {
    if a.ids() != b.ids() {
        return Err(Error::Alignment(
            "fused sets must have identical ids in the same order".into(),
        ));
    }
    if a.labels() != b.labels() {
        return Err(Error::Alignment(
            "fused sets must have identical labels".into(),
        ));
    }
    a.with_features(a.features().hstack(b.features())?, "fused")
}
