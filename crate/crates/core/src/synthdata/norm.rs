//! Channel-wise normalization fitted on a training corpus.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Scalar};
use crate::error::{Error, Result};

const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and std of a motion corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fit per-channel statistics over a corpus of frames × channels arrays.
/// Zero-variance channels are clamped to a tiny std with a warning rather
/// than poisoning later divisions.
pub fn fit_norm_stats<F: Scalar>(corpus: &[Array<F>]) -> Result<NormStats> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::Contract("cannot fit normalization on an empty corpus".into()))?;
    if first.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "normalization expects frames × channels, got {:?}",
            first.shape()
        )));
    }
    let d = first.shape()[1];
    let mut sum = vec![0.0f64; d];
    let mut sumsq = vec![0.0f64; d];
    let mut n = 0usize;
    for m in corpus {
        if m.shape().len() != 2 || m.shape()[1] != d {
            return Err(Error::Shape(format!(
                "corpus shapes disagree: {:?} vs {d} channels",
                m.shape()
            )));
        }
        for row in m.rows() {
            for (c, v) in row.iter().enumerate() {
                let x = v.as_f64();
                sum[c] += x;
                sumsq[c] += x * x;
            }
        }
        n += m.shape()[0];
    }
    let mut mean = vec![0.0f64; d];
    let mut std = vec![0.0f64; d];
    for c in 0..d {
        mean[c] = sum[c] / n as f64;
        let var = (sumsq[c] / n as f64 - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt();
        if std[c] < STD_FLOOR {
            eprintln!("warning: channel {c} has near-zero variance; clamping std to {STD_FLOOR}");
            std[c] = STD_FLOOR;
        }
    }
    Ok(NormStats { mean, std })
}

fn check_dims<F: Scalar>(m: &Array<F>, stats: &NormStats) -> Result<()> {
    if m.shape().len() != 2 || m.shape()[1] != stats.mean.len() {
        return Err(Error::Shape(format!(
            "array {:?} does not match {}-channel stats",
            m.shape(),
            stats.mean.len()
        )));
    }
    Ok(())
}

/// (x − mean) / std per channel.
pub fn normalize<F: Scalar>(m: &Array<F>, stats: &NormStats) -> Result<Array<F>> {
    check_dims(m, stats)?;
    let d = stats.mean.len();
    let data: Vec<F> = m
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| F::of_f64((v.as_f64() - stats.mean[i % d]) / stats.std[i % d]))
        .collect();
    Array::new(m.shape().to_vec(), data)
}

/// x · std + mean per channel: inverse of [`normalize`].
pub fn denormalize<F: Scalar>(m: &Array<F>, stats: &NormStats) -> Result<Array<F>> {
    check_dims(m, stats)?;
    let d = stats.mean.len();
    let data: Vec<F> = m
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| F::of_f64(v.as_f64() * stats.std[i % d] + stats.mean[i % d]))
        .collect();
    Array::new(m.shape().to_vec(), data)
}
