//! Multilingual dataset mixing: logarithmic / uniform / linear sampling
//! ratios, the 50%-focus variant, corpus-id conditioning, and dataset
//! exclusion for zero-shot setups.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("no datasets remain after exclusion")]
    NoDatasets,
    #[error("half-focus target `{0}` is not among the datasets")]
    UnknownTarget(String),
    #[error("dataset `{0}` has size 0")]
    EmptyDataset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy", content = "target")]
pub enum Strategy {
    Logarithmic,
    Uniform,
    Linear,
    /// Half the probability mass on one dataset, the rest split by
    /// logarithmic ratios over the others.
    HalfFocus(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    /// (corpus id, size in training sentences).
    pub datasets: Vec<(String, usize)>,
    #[serde(flatten)]
    pub strategy: Strategy,
    #[serde(default)]
    pub use_corpus_id: bool,
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRatios {
    /// (corpus id, weight); weights are positive and need not sum to 1.
    pub weights: Vec<(String, f64)>,
}

impl SampleRatios {
    pub fn probabilities(&self) -> Vec<(String, f64)> {
        let total: f64 = self.weights.iter().map(|(_, w)| w).sum();
        self.weights
            .iter()
            .map(|(id, w)| (id.clone(), w / total))
            .collect()
    }
}

/// Integer logarithmic weight in 1..=5: linear interpolation in log-space
/// between the smallest and largest dataset, rounded half-up.
fn log_weight(n: usize, n_min: usize, n_max: usize) -> f64 {
    if n_min == n_max {
        return 1.0;
    }
    let t = ((n as f64).ln() - (n_min as f64).ln()) / ((n_max as f64).ln() - (n_min as f64).ln());
    (1.0 + 4.0 * t + 0.5).floor()
}

pub fn compute_ratios(spec: &MixSpec) -> Result<SampleRatios, SamplingError> {
    let kept: Vec<(String, usize)> = spec
        .datasets
        .iter()
        .filter(|(id, _)| !spec.exclude.contains(id))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(SamplingError::NoDatasets);
    }
    if let Some((id, _)) = kept.iter().find(|(_, n)| *n == 0) {
        return Err(SamplingError::EmptyDataset(id.clone()));
    }
    let weights = match &spec.strategy {
        Strategy::Uniform => kept.iter().map(|(id, _)| (id.clone(), 1.0)).collect(),
        Strategy::Linear => kept
            .iter()
            .map(|(id, n)| (id.clone(), *n as f64))
            .collect(),
        Strategy::Logarithmic => {
            let n_min = kept.iter().map(|(_, n)| *n).min().unwrap();
            let n_max = kept.iter().map(|(_, n)| *n).max().unwrap();
            kept.iter()
                .map(|(id, n)| (id.clone(), log_weight(*n, n_min, n_max)))
                .collect()
        }
        Strategy::HalfFocus(target) => {
            if !kept.iter().any(|(id, _)| id == target) {
                return Err(SamplingError::UnknownTarget(target.clone()));
            }
            let rest: Vec<(String, usize)> = kept
                .iter()
                .filter(|(id, _)| id != target)
                .cloned()
                .collect();
            if rest.is_empty() {
                vec![(target.clone(), 1.0)]
            } else {
                let n_min = rest.iter().map(|(_, n)| *n).min().unwrap();
                let n_max = rest.iter().map(|(_, n)| *n).max().unwrap();
                let rest_weights: Vec<(String, f64)> = rest
                    .iter()
                    .map(|(id, n)| (id.clone(), log_weight(*n, n_min, n_max)))
                    .collect();
                let rest_total: f64 = rest_weights.iter().map(|(_, w)| w).sum();
                // Target carries exactly half the mass.
                let mut weights = vec![(target.clone(), rest_total)];
                weights.extend(rest_weights);
                // Keep declaration order.
                let order: Vec<&String> = kept.iter().map(|(id, _)| id).collect();
                weights.sort_by_key(|(id, _)| order.iter().position(|o| *o == id).unwrap());
                weights
            }
        }
    };
    Ok(SampleRatios { weights })
}

/// One drawn example: the dataset index (into the non-excluded pool order),
/// its corpus id when conditioning is enabled, and the example index within
/// the dataset pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Draw {
    pub dataset: usize,
    pub corpus_id: Option<String>,
    pub example: usize,
}

/// Infinite seeded stream: choose a dataset by normalized ratio, then an
/// example uniformly from its pool.
pub struct SampleStream {
    rng: ChaCha8Rng,
    cumulative: Vec<f64>,
    ids: Vec<String>,
    pool_sizes: Vec<usize>,
    tag: bool,
}

impl SampleStream {
    pub fn new(spec: &MixSpec, pool_sizes: &[usize]) -> Result<Self, SamplingError> {
        let ratios = compute_ratios(spec)?;
        assert_eq!(
            ratios.weights.len(),
            pool_sizes.len(),
            "one pool per non-excluded dataset"
        );
        if pool_sizes.iter().any(|&n| n == 0) {
            return Err(SamplingError::NoDatasets);
        }
        let mut acc = 0.0;
        let mut cumulative = Vec::with_capacity(ratios.weights.len());
        for (_, w) in &ratios.weights {
            acc += w;
            cumulative.push(acc);
        }
        Ok(SampleStream {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            cumulative,
            ids: ratios.weights.iter().map(|(id, _)| id.clone()).collect(),
            pool_sizes: pool_sizes.to_vec(),
            tag: spec.use_corpus_id,
        })
    }
}

impl Iterator for SampleStream {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        let total = *self.cumulative.last().unwrap();
        let x = self.rng.gen_range(0.0..total);
        let dataset = self.cumulative.partition_point(|&c| c <= x);
        let example = self.rng.gen_range(0..self.pool_sizes[dataset]);
        Some(Draw {
            dataset,
            corpus_id: self.tag.then(|| self.ids[dataset].clone()),
            example,
        })
    }
}
