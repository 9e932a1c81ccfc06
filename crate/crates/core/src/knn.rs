//! Cosine-similarity nearest-neighbor index over image features.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMetric {
    Cosine,
}

#[derive(Debug, Clone)]
pub struct FeatureIndex {
    dim: usize,
    metric: SimilarityMetric,
    entries: Vec<(String, Vec<f64>)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    fmath::sqrt(dot(a, a))
}

impl FeatureIndex {
    pub fn new(dim: usize) -> Self {
        FeatureIndex {
            dim,
            metric: SimilarityMetric::Cosine,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metric(&self) -> SimilarityMetric {
        self.metric
    }

    /// Insert or replace the feature vector for `id`.
    pub fn insert(&mut self, id: &str, feature: Vec<f64>) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "feature_index_insert",
                detail: alloc::format!(
                    "{id}: feature length {} != index dimension {}",
                    feature.len(),
                    self.dim
                ),
            });
        }
        match self.entries.iter_mut().find(|(eid, _)| eid == id) {
            Some(slot) => slot.1 = feature,
            None => self.entries.push((id.to_string(), feature)),
        }
        Ok(())
    }

    pub fn feature(&self, id: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(eid, _)| eid == id)
            .map(|(_, f)| f.as_slice())
    }

    /// Ids of the `k` most similar entries by descending cosine
    /// similarity, ties broken by ascending id. `exclude` drops the
    /// query's own sample. Zero-norm indexed entries score 0; a zero-norm
    /// query has no direction and is an error.
    pub fn nearest(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<Vec<String>> {
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "nearest_images",
                detail: alloc::format!(
                    "query length {} != index dimension {}",
                    query.len(),
                    self.dim
                ),
            });
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::invalid("nearest_images: zero-norm query"));
        }
        let mut scored: Vec<(f64, &str)> = self
            .entries
            .iter()
            .filter(|(id, _)| Some(id.as_str()) != exclude)
            .map(|(id, f)| {
                let fn_ = norm(f);
                let sim = if fn_ == 0.0 { 0.0 } else { dot(query, f) / (qn * fn_) };
                (sim, id.as_str())
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(_, id)| id.to_string())
            .collect())
    }
}
