//! Joint training objective: mean caption log-likelihood, plus λ times the
//! reconstruction score against cached image features, minus the attribute
//! supervision loss. Maximized; the optimizer negates it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::decoder::DecoderVars;
use crate::encoder::EncoderVars;
use crate::error::{Error, Result};
use crate::knn::FeatureIndex;
use crate::model::CaptionModel;
use crate::reconstructor::ReconstructorVars;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveConfig {
    /// Reconstruction tradeoff λ; 0 disables the reconstruction pass.
    pub lambda_recon: f64,
    /// Cached neighbors per sample used as extra reconstruction targets.
    pub k_similar: usize,
    pub attr_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_recon: 1.0,
            k_similar: 5,
            attr_weight: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_recon >= 0.0) {
            return Err(Error::invalid("lambda_recon must be >= 0"));
        }
        if !(self.attr_weight >= 0.0) {
            return Err(Error::invalid("attr_weight must be >= 0"));
        }
        Ok(())
    }
}

/// One supervised pair: an image and a single tokenized caption.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub sample_id: String,
    pub image: Vec<f64>,
    pub attributes: Vec<f64>,
    /// BOS … EOS token ids.
    pub caption: Vec<usize>,
}

/// Detached reconstruction targets per sample, frozen against the encoder
/// weights at build time. Refresh once per epoch.
#[derive(Debug, Clone, Default)]
pub struct NeighborCache {
    targets: BTreeMap<String, Vec<Vec<f64>>>,
}

impl NeighborCache {
    /// Targets = own feature plus the features of up to `k_similar`
    /// cosine-nearest other samples, all under the current encoder.
    pub fn build(
        model: &CaptionModel,
        examples: &[TrainingExample],
        k_similar: usize,
    ) -> Result<NeighborCache> {
        let mut features: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for ex in examples {
            if !features.contains_key(&ex.sample_id) {
                let f = model.encoder.encode_image(&ex.image)?;
                features.insert(ex.sample_id.clone(), f);
            }
        }
        let mut targets = BTreeMap::new();
        if k_similar == 0 || features.len() <= 1 {
            for (id, f) in &features {
                targets.insert(id.clone(), alloc::vec![f.clone()]);
            }
            return Ok(NeighborCache { targets });
        }
        let mut index = FeatureIndex::new(model.config.encoder.d_v);
        for (id, f) in &features {
            index.insert(id, f.clone())?;
        }
        for (id, f) in &features {
            let mut list = alloc::vec![f.clone()];
            for nid in index.nearest(f, k_similar, Some(id))? {
                list.push(features[&nid].clone());
            }
            targets.insert(id.clone(), list);
        }
        Ok(NeighborCache { targets })
    }

    pub fn targets(&self, sample_id: &str) -> Option<&[Vec<f64>]> {
        self.targets.get(sample_id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// All three model parts bound onto one tape.
pub struct BoundModel {
    pub enc: EncoderVars,
    pub dec: DecoderVars,
    pub rec: ReconstructorVars,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, m: &CaptionModel) -> BoundModel {
        BoundModel {
            enc: EncoderVars::bind(tape, &m.encoder),
            dec: DecoderVars::bind(tape, &m.decoder),
            rec: ReconstructorVars::bind(tape, &m.reconstructor),
        }
    }

    pub fn collect_grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        self.enc.collect_grads(tape, "enc.", &mut out);
        self.dec.collect_grads(tape, "dec.", &mut out);
        self.rec.collect_grads(tape, "rec.", &mut out);
        out
    }
}

/// Forward-pass components, all as batch means except `scored_tokens`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub objective: f64,
    pub mean_log_lik: f64,
    /// 0 when the reconstruction pass is disabled (λ = 0).
    pub mean_recon: f64,
    pub mean_attr_loss: f64,
    /// Total predicted tokens over the batch, for per-token NLL.
    pub scored_tokens: usize,
}

impl ObjectiveParts {
    pub fn nll_per_token(&self, batch_len: usize) -> f64 {
        -(self.mean_log_lik * batch_len as f64) / self.scored_tokens as f64
    }
}

/// Builds the batch objective on `tape` and returns the scalar node plus
/// detached component values. With λ > 0 and k_similar > 0 a neighbor
/// cache is mandatory; with k_similar = 0 a missing cache falls back to
/// the sample's own (detached) feature as the sole target.
pub fn objective_on_tape(
    tape: &mut Tape,
    bound: &BoundModel,
    model: &CaptionModel,
    batch: &[TrainingExample],
    cfg: &ObjectiveConfig,
    cache: Option<&NeighborCache>,
) -> Result<(Var, ObjectiveParts)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("objective: empty batch"));
    }
    let use_recon = cfg.lambda_recon > 0.0;
    if use_recon && cfg.k_similar > 0 && cache.is_none() {
        return Err(Error::invalid(
            "objective: k_similar > 0 requires a neighbor cache",
        ));
    }

    let mut lls = Vec::with_capacity(batch.len());
    let mut recons = Vec::with_capacity(batch.len());
    let mut attrs = Vec::with_capacity(batch.len());
    let mut scored_tokens = 0usize;

    for ex in batch {
        let (f, a) = bound.enc.encode(tape, &ex.image)?;
        let (mean_nll, trace) =
            bound
                .dec
                .teacher_forced_nll(tape, &model.decoder, f, a, &ex.caption)?;
        let n_s = ex.caption.len() - 1;
        scored_tokens += n_s;
        lls.push(tape.scale(mean_nll, -(n_s as f64)));
        attrs.push(tape.binary_cross_entropy(a, &ex.attributes)?);
        if use_recon {
            let own;
            let targets: &[Vec<f64>] = match cache {
                Some(c) => c.targets(&ex.sample_id).ok_or_else(|| {
                    Error::invalid(format!(
                        "objective: sample '{}' missing from neighbor cache",
                        ex.sample_id
                    ))
                })?,
                None => {
                    own = alloc::vec![model.encoder.encode_image(&ex.image)?];
                    &own
                }
            };
            recons.push(bound.rec.score(tape, &trace, targets)?);
        }
    }

    let mean_ll = tape.mean_scalars(&lls);
    let mean_attr = tape.mean_scalars(&attrs);
    let mut obj = mean_ll;
    let mut mean_recon = 0.0;
    if use_recon {
        let mean_r = tape.mean_scalars(&recons);
        mean_recon = tape.scalar_value(mean_r);
        let scaled = tape.scale(mean_r, cfg.lambda_recon);
        obj = tape.add(obj, scaled);
    }
    let neg_attr = tape.scale(mean_attr, -cfg.attr_weight);
    obj = tape.add(obj, neg_attr);

    let parts = ObjectiveParts {
        objective: tape.scalar_value(obj),
        mean_log_lik: tape.scalar_value(mean_ll),
        mean_recon,
        mean_attr_loss: tape.scalar_value(mean_attr),
        scored_tokens,
    };
    Ok((obj, parts))
}

/// Forward-only objective on a throwaway tape.
pub fn compute_objective(
    model: &CaptionModel,
    batch: &[TrainingExample],
    cfg: &ObjectiveConfig,
    cache: Option<&NeighborCache>,
) -> Result<ObjectiveParts> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model);
    let (_, parts) = objective_on_tape(&mut tape, &bound, model, batch, cfg, cache)?;
    Ok(parts)
}
