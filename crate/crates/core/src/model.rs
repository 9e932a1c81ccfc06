//! The full captioning model: encoder + decoder (the generation partition)
//! and the reconstructor (the validation partition), addressable as a flat
//! map of named tensors for the optimizer and checkpointing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::decoder::{DecoderDims, DecoderParams};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::reconstructor::{PoolTag, ReconstructorParams};
use crate::tensor::Tensor;

/// Everything needed to rebuild a model skeleton: shapes plus the pooling tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderDims,
    pub vocab: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub pooling: PoolTag,
}

impl ModelConfig {
    pub fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            vocab: self.vocab,
            d_e: self.d_e,
            d_h: self.d_h,
            d_v: self.encoder.d_v,
            d_a: self.encoder.d_a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder_dims().validate()
    }
}

#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub reconstructor: ReconstructorParams,
}

impl CaptionModel {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<CaptionModel> {
        config.validate()?;
        let encoder = EncoderParams::init(config.encoder, rng)?;
        let decoder = DecoderParams::init(config.decoder_dims(), rng)?;
        let reconstructor =
            ReconstructorParams::init(config.pooling, config.d_h, config.encoder.d_v, rng)?;
        Ok(CaptionModel {
            config,
            encoder,
            decoder,
            reconstructor,
        })
    }

    /// Visits every learnable tensor once, under its flat name
    /// (`enc.*`, `dec.*`, `rec.*`).
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(&mut |n, t| f(format!("enc.{n}"), t));
        self.decoder.visit(&mut |n, t| f(format!("dec.{n}"), t));
        self.reconstructor.visit(&mut |n, t| f(format!("rec.{n}"), t));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(&mut |n, t| f(format!("enc.{n}"), t));
        self.decoder.visit_mut(&mut |n, t| f(format!("dec.{n}"), t));
        self.reconstructor.visit_mut(&mut |n, t| f(format!("rec.{n}"), t));
    }

    pub fn params_map(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, t| {
            out.insert(name, t.clone());
        });
        out
    }

    /// Overwrites every tensor from `map`. The map must cover exactly the
    /// model's parameter set with matching shapes.
    pub fn set_from_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut seen = 0usize;
        let mut err = None;
        self.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match map.get(&name) {
                None => err = Some(Error::invalid(format!("missing tensor '{name}'"))),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(Error::ShapeMismatch {
                        op: "set_from_map",
                        detail: format!(
                            "tensor '{name}': expected {:?}, got {:?}",
                            t.shape(),
                            src.shape()
                        ),
                    })
                }
                Some(src) => {
                    t.data_mut().copy_from_slice(src.data());
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if map.len() != seen {
            return Err(Error::invalid(format!(
                "checkpoint carries {} tensors, model has {seen}",
                map.len()
            )));
        }
        Ok(())
    }

    /// Names of the generation partition (encoder + decoder).
    pub fn generation_param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| {
            if !name.starts_with("rec.") {
                out.push(name);
            }
        });
        out
    }

    /// Names of the validation partition (reconstructor).
    pub fn validation_param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| {
            if name.starts_with("rec.") {
                out.push(name);
            }
        });
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}
