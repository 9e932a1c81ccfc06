//! Semantic validator: pools the decoder's hidden trace into a caption
//! vector h_c, reconstructs an image feature I_r, and scores it against
//! target features.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tape::{matvec_raw, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolTag {
    Mean,
    Max,
    Last,
}

impl PoolTag {
    pub fn parse(s: &str) -> Result<PoolTag> {
        match s {
            "mean" => Ok(PoolTag::Mean),
            "max" => Ok(PoolTag::Max),
            "last" => Ok(PoolTag::Last),
            other => Err(Error::invalid(format!(
                "unknown pooling tag '{other}' (expected mean, max, or last)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolTag::Mean => "mean",
            PoolTag::Max => "max",
            PoolTag::Last => "last",
        }
    }
}

/// Pool a non-empty hidden trace into one vector.
pub fn pool_hidden(tag: PoolTag, trace: &[Vec<f64>]) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::invalid("pool_hidden: empty trace"));
    }
    let d = trace[0].len();
    for h in trace {
        if h.len() != d {
            return Err(Error::ShapeMismatch {
                op: "pool_hidden",
                detail: format!("ragged trace: {} vs {}", h.len(), d),
            });
        }
    }
    Ok(match tag {
        PoolTag::Mean => {
            let mut acc = trace[0].clone();
            for h in &trace[1..] {
                for (a, v) in acc.iter_mut().zip(h) {
                    *a += v;
                }
            }
            let scale = 1.0 / trace.len() as f64;
            acc.iter().map(|v| v * scale).collect()
        }
        PoolTag::Max => {
            let mut acc = trace[0].clone();
            for h in &trace[1..] {
                for (a, v) in acc.iter_mut().zip(h) {
                    if *v > *a {
                        *a = *v;
                    }
                }
            }
            acc
        }
        PoolTag::Last => trace.last().unwrap().clone(),
    })
}

/// R = −(1/|targets|)·Σ_j ‖I_r − F_j‖² / D. Always ≤ 0; 0 only when the
/// reconstruction matches every target exactly.
pub fn reconstruction_score(i_r: &[f64], targets: &[Vec<f64>]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::invalid("reconstruction_score: empty target list"));
    }
    let d = i_r.len();
    let mut total = 0.0;
    for t in targets {
        if t.len() != d {
            return Err(Error::ShapeMismatch {
                op: "reconstruction_score",
                detail: format!("target length {} != {}", t.len(), d),
            });
        }
        let mut sq = 0.0;
        for (x, y) in i_r.iter().zip(t) {
            let diff = x - y;
            sq += diff * diff;
        }
        total += sq / d as f64;
    }
    Ok(-total / targets.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ReconstructorParams {
    pub tag: PoolTag,
    pub d_h: usize,
    pub d_v: usize,
    pub w: Tensor, // [d_v, d_h]
    pub b: Tensor, // [d_v]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub h_c: Vec<f64>,
    pub i_r: Vec<f64>,
    pub score: f64,
}

impl ReconstructorParams {
    pub fn init(tag: PoolTag, d_h: usize, d_v: usize, rng: &mut impl Rng) -> Result<Self> {
        if d_h == 0 || d_v == 0 {
            return Err(Error::invalid("reconstructor dims must be >= 1"));
        }
        Ok(ReconstructorParams {
            tag,
            d_h,
            d_v,
            w: Tensor::randn(&[d_v, d_h], fmath::sqrt(1.0 / d_h as f64), rng).trainable(),
            b: Tensor::zeros(&[d_v]).trainable(),
        })
    }

    /// Affine reconstruction of an image feature from h_c.
    pub fn reconstruct_feature(&self, h_c: &[f64]) -> Result<Vec<f64>> {
        if h_c.len() != self.d_h {
            return Err(Error::ShapeMismatch {
                op: "reconstruct_feature",
                detail: format!("h_c length {} != d_h {}", h_c.len(), self.d_h),
            });
        }
        let mut out = matvec_raw(self.w.data(), self.d_v, self.d_h, h_c);
        for (o, bi) in out.iter_mut().zip(self.b.data()) {
            *o += bi;
        }
        Ok(out)
    }

    /// Pool → reconstruct → score in one go.
    pub fn reconstruct(
        &self,
        trace: &[Vec<f64>],
        targets: &[Vec<f64>],
    ) -> Result<ReconstructionResult> {
        let h_c = pool_hidden(self.tag, trace)?;
        let i_r = self.reconstruct_feature(&h_c)?;
        let score = reconstruction_score(&i_r, targets)?;
        Ok(ReconstructionResult { h_c, i_r, score })
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'static str, &'a Tensor)) {
        f("w", &self.w);
        f("b", &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &mut Tensor)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Reconstructor parameters bound onto a tape.
pub struct ReconstructorVars {
    tag: PoolTag,
    w: Var,
    b: Var,
}

impl ReconstructorVars {
    pub fn bind(tape: &mut Tape, p: &ReconstructorParams) -> ReconstructorVars {
        ReconstructorVars {
            tag: p.tag,
            w: tape.param(&p.w),
            b: tape.param(&p.b),
        }
    }

    /// Differentiable pool → affine → score against constant targets.
    /// Max pooling backpropagates through the argmax element only, ties
    /// to the lowest trace index.
    pub fn score(
        &self,
        tape: &mut Tape,
        trace: &[Var],
        targets: &[Vec<f64>],
    ) -> Result<Var> {
        if trace.is_empty() {
            return Err(Error::invalid("pool_hidden: empty trace"));
        }
        let h_c = match self.tag {
            PoolTag::Mean => {
                let mut acc = trace[0];
                for &h in &trace[1..] {
                    acc = tape.add(acc, h);
                }
                tape.scale(acc, 1.0 / trace.len() as f64)
            }
            PoolTag::Max => tape.max_many(trace),
            PoolTag::Last => *trace.last().unwrap(),
        };
        let lin = tape.matvec(self.w, h_c);
        let i_r = tape.add(lin, self.b);
        tape.reconstruction_score(i_r, targets)
    }

    pub fn collect_grads(
        &self,
        tape: &Tape,
        prefix: &str,
        out: &mut BTreeMap<String, Vec<f64>>,
    ) {
        out.insert(format!("{prefix}w"), tape.grad_or_zeros(self.w));
        out.insert(format!("{prefix}b"), tape.grad_or_zeros(self.b));
    }
}
