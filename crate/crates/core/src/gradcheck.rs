//! Central finite-difference verification of analytic gradients.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Above this many elements per parameter, a seeded random subsample is
/// checked instead of every element.
pub const SUBSAMPLE_CAP: usize = 10_000;

/// |a−n| / max(|a|, |n|, 1e-8)
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err >= self.tol).collect()
    }
}

/// Compare supplied analytic gradients against central finite differences
/// of `f` over every trainable tensor in `params`.
///
/// `f` is evaluated twice at the unperturbed point first; if the two
/// values differ at all, the function is non-deterministic and the whole
/// check is meaningless, so it errors out.
pub fn grad_check<F>(
    mut f: F,
    params: &mut BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Vec<f64>>,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check: step must be > 0"));
    }
    let base_a = f(params)?;
    let base_b = f(params)?;
    if base_a != base_b {
        return Err(Error::NonDeterministic {
            a: base_a,
            b: base_b,
        });
    }

    let names: Vec<String> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.clone())
        .collect();

    let mut report = GradCheckReport {
        tol,
        params: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for name in names {
        let numel = params[&name].numel();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        if grad.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "grad_check",
                detail: alloc::format!(
                    "{name}: analytic grad length {} != param length {numel}",
                    grad.len()
                ),
            });
        }

        let indices: Vec<usize> = if numel > SUBSAMPLE_CAP {
            rand::seq::index::sample(&mut rng, numel, SUBSAMPLE_CAP).into_vec()
        } else {
            (0..numel).collect()
        };

        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            elements_checked: indices.len(),
        };
        for &i in &indices {
            let original = params[&name].data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = original + step;
            let plus = f(params)?;
            params.get_mut(&name).unwrap().data_mut()[i] = original - step;
            let minus = f(params)?;
            params.get_mut(&name).unwrap().data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let e = rel_err(grad[i], numeric);
            if e > check.max_rel_err {
                check.max_rel_err = e;
                check.worst_index = i;
                check.analytic_at_worst = grad[i];
                check.numeric_at_worst = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
