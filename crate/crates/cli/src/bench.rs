//! Recurrent-cell micro-benchmark: per-step wall clock medians for the
//! GRU against the LSTM baseline at equal dims, plus the exact
//! parameter-count ratio.

use std::time::Instant;

use anyhow::Result;
use capforge_core::decoder::{
    gru_param_count, lstm_param_count, DecoderDims, DecoderParams, StepState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub d_e: usize,
    pub d_h: usize,
    pub iters: usize,
    pub gru_median_ns: f64,
    pub lstm_median_ns: f64,
    /// lstm_median_ns - gru_median_ns.
    pub median_margin_ns: f64,
    pub gru_recurrent_params: usize,
    pub lstm_recurrent_params: usize,
    /// gru_recurrent_params / lstm_recurrent_params; 0.75 at equal dims.
    pub param_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn median_ns(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn time_steps<F>(iters: usize, state0: StepState, mut step: F) -> Vec<f64>
where
    F: FnMut(&StepState) -> StepState,
{
    let mut state = state0;
    // warm caches and the branch predictor before measuring
    for _ in 0..100 {
        state = step(&state);
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let next = step(&state);
        samples.push(t0.elapsed().as_nanos() as f64);
        state = std::hint::black_box(next);
    }
    samples
}

/// Runs both cells for `iters` timed steps each (after warm-up) with the
/// output state fed back as the next input, so the work is the steady
/// recurrent loop and nothing can be hoisted.
pub fn bench_cells(d: usize, iters: usize, seed: u64) -> Result<BenchReport> {
    if d == 0 || iters == 0 {
        anyhow::bail!("bench-cells: dims and iters must be >= 1");
    }
    let dims = DecoderDims {
        vocab: 8,
        d_e: d,
        d_h: d,
        d_v: 8,
        d_a: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DecoderParams::init(dims, &mut rng)?;
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();

    let gru = time_steps(iters, StepState::zeros(d), |s| {
        params.gru_step(&x, s).expect("gru step")
    });
    let lstm = time_steps(iters, StepState::zeros(d), |s| {
        params.lstm_step(&x, s).expect("lstm step")
    });

    let gru_params = gru_param_count(d, d);
    let lstm_params = lstm_param_count(d, d);
    let gru_median = median_ns(gru);
    let lstm_median = median_ns(lstm);
    let warning = (iters < 100)
        .then(|| format!("only {iters} iterations; medians will be noisy"));
    Ok(BenchReport {
        d_e: d,
        d_h: d,
        iters,
        gru_median_ns: gru_median,
        lstm_median_ns: lstm_median,
        median_margin_ns: lstm_median - gru_median,
        gru_recurrent_params: gru_params,
        lstm_recurrent_params: lstm_params,
        param_ratio: gru_params as f64 / lstm_params as f64,
        warning,
    })
}
