//! Caption decoder: GRU cell (primary), LSTM cell (runtime baseline), the
//! attribute/feature injection schedule, the embedding-tied output
//! projection, and teacher-forced log-likelihood.
//!
//! Injection schedule: the first two steps feed the projected attribute
//! vector A and then the projected feature vector F into the recurrent
//! cell without emitting a loss; word steps follow, each consuming the
//! previous token's embedding and scoring the next token.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::EncodedImage;
use crate::error::{Error, Result};
use crate::fmath;
use crate::tape::{log_softmax_pick, matvec_raw, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DecoderDims {
    pub vocab: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub d_v: usize,
    pub d_a: usize,
}

impl DecoderDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("d_v", self.d_v),
            ("d_a", self.d_a),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("decoder dims: {name} must be >= 1")));
            }
        }
        if self.vocab < 4 {
            return Err(Error::invalid(
                "decoder dims: vocab must cover the 4 reserved tokens",
            ));
        }
        Ok(())
    }
}

/// Gate-block parameter counts at equal dims; the GRU:LSTM ratio is
/// exactly 3:4.
pub fn gru_param_count(d_e: usize, d_h: usize) -> usize {
    3 * (d_e + d_h + 1) * d_h
}

pub fn lstm_param_count(d_e: usize, d_h: usize) -> usize {
    4 * (d_e + d_h + 1) * d_h
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub dims: DecoderDims,
    pub embed: Tensor, // [vocab, d_e]; also the tied output matrix E
    pub attr_in_w: Tensor, // [d_e, d_a]
    pub attr_in_b: Tensor, // [d_e]
    pub feat_in_w: Tensor, // [d_e, d_v]
    pub feat_in_b: Tensor, // [d_e]
    // GRU gate blocks over [x, h]
    pub gru_wz: Tensor, // [d_h, d_e + d_h]
    pub gru_bz: Tensor, // [d_h]
    pub gru_wr: Tensor,
    pub gru_br: Tensor,
    pub gru_wh: Tensor,
    pub gru_bh: Tensor,
    // LSTM gate blocks (benchmark baseline)
    pub lstm_wi: Tensor,
    pub lstm_bi: Tensor,
    pub lstm_wf: Tensor,
    pub lstm_bf: Tensor,
    pub lstm_wo: Tensor,
    pub lstm_bo: Tensor,
    pub lstm_wg: Tensor,
    pub lstm_bg: Tensor,
    // Eq-style output: logits = E · (v·h + b)
    pub out_v: Tensor, // [d_e, d_h]
    pub out_b: Tensor, // [d_e]
}

/// Recurrent state; `c` is used by the LSTM cell only.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl StepState {
    pub fn zeros(d_h: usize) -> Self {
        StepState {
            h: vec![0.0; d_h],
            c: vec![0.0; d_h],
        }
    }
}

impl DecoderParams {
    pub fn init<R: Rng>(dims: DecoderDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let lin = |fan_in: usize| fmath::sqrt(1.0 / fan_in as f64);
        let gate_in = dims.d_e + dims.d_h;
        let gate = |rng: &mut R| {
            Tensor::randn(&[dims.d_h, gate_in], lin(gate_in), rng).trainable()
        };
        let bias = |n: usize| Tensor::zeros(&[n]).trainable();
        Ok(DecoderParams {
            embed: Tensor::randn(&[dims.vocab, dims.d_e], 0.1, rng).trainable(),
            attr_in_w: Tensor::randn(&[dims.d_e, dims.d_a], lin(dims.d_a), rng).trainable(),
            attr_in_b: bias(dims.d_e),
            feat_in_w: Tensor::randn(&[dims.d_e, dims.d_v], lin(dims.d_v), rng).trainable(),
            feat_in_b: bias(dims.d_e),
            gru_wz: gate(rng),
            gru_bz: bias(dims.d_h),
            gru_wr: gate(rng),
            gru_br: bias(dims.d_h),
            gru_wh: gate(rng),
            gru_bh: bias(dims.d_h),
            lstm_wi: gate(rng),
            lstm_bi: bias(dims.d_h),
            lstm_wf: gate(rng),
            lstm_bf: bias(dims.d_h),
            lstm_wo: gate(rng),
            lstm_bo: bias(dims.d_h),
            lstm_wg: gate(rng),
            lstm_bg: bias(dims.d_h),
            out_v: Tensor::randn(&[dims.d_e, dims.d_h], lin(dims.d_h), rng).trainable(),
            out_b: bias(dims.d_e),
            dims,
        })
    }

    fn check_step_shapes(&self, x: &[f64], s: &StepState) -> Result<()> {
        if x.len() != self.dims.d_e || s.h.len() != self.dims.d_h {
            return Err(Error::ShapeMismatch {
                op: "cell_step",
                detail: format!(
                    "x length {} (want {}), h length {} (want {})",
                    x.len(),
                    self.dims.d_e,
                    s.h.len(),
                    self.dims.d_h
                ),
            });
        }
        Ok(())
    }

    /// z=σ(Wz·[x,h]+bz), r=σ(Wr·[x,h]+br), h̃=tanh(Wh·[x, r⊙h]+bh),
    /// h' = (1−z)⊙h + z⊙h̃.
    pub fn gru_step(&self, x: &[f64], s: &StepState) -> Result<StepState> {
        self.check_step_shapes(x, s)?;
        let (d_e, d_h) = (self.dims.d_e, self.dims.d_h);
        let mut xh = Vec::with_capacity(d_e + d_h);
        xh.extend_from_slice(x);
        xh.extend_from_slice(&s.h);

        let mut z = matvec_raw(self.gru_wz.data(), d_h, d_e + d_h, &xh);
        let mut r = matvec_raw(self.gru_wr.data(), d_h, d_e + d_h, &xh);
        for i in 0..d_h {
            z[i] = fmath::sigmoid(z[i] + self.gru_bz.data()[i]);
            r[i] = fmath::sigmoid(r[i] + self.gru_br.data()[i]);
        }
        let mut xrh = Vec::with_capacity(d_e + d_h);
        xrh.extend_from_slice(x);
        for i in 0..d_h {
            xrh.push(r[i] * s.h[i]);
        }
        let mut h_new = matvec_raw(self.gru_wh.data(), d_h, d_e + d_h, &xrh);
        for i in 0..d_h {
            let cand = fmath::tanh(h_new[i] + self.gru_bh.data()[i]);
            // written as h - z*h + z*cand to match the tape op order bitwise
            h_new[i] = s.h[i] - z[i] * s.h[i] + z[i] * cand;
        }
        Ok(StepState {
            h: h_new,
            c: s.c.clone(),
        })
    }

    /// Standard 4-gate LSTM: i,f,o = σ(W·[x,h]+b), g = tanh(W·[x,h]+b),
    /// c' = f⊙c + i⊙g, h' = o⊙tanh(c').
    pub fn lstm_step(&self, x: &[f64], s: &StepState) -> Result<StepState> {
        self.check_step_shapes(x, s)?;
        if s.c.len() != self.dims.d_h {
            return Err(Error::ShapeMismatch {
                op: "cell_step",
                detail: format!("c length {} (want {})", s.c.len(), self.dims.d_h),
            });
        }
        let (d_e, d_h) = (self.dims.d_e, self.dims.d_h);
        let mut xh = Vec::with_capacity(d_e + d_h);
        xh.extend_from_slice(x);
        xh.extend_from_slice(&s.h);

        let i_g = matvec_raw(self.lstm_wi.data(), d_h, d_e + d_h, &xh);
        let f_g = matvec_raw(self.lstm_wf.data(), d_h, d_e + d_h, &xh);
        let o_g = matvec_raw(self.lstm_wo.data(), d_h, d_e + d_h, &xh);
        let g_g = matvec_raw(self.lstm_wg.data(), d_h, d_e + d_h, &xh);
        let mut h = vec![0.0; d_h];
        let mut c = vec![0.0; d_h];
        for j in 0..d_h {
            let i = fmath::sigmoid(i_g[j] + self.lstm_bi.data()[j]);
            let f = fmath::sigmoid(f_g[j] + self.lstm_bf.data()[j]);
            let o = fmath::sigmoid(o_g[j] + self.lstm_bo.data()[j]);
            let g = fmath::tanh(g_g[j] + self.lstm_bg.data()[j]);
            c[j] = f * s.c[j] + i * g;
            h[j] = o * fmath::tanh(c[j]);
        }
        Ok(StepState { h, c })
    }

    /// logits = E·(v·h + b), length vocab.
    pub fn step_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dims.d_h {
            return Err(Error::ShapeMismatch {
                op: "step_logits",
                detail: format!("h length {} != d_h {}", h.len(), self.dims.d_h),
            });
        }
        let mut u = matvec_raw(self.out_v.data(), self.dims.d_e, self.dims.d_h, h);
        for (ui, bi) in u.iter_mut().zip(self.out_b.data()) {
            *ui += bi;
        }
        Ok(matvec_raw(self.embed.data(), self.dims.vocab, self.dims.d_e, &u))
    }

    /// Projected injection inputs for the two pre-word steps.
    pub fn inject_attr(&self, a: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.dims.d_a {
            return Err(Error::ShapeMismatch {
                op: "inject_attr",
                detail: format!("a length {} != d_a {}", a.len(), self.dims.d_a),
            });
        }
        let mut x = matvec_raw(self.attr_in_w.data(), self.dims.d_e, self.dims.d_a, a);
        for (xi, bi) in x.iter_mut().zip(self.attr_in_b.data()) {
            *xi += bi;
        }
        Ok(x)
    }

    pub fn inject_feat(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dims.d_v {
            return Err(Error::ShapeMismatch {
                op: "inject_feat",
                detail: format!("f length {} != d_v {}", f.len(), self.dims.d_v),
            });
        }
        let mut x = matvec_raw(self.feat_in_w.data(), self.dims.d_e, self.dims.d_v, f);
        for (xi, bi) in x.iter_mut().zip(self.feat_in_b.data()) {
            *xi += bi;
        }
        Ok(x)
    }

    /// Run the injection schedule, returning the hidden state ready for
    /// the first word step (GRU cell).
    pub fn warm_start(&self, enc: &EncodedImage) -> Result<StepState> {
        let mut state = StepState::zeros(self.dims.d_h);
        state = self.gru_step(&self.inject_attr(&enc.a)?, &state)?;
        state = self.gru_step(&self.inject_feat(&enc.f)?, &state)?;
        Ok(state)
    }

    /// Teacher-forced scoring of a BOS..EOS sequence. Returns the summed
    /// log-likelihood over word steps and the word-step hidden trace.
    pub fn decode_teacher_forced(
        &self,
        enc: &EncodedImage,
        ids: &[usize],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        self.validate_sequence(ids)?;
        let mut state = self.warm_start(enc)?;
        let mut log_lik = 0.0;
        let mut trace = Vec::with_capacity(ids.len() - 1);
        for t in 0..ids.len() - 1 {
            let x = self.embedding_row(ids[t]);
            state = self.gru_step(x, &state)?;
            let logits = self.step_logits(&state.h)?;
            log_lik += log_softmax_pick(&logits, ids[t + 1]);
            trace.push(state.h.clone());
        }
        Ok((log_lik, trace))
    }

    pub fn embedding_row(&self, id: usize) -> &[f64] {
        let d_e = self.dims.d_e;
        &self.embed.data()[id * d_e..(id + 1) * d_e]
    }

    pub fn validate_sequence(&self, ids: &[usize]) -> Result<()> {
        if ids.len() < 2 {
            return Err(Error::invalid(
                "decode_teacher_forced: sequence must contain at least BOS and EOS",
            ));
        }
        if ids[0] != BOS || *ids.last().unwrap() != EOS {
            return Err(Error::invalid(
                "decode_teacher_forced: sequence must begin with BOS and end with EOS",
            ));
        }
        for &id in ids {
            if id >= self.dims.vocab {
                return Err(Error::invalid(format!(
                    "decode_teacher_forced: token id {id} outside vocab {}",
                    self.dims.vocab
                )));
            }
        }
        Ok(())
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'static str, &'a Tensor)) {
        f("embed", &self.embed);
        f("attr_in_w", &self.attr_in_w);
        f("attr_in_b", &self.attr_in_b);
        f("feat_in_w", &self.feat_in_w);
        f("feat_in_b", &self.feat_in_b);
        f("gru_wz", &self.gru_wz);
        f("gru_bz", &self.gru_bz);
        f("gru_wr", &self.gru_wr);
        f("gru_br", &self.gru_br);
        f("gru_wh", &self.gru_wh);
        f("gru_bh", &self.gru_bh);
        f("lstm_wi", &self.lstm_wi);
        f("lstm_bi", &self.lstm_bi);
        f("lstm_wf", &self.lstm_wf);
        f("lstm_bf", &self.lstm_bf);
        f("lstm_wo", &self.lstm_wo);
        f("lstm_bo", &self.lstm_bo);
        f("lstm_wg", &self.lstm_wg);
        f("lstm_bg", &self.lstm_bg);
        f("out_v", &self.out_v);
        f("out_b", &self.out_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &mut Tensor)) {
        f("embed", &mut self.embed);
        f("attr_in_w", &mut self.attr_in_w);
        f("attr_in_b", &mut self.attr_in_b);
        f("feat_in_w", &mut self.feat_in_w);
        f("feat_in_b", &mut self.feat_in_b);
        f("gru_wz", &mut self.gru_wz);
        f("gru_bz", &mut self.gru_bz);
        f("gru_wr", &mut self.gru_wr);
        f("gru_br", &mut self.gru_br);
        f("gru_wh", &mut self.gru_wh);
        f("gru_bh", &mut self.gru_bh);
        f("lstm_wi", &mut self.lstm_wi);
        f("lstm_bi", &mut self.lstm_bi);
        f("lstm_wf", &mut self.lstm_wf);
        f("lstm_bf", &mut self.lstm_bf);
        f("lstm_wo", &mut self.lstm_wo);
        f("lstm_bo", &mut self.lstm_bo);
        f("lstm_wg", &mut self.lstm_wg);
        f("lstm_bg", &mut self.lstm_bg);
        f("out_v", &mut self.out_v);
        f("out_b", &mut self.out_b);
    }
}

/// Decoder parameters bound onto a tape for one forward pass.
pub struct DecoderVars {
    dims: DecoderDims,
    embed: Var,
    attr_in_w: Var,
    attr_in_b: Var,
    feat_in_w: Var,
    feat_in_b: Var,
    gru_wz: Var,
    gru_bz: Var,
    gru_wr: Var,
    gru_br: Var,
    gru_wh: Var,
    gru_bh: Var,
    lstm_wi: Var,
    lstm_bi: Var,
    lstm_wf: Var,
    lstm_bf: Var,
    lstm_wo: Var,
    lstm_bo: Var,
    lstm_wg: Var,
    lstm_bg: Var,
    out_v: Var,
    out_b: Var,
}

impl DecoderVars {
    pub fn bind(tape: &mut Tape, p: &DecoderParams) -> DecoderVars {
        DecoderVars {
            dims: p.dims,
            embed: tape.param(&p.embed),
            attr_in_w: tape.param(&p.attr_in_w),
            attr_in_b: tape.param(&p.attr_in_b),
            feat_in_w: tape.param(&p.feat_in_w),
            feat_in_b: tape.param(&p.feat_in_b),
            gru_wz: tape.param(&p.gru_wz),
            gru_bz: tape.param(&p.gru_bz),
            gru_wr: tape.param(&p.gru_wr),
            gru_br: tape.param(&p.gru_br),
            gru_wh: tape.param(&p.gru_wh),
            gru_bh: tape.param(&p.gru_bh),
            lstm_wi: tape.param(&p.lstm_wi),
            lstm_bi: tape.param(&p.lstm_bi),
            lstm_wf: tape.param(&p.lstm_wf),
            lstm_bf: tape.param(&p.lstm_bf),
            lstm_wo: tape.param(&p.lstm_wo),
            lstm_bo: tape.param(&p.lstm_bo),
            lstm_wg: tape.param(&p.lstm_wg),
            lstm_bg: tape.param(&p.lstm_bg),
            out_v: tape.param(&p.out_v),
            out_b: tape.param(&p.out_b),
        }
    }

    fn gru_step_t(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        let xh = tape.concat(&[x, h]);
        let z_lin = tape.matvec(self.gru_wz, xh);
        let z_aff = tape.add(z_lin, self.gru_bz);
        let z = tape.sigmoid(z_aff);
        let r_lin = tape.matvec(self.gru_wr, xh);
        let r_aff = tape.add(r_lin, self.gru_br);
        let r = tape.sigmoid(r_aff);
        let rh = tape.mul(r, h);
        let xrh = tape.concat(&[x, rh]);
        let c_lin = tape.matvec(self.gru_wh, xrh);
        let c_aff = tape.add(c_lin, self.gru_bh);
        let cand = tape.tanh(c_aff);
        // (1-z)*h + z*cand  =  h - z*h + z*cand
        let zh = tape.mul(z, h);
        let keep = tape.sub(h, zh);
        let zc = tape.mul(z, cand);
        tape.add(keep, zc)
    }

    fn inject(&self, tape: &mut Tape, w: Var, b: Var, v: Var) -> Var {
        let lin = tape.matvec(w, v);
        tape.add(lin, b)
    }

    fn logits_t(&self, tape: &mut Tape, h: Var) -> Var {
        let u_lin = tape.matvec(self.out_v, h);
        let u = tape.add(u_lin, self.out_b);
        tape.matvec(self.embed, u)
    }

    /// Differentiable teacher-forced pass from already-on-tape F and A.
    /// Returns (mean per-token NLL over the N_s scored steps, word-step
    /// hidden trace).
    pub fn teacher_forced_nll(
        &self,
        tape: &mut Tape,
        p: &DecoderParams,
        f: Var,
        a: Var,
        ids: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        p.validate_sequence(ids)?;
        let h0 = tape.constant(&vec![0.0; self.dims.d_h]);
        let xa = self.inject(tape, self.attr_in_w, self.attr_in_b, a);
        let h1 = self.gru_step_t(tape, xa, h0);
        let xf = self.inject(tape, self.feat_in_w, self.feat_in_b, f);
        let mut h = self.gru_step_t(tape, xf, h1);

        let mut trace = Vec::with_capacity(ids.len() - 1);
        let mut logit_rows = Vec::with_capacity(ids.len() - 1);
        for t in 0..ids.len() - 1 {
            let x = tape.row(self.embed, ids[t]);
            h = self.gru_step_t(tape, x, h);
            trace.push(h);
            logit_rows.push(self.logits_t(tape, h));
        }
        let logits = tape.stack_rows(&logit_rows);
        let nll = tape.softmax_cross_entropy(logits, &ids[1..])?;
        Ok((nll, trace))
    }

    pub fn collect_grads(
        &self,
        tape: &Tape,
        prefix: &str,
        out: &mut BTreeMap<String, Vec<f64>>,
    ) {
        for (name, var) in [
            ("embed", self.embed),
            ("attr_in_w", self.attr_in_w),
            ("attr_in_b", self.attr_in_b),
            ("feat_in_w", self.feat_in_w),
            ("feat_in_b", self.feat_in_b),
            ("gru_wz", self.gru_wz),
            ("gru_bz", self.gru_bz),
            ("gru_wr", self.gru_wr),
            ("gru_br", self.gru_br),
            ("gru_wh", self.gru_wh),
            ("gru_bh", self.gru_bh),
            ("lstm_wi", self.lstm_wi),
            ("lstm_bi", self.lstm_bi),
            ("lstm_wf", self.lstm_wf),
            ("lstm_bf", self.lstm_bf),
            ("lstm_wo", self.lstm_wo),
            ("lstm_bo", self.lstm_bo),
            ("lstm_wg", self.lstm_wg),
            ("lstm_bg", self.lstm_bg),
            ("out_v", self.out_v),
            ("out_b", self.out_b),
        ] {
            out.insert(format!("{prefix}{name}"), tape.grad_or_zeros(var));
        }
    }
}
