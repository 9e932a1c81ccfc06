//! Reverse-mode autodiff on a define-by-run tape.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order; [`Tape::backward`] replays it in exact reverse order and
//! accumulates vector-Jacobian products. Tapes are single use: the forward
//! pass is rebuilt for every loss evaluation, and a second `backward`
//! without a new forward is a contract violation.
//!
//! Any op that produces a NaN/Inf poisons the tape with the producing op's
//! name; the fault is reported by `backward` instead of propagating silent
//! garbage.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant or named trainable parameter snapshot.
    Leaf { trainable: bool },
    /// W [m,n] · x [n] -> [m]
    MatVec { w: Var, x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    /// 1-D concatenation of vectors.
    Concat { parts: Vec<Var> },
    /// Select row `idx` of a [r,c] matrix (embedding lookup).
    Row { m: Var, idx: usize },
    /// Stack k equal-length vectors into a [k,c] matrix.
    StackRows { rows: Vec<Var> },
    /// 3x3 same-padding stride-1 convolution.
    /// img [H,W,Cin], kernels [3,3,Cin,Cout], bias [Cout] -> [H,W,Cout]
    Conv2d { img: Var, kernels: Var, bias: Var },
    /// 2x2 max pooling; `argmax` holds the flat input index per output.
    MaxPool2 { x: Var, argmax: Vec<usize> },
    /// Same data, new shape (flatten).
    Reshape { x: Var },
    /// Mean over rows of -log softmax(row)[target]; scalar output.
    SoftmaxXent { logits: Var, targets: Vec<usize> },
    /// Mean binary cross-entropy against constant labels, probabilities
    /// clamped to [1e-7, 1-1e-7]; scalar output.
    Bce { probs: Var, labels: Vec<f64> },
    /// Reconstruction score R = -(1/(k*d)) * sum_j ||x - t_j||^2 against
    /// constant target vectors; scalar output.
    SqErrScore { x: Var, targets: Vec<Vec<f64>> },
    /// Elementwise max across k equal-length vectors; `arg` holds the
    /// winning part index per element (lowest index on ties).
    MaxMany { parts: Vec<Var>, arg: Vec<usize> },
    /// Sum of all elements; scalar output.
    Sum { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatVec { .. } => "matvec",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat",
            Op::Row { .. } => "row",
            Op::StackRows { .. } => "stack_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Reshape { .. } => "reshape",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::Bce { .. } => "binary_cross_entropy",
            Op::SqErrScore { .. } => "reconstruction_score",
            Op::MaxMany { .. } => "max_many",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// One forward pass worth of recorded operations.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<String>,
    spent: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
            spent: false,
        }
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.fault.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.fault = Some(op.name().to_string());
        }
        self.nodes.push(Node { value, shape, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The first op that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element var.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as an owned vector, zeros if nothing flowed to `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    // ---- leaves ------------------------------------------------------

    /// Record a constant 1-D vector.
    pub fn constant(&mut self, data: &[f64]) -> Var {
        let shape = vec![data.len()];
        self.push(data.to_vec(), shape, Op::Leaf { trainable: false })
    }

    /// Record a constant with an explicit shape.
    pub fn constant_shaped(&mut self, data: &[f64], shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "constant_shaped: shape/data mismatch"
        );
        self.push(data.to_vec(), shape.to_vec(), Op::Leaf { trainable: false })
    }

    /// Snapshot a tensor as a leaf; trainable iff `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf {
                trainable: t.requires_grad(),
            },
        )
    }

    // ---- elementwise and linear ops ---------------------------------

    /// out = W·x for W [m,n], x [n].
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let wshape = self.shape(w).to_vec();
        assert_eq!(wshape.len(), 2, "matvec: W must be 2-D");
        let (m, n) = (wshape[0], wshape[1]);
        assert_eq!(self.value(x).len(), n, "matvec: x length != W columns");
        let out = matvec_raw(self.value(w), m, n, self.value(x));
        self.push(out, vec![m], Op::MatVec { w, x })
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: &'static str) -> (Vec<f64>, Vec<usize>) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
        (self.value(a).to_vec(), self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (mut out, shape) = self.binary_same_shape(a, b, "add");
        for (o, &bv) in out.iter_mut().zip(self.nodes[b.0].value.iter()) {
            *o += bv;
        }
        self.push(out, shape, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (mut out, shape) = self.binary_same_shape(a, b, "sub");
        for (o, &bv) in out.iter_mut().zip(self.nodes[b.0].value.iter()) {
            *o -= bv;
        }
        self.push(out, shape, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (mut out, shape) = self.binary_same_shape(a, b, "mul");
        for (o, &bv) in out.iter_mut().zip(self.nodes[b.0].value.iter()) {
            *o *= bv;
        }
        self.push(out, shape, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Scale { x, c })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| fmath::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| fmath::tanh(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Relu { x })
    }

    /// Concatenate 1-D vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p).len(), 1, "concat: parts must be 1-D");
            out.extend_from_slice(self.value(p));
        }
        let shape = vec![out.len()];
        self.push(out, shape, Op::Concat { parts: parts.to_vec() })
    }

    /// Row `idx` of a [r,c] matrix.
    pub fn row(&mut self, m: Var, idx: usize) -> Var {
        let shape = self.shape(m).to_vec();
        assert_eq!(shape.len(), 2, "row: matrix must be 2-D");
        let (r, c) = (shape[0], shape[1]);
        assert!(idx < r, "row: index {idx} out of {r}");
        let out = self.value(m)[idx * c..(idx + 1) * c].to_vec();
        self.push(out, vec![c], Op::Row { m, idx })
    }

    /// Stack equal-length vectors into a [k,c] matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows: no rows");
        let c = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            assert_eq!(self.value(r).len(), c, "stack_rows: ragged rows");
            out.extend_from_slice(self.value(r));
        }
        let shape = vec![rows.len(), c];
        self.push(out, shape, Op::StackRows { rows: rows.to_vec() })
    }

    /// 3x3 stride-1 same-padding convolution.
    pub fn conv2d(&mut self, img: Var, kernels: Var, bias: Var) -> Var {
        let ishape = self.shape(img).to_vec();
        let kshape = self.shape(kernels).to_vec();
        assert_eq!(ishape.len(), 3, "conv2d: image must be [H,W,Cin]");
        assert_eq!(kshape.len(), 4, "conv2d: kernels must be [3,3,Cin,Cout]");
        assert_eq!((kshape[0], kshape[1]), (3, 3), "conv2d: kernel size must be 3x3");
        let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
        assert_eq!(kshape[2], cin, "conv2d: Cin mismatch");
        let cout = kshape[3];
        assert_eq!(self.value(bias).len(), cout, "conv2d: bias length != Cout");
        let out = conv2d_raw(
            self.value(img),
            h,
            w,
            cin,
            self.value(kernels),
            cout,
            self.value(bias),
        );
        self.push(out, vec![h, w, cout], Op::Conv2d { img, kernels, bias })
    }

    /// 2x2 max pooling over [H,W,C] with even H and W. Ties go to the
    /// first element in scan order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "max_pool2: input must be [H,W,C]");
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: H and W must be even");
        let (out, argmax) = max_pool2_raw(self.value(x), h, w, c);
        self.push(out, vec![h / 2, w / 2, c], Op::MaxPool2 { x, argmax })
    }

    /// Same elements, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).len(),
            "reshape: element count mismatch"
        );
        let out = self.value(x).to_vec();
        self.push(out, shape.to_vec(), Op::Reshape { x })
    }

    /// Flatten to 1-D.
    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    /// Mean over rows of -log softmax(row)[target], max-subtraction
    /// stabilized. `logits` is [n, vocab]; `targets` has n entries.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits must be 2-D, got shape {:?}", shape),
            });
        }
        let (n, v) = (shape[0], shape[1]);
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{} targets for {} rows", targets.len(), n),
            });
        }
        for &t in targets {
            if t >= v {
                return Err(Error::invalid(format!(
                    "softmax_cross_entropy: target {t} out of vocab range {v}"
                )));
            }
        }
        let mut total = 0.0;
        {
            let ld = self.value(logits);
            for (t, &target) in targets.iter().enumerate() {
                total -= log_softmax_pick(&ld[t * v..(t + 1) * v], target);
            }
        }
        let loss = total / n as f64;
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels,
    /// probabilities clamped to [1e-7, 1-1e-7].
    pub fn binary_cross_entropy(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let d = self.value(probs).len();
        if labels.len() != d {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy",
                detail: format!("{} labels for {} probabilities", labels.len(), d),
            });
        }
        for &y in labels {
            if y != 0.0 && y != 1.0 {
                return Err(Error::invalid(format!(
                    "binary_cross_entropy: label {y} is not 0 or 1"
                )));
            }
        }
        let mut total = 0.0;
        for (&p, &y) in self.value(probs).iter().zip(labels) {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= y * fmath::ln(p) + (1.0 - y) * fmath::ln(1.0 - p);
        }
        let loss = total / d as f64;
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reconstruction score of `x` against constant targets:
    /// R = -(1/|targets|) * sum_j ||x - t_j||^2 / d. Always <= 0.
    pub fn reconstruction_score(&mut self, x: Var, targets: &[Vec<f64>]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::invalid("reconstruction_score: empty target list"));
        }
        let d = self.value(x).len();
        for t in targets {
            if t.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "reconstruction_score",
                    detail: format!("target length {} != {}", t.len(), d),
                });
            }
        }
        let xd = self.value(x);
        let mut total = 0.0;
        for t in targets {
            let mut sq = 0.0;
            for (xi, ti) in xd.iter().zip(t.iter()) {
                let diff = xi - ti;
                sq += diff * diff;
            }
            total += sq / d as f64;
        }
        let score = -total / targets.len() as f64;
        Ok(self.push(
            vec![score],
            vec![1],
            Op::SqErrScore {
                x,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Elementwise max across equal-length vectors. Ties go to the lowest
    /// part index.
    pub fn max_many(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "max_many: no parts");
        let d = self.value(parts[0]).len();
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut arg = vec![0usize; d];
        for (pi, &p) in parts.iter().enumerate() {
            assert_eq!(self.value(p).len(), d, "max_many: ragged parts");
            for (i, &v) in self.value(p).iter().enumerate() {
                if v > out[i] {
                    out[i] = v;
                    arg[i] = pi;
                }
            }
        }
        self.push(
            out,
            vec![d],
            Op::MaxMany {
                parts: parts.to_vec(),
                arg,
            },
        )
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().sum();
        self.push(vec![total], vec![1], Op::Sum { x })
    }

    /// Mean of scalar vars (objective assembly helper).
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "mean_scalars: no inputs");
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        self.scale(acc, 1.0 / xs.len() as f64)
    }

    // ---- backward ----------------------------------------------------

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.grads[v.0] = Some(contrib.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// node the loss depends on; a second call without a fresh forward
    /// pass fails with [`Error::TapeSpent`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(Error::TapeSpent);
        }
        if let Some(op) = &self.fault {
            return Err(Error::NonFinite { op: op.clone() });
        }
        let numel = self.nodes[loss.0].value.len();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        self.spent = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let d_out = match &self.grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match &op {
                Op::Leaf { .. } => {}
                Op::MatVec { w, x } => {
                    let n = self.nodes[x.0].value.len();
                    let m = d_out.len();
                    let mut d_w = vec![0.0; m * n];
                    let mut d_x = vec![0.0; n];
                    {
                        let wd = &self.nodes[w.0].value;
                        let xd = &self.nodes[x.0].value;
                        for i in 0..m {
                            let g = d_out[i];
                            let row = &wd[i * n..(i + 1) * n];
                            for j in 0..n {
                                d_w[i * n + j] = g * xd[j];
                                d_x[j] += g * row[j];
                            }
                        }
                    }
                    self.accumulate(*w, &d_w);
                    self.accumulate(*x, &d_x);
                }
                Op::Add { a, b } => {
                    self.accumulate(*a, &d_out);
                    self.accumulate(*b, &d_out);
                }
                Op::Sub { a, b } => {
                    self.accumulate(*a, &d_out);
                    let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                    self.accumulate(*b, &neg);
                }
                Op::Mul { a, b } => {
                    let d_a: Vec<f64> = d_out
                        .iter()
                        .zip(self.nodes[b.0].value.iter())
                        .map(|(d, bv)| d * bv)
                        .collect();
                    let d_b: Vec<f64> = d_out
                        .iter()
                        .zip(self.nodes[a.0].value.iter())
                        .map(|(d, av)| d * av)
                        .collect();
                    self.accumulate(*a, &d_a);
                    self.accumulate(*b, &d_b);
                }
                Op::Scale { x, c } => {
                    let d_x: Vec<f64> = d_out.iter().map(|d| d * c).collect();
                    self.accumulate(*x, &d_x);
                }
                Op::Sigmoid { x } => {
                    let d_x: Vec<f64> = d_out
                        .iter()
                        .zip(self.nodes[idx].value.iter())
                        .map(|(d, &s)| d * s * (1.0 - s))
                        .collect();
                    self.accumulate(*x, &d_x);
                }
                Op::Tanh { x } => {
                    let d_x: Vec<f64> = d_out
                        .iter()
                        .zip(self.nodes[idx].value.iter())
                        .map(|(d, &t)| d * (1.0 - t * t))
                        .collect();
                    self.accumulate(*x, &d_x);
                }
                Op::Relu { x } => {
                    let d_x: Vec<f64> = d_out
                        .iter()
                        .zip(self.nodes[x.0].value.iter())
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect();
                    self.accumulate(*x, &d_x);
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        let slice = d_out[off..off + len].to_vec();
                        self.accumulate(p, &slice);
                        off += len;
                    }
                }
                Op::Row { m, idx: ridx } => {
                    let c = d_out.len();
                    let total = self.nodes[m.0].value.len();
                    let mut d_m = vec![0.0; total];
                    d_m[ridx * c..(ridx + 1) * c].copy_from_slice(&d_out);
                    self.accumulate(*m, &d_m);
                }
                Op::StackRows { rows } => {
                    let c = self.nodes[rows[0].0].value.len();
                    for (i, &r) in rows.iter().enumerate() {
                        let slice = d_out[i * c..(i + 1) * c].to_vec();
                        self.accumulate(r, &slice);
                    }
                }
                Op::Conv2d { img, kernels, bias } => {
                    let ishape = self.nodes[img.0].shape.clone();
                    let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
                    let cout = self.nodes[bias.0].value.len();
                    let mut d_img = vec![0.0; h * w * cin];
                    let mut d_k = vec![0.0; 9 * cin * cout];
                    let mut d_b = vec![0.0; cout];
                    {
                        let id = &self.nodes[img.0].value;
                        let kd = &self.nodes[kernels.0].value;
                        for oy in 0..h {
                            for ox in 0..w {
                                for co in 0..cout {
                                    let g = d_out[(oy * w + ox) * cout + co];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    d_b[co] += g;
                                    for dy in 0..3usize {
                                        let iy = oy as isize + dy as isize - 1;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for dx in 0..3usize {
                                            let ix = ox as isize + dx as isize - 1;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let ibase = ((iy as usize) * w + ix as usize) * cin;
                                            let kbase = (dy * 3 + dx) * cin * cout;
                                            for ci in 0..cin {
                                                d_k[kbase + ci * cout + co] += id[ibase + ci] * g;
                                                d_img[ibase + ci] += kd[kbase + ci * cout + co] * g;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*img, &d_img);
                    self.accumulate(*kernels, &d_k);
                    self.accumulate(*bias, &d_b);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut d_x = vec![0.0; self.nodes[x.0].value.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        d_x[src] += d_out[o];
                    }
                    self.accumulate(*x, &d_x);
                }
                Op::Reshape { x } => {
                    self.accumulate(*x, &d_out);
                }
                Op::SoftmaxXent { logits, targets } => {
                    let v = self.nodes[logits.0].shape[1];
                    let n = targets.len();
                    let scale = d_out[0] / n as f64;
                    let mut d_logits = vec![0.0; n * v];
                    {
                        let ld = &self.nodes[logits.0].value;
                        for (t, &target) in targets.iter().enumerate() {
                            let row = &ld[t * v..(t + 1) * v];
                            let m = fmath::slice_max(row);
                            let mut denom = 0.0;
                            for j in 0..v {
                                let e = fmath::exp(row[j] - m);
                                d_logits[t * v + j] = e;
                                denom += e;
                            }
                            for j in 0..v {
                                d_logits[t * v + j] /= denom;
                            }
                            d_logits[t * v + target] -= 1.0;
                            for j in 0..v {
                                d_logits[t * v + j] *= scale;
                            }
                        }
                    }
                    self.accumulate(*logits, &d_logits);
                }
                Op::Bce { probs, labels } => {
                    let d = labels.len();
                    let scale = d_out[0] / d as f64;
                    let d_p: Vec<f64> = self.nodes[probs.0]
                        .value
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                                0.0
                            } else {
                                scale * (p - y) / (p * (1.0 - p))
                            }
                        })
                        .collect();
                    self.accumulate(*probs, &d_p);
                }
                Op::SqErrScore { x, targets } => {
                    let d = self.nodes[x.0].value.len();
                    let k = targets.len();
                    let scale = -2.0 * d_out[0] / (k as f64 * d as f64);
                    let mut d_x = vec![0.0; d];
                    {
                        let xd = &self.nodes[x.0].value;
                        for t in targets {
                            for i in 0..d {
                                d_x[i] += scale * (xd[i] - t[i]);
                            }
                        }
                    }
                    self.accumulate(*x, &d_x);
                }
                Op::MaxMany { parts, arg } => {
                    for (pi, &p) in parts.iter().enumerate() {
                        let d_p: Vec<f64> = arg
                            .iter()
                            .zip(d_out.iter())
                            .map(|(&a, &d)| if a == pi { d } else { 0.0 })
                            .collect();
                        self.accumulate(p, &d_p);
                    }
                }
                Op::Sum { x } => {
                    let d_x = vec![d_out[0]; self.nodes[x.0].value.len()];
                    self.accumulate(*x, &d_x);
                }
            }
            // A NaN that appears only during the backward sweep is still a
            // numeric fault worth naming.
            if let Some(bad) = self.first_nonfinite_grad(&op) {
                return Err(bad);
            }
        }
        // Trainable leaves the loss never touched get explicit zero grads
        // so optimizer harvesting sees every parameter.
        for idx in 0..self.nodes.len() {
            if let Op::Leaf { trainable: true } = self.nodes[idx].op {
                if self.grads[idx].is_none() {
                    self.grads[idx] = Some(vec![0.0; self.nodes[idx].value.len()]);
                }
            }
        }
        Ok(())
    }

    fn first_nonfinite_grad(&self, op: &Op) -> Option<Error> {
        match op {
            Op::Leaf { .. } => None,
            _ => {
                for g in self.grads.iter().flatten() {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Some(Error::NonFinite {
                            op: format!("backward:{}", op.name()),
                        });
                    }
                }
                None
            }
        }
    }
}

const BCE_EPS: f64 = 1e-7;

// The raw forward kernels below are shared between tape ops and the pure
// (no-gradient) inference paths, so both produce bitwise-identical values.

pub(crate) fn matvec_raw(w: &[f64], m: usize, n: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for i in 0..m {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * x[j];
        }
        out[i] = acc;
    }
    out
}

pub(crate) fn conv2d_raw(
    img: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernels: &[f64],
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for oy in 0..h {
        for ox in 0..w {
            for co in 0..cout {
                let mut acc = bias[co];
                for dy in 0..3usize {
                    let iy = oy as isize + dy as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let ix = ox as isize + dx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = ((iy as usize) * w + ix as usize) * cin;
                        let kbase = (dy * 3 + dx) * cin * cout;
                        for ci in 0..cin {
                            acc += img[ibase + ci] * kernels[kbase + ci * cout + co];
                        }
                    }
                }
                out[(oy * w + ox) * cout + co] = acc;
            }
        }
    }
    out
}

/// Returns pooled values and the flat input index of each winner; ties go
/// to the first element in scan order.
pub(crate) fn max_pool2_raw(x: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

/// log softmax(logits)[pick], max-subtraction stabilized. Shared by the
/// tape op and the pure inference path so both score identically.
pub fn log_softmax_pick(logits: &[f64], pick: usize) -> f64 {
    let m = fmath::slice_max(logits);
    let mut denom = 0.0;
    for &l in logits {
        denom += fmath::exp(l - m);
    }
    logits[pick] - m - fmath::ln(denom)
}

/// Full log softmax row, stabilized; used by beam search expansion.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = fmath::slice_max(logits);
    let mut denom = 0.0;
    for &l in logits {
        denom += fmath::exp(l - m);
    }
    let log_denom = fmath::ln(denom);
    logits.iter().map(|&l| l - m - log_denom).collect()
}

/// Softmax row, stabilized.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = fmath::slice_max(logits);
    let mut out: Vec<f64> = logits.iter().map(|&l| fmath::exp(l - m)).collect();
    let denom: f64 = out.iter().sum();
    for o in &mut out {
        *o /= denom;
    }
    out
}
