//! Wengert tape: reverse-mode differentiation by operation recording.
//!
//! Forward calls append nodes (inputs always precede outputs, so the tape
//! is topologically ordered by construction and cycles cannot form);
//! `backward` replays the list in reverse, accumulating gradients by sum at
//! fan-out. Only values reachable from a parameter carry gradients, so
//! constant inputs cost nothing on the way back.
//!
//! Eigendecomposition is deliberately not a primitive: losses built on
//! generalized eigenvalues enter through [`Tape::custom_scalar`], which
//! records analytically computed input gradients.

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf,
    /// Elementwise sum; `b` may be a row vector or scalar broadcast over `a`.
    Add { a: ValueId, b: ValueId },
    /// Elementwise product; either operand may be a scalar broadcast.
    Mul { a: ValueId, b: ValueId },
    MatMul { a: ValueId, b: ValueId },
    /// Dense 1-D convolution along time with same-length zero padding.
    /// x: [C, T], w: [F, C, K], bias: [F] -> out [F, T].
    Conv1d { x: ValueId, w: ValueId, bias: ValueId },
    /// Per-channel 1-D convolution. x: [D, T], w: [D, K], bias: [D] -> [D, T].
    Conv1dDepthwise { x: ValueId, w: ValueId, bias: ValueId },
    /// Row-wise concatenation of matrices with equal column counts.
    Concat { parts: Vec<ValueId> },
    Log { x: ValueId },
    Exp { x: ValueId },
    Relu { x: ValueId },
    /// Mean over all elements, producing a scalar.
    Mean { x: ValueId },
    Trace { x: ValueId },
    Diag { x: ValueId },
    /// Mean cross-entropy of row-wise softmax against integer labels.
    SoftmaxCrossEntropy { logits: ValueId, labels: Vec<usize> },
    /// Externally differentiated scalar: stored gradients are the exact
    /// d(out)/d(input_i), scaled by the upstream scalar during backward.
    Custom { inputs: Vec<ValueId>, input_grads: Vec<Tensor> },
}

struct Slot {
    value: Tensor,
    node: Node,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Reverse-mode differentiation record.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    parameters: Vec<ValueId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Records a constant input; no gradient will be computed for it.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Node::Leaf, false)
    }

    /// Records a trainable leaf tensor.
    pub fn param(&mut self, value: Tensor) -> ValueId {
        let id = self.push(value, Node::Leaf, true);
        self.parameters.push(id);
        id
    }

    pub fn parameters(&self) -> &[ValueId] {
        &self.parameters
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.slots[id.0].value
    }

    fn push(&mut self, value: Tensor, node: Node, requires_grad: bool) -> ValueId {
        self.slots.push(Slot { value, node, requires_grad });
        ValueId(self.slots.len() - 1)
    }

    fn requires(&self, id: ValueId) -> bool {
        self.slots[id.0].requires_grad
    }

    fn check(&self, id: ValueId) -> Result<()> {
        if id.0 >= self.slots.len() {
            return Err(Error::InvalidArgument(format!(
                "value id {} is not on this tape (len {})",
                id.0,
                self.slots.len()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let out = if ta.shape() == tb.shape() {
            ta.add(tb)?
        } else if let Some(widths) = row_broadcast(ta, tb) {
            let (rows, cols) = widths;
            let mut out = ta.clone();
            for r in 0..rows {
                let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
                for (d, &v) in dst.iter_mut().zip(tb.data()) {
                    *d += v;
                }
            }
            out
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            ta.map(|v| v + s)
        } else {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Node::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let out = if ta.shape() == tb.shape() {
            ta.mul_elem(tb)?
        } else if tb.is_scalar() {
            ta.scale(tb.data()[0])
        } else if ta.is_scalar() {
            tb.scale(ta.data()[0])
        } else {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Node::Mul { a, b }, rg))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Node::MatMul { a, b }, rg))
    }

    pub fn conv1d(&mut self, x: ValueId, w: ValueId, bias: ValueId) -> Result<ValueId> {
        self.check(x)?;
        self.check(w)?;
        self.check(bias)?;
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(bias);
        let ((c, t), (f, wc, k)) = match (tx.shape(), tw.shape()) {
            ([c, t], [f, wc, k]) => ((*c, *t), (*f, *wc, *k)),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv1d expects x [C,T] and w [F,C,K], got {:?} and {:?}",
                    tx.shape(),
                    tw.shape()
                )))
            }
        };
        if wc != c || tb.shape() != [f] {
            return Err(Error::ShapeMismatch(format!(
                "conv1d: x {:?}, w {:?}, bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        if t < k {
            return Err(Error::InvalidArgument(format!(
                "conv1d: signal length {t} shorter than kernel {k}"
            )));
        }
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; f * t];
        for fi in 0..f {
            let orow = &mut out[fi * t..(fi + 1) * t];
            orow.fill(tb.data()[fi]);
            for ci in 0..c {
                let xrow = &tx.data()[ci * t..(ci + 1) * t];
                let wrow = &tw.data()[(fi * c + ci) * k..(fi * c + ci + 1) * k];
                for (ki, &coeff) in wrow.iter().enumerate() {
                    axpy_shifted(orow, xrow, coeff, ki as isize - pad as isize);
                }
            }
        }
        let out = Tensor::new(vec![f, t], out)?;
        let rg = self.requires(x) || self.requires(w) || self.requires(bias);
        Ok(self.push(out, Node::Conv1d { x, w, bias }, rg))
    }

    pub fn conv1d_depthwise(&mut self, x: ValueId, w: ValueId, bias: ValueId) -> Result<ValueId> {
        self.check(x)?;
        self.check(w)?;
        self.check(bias)?;
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(bias);
        let ((d, t), (wd, k)) = match (tx.shape(), tw.shape()) {
            ([d, t], [wd, k]) => ((*d, *t), (*wd, *k)),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "depthwise conv expects x [D,T] and w [D,K], got {:?} and {:?}",
                    tx.shape(),
                    tw.shape()
                )))
            }
        };
        if wd != d || tb.shape() != [d] {
            return Err(Error::ShapeMismatch(format!(
                "depthwise conv: x {:?}, w {:?}, bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        if t < k {
            return Err(Error::InvalidArgument(format!(
                "depthwise conv: signal length {t} shorter than kernel {k}"
            )));
        }
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; d * t];
        for di in 0..d {
            let orow = &mut out[di * t..(di + 1) * t];
            orow.fill(tb.data()[di]);
            let xrow = &tx.data()[di * t..(di + 1) * t];
            let wrow = &tw.data()[di * k..(di + 1) * k];
            for (ki, &coeff) in wrow.iter().enumerate() {
                axpy_shifted(orow, xrow, coeff, ki as isize - pad as isize);
            }
        }
        let out = Tensor::new(vec![d, t], out)?;
        let rg = self.requires(x) || self.requires(w) || self.requires(bias);
        Ok(self.push(out, Node::Conv1dDepthwise { x, w, bias }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let mut cols = None;
        let mut rows = 0;
        for &p in parts {
            self.check(p)?;
            let (r, c) = self.value(p).dims2()?;
            match cols {
                None => cols = Some(c),
                Some(cc) if cc != c => {
                    return Err(Error::ShapeMismatch(format!(
                        "concat: column counts {cc} vs {c}"
                    )))
                }
                _ => {}
            }
            rows += r;
        }
        let cols = cols.unwrap();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Node::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn log(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let out = self.value(x).map(f64::ln);
        let rg = self.requires(x);
        Ok(self.push(out, Node::Log { x }, rg))
    }

    pub fn exp(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let out = self.value(x).map(f64::exp);
        let rg = self.requires(x);
        Ok(self.push(out, Node::Exp { x }, rg))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires(x);
        Ok(self.push(out, Node::Relu { x }, rg))
    }

    pub fn mean(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(m), Node::Mean { x }, rg))
    }

    pub fn trace(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let tr = self.value(x).trace()?;
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(tr), Node::Trace { x }, rg))
    }

    pub fn diag(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let d = self.value(x).diagonal()?;
        let n = d.len();
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(vec![n], d)?, Node::Diag { x }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        self.check(logits)?;
        let t = self.value(logits);
        let (b, c) = t.dims2()?;
        if labels.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "cross-entropy: {b} logit rows, {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range 0..{c}")));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("cross-entropy logits"));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / b as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Node::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
            rg,
        ))
    }

    /// Records a scalar whose gradients w.r.t. `inputs` were computed
    /// outside the tape. `input_grads[i]` must match the shape of
    /// `inputs[i]`; during backward each is scaled by the upstream scalar
    /// and accumulated.
    pub fn custom_scalar(
        &mut self,
        inputs: &[ValueId],
        value: f64,
        input_grads: Vec<Tensor>,
    ) -> Result<ValueId> {
        if inputs.len() != input_grads.len() {
            return Err(Error::InvalidArgument(format!(
                "custom scalar: {} inputs but {} gradients",
                inputs.len(),
                input_grads.len()
            )));
        }
        for (&id, g) in inputs.iter().zip(&input_grads) {
            self.check(id)?;
            if self.value(id).shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "custom scalar gradient {:?} vs input {:?}",
                    g.shape(),
                    self.value(id).shape()
                )));
            }
        }
        let rg = inputs.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::scalar(value),
            Node::Custom { inputs: inputs.to_vec(), input_grads },
            rg,
        ))
    }

    /// Runs the reverse pass from a scalar `loss`, returning one gradient
    /// per reachable gradient-requiring value (parameters included).
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.slots.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            self.backward_node(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
        if !self.requires(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                existing.axpy(1.0, &delta).expect("gradient shape drift");
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(
        &self,
        idx: usize,
        upstream: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match &self.slots[idx].node {
            Node::Leaf => {}
            Node::Add { a, b } => {
                if self.requires(*a) {
                    self.accumulate(grads, *a, upstream.clone());
                }
                if self.requires(*b) {
                    let tb = self.value(*b);
                    let delta = if tb.shape() == upstream.shape() {
                        upstream.clone()
                    } else if tb.is_scalar() {
                        Tensor::scalar(upstream.data().iter().sum())
                    } else {
                        // row broadcast: sum over rows
                        let (rows, cols) = row_broadcast(self.value(*a), tb)
                            .expect("add broadcast shape drift");
                        let mut acc = vec![0.0; cols];
                        for r in 0..rows {
                            for (s, &g) in
                                acc.iter_mut().zip(&upstream.data()[r * cols..(r + 1) * cols])
                            {
                                *s += g;
                            }
                        }
                        Tensor::new(tb.shape().to_vec(), acc)?
                    };
                    self.accumulate(grads, *b, delta);
                }
            }
            Node::Mul { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                if ta.shape() == tb.shape() {
                    if self.requires(*a) {
                        self.accumulate(grads, *a, upstream.mul_elem(tb)?);
                    }
                    if self.requires(*b) {
                        self.accumulate(grads, *b, upstream.mul_elem(ta)?);
                    }
                } else {
                    // one side is a scalar
                    let (scalar_id, dense_id, dense) =
                        if tb.is_scalar() { (*b, *a, ta) } else { (*a, *b, tb) };
                    let s = self.value(scalar_id).data()[0];
                    if self.requires(dense_id) {
                        self.accumulate(grads, dense_id, upstream.scale(s));
                    }
                    if self.requires(scalar_id) {
                        let dot: f64 =
                            upstream.data().iter().zip(dense.data()).map(|(g, v)| g * v).sum();
                        self.accumulate(grads, scalar_id, Tensor::scalar(dot));
                    }
                }
            }
            Node::MatMul { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if self.requires(*a) {
                    // dA = g . Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &upstream.data()[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (p, dval) in darow.iter_mut().enumerate() {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            *dval = grow.iter().zip(brow).map(|(g, b)| g * b).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires(*b) {
                    // dB = Aᵀ . g
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &upstream.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for (d, &g) in dbrow.iter_mut().zip(grow) {
                                *d += aip * g;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Node::Conv1d { x, w, bias } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (c, t) = (tx.shape()[0], tx.shape()[1]);
                let (f, k) = (tw.shape()[0], tw.shape()[2]);
                let pad = (k - 1) / 2;
                if self.requires(*bias) {
                    let db: Vec<f64> = (0..f)
                        .map(|fi| upstream.data()[fi * t..(fi + 1) * t].iter().sum())
                        .collect();
                    self.accumulate(grads, *bias, Tensor::new(vec![f], db)?);
                }
                if self.requires(*w) {
                    let mut dw = vec![0.0; f * c * k];
                    for fi in 0..f {
                        let grow = &upstream.data()[fi * t..(fi + 1) * t];
                        for ci in 0..c {
                            let xrow = &tx.data()[ci * t..(ci + 1) * t];
                            let dwrow = &mut dw[(fi * c + ci) * k..(fi * c + ci + 1) * k];
                            for (ki, dval) in dwrow.iter_mut().enumerate() {
                                *dval = dot_shifted(grow, xrow, ki as isize - pad as isize);
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![f, c, k], dw)?);
                }
                if self.requires(*x) {
                    let mut dx = vec![0.0; c * t];
                    for fi in 0..f {
                        let grow = &upstream.data()[fi * t..(fi + 1) * t];
                        for ci in 0..c {
                            let dxrow = &mut dx[ci * t..(ci + 1) * t];
                            let wrow = &tw.data()[(fi * c + ci) * k..(fi * c + ci + 1) * k];
                            for (ki, &coeff) in wrow.iter().enumerate() {
                                axpy_shifted(dxrow, grow, coeff, pad as isize - ki as isize);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![c, t], dx)?);
                }
            }
            Node::Conv1dDepthwise { x, w, bias } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (d, t) = (tx.shape()[0], tx.shape()[1]);
                let k = tw.shape()[1];
                let pad = (k - 1) / 2;
                if self.requires(*bias) {
                    let db: Vec<f64> = (0..d)
                        .map(|di| upstream.data()[di * t..(di + 1) * t].iter().sum())
                        .collect();
                    self.accumulate(grads, *bias, Tensor::new(vec![d], db)?);
                }
                if self.requires(*w) {
                    let mut dw = vec![0.0; d * k];
                    for di in 0..d {
                        let grow = &upstream.data()[di * t..(di + 1) * t];
                        let xrow = &tx.data()[di * t..(di + 1) * t];
                        for (ki, dval) in dw[di * k..(di + 1) * k].iter_mut().enumerate() {
                            *dval = dot_shifted(grow, xrow, ki as isize - pad as isize);
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![d, k], dw)?);
                }
                if self.requires(*x) {
                    let mut dx = vec![0.0; d * t];
                    for di in 0..d {
                        let grow = &upstream.data()[di * t..(di + 1) * t];
                        let dxrow = &mut dx[di * t..(di + 1) * t];
                        let wrow = &tw.data()[di * k..(di + 1) * k];
                        for (ki, &coeff) in wrow.iter().enumerate() {
                            axpy_shifted(dxrow, grow, coeff, pad as isize - ki as isize);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![d, t], dx)?);
                }
            }
            Node::Concat { parts } => {
                let cols = self.value(*parts.first().unwrap()).shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    if self.requires(p) {
                        let slice =
                            upstream.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![rows, cols], slice)?);
                    }
                    offset += rows;
                }
            }
            Node::Log { x } => {
                if self.requires(*x) {
                    let tx = self.value(*x);
                    let data: Vec<f64> = upstream
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, v)| g / v)
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
                }
            }
            Node::Exp { x } => {
                if self.requires(*x) {
                    let out = &self.slots[idx].value;
                    self.accumulate(grads, *x, upstream.mul_elem(out)?);
                }
            }
            Node::Relu { x } => {
                if self.requires(*x) {
                    let tx = self.value(*x);
                    let data: Vec<f64> = upstream
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
                }
            }
            Node::Mean { x } => {
                if self.requires(*x) {
                    let tx = self.value(*x);
                    let g = upstream.data()[0] / tx.numel() as f64;
                    self.accumulate(grads, *x, tx.map(|_| g));
                }
            }
            Node::Trace { x } => {
                if self.requires(*x) {
                    let n = self.value(*x).shape()[0];
                    let mut d = Tensor::zeros(&[n, n]);
                    let g = upstream.data()[0];
                    for i in 0..n {
                        d.set2(i, i, g);
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Node::Diag { x } => {
                if self.requires(*x) {
                    let n = self.value(*x).shape()[0];
                    let mut d = Tensor::zeros(&[n, n]);
                    for i in 0..n {
                        d.set2(i, i, upstream.data()[i]);
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Node::SoftmaxCrossEntropy { logits, labels } => {
                if self.requires(*logits) {
                    let t = self.value(*logits);
                    let (b, c) = t.dims2()?;
                    let scale = upstream.data()[0] / b as f64;
                    let mut d = vec![0.0; b * c];
                    for (r, &label) in labels.iter().enumerate() {
                        let row = t.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - max).exp() / denom;
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[r * c + j] = scale * (p - onehot);
                        }
                    }
                    self.accumulate(grads, *logits, Tensor::new(vec![b, c], d)?);
                }
            }
            Node::Custom { inputs, input_grads } => {
                let g = upstream.data()[0];
                for (&input, grad) in inputs.iter().zip(input_grads) {
                    if self.requires(input) {
                        self.accumulate(grads, input, grad.scale(g));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(rows, cols)` when `b` broadcasts as a row over matrix `a`.
fn row_broadcast(a: &Tensor, b: &Tensor) -> Option<(usize, usize)> {
    let [rows, cols] = a.shape() else { return None };
    match b.shape() {
        [n] if n == cols => Some((*rows, *cols)),
        [1, n] if n == cols => Some((*rows, *cols)),
        _ => None,
    }
}

/// `out[t] += coeff * x[t + shift]` over indices where both sides exist.
fn axpy_shifted(out: &mut [f64], x: &[f64], coeff: f64, shift: isize) {
    if coeff == 0.0 {
        return;
    }
    let t_len = out.len() as isize;
    let x_len = x.len() as isize;
    let t0 = (-shift).max(0);
    let t1 = (x_len - shift).min(t_len);
    if t0 >= t1 {
        return;
    }
    let xs = &x[(t0 + shift) as usize..(t1 + shift) as usize];
    let os = &mut out[t0 as usize..t1 as usize];
    for (o, &v) in os.iter_mut().zip(xs) {
        *o += coeff * v;
    }
}

/// `sum_t a[t] * b[t + shift]` over indices where both sides exist.
fn dot_shifted(a: &[f64], b: &[f64], shift: isize) -> f64 {
    let a_len = a.len() as isize;
    let b_len = b.len() as isize;
    let t0 = (-shift).max(0);
    let t1 = (b_len - shift).min(a_len);
    if t0 >= t1 {
        return 0.0;
    }
    let asl = &a[t0 as usize..t1 as usize];
    let bsl = &b[(t0 + shift) as usize..(t1 + shift) as usize];
    asl.iter().zip(bsl).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x`, one coordinate at a time.
    fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            g.push((hi - lo) / (2.0 * eps));
        }
        g
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], rel: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom < rel,
                "gradient {i}: analytic {a}, numeric {n}"
            );
        }
    }

    #[test]
    fn square_function_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn log_sum_of_squares_gradient() {
        // f(x) = log(sum(x*x)) at x = (1, 1) has gradient (1, 1)
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean(sq).unwrap();
        let n = tape.leaf(Tensor::scalar(2.0));
        let total = tape.mul(m, n).unwrap();
        let loss = tape.log(total).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(x).unwrap().data();
        assert!((gx[0] - 1.0).abs() < 1e-12 && (gx[1] - 1.0).abs() < 1e-12, "{gx:?}");
    }

    #[test]
    fn backward_is_linear_over_loss_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..2.0)).collect();

        let build = |pick: u8| -> (Tape, ValueId, ValueId) {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::new(vec![2, 3], data.clone()).unwrap());
            let sq = tape.mul(x, x).unwrap();
            let l1 = tape.mean(sq).unwrap();
            let lg = tape.log(x).unwrap();
            let l2 = tape.mean(lg).unwrap();
            let loss = match pick {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            (tape, x, loss)
        };

        let grad_of = |pick: u8| {
            let (tape, x, loss) = build(pick);
            tape.backward(loss).unwrap().get(x).unwrap().data().to_vec()
        };
        let g1 = grad_of(0);
        let g2 = grad_of(1);
        let gsum = grad_of(2);
        for i in 0..6 {
            assert!(
                (gsum[i] - (g1[i] + g2[i])).abs() < 1e-15,
                "linearity violated at {i}"
            );
        }
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // conv -> relu -> concat -> matmul -> diag/trace -> log -> mean
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (c, t, f, k) = (2usize, 12usize, 3usize, 5usize);
        let x_data: Vec<f64> = (0..c * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_data: Vec<f64> = (0..f * c * k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b_data: Vec<f64> = (0..f).map(|_| rng.gen_range(-0.2..0.2)).collect();

        // conv -> relu -> concat -> matmul with a constant mixer -> trace -> log
        let mix_data: Vec<f64> = (0..t * f).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let build = |w: &[f64]| -> (Tape, ValueId, ValueId) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![c, t], x_data.clone()).unwrap());
            let wid = tape.param(Tensor::new(vec![f, c, k], w.to_vec()).unwrap());
            let bid = tape.leaf(Tensor::new(vec![f], b_data.clone()).unwrap());
            let conv = tape.conv1d(x, wid, bid).unwrap();
            let act = tape.relu(conv).unwrap();
            let both = tape.concat_rows(&[act, act]).unwrap();
            let mix = tape.leaf(Tensor::new(vec![t, f], mix_data.clone()).unwrap());
            let proj = tape.matmul(both, mix).unwrap(); // 2f x f
            let sq = tape.mul(proj, proj).unwrap();
            let m = tape.mean(sq).unwrap();
            let one = tape.leaf(Tensor::scalar(1.0));
            let shifted = tape.add(m, one).unwrap();
            let lg = tape.log(shifted).unwrap();
            (tape, wid, lg)
        };

        let (tape, wid, loss) = build(&w_data);
        let analytic = tape.backward(loss).unwrap().get(wid).unwrap().data().to_vec();
        let numeric = finite_diff(
            |w| {
                let (tape, _, loss) = build(w);
                tape.value(loss).data()[0]
            },
            &w_data,
            1e-5,
        );
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn dense_conv_matches_finite_differences_on_all_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (c, t, f, k) = (3usize, 10usize, 2usize, 4usize);
        let x_data: Vec<f64> = (0..c * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_data: Vec<f64> = (0..f * c * k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b_data: Vec<f64> = (0..f).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let run = |w: &[f64], b: &[f64], x: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>, Vec<f64>)>) {
            let mut tape = Tape::new();
            let xid = tape.param(Tensor::new(vec![c, t], x.to_vec()).unwrap());
            let wid = tape.param(Tensor::new(vec![f, c, k], w.to_vec()).unwrap());
            let bid = tape.param(Tensor::new(vec![f], b.to_vec()).unwrap());
            let conv = tape.conv1d(xid, wid, bid).unwrap();
            let sq = tape.mul(conv, conv).unwrap();
            let loss = tape.mean(sq).unwrap();
            let value = tape.value(loss).data()[0];
            let g = tape.backward(loss).unwrap();
            let grads = (
                g.get(wid).unwrap().data().to_vec(),
                g.get(bid).unwrap().data().to_vec(),
                g.get(xid).unwrap().data().to_vec(),
            );
            (value, Some(grads))
        };

        let (_, grads) = run(&w_data, &b_data, &x_data);
        let (gw, gb, gx) = grads.unwrap();
        let nw = finite_diff(|w| run(w, &b_data, &x_data).0, &w_data, 1e-5);
        let nb = finite_diff(|b| run(&w_data, b, &x_data).0, &b_data, 1e-5);
        let nx = finite_diff(|x| run(&w_data, &b_data, x).0, &x_data, 1e-5);
        assert_close(&gw, &nw, 1e-4);
        assert_close(&gb, &nb, 1e-4);
        assert_close(&gx, &nx, 1e-4);
    }

    #[test]
    fn depthwise_conv_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (d, t, k) = (3usize, 9usize, 4usize);
        let x_data: Vec<f64> = (0..d * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_data: Vec<f64> = (0..d * k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b_data: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let run = |w: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let xid = tape.leaf(Tensor::new(vec![d, t], x_data.clone()).unwrap());
            let wid = tape.param(Tensor::new(vec![d, k], w.to_vec()).unwrap());
            let bid = tape.param(Tensor::new(vec![d], b_data.clone()).unwrap());
            let conv = tape.conv1d_depthwise(xid, wid, bid).unwrap();
            let sq = tape.mul(conv, conv).unwrap();
            let loss = tape.mean(sq).unwrap();
            tape.value(loss).data()[0]
        };

        let mut tape = Tape::new();
        let xid = tape.leaf(Tensor::new(vec![d, t], x_data.clone()).unwrap());
        let wid = tape.param(Tensor::new(vec![d, k], w_data.clone()).unwrap());
        let bid = tape.param(Tensor::new(vec![d], b_data.clone()).unwrap());
        let conv = tape.conv1d_depthwise(xid, wid, bid).unwrap();
        let sq = tape.mul(conv, conv).unwrap();
        let loss = tape.mean(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        let analytic = g.get(wid).unwrap().data().to_vec();
        let numeric = finite_diff(run, &w_data, 1e-5);
        assert_close(&analytic, &numeric, 1e-4);
        // constant input must not get a gradient
        assert!(g.get(xid).is_none());
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (b, c) = (5usize, 2usize);
        let logits: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = vec![0usize, 1, 1, 0, 1];

        let run = |l: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let lid = tape.param(Tensor::new(vec![b, c], l.to_vec()).unwrap());
            let loss = tape.softmax_cross_entropy(lid, &labels).unwrap();
            tape.value(loss).data()[0]
        };

        let mut tape = Tape::new();
        let lid = tape.param(Tensor::new(vec![b, c], logits.clone()).unwrap());
        let loss = tape.softmax_cross_entropy(lid, &labels).unwrap();
        let g = tape.backward(loss).unwrap();
        let analytic = g.get(lid).unwrap().data().to_vec();
        let numeric = finite_diff(run, &logits, 1e-6);
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn custom_scalar_routes_stored_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let stored = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        let c = tape.custom_scalar(&[x], 7.0, vec![stored]).unwrap();
        let three = tape.leaf(Tensor::scalar(3.0));
        let scaled = tape.mul(c, three).unwrap();
        let g = tape.backward(scaled).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[30.0, 60.0]);
    }

    #[test]
    fn fan_out_accumulates_by_sum() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let a = tape.mul(x, x).unwrap(); // x^2
        let b = tape.add(a, x).unwrap(); // x^2 + x
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]); // 2x + 1
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_ids() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err(), "vector loss must be rejected");
        assert!(tape.backward(ValueId(99)).is_err(), "id off the tape must be rejected");
    }

    #[test]
    fn mean_trace_diag_shapes() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let d = tape.diag(x).unwrap();
        assert_eq!(tape.value(d).data(), &[1.0, 4.0]);
        let tr = tape.trace(x).unwrap();
        assert_eq!(tape.value(tr).data(), &[5.0]);
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.5]);
        let g = tape.backward(tr).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }
}
