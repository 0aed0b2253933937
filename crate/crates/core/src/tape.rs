//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Forward calls record one step per operation; `backward` replays the tape
//! in reverse and accumulates gradients additively across fan-out. Gradients
//! follow the same fixed accumulation order as the forward kernels.

use crate::scalar::Scalar;
use crate::tensor::{gemm_nn_acc, NumError, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

enum Step<T> {
    Matmul { a: VarId, b: VarId, out: VarId },
    Add { a: VarId, b: VarId, out: VarId },
    Relu { x: VarId, out: VarId },
    ConcatCols { a: VarId, b: VarId, out: VarId },
    SumRowGroups { x: VarId, out: VarId, group: usize },
    Scale { x: VarId, out: VarId, factor: T },
    SumAll { x: VarId, out: VarId },
    CrossEntropySum { logits: VarId, out: VarId, labels: Vec<usize>, probs: Tensor<T> },
}

/// Records operations during the forward pass and replays them in reverse.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    steps: Vec<Step<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Register an input value. Only leaves flagged `requires_grad` retain a
    /// gradient after `backward`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        self.push(value, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
        });
        id
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: VarId) -> Option<Tensor<T>> {
        self.nodes[id.0].grad.take()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar_value(&self, id: VarId) -> Result<T, NumError> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(NumError::NonScalarLoss {
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        Ok(v.data()[0])
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumError> {
        let value = self.value(a).matmul(self.value(b))?;
        let out = self.push(value, false);
        self.steps.push(Step::Matmul { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumError> {
        let value = self.value(a).add(self.value(b))?;
        let out = self.push(value, false);
        self.steps.push(Step::Add { a, b, out });
        Ok(out)
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId, NumError> {
        let value = self.value(x).relu();
        let out = self.push(value, false);
        self.steps.push(Step::Relu { x, out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId, NumError> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let out = self.push(value, false);
        self.steps.push(Step::ConcatCols { a, b, out });
        Ok(out)
    }

    pub fn sum_row_groups(&mut self, x: VarId, group: usize) -> Result<VarId, NumError> {
        let value = self.value(x).sum_row_groups(group)?;
        let out = self.push(value, false);
        self.steps.push(Step::SumRowGroups { x, out, group });
        Ok(out)
    }

    pub fn scale(&mut self, x: VarId, factor: T) -> Result<VarId, NumError> {
        let value = self.value(x).scale(factor);
        let out = self.push(value, false);
        self.steps.push(Step::Scale { x, out, factor });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId, NumError> {
        let value = Tensor::scalar(self.value(x).sum_all());
        let out = self.push(value, false);
        self.steps.push(Step::SumAll { x, out });
        Ok(out)
    }

    /// Softmax cross-entropy summed over rows: `logits (m x C)`, one label per
    /// row, loss `= sum_i -log softmax(logits_i)[label_i]` (max-subtraction
    /// stabilized). Softmax probabilities are cached for the backward rule.
    pub fn cross_entropy_sum(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId, NumError> {
        let lv = self.value(logits);
        let (m, c) = lv.shape();
        if c < 2 {
            return Err(NumError::Contract(format!(
                "cross_entropy requires at least 2 classes, got {c}"
            )));
        }
        if labels.len() != m {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                lhs: (m, c),
                rhs: (labels.len(), 1),
            });
        }
        for &l in labels {
            if l >= c {
                return Err(NumError::IndexOutOfRange { index: l, bound: c });
            }
        }
        let mut probs = Tensor::zeros(m, c);
        let mut loss = T::zero();
        for i in 0..m {
            let row = lv.row(i);
            let max = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
            let mut denom = T::zero();
            for &x in row {
                denom += (x - max).exp();
            }
            let prow = &mut probs.data_mut()[i * c..(i + 1) * c];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp() / denom;
            }
            loss += max + denom.ln() - row[labels[i]];
        }
        let out = self.push(Tensor::scalar(loss), false);
        self.steps.push(Step::CrossEntropySum {
            logits,
            out,
            labels: labels.to_vec(),
            probs,
        });
        Ok(out)
    }

    /// Single-sample form: `logits (1 x C)` and one class index.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, label: usize) -> Result<VarId, NumError> {
        let shape = self.value(logits).shape();
        if shape.0 != 1 {
            return Err(NumError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: shape,
                rhs: (1, shape.1),
            });
        }
        self.cross_entropy_sum(logits, &[label])
    }

    /// Reverse pass from a scalar loss. Every `requires_grad` leaf ends with
    /// `grad` set (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: VarId) -> Result<(), NumError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NumError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for step in self.steps.iter().rev() {
            match step {
                Step::Matmul { a, b, out } => {
                    let Some(dc) = grads[out.0].clone() else { continue };
                    let (m, k) = self.nodes[a.0].value.shape();
                    let n_ = self.nodes[b.0].value.shape().1;
                    {
                        let bt = self.nodes[b.0].value.transposed();
                        let da = ensure(&mut grads[a.0], m, k);
                        gemm_nn_acc(da.data_mut(), dc.data(), bt.data(), m, n_, k);
                    }
                    {
                        let at = self.nodes[a.0].value.transposed();
                        let db = ensure(&mut grads[b.0], k, n_);
                        gemm_nn_acc(db.data_mut(), at.data(), dc.data(), k, m, n_);
                    }
                }
                Step::Add { a, b, out } => {
                    let Some(dc) = grads[out.0].clone() else { continue };
                    let (r, c) = dc.shape();
                    accumulate(ensure(&mut grads[a.0], r, c), dc.data());
                    accumulate(ensure(&mut grads[b.0], r, c), dc.data());
                }
                Step::Relu { x, out } => {
                    let Some(dc) = grads[out.0].clone() else { continue };
                    let (r, c) = dc.shape();
                    let xv = self.nodes[x.0].value.clone();
                    let dx = ensure(&mut grads[x.0], r, c);
                    for ((d, &g), &v) in dx.data_mut().iter_mut().zip(dc.data()).zip(xv.data()) {
                        if v > T::zero() {
                            *d += g;
                        }
                    }
                }
                Step::ConcatCols { a, b, out } => {
                    let Some(dc) = grads[out.0].clone() else { continue };
                    let (r, ca) = self.nodes[a.0].value.shape();
                    let cb = self.nodes[b.0].value.cols();
                    {
                        let da = ensure(&mut grads[a.0], r, ca);
                        for i in 0..r {
                            let src = &dc.row(i)[..ca];
                            let dst = &mut da.data_mut()[i * ca..(i + 1) * ca];
                            for (d, &g) in dst.iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                    {
                        let db = ensure(&mut grads[b.0], r, cb);
                        for i in 0..r {
                            let src = &dc.row(i)[ca..];
                            let dst = &mut db.data_mut()[i * cb..(i + 1) * cb];
                            for (d, &g) in dst.iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                }
                Step::SumRowGroups { x, out, group } => {
                    let Some(dc) = grads[out.0].clone() else { continue };
                    let (r, c) = self.nodes[x.0].value.shape();
                    let dx = ensure(&mut grads[x.0], r, c);
                    for i in 0..r {
                        let src = dc.row(i / group);
                        let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                        for (d, &g) in dst.iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
                Step::Scale { x, out, factor } => {
                    let Some(dc) = grads[out.0].clone() else { continue };
                    let (r, c) = dc.shape();
                    let dx = ensure(&mut grads[x.0], r, c);
                    for (d, &g) in dx.data_mut().iter_mut().zip(dc.data()) {
                        *d += g * *factor;
                    }
                }
                Step::SumAll { x, out } => {
                    let Some(dc) = grads[out.0].clone() else { continue };
                    let g = dc.data()[0];
                    let (r, c) = self.nodes[x.0].value.shape();
                    let dx = ensure(&mut grads[x.0], r, c);
                    for d in dx.data_mut() {
                        *d += g;
                    }
                }
                Step::CrossEntropySum { logits, out, labels, probs } => {
                    let Some(dc) = grads[out.0].clone() else { continue };
                    let g = dc.data()[0];
                    let (m, c) = probs.shape();
                    let dl = ensure(&mut grads[logits.0], m, c);
                    for i in 0..m {
                        let prow = probs.row(i);
                        let drow = &mut dl.data_mut()[i * c..(i + 1) * c];
                        for (d, &p) in drow.iter_mut().zip(prow) {
                            *d += g * p;
                        }
                        drow[labels[i]] -= g;
                    }
                }
            }
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let (r, c) = node.value.shape();
                node.grad = Some(grad.unwrap_or_else(|| Tensor::zeros(r, c)));
            } else {
                node.grad = grad;
            }
        }
        Ok(())
    }
}

fn ensure<T: Scalar>(slot: &mut Option<Tensor<T>>, rows: usize, cols: usize) -> &mut Tensor<T> {
    slot.get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate<T: Scalar>(dst: &mut Tensor<T>, src: &[T]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and central
/// finite differences: `|a - n| / max(|a|, |n|, 1e-8)` over all entries.
///
/// `f` must build the same scalar loss from any leaf it is handed. Probe
/// points near ReLU kinks are the caller's responsibility to avoid.
pub fn grad_check<T, F>(f: &F, x: &Tensor<T>, eps: T) -> Result<T, NumError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, VarId) -> Result<VarId, NumError>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xid)?;
    tape.scalar_value(loss)?;
    tape.backward(loss)?;
    let analytic = tape.take_grad(xid).expect("leaf gradient");

    let eval = |probe: &Tensor<T>| -> Result<T, NumError> {
        let mut t = Tape::new();
        let id = t.leaf(probe.clone(), false);
        let l = f(&mut t, id)?;
        t.scalar_value(l)
    };

    let floor = T::of_f64(1e-8);
    let two = T::of_f64(2.0);
    let mut max_err = T::zero();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (two * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let err = (a - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
