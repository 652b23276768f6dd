//! Reverse-mode differentiation over a linear operation tape.
//!
//! Operations are recorded at tensor granularity during the forward pass
//! and replayed in reverse to accumulate gradients. The op set is exactly
//! what the debiasing networks and losses need; there is no broadcasting
//! beyond the few shapes used here.

use crate::error::{contract, Result};
use crate::kernels::{self, Activation};
use crate::tensor::Tensor;

/// Handle to a value slot on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2x2 { input: VarId, kernel: VarId, bias: VarId },
    MaxPool2x2 { input: VarId, argmax: Vec<u32> },
    Dense { input: VarId, weight: VarId, bias: VarId },
    Activate { input: VarId, f: Activation },
    GlobalAvgPool { input: VarId },
    /// Mean over all entries of any tensor.
    Mean { input: VarId },
    /// Broadcast-subtract a scalar from a vector.
    SubScalar { vec: VarId, scalar: VarId },
    ElemMul { a: VarId, b: VarId },
    ElemSub { a: VarId, b: VarId },
    /// Extract one column of a [B, K] tensor as a [B] vector.
    Column { input: VarId, col: usize },
    /// Select rows along the leading axis.
    GatherRows { input: VarId, indices: Vec<usize> },
    SoftmaxXent { logits: VarId, targets: Tensor, probs: Tensor },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Div { a: VarId, b: VarId },
    Sqrt { a: VarId },
    Square { a: VarId },
    AddConst { a: VarId },
    MulConst { a: VarId, c: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to every grad-tracked slot.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. a tracked slot; zero tensors are materialized, so this
    /// is None only for slots that were never tracked or never reached.
    pub fn wrt(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value stored at a slot.
    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    /// Convenience for scalar slots.
    pub fn scalar(&self, id: VarId) -> f64 {
        self.value(id).scalar_value()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: VarId) -> bool {
        self.nodes[id.index()].needs_grad
    }

    /// Insert a constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a differentiable leaf (a parameter or tracked input).
    pub fn variable(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    pub fn conv2x2(&mut self, input: VarId, kernel: VarId, bias: VarId) -> Result<VarId> {
        let out = kernels::conv2x2_forward(self.value(input), self.value(kernel), self.value(bias))?;
        let needs = self.tracked(input) || self.tracked(kernel) || self.tracked(bias);
        Ok(self.push(out, Op::Conv2x2 { input, kernel, bias }, needs))
    }

    pub fn maxpool2x2(&mut self, input: VarId) -> Result<VarId> {
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(input))?;
        let needs = self.tracked(input);
        Ok(self.push(out, Op::MaxPool2x2 { input, argmax }, needs))
    }

    pub fn dense(&mut self, input: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
        let out = kernels::dense_forward(self.value(input), self.value(weight), self.value(bias))?;
        let needs = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        Ok(self.push(out, Op::Dense { input, weight, bias }, needs))
    }

    pub fn activate(&mut self, input: VarId, f: Activation) -> VarId {
        let out = kernels::activation_forward(self.value(input), f);
        let needs = self.tracked(input);
        self.push(out, Op::Activate { input, f }, needs)
    }

    pub fn global_avg_pool(&mut self, input: VarId) -> Result<VarId> {
        let out = kernels::global_avg_pool_forward(self.value(input))?;
        let needs = self.tracked(input);
        Ok(self.push(out, Op::GlobalAvgPool { input }, needs))
    }

    /// Mean of all entries, as a scalar slot.
    pub fn mean(&mut self, input: VarId) -> Result<VarId> {
        let v = self.value(input);
        if v.numel() == 0 {
            return Err(contract("mean of an empty tensor".to_string()));
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.tracked(input);
        Ok(self.push(Tensor::scalar(m), Op::Mean { input }, needs))
    }

    pub fn sub_scalar(&mut self, vec: VarId, scalar: VarId) -> Result<VarId> {
        if !self.value(scalar).is_scalar() {
            return Err(contract("sub_scalar: second argument must be scalar".to_string()));
        }
        let s = self.scalar(scalar);
        let mut out = self.value(vec).clone();
        for v in out.data_mut() {
            *v -= s;
        }
        let needs = self.tracked(vec) || self.tracked(scalar);
        Ok(self.push(out, Op::SubScalar { vec, scalar }, needs))
    }

    pub fn elem_mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(contract(format!(
                "elem_mul shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.index()].value.data()) {
            *o *= bv;
        }
        let needs = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::ElemMul { a, b }, needs))
    }

    pub fn elem_sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(contract(format!(
                "elem_sub shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.index()].value.data()) {
            *o -= bv;
        }
        let needs = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::ElemSub { a, b }, needs))
    }

    pub fn column(&mut self, input: VarId, col: usize) -> Result<VarId> {
        let (rows, cols) = self.value(input).dims2()?;
        if col >= cols {
            return Err(contract(format!("column {col} out of range for width {cols}")));
        }
        let data: Vec<f64> = (0..rows).map(|r| self.value(input).data()[r * cols + col]).collect();
        let out = Tensor::from_vec(&[rows], data)?;
        let needs = self.tracked(input);
        Ok(self.push(out, Op::Column { input, col }, needs))
    }

    pub fn gather_rows(&mut self, input: VarId, indices: Vec<usize>) -> Result<VarId> {
        let out = self.value(input).gather_rows(&indices)?;
        let needs = self.tracked(input);
        Ok(self.push(out, Op::GatherRows { input, indices }, needs))
    }

    /// Softmax cross-entropy against constant one-hot targets; scalar output.
    pub fn softmax_xent(&mut self, logits: VarId, targets: Tensor) -> Result<VarId> {
        let (loss, probs) = kernels::softmax_xent_forward(self.value(logits), &targets)?;
        let needs = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, targets, probs },
            needs,
        ))
    }

    fn scalar_binary(&mut self, a: VarId, b: VarId, name: &str) -> Result<()> {
        if !self.value(a).is_scalar() || !self.value(b).is_scalar() {
            return Err(contract(format!("{name}: both operands must be scalar slots")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.scalar_binary(a, b, "add")?;
        let v = self.scalar(a) + self.scalar(b);
        let needs = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(v), Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.scalar_binary(a, b, "sub")?;
        let v = self.scalar(a) - self.scalar(b);
        let needs = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(v), Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.scalar_binary(a, b, "mul")?;
        let v = self.scalar(a) * self.scalar(b);
        let needs = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(v), Op::Mul { a, b }, needs))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.scalar_binary(a, b, "div")?;
        let v = self.scalar(a) / self.scalar(b);
        let needs = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(v), Op::Div { a, b }, needs))
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        if !self.value(a).is_scalar() {
            return Err(contract("sqrt: operand must be a scalar slot".to_string()));
        }
        let v = self.scalar(a).sqrt();
        let needs = self.tracked(a);
        Ok(self.push(Tensor::scalar(v), Op::Sqrt { a }, needs))
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId> {
        if !self.value(a).is_scalar() {
            return Err(contract("square: operand must be a scalar slot".to_string()));
        }
        let s = self.scalar(a);
        let needs = self.tracked(a);
        Ok(self.push(Tensor::scalar(s * s), Op::Square { a }, needs))
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> Result<VarId> {
        if !self.value(a).is_scalar() {
            return Err(contract("add_const: operand must be a scalar slot".to_string()));
        }
        let v = self.scalar(a) + c;
        let needs = self.tracked(a);
        Ok(self.push(Tensor::scalar(v), Op::AddConst { a }, needs))
    }

    pub fn mul_const(&mut self, a: VarId, c: f64) -> Result<VarId> {
        if !self.value(a).is_scalar() {
            return Err(contract("mul_const: operand must be a scalar slot".to_string()));
        }
        let v = self.scalar(a) * c;
        let needs = self.tracked(a);
        Ok(self.push(Tensor::scalar(v), Op::MulConst { a, c }, needs))
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId> {
        self.mul_const(a, -1.0)
    }

    /// Population mean and perturbed standard deviation of a batch vector:
    /// std = sqrt(var + eps_std). Both slots are differentiable.
    pub fn batch_stats(&mut self, input: VarId, eps_std: f64) -> Result<(VarId, VarId)> {
        let n = self.value(input).dims1()?;
        if n < 2 {
            return Err(contract(format!("batch_stats needs at least 2 samples, got {n}")));
        }
        let mean = self.mean(input)?;
        let centered = self.sub_scalar(input, mean)?;
        let sq = self.elem_mul(centered, centered)?;
        let var = self.mean(sq)?;
        let shifted = self.add_const(var, eps_std)?;
        let std = self.sqrt(shifted)?;
        Ok((mean, std))
    }

    /// Reverse pass from a scalar slot. Gradients accumulate in fixed tape
    /// order, so repeated runs are bit-identical.
    pub fn backward(&self, seed: VarId) -> Result<Gradients> {
        if !self.value(seed).is_scalar() {
            return Err(contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.value(seed).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.index()] = Some(Tensor::scalar(1.0));

        for idx in (0..=seed.index()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: VarId, delta: Tensor) {
        if !self.tracked(id) {
            return;
        }
        match &mut grads[id.index()] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accumulate_scalar(&self, grads: &mut [Option<Tensor>], id: VarId, delta: f64) {
        self.accumulate(grads, id, Tensor::scalar(delta));
    }

    fn backprop_node(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2x2 { input, kernel, bias } => {
                let (gi, gk, gb) = kernels::conv2x2_backward(
                    self.value(*input),
                    self.value(*kernel),
                    gout,
                    self.tracked(*input),
                )
                .expect("shapes validated at record time");
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, gi);
                }
                self.accumulate(grads, *kernel, gk);
                self.accumulate(grads, *bias, gb);
            }
            Op::MaxPool2x2 { input, argmax } => {
                let gi = kernels::maxpool2x2_backward(gout, argmax, self.value(*input).shape());
                self.accumulate(grads, *input, gi);
            }
            Op::Dense { input, weight, bias } => {
                let (gi, gw, gb) = kernels::dense_backward(
                    self.value(*input),
                    self.value(*weight),
                    gout,
                    self.tracked(*input),
                    self.tracked(*weight),
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, gi);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *weight, gw);
                }
                self.accumulate(grads, *bias, gb);
            }
            Op::Activate { input, f } => {
                let gi = kernels::activation_backward(self.value(*input), &node.value, gout, *f);
                self.accumulate(grads, *input, gi);
            }
            Op::GlobalAvgPool { input } => {
                let gi = kernels::global_avg_pool_backward(gout, self.value(*input).shape());
                self.accumulate(grads, *input, gi);
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel();
                let gv = gout.scalar_value() / n as f64;
                self.accumulate(grads, *input, Tensor::filled(self.value(*input).shape(), gv));
            }
            Op::SubScalar { vec, scalar } => {
                self.accumulate(grads, *vec, gout.clone());
                let total: f64 = gout.data().iter().sum();
                self.accumulate_scalar(grads, *scalar, -total);
            }
            Op::ElemMul { a, b } => {
                if self.tracked(*a) {
                    let mut ga = gout.clone();
                    for (g, &bv) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *g *= bv;
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let mut gb = gout.clone();
                    for (g, &av) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *g *= av;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::ElemSub { a, b } => {
                self.accumulate(grads, *a, gout.clone());
                if self.tracked(*b) {
                    let mut gb = gout.clone();
                    for g in gb.data_mut() {
                        *g = -*g;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Column { input, col } => {
                let (rows, cols) = self.value(*input).dims2().expect("validated");
                let mut gi = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    gi.data_mut()[r * cols + col] = gout.data()[r];
                }
                self.accumulate(grads, *input, gi);
            }
            Op::GatherRows { input, indices } => {
                let ishape = self.value(*input).shape();
                let row_len: usize = ishape[1..].iter().product();
                let mut gi = Tensor::zeros(ishape);
                let gid = gi.data_mut();
                for (t, &src) in indices.iter().enumerate() {
                    let g = &gout.data()[t * row_len..(t + 1) * row_len];
                    for (dst, &v) in gid[src * row_len..(src + 1) * row_len].iter_mut().zip(g) {
                        *dst += v;
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let gi = kernels::softmax_xent_backward(probs, targets, gout.scalar_value());
                self.accumulate(grads, *logits, gi);
            }
            Op::Add { a, b } => {
                let g = gout.scalar_value();
                self.accumulate_scalar(grads, *a, g);
                self.accumulate_scalar(grads, *b, g);
            }
            Op::Sub { a, b } => {
                let g = gout.scalar_value();
                self.accumulate_scalar(grads, *a, g);
                self.accumulate_scalar(grads, *b, -g);
            }
            Op::Mul { a, b } => {
                let g = gout.scalar_value();
                self.accumulate_scalar(grads, *a, g * self.scalar(*b));
                self.accumulate_scalar(grads, *b, g * self.scalar(*a));
            }
            Op::Div { a, b } => {
                let g = gout.scalar_value();
                let bv = self.scalar(*b);
                self.accumulate_scalar(grads, *a, g / bv);
                self.accumulate_scalar(grads, *b, -g * self.scalar(*a) / (bv * bv));
            }
            Op::Sqrt { a } => {
                let g = gout.scalar_value();
                let y = node.value.scalar_value();
                self.accumulate_scalar(grads, *a, g * 0.5 / y);
            }
            Op::Square { a } => {
                let g = gout.scalar_value();
                self.accumulate_scalar(grads, *a, g * 2.0 * self.scalar(*a));
            }
            Op::AddConst { a } => {
                self.accumulate_scalar(grads, *a, gout.scalar_value());
            }
            Op::MulConst { a, c } => {
                self.accumulate_scalar(grads, *a, gout.scalar_value() * c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul_const(x, 1.0).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().scalar_value(), 1.0);
    }

    #[test]
    fn product_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let y = tape.variable(Tensor::scalar(3.0));
        let z = tape.mul(x, y).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.wrt(x).unwrap().scalar_value(), 3.0);
        assert_eq!(grads.wrt(y).unwrap().scalar_value(), 2.0);
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn batch_stats_values() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[4], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let (m, s) = tape.batch_stats(x, 0.0).unwrap();
        assert_eq!(tape.scalar(m), 1.0);
        assert_eq!(tape.scalar(s), 0.0);

        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[2], vec![0.0, 2.0]).unwrap());
        let (m, s) = tape.batch_stats(x, 0.0).unwrap();
        assert_eq!(tape.scalar(m), 1.0);
        assert_eq!(tape.scalar(s), 1.0);
    }

    #[test]
    fn batch_stats_rejects_singleton() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[1], vec![5.0]).unwrap());
        assert!(tape.batch_stats(x, 0.0).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let z = tape.mul(x, c).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.wrt(x).unwrap().scalar_value(), 5.0);
        assert!(grads.wrt(c).is_none());
    }
}
