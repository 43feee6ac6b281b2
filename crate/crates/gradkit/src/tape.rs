//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value plus
//! whatever the backward rule needs. `Tape::backward` walks the nodes in
//! reverse insertion order, which is a valid topological order because an op
//! can only reference nodes created before it.

use crate::error::{shape_err, GradError, Result};
use crate::ops::conv::{self, ConvGeom};
use crate::ops::{layout, loss, norm};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source of batch-norm statistics for a tape op.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Computed from the input itself; gradients flow through the statistics.
    Batch,
    /// Supplied by the caller and treated as constants.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weights: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    FoldBatch(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    Sum(Var),
    DotConst {
        input: Var,
        coeffs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => t.data_mut().iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(Tensor::new(shape.to_vec(), delta).expect("grad shape")),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Conv2d {
                input, weights, bias, ..
            } => self.needs(*input) || self.needs(*weights) || bias.is_some_and(|b| self.needs(b)),
            Op::BatchNorm { input, gamma, beta, .. } => self.needs(*input) || self.needs(*gamma) || self.needs(*beta),
            Op::Concat(parts) => parts.iter().any(|&p| self.needs(p)),
            Op::Relu(x) | Op::Upsample2(x) | Op::FoldBatch(x) | Op::Softmax(x) | Op::Sum(x) => self.needs(*x),
            Op::CrossEntropy { logits, .. } => self.needs(*logits),
            Op::DotConst { input, .. } => self.needs(*input),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives a gradient. Ops depending only on
    /// constants skip their backward work entirely.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weights: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).shape(), self.value(weights).shape(), stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).len() != geom.out_channels {
                return shape_err(
                    "conv2d",
                    format!(
                        "bias length {} != output channels {}",
                        self.value(b).len(),
                        geom.out_channels
                    ),
                );
            }
        }
        let out = conv::forward(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
            &geom,
        );
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weights,
                bias,
                geom,
            },
        ))
    }

    /// Batch norm. With `NormStats::Batch` the per-channel batch mean and
    /// biased variance are returned alongside the output.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        epsilon: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (_, c, _, _) = self.value(input).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err("batch_norm", format!("affine parameters do not have {c} channels"));
        }
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let (m, v) = norm::channel_stats(self.value(input))?;
                (m, v, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batch_norm", format!("statistics do not have {c} channels"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let n = norm::normalize(
            self.value(input),
            &mean,
            &var,
            epsilon,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let v = self.push(
            n.out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: n.xhat,
                inv_std: n.inv_std,
                batch_stats,
            },
        );
        Ok((v, batch_stats.then_some((mean, var))))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect()).expect("same shape");
        self.push(out, Op::Relu(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let out = layout::upsample2(self.value(x))?;
        Ok(self.push(out, Op::Upsample2(x)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = layout::concat_channels(&tensors)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn fold_batch(&mut self, x: Var) -> Result<Var> {
        let out = layout::fold_batch(self.value(x))?;
        Ok(self.push(out, Op::FoldBatch(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = loss::softmax_channels(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        loss::validate_ce(self.value(logits), &labels, &weights)?;
        let ce = loss::cross_entropy(self.value(logits), &labels, &weights);
        Ok(self.push(
            Tensor::scalar(ce.loss),
            Op::CrossEntropy {
                logits,
                probs: ce.probs,
                labels,
                weights,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ x ⊙ coeffs`, a scalar probe for checking non-scalar ops.
    pub fn dot_const(&mut self, x: Var, coeffs: Tensor) -> Result<Var> {
        if self.value(x).shape() != coeffs.shape() {
            return shape_err(
                "dot_const",
                format!("{:?} vs {:?}", self.value(x).shape(), coeffs.shape()),
            );
        }
        let s = self.value(x).data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::DotConst { input: x, coeffs }))
    }

    /// Gradients of the scalar node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let out_shape = self.value(out).shape();
        if self.value(out).len() != 1 {
            return Err(GradError::NonScalar(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(out_shape.to_vec(), vec![1.0])?);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let dy = g.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weights,
                    bias,
                    geom,
                } => {
                    let cg = conv::backward(
                        dy,
                        self.value(*input).data(),
                        self.value(*weights),
                        geom,
                        self.needs(*input),
                        self.needs(*weights),
                    );
                    if let Some(d) = cg.input {
                        accumulate(&mut grads[input.0], self.value(*input).shape(), d);
                    }
                    if let Some(d) = cg.weights {
                        accumulate(&mut grads[weights.0], self.value(*weights).shape(), d);
                    }
                    if let Some(b) = bias {
                        accumulate(&mut grads[b.0], self.value(*b).shape(), cg.bias);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let ng = norm::backward(
                        dy,
                        node.value.shape(),
                        xhat,
                        inv_std,
                        self.value(*gamma).data(),
                        *batch_stats,
                    );
                    accumulate(&mut grads[input.0], node.value.shape(), ng.input);
                    accumulate(&mut grads[gamma.0], self.value(*gamma).shape(), ng.gamma);
                    accumulate(&mut grads[beta.0], self.value(*beta).shape(), ng.beta);
                }
                Op::Relu(x) => {
                    let d: Vec<f64> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], self.value(*x).shape(), d);
                }
                Op::Upsample2(x) => {
                    let d = layout::upsample2_backward(dy, self.value(*x).shape());
                    accumulate(&mut grads[x.0], self.value(*x).shape(), d);
                }
                Op::Concat(parts) => {
                    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
                    let ds = layout::concat_channels_backward(dy, &shapes);
                    for ((p, d), s) in parts.iter().zip(ds).zip(&shapes) {
                        accumulate(&mut grads[p.0], s, d);
                    }
                }
                Op::FoldBatch(x) => {
                    let d = layout::fold_batch_backward(dy, self.value(*x).shape());
                    accumulate(&mut grads[x.0], self.value(*x).shape(), d);
                }
                Op::Softmax(x) => {
                    let d = loss::softmax_backward(dy, &node.value);
                    accumulate(&mut grads[x.0], self.value(*x).shape(), d);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                    weights,
                } => {
                    let d = loss::cross_entropy_backward(dy[0], probs, labels, weights);
                    accumulate(&mut grads[logits.0], probs.shape(), d);
                }
                Op::Sum(x) => {
                    let d = vec![dy[0]; self.value(*x).len()];
                    accumulate(&mut grads[x.0], self.value(*x).shape(), d);
                }
                Op::DotConst { input, coeffs } => {
                    let d: Vec<f64> = coeffs.data().iter().map(|c| c * dy[0]).collect();
                    accumulate(&mut grads[input.0], coeffs.shape(), d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(GradError::NonScalar(_))));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64 - 1.5));
        let c = tape.concat_channels(&[x, x]).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 4]);
    }
}
