//! Reverse-mode gradient tape over the kernel set.
//!
//! The policy topology is fixed, so the tape is a flat Wengert list rebuilt
//! per minibatch: leaves copy parameter values in, `backward` walks the list
//! once, and the leaf gradients are accumulated back into the bound
//! [`ParamStore`]. Loss ops compute their per-sample input gradients during
//! the forward pass and cache them, which keeps backward allocation-free.

use std::rc::Rc;

use super::kernels::{self, AttnCache, LnCache, MaskMatrix};
use super::matrix::Matrix;
use super::params::ParamStore;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf { param: Option<usize> },
    Add { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    LayerNorm { x: NodeId, g: NodeId, b: NodeId, cache: LnCache },
    PerTokenLinear { x: NodeId, w: NodeId, b: NodeId, tokens: usize },
    AddPos { x: NodeId, pos: NodeId, tokens: usize },
    MaskedAttention { q: NodeId, k: NodeId, v: NodeId, cache: AttnCache },
    Detokenize { x: NodeId, w: NodeId, b: NodeId, tokens: usize },
    SelectToken { x: NodeId, tokens: usize, idx: usize },
    GaussianLogp { means: NodeId, log_std: NodeId, actions: Rc<Matrix> },
    // Loss ops cache d(loss)/d(input) from the forward pass.
    CachedGrad { x: NodeId, dx: Matrix },
    EntropyMean { log_std: NodeId },
    LinComb { terms: Vec<(f64, NodeId)> },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass at `id` (zero matrix if the node
    /// was never reached).
    pub fn grad(&self, id: NodeId) -> Matrix {
        let n = &self.nodes[id.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols()))
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf (no parameter binding).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf bound to `store` entry `name`; its gradient flows back into the
    /// store on [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let id = store.id(name);
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = kernels::relu_forward(self.value(x));
        self.push(out, Op::Relu { x })
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId) -> NodeId {
        let (out, cache) =
            kernels::layer_norm_forward(self.value(x), self.value(g), self.value(b));
        self.push(out, Op::LayerNorm { x, g, b, cache })
    }

    pub fn per_token_linear(&mut self, x: NodeId, w: NodeId, b: NodeId, tokens: usize) -> NodeId {
        let out =
            kernels::per_token_linear_forward(self.value(x), self.value(w), self.value(b), tokens);
        self.push(out, Op::PerTokenLinear { x, w, b, tokens })
    }

    pub fn add_pos(&mut self, x: NodeId, pos: NodeId, tokens: usize) -> NodeId {
        let out = kernels::add_pos_forward(self.value(x), self.value(pos), tokens);
        self.push(out, Op::AddPos { x, pos, tokens })
    }

    pub fn masked_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        masks: &Rc<Vec<MaskMatrix>>,
        tokens: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let (out, cache) = kernels::masked_attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            masks,
            tokens,
            heads,
        )?;
        Ok(self.push(out, Op::MaskedAttention { q, k, v, cache }))
    }

    pub fn detokenize(&mut self, x: NodeId, w: NodeId, b: NodeId, tokens: usize) -> NodeId {
        let out = kernels::detokenize_forward(self.value(x), self.value(w), self.value(b), tokens);
        self.push(out, Op::Detokenize { x, w, b, tokens })
    }

    pub fn select_token(&mut self, x: NodeId, tokens: usize, idx: usize) -> NodeId {
        let out = kernels::select_token_forward(self.value(x), tokens, idx);
        self.push(out, Op::SelectToken { x, tokens, idx })
    }

    pub fn gaussian_logp(&mut self, means: NodeId, log_std: NodeId, actions: Rc<Matrix>) -> NodeId {
        let out =
            kernels::gaussian_logp_forward(self.value(means), self.value(log_std), &actions);
        self.push(out, Op::GaussianLogp { means, log_std, actions })
    }

    pub fn surrogate_loss(
        &mut self,
        logp_new: NodeId,
        logp_old: &Matrix,
        advantages: &Matrix,
        clip_eps: f64,
    ) -> Result<NodeId> {
        let (loss, dlogp) =
            kernels::surrogate_forward(self.value(logp_new), logp_old, advantages, clip_eps)?;
        Ok(self.push(Matrix::scalar(loss), Op::CachedGrad { x: logp_new, dx: dlogp }))
    }

    pub fn value_loss(
        &mut self,
        values: NodeId,
        values_old: &Matrix,
        returns: &Matrix,
        clip_eps: f64,
    ) -> NodeId {
        let (loss, dv) =
            kernels::value_loss_forward(self.value(values), values_old, returns, clip_eps);
        self.push(Matrix::scalar(loss), Op::CachedGrad { x: values, dx: dv })
    }

    pub fn entropy_mean(&mut self, log_std: NodeId) -> NodeId {
        let h = kernels::entropy_mean(self.value(log_std));
        self.push(Matrix::scalar(h), Op::EntropyMean { log_std })
    }

    /// Scalar linear combination `sum_i c_i * x_i` of 1x1 nodes.
    pub fn lin_comb(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        let total: f64 = terms.iter().map(|(c, id)| c * self.value(*id).item()).sum();
        self.push(Matrix::scalar(total), Op::LinComb { terms: terms.to_vec() })
    }

    fn add_grad(&mut self, id: NodeId, g: Matrix) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar `loss` node (seeded with 1).
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar root");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Matrix::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, g.clone());
                    self.add_grad(b, g.clone());
                }
                Op::Relu { x } => {
                    let x = *x;
                    let dx = kernels::relu_backward(&self.nodes[x.0].value, &g);
                    self.add_grad(x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (dx, dw, db) =
                        kernels::linear_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, &g);
                    self.add_grad(x, dx);
                    self.add_grad(w, dw);
                    self.add_grad(b, db);
                }
                Op::LayerNorm { x, g: gn, b, cache } => {
                    let (x, gn, b) = (*x, *gn, *b);
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(cache, &self.nodes[gn.0].value, &g);
                    self.add_grad(x, dx);
                    self.add_grad(gn, dg);
                    self.add_grad(b, db);
                }
                Op::PerTokenLinear { x, w, b, tokens } => {
                    let (x, w, b, tokens) = (*x, *w, *b, *tokens);
                    let (dx, dw, db) = kernels::per_token_linear_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        tokens,
                        &g,
                    );
                    self.add_grad(x, dx);
                    self.add_grad(w, dw);
                    self.add_grad(b, db);
                }
                Op::AddPos { x, pos, tokens } => {
                    let (x, pos, tokens) = (*x, *pos, *tokens);
                    let dpos = kernels::add_pos_backward_pos(&g, tokens);
                    self.add_grad(x, g.clone());
                    self.add_grad(pos, dpos);
                }
                Op::MaskedAttention { q, k, v, cache, .. } => {
                    let (q, k, v) = (*q, *k, *v);
                    let (dq, dk, dv) = kernels::masked_attention_backward(
                        cache,
                        &self.nodes[q.0].value,
                        &self.nodes[k.0].value,
                        &self.nodes[v.0].value,
                        &g,
                    );
                    self.add_grad(q, dq);
                    self.add_grad(k, dk);
                    self.add_grad(v, dv);
                }
                Op::Detokenize { x, w, b, tokens } => {
                    let (x, w, b, tokens) = (*x, *w, *b, *tokens);
                    let (dx, dw, db) = kernels::detokenize_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        tokens,
                        &g,
                    );
                    self.add_grad(x, dx);
                    self.add_grad(w, dw);
                    self.add_grad(b, db);
                }
                Op::SelectToken { x, tokens, idx } => {
                    let (x, tokens, idx) = (*x, *tokens, *idx);
                    let rows = self.nodes[x.0].value.rows();
                    let dx = kernels::select_token_backward(&g, tokens, idx, rows);
                    self.add_grad(x, dx);
                }
                Op::GaussianLogp { means, log_std, actions } => {
                    let (means, log_std) = (*means, *log_std);
                    let actions = Rc::clone(actions);
                    let (dmu, dls) = kernels::gaussian_logp_backward(
                        &self.nodes[means.0].value,
                        &self.nodes[log_std.0].value,
                        &actions,
                        &g,
                    );
                    self.add_grad(means, dmu);
                    self.add_grad(log_std, dls);
                }
                Op::CachedGrad { x, dx } => {
                    let x = *x;
                    let mut dx = dx.clone();
                    dx.scale_in_place(g.item());
                    self.add_grad(x, dx);
                }
                Op::EntropyMean { log_std } => {
                    let log_std = *log_std;
                    let n = self.nodes[log_std.0].value.cols();
                    let dls = Matrix::from_fn(1, n, |_, _| g.item() / n as f64);
                    self.add_grad(log_std, dls);
                }
                Op::LinComb { terms } => {
                    let terms = terms.clone();
                    for (c, id) in terms {
                        self.add_grad(id, Matrix::scalar(c * g.item()));
                    }
                }
            }
            // Restore so callers can inspect intermediate gradients.
            self.nodes[i].grad = Some(g);
        }
    }

    /// Add every bound leaf's gradient into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for n in &self.nodes {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&n.op, &n.grad) {
                store.grad_mut(*id).add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_chain_gradient() {
        // loss = sum((x.w + b) relu'd) with known values.
        let mut store = ParamStore::new();
        store.insert("w", Matrix::from_vec(2, 1, vec![1.0, -2.0]));
        store.insert("b", Matrix::from_vec(1, 1, vec![0.5]));

        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(1, 2, vec![3.0, 1.0]));
        let w = g.param(&store, "w");
        let b = g.param(&store, "b");
        let y = g.linear(x, w, b); // 3 - 2 + 0.5 = 1.5
        let r = g.relu(y);
        // Treat the single output as the scalar loss.
        assert_eq!(r.0 + 1, 5);
        assert!((g.value(r).item() - 1.5).abs() < 1e-15);
        g.backward(r);
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(store.id("w")).as_slice(), &[3.0, 1.0]);
        assert_eq!(store.grad(store.id("b")).as_slice(), &[1.0]);
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        // y = w + w => dy/dw = 2
        let mut store = ParamStore::new();
        store.insert("w", Matrix::scalar(1.25));
        let mut g = Graph::new();
        let w = g.param(&store, "w");
        let y = g.add(w, w);
        g.backward(y);
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.grad(0).item(), 2.0);
    }
}
