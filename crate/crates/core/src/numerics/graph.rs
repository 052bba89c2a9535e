//! Reverse-mode tape.
//!
//! Every forward op pushes a node holding its output value, the vars it read, and a
//! [`Backward`] rule. `Graph::backward` replays the rules in reverse push order, which
//! is a valid topological order because a node can only read earlier nodes.

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Local derivative of one recorded op.
pub trait Backward<R: Real> {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the output gradient. Entries for
    /// inputs with `needs_grad[i] == false` may be `None`.
    fn backward(
        &self,
        grad_out: &Tensor<R>,
        inputs: &[&Tensor<R>],
        output: &Tensor<R>,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor<R>>>;
}

struct Node<R: Real> {
    value: Tensor<R>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<R>>>,
    param: Option<ParamId>,
    needs_grad: bool,
}

pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
    grad_enabled: bool,
    fault: Option<(&'static str, f64)>,
    kinks: u64,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            fault: None,
            kinks: 0,
        }
    }

    /// A graph that records values only; `backward` on it fails.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Scale every gradient produced by ops named `op` by `factor`.
    ///
    /// Exists so the gradient checker can prove it notices a broken rule.
    pub fn inject_grad_fault(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    /// Fold the branch choices of a piecewise op (which input won a max) into a
    /// running fingerprint. Two passes with equal fingerprints took the same branches.
    pub fn record_branches(&mut self, choices: impl IntoIterator<Item = u32>) {
        for c in choices {
            self.kinks = (self.kinks ^ c as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn branch_fingerprint(&self) -> u64 {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        let p = store.get(id);
        let needs_grad = self.grad_enabled && p.trainable;
        self.nodes.push(Node {
            value: p.value.clone(),
            inputs: Vec::new(),
            rule: None,
            param: needs_grad.then_some(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record an op output.
    pub fn push(&mut self, value: Tensor<R>, inputs: &[Var], rule: impl Backward<R> + 'static) -> Var {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|i| !self.value(*i).all_finite()),
            "{} produced non-finite values from finite inputs",
            rule.name()
        );
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            rule: needs_grad.then(|| Box::new(rule) as Box<dyn Backward<R>>),
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagate from a scalar `loss`, adding gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<R>) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_node.value.shape()),
            ));
        }
        if !loss_node.needs_grad {
            return Err(Error::Numeric(
                "loss is detached from every trainable parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), R::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(pid) = node.param {
                store.accumulate_grad(pid, &g);
                continue;
            }
            let Some(rule) = &node.rule else { continue };
            let inputs: Vec<&Tensor<R>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let mut local = rule.backward(&g, &inputs, &node.value, &needs);
            if let Some((op, factor)) = self.fault {
                if rule.name() == op {
                    let f = R::from_f64_lossy(factor);
                    for t in local.iter_mut().flatten() {
                        t.data_mut().iter_mut().for_each(|v| *v *= f);
                    }
                }
            }
            for ((input, need), lg) in node.inputs.iter().zip(&needs).zip(local) {
                if !need {
                    continue;
                }
                let Some(lg) = lg else { continue };
                debug_assert_eq!(lg.shape(), self.nodes[input.0].value.shape(), "{}", rule.name());
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(lg.data()) {
                            *a += *v;
                        }
                    }
                    slot @ None => *slot = Some(lg),
                }
            }
        }
        Ok(())
    }
}
