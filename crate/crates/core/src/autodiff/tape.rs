use std::collections::HashMap;

use ndarray::ArrayD;

use super::params::{ParamId, ParamStore};

/// Handle to a variable recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct VarId(pub(crate) usize);

/// Backward closure: (output grad, parent values, output value) -> one grad
/// contribution per parent, in parent order.
pub(crate) type BackFn =
    Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

pub(crate) struct Meta {
    pub parents: Vec<VarId>,
    pub backward: Option<BackFn>,
}

pub struct Tape {
    pub(crate) values: Vec<ArrayD<f64>>,
    pub(crate) metas: Vec<Meta>,
    grads: Vec<Option<ArrayD<f64>>>,
    grad_enabled: bool,
    param_vars: HashMap<usize, VarId>,
    /// Batch statistics staged by normalization layers during a training
    /// forward pass, keyed by the buffer's [`ParamId`]. The caller commits
    /// them after the optimizer step; a forward pass alone mutates nothing,
    /// which keeps finite-difference probes of the loss side-effect free.
    pub(crate) pending_stats: Vec<(ParamId, ArrayD<f64>)>,
}

impl Tape {
    /// A tape that records backward closures for [`Tape::backward`].
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// `grad = false` skips backward closures and parent bookkeeping; use for
    /// inference and metric evaluation.
    pub fn with_grad(grad: bool) -> Self {
        Tape {
            values: Vec::new(),
            metas: Vec::new(),
            grads: Vec::new(),
            grad_enabled: grad,
            param_vars: HashMap::new(),
            pending_stats: Vec::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Record a leaf holding `value`. Gradients still flow to leaves; they are
    /// readable through [`Tape::grad`] after a backward sweep.
    pub fn constant(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, vec![], None)
    }

    /// Lift a stored parameter onto the tape. Cached per tape, so every use
    /// of the parameter shares one variable and gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> VarId {
        if let Some(&v) = self.param_vars.get(&id.0) {
            return v;
        }
        let v = self.constant(store.value(id).clone());
        self.param_vars.insert(id.0, v);
        v
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<VarId>,
        backward: Option<BackFn>,
    ) -> VarId {
        let id = VarId(self.values.len());
        self.values.push(value);
        if self.grad_enabled {
            self.metas.push(Meta { parents, backward });
        } else {
            self.metas.push(Meta {
                parents: vec![],
                backward: None,
            });
        }
        id
    }

    pub fn value(&self, v: VarId) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    /// Value of a single-element variable.
    pub fn scalar(&self, v: VarId) -> f64 {
        let val = &self.values[v.0];
        assert_eq!(val.len(), 1, "scalar() on a variable with {} elements", val.len());
        *val.iter().next().unwrap()
    }

    /// Reverse sweep from `root`, seeding with ones. Gradients for every
    /// reachable variable are kept and readable via [`Tape::grad`] until the
    /// next sweep.
    pub fn backward(&mut self, root: VarId) {
        assert!(self.grad_enabled, "backward() on a no-grad tape");
        let n = self.values.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.0] = Some(ArrayD::ones(self.values[root.0].raw_dim()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.metas[i].backward {
                let parent_vals: Vec<&ArrayD<f64>> = self.metas[i]
                    .parents
                    .iter()
                    .map(|p| &self.values[p.0])
                    .collect();
                let contribs = back(&g, &parent_vals, &self.values[i]);
                assert_eq!(
                    contribs.len(),
                    self.metas[i].parents.len(),
                    "backward closure returned a wrong number of gradients"
                );
                for (p, c) in self.metas[i].parents.iter().zip(contribs) {
                    match &mut grads[p.0] {
                        slot @ None => *slot = Some(c),
                        Some(acc) => *acc += &c,
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    /// Gradient of the last backward sweep's root with respect to `v`, or
    /// `None` if `v` did not influence the root.
    pub fn grad(&self, v: VarId) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter lifted onto this tape, keyed by raw
    /// parameter index. Parameters that never influenced the root are absent.
    pub fn param_grads(&self) -> HashMap<usize, ArrayD<f64>> {
        let mut out = HashMap::new();
        for (&pid, &var) in &self.param_vars {
            if let Some(g) = self.grad(var) {
                out.insert(pid, g.clone());
            }
        }
        out
    }

    /// Stage a buffer update (e.g. a running statistic) computed during the
    /// forward pass. Nothing is written to any store until the caller
    /// commits the staged values.
    pub fn stage_stat_update(&mut self, id: ParamId, value: ArrayD<f64>) {
        self.pending_stats.push((id, value));
    }

    /// Batch statistics staged during the forward pass, to be committed into
    /// the store by the training loop after the optimizer step.
    pub fn take_pending_stats(&mut self) -> Vec<(ParamId, ArrayD<f64>)> {
        std::mem::take(&mut self.pending_stats)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
