use std::collections::HashMap;

use crate::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure of one node: reads node values through the context and
/// accumulates into the gradients of its parents.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>, &mut Grads)>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct BackwardCtx<'a> {
    nodes: &'a [Node],
    /// Gradient flowing into the node being differentiated.
    pub grad: &'a [f64],
}

impl BackwardCtx<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

/// Per-node gradient accumulators, allocated lazily.
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
    wants: Vec<bool>,
    lens: Vec<usize>,
}

impl Grads {
    pub fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }

    /// Mutable gradient buffer of `v`, zero-initialized on first access.
    pub fn slot(&mut self, v: Var) -> &mut [f64] {
        let len = self.lens[v.0];
        self.slots[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn accumulate(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        for (a, b) in self.slot(v).iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Gradients of a backward pass, keyed by parameter and by node.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.by_node[v.0].as_ref().map(|g| Tensor::from_vec(&self.shapes[v.0], g.clone()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.by_node[v.0].as_deref())
    }

    /// `(param, gradient)` pairs for every parameter reached by the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|(p, v)| self.by_node[v.0].as_deref().map(|g| (*p, g)))
    }

    /// Euclidean norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Adds `scale * other` into `self` parameter-wise. Both passes must come
    /// from the same store.
    pub fn add_scaled_params(acc: &mut HashMap<ParamId, Vec<f64>>, other: &Gradients, scale: f64) {
        for (id, g) in other.params() {
            let slot = acc.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }
}

/// Tape of tensor operations.
///
/// With `record` off (evaluation) no backward closures are kept, and
/// [`Graph::release`] may drop intermediate values to bound memory.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    training: bool,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
    /// Recording graph in training mode.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true, training: true, param_vars: HashMap::new() }
    }

    /// Non-recording graph in evaluation mode.
    pub fn eval() -> Self {
        Self { nodes: Vec::new(), record: false, training: false, param_vars: HashMap::new() }
    }

    /// Recording graph in evaluation mode (frozen normalization statistics
    /// but gradients still available).
    pub fn eval_recording() -> Self {
        Self { nodes: Vec::new(), record: true, training: false, param_vars: HashMap::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, backward: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient (used by gradient checks on inputs).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, backward: None, requires_grad: self.record });
        Var(self.nodes.len() - 1)
    }

    /// Pulls a parameter (or buffer) into the graph. Repeated calls return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let requires = self.record && store.is_trainable(id);
        self.nodes.push(Node { value: store.get(id).clone(), backward: None, requires_grad: requires });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an operation node. The backward closure is kept only when
    /// recording and at least one parent requires a gradient.
    pub fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if requires { Some(backward) } else { None };
        self.nodes.push(Node { value, backward, requires_grad: requires });
        Var(self.nodes.len() - 1)
    }

    /// Drops the values of nodes created at or after `since`, except `keep`.
    /// Only valid for non-recording graphs.
    pub fn release(&mut self, since: usize, keep: &[Var]) {
        assert!(!self.record, "release is only allowed on evaluation graphs");
        let params: Vec<usize> = self.param_vars.values().map(|v| v.0).collect();
        for i in since..self.nodes.len() {
            if keep.iter().any(|k| k.0 == i) || params.contains(&i) {
                continue;
            }
            self.nodes[i].value = Tensor::default();
        }
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        self.backward_with(loss, &[1.0])
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: &[f64]) -> Gradients {
        assert!(self.record, "backward on a non-recording graph");
        assert_eq!(seed.len(), self.value(out).len());
        let n = self.nodes.len();
        let mut grads = Grads {
            slots: vec![None; n],
            wants: self.nodes.iter().map(|nd| nd.requires_grad).collect(),
            lens: self.nodes.iter().map(|nd| nd.value.len()).collect(),
        };
        if grads.wants[out.0] {
            grads.slots[out.0] = Some(seed.to_vec());
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads.slots[i].take() else { continue };
            if let Some(bw) = &self.nodes[i].backward {
                let ctx = BackwardCtx { nodes: &self.nodes, grad: &g };
                bw(&ctx, &mut grads);
            } else {
                grads.slots[i] = Some(g);
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Gradients {
            by_node: grads.slots,
            params,
            shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
