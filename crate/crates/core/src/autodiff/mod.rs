//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Graph`]. A gradient
//! pass walks the tape backwards and expresses each vector-Jacobian product
//! with the same `Var` operations, so the gradient itself is recorded on the
//! tape when requested. That is what makes `grad(grad(f))` possible, and it
//! is how input-gradient penalties are minimized with respect to parameters.
//!
//! A graph is single-threaded (`Rc` + `RefCell`). Independent graphs can be
//! built concurrently on different threads; [`Tensor`] values are plain data
//! and can be shared freely.

mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use ops::{Primitive, GATHER_ZERO};

pub(crate) use ops::Op;

struct Node {
    value: Rc<Tensor>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

struct Inner {
    nodes: RefCell<Vec<Node>>,
    no_grad_depth: Cell<usize>,
    check_finite: Cell<bool>,
    first_non_finite: RefCell<Option<String>>,
}

/// An append-only tape of primitive operations.
#[derive(Clone)]
pub struct Graph(Rc<Inner>);

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph(Rc::new(Inner {
            nodes: RefCell::new(Vec::new()),
            no_grad_depth: Cell::new(0),
            check_finite: Cell::new(false),
            first_non_finite: RefCell::new(None),
        }))
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, Vec::new(), true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, Vec::new(), false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.0.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Debug mode: remember the first operation that produced a non-finite
    /// value. Propagation itself is never blocked.
    pub fn set_check_finite(&self, on: bool) {
        self.0.check_finite.set(on);
    }

    /// Fails if debug mode observed a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.0.first_non_finite.borrow().as_ref() {
            Some(msg) => Err(Error::NonFinite(msg.clone())),
            None => Ok(()),
        }
    }

    /// While the guard lives, new nodes are recorded as constants.
    pub fn no_grad(&self) -> NoGradGuard {
        self.0.no_grad_depth.set(self.0.no_grad_depth.get() + 1);
        NoGradGuard(self.clone())
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn push_node(&self, value: Tensor, op: Op, inputs: Vec<usize>, requires_grad: bool) -> Var {
        if self.0.check_finite.get() && !value.is_finite() {
            let mut slot = self.0.first_non_finite.borrow_mut();
            if slot.is_none() {
                *slot = Some(format!("{} produced a non-finite value", op.name()));
            }
        }
        let mut nodes = self.0.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs,
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// Record the result of an operation applied to `inputs`.
    pub(crate) fn record(&self, value: Tensor, op: Op, inputs: &[&Var]) -> Var {
        let requires_grad =
            self.0.no_grad_depth.get() == 0 && inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push_node(value, op, ids, requires_grad)
    }

    fn node_value(&self, id: usize) -> Rc<Tensor> {
        self.0.nodes.borrow()[id].value.clone()
    }

    fn node_requires_grad(&self, id: usize) -> bool {
        self.0.nodes.borrow()[id].requires_grad
    }

    fn var(&self, id: usize) -> Var {
        Var {
            graph: self.clone(),
            id,
        }
    }
}

pub struct NoGradGuard(Graph);

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let depth = &self.0 .0.no_grad_depth;
        depth.set(depth.get() - 1);
    }
}

/// A value on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.node_value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.node_requires_grad(self.id)
    }

    /// A constant copy of this value, cut off from the tape.
    pub fn detach(&self) -> Var {
        self.graph.constant((*self.value()).clone())
    }

    pub(crate) fn ensure_same_graph(&self, other: &Var) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(Error::ForeignGraph)
        }
    }
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// With `differentiable = true` the returned variables live on the same
/// graph and can be differentiated again. Otherwise they are constants.
/// A `wrt` variable the output does not depend on gets a zero gradient.
pub fn grad(output: &Var, wrt: &[Var], differentiable: bool) -> Result<Vec<Var>> {
    let out_shape = output.shape();
    if !out_shape.is_empty() {
        return Err(Error::NonScalar(out_shape));
    }
    for w in wrt {
        output.ensure_same_graph(w)?;
    }
    let graph = output.graph.clone();
    let _guard = (!differentiable).then(|| graph.no_grad());

    let last = output.id;
    // Snapshot the structure of the forward tape up to the output; the
    // backward pass appends nodes beyond `last` and never revisits them.
    let (op_list, inputs_list, requires): (Vec<Op>, Vec<Vec<usize>>, Vec<bool>) = {
        let nodes = graph.0.nodes.borrow();
        let mut ops = Vec::with_capacity(last + 1);
        let mut ins = Vec::with_capacity(last + 1);
        let mut req = Vec::with_capacity(last + 1);
        for node in &nodes[..=last] {
            ops.push(node.op.clone());
            ins.push(node.inputs.clone());
            req.push(node.requires_grad);
        }
        (ops, ins, req)
    };

    let targets: HashMap<usize, ()> = wrt
        .iter()
        .filter(|w| w.id <= last)
        .map(|w| (w.id, ()))
        .collect();
    // A node is worth differentiating into only if some target lies upstream.
    let mut leads_to_target = vec![false; last + 1];
    for id in 0..=last {
        leads_to_target[id] = requires[id]
            && (targets.contains_key(&id) || inputs_list[id].iter().any(|&i| leads_to_target[i]));
    }

    let mut grads: Vec<Option<Var>> = vec![None; last + 1];
    let mut found: HashMap<usize, Var> = HashMap::new();
    if leads_to_target[last] {
        grads[last] = Some(graph.scalar(1.0));
    }
    for id in (0..=last).rev() {
        let Some(g) = grads[id].take() else { continue };
        if targets.contains_key(&id) {
            found.insert(id, g.clone());
        }
        let inputs = &inputs_list[id];
        if inputs.is_empty() {
            continue;
        }
        let needs: Vec<bool> = inputs.iter().map(|&i| leads_to_target[i]).collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let in_vars: Vec<Var> = inputs.iter().map(|&i| graph.var(i)).collect();
        let out_var = graph.var(id);
        let in_grads = ops::vjp(&op_list[id], &in_vars, &out_var, &g, &needs)?;
        for ((&inp, need), ig) in inputs.iter().zip(needs).zip(in_grads) {
            if !need {
                continue;
            }
            let Some(ig) = ig else { continue };
            grads[inp] = Some(match grads[inp].take() {
                Some(acc) => acc.add(&ig)?,
                None => ig,
            });
        }
    }

    let mut result = Vec::with_capacity(wrt.len());
    for w in wrt {
        match found.get(&w.id) {
            Some(g) => result.push(g.clone()),
            None => result.push(graph.constant(Tensor::zeros(&w.shape()))),
        }
    }
    Ok(result)
}

/// First-order gradients as plain tensors.
pub fn grad_values(output: &Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
    Ok(grad(output, wrt, false)?
        .into_iter()
        .map(|v| (*v.value()).clone())
        .collect())
}
