use std::collections::BTreeMap;
use std::rc::Rc;

use super::prim::{self, Prim};
use super::{EngineError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum NodeKind {
    /// Differentiable leaf, keyed by name in the returned gradients.
    Input(String),
    Constant,
    Prim(Prim),
}

#[derive(Clone, Debug)]
pub struct Node {
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    needs_grad: bool,
}

/// A recorded define-by-run computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and every input precedes its consumer.
#[derive(Clone, Debug, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Tensor>>,
}

/// Gradients of a scalar (or seeded) output with respect to every input leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(NodeKind::Input(name.into()), Vec::new(), value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Constant, Vec::new(), value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn apply(&mut self, prim: Prim, inputs: &[NodeId]) -> Result<NodeId, EngineError> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            prim::forward(prim, &vals)?
        };
        let needs = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push(NodeKind::Prim(prim), inputs.to_vec(), value, needs))
    }

    /// Adjoint of a node after [`CompGraph::backward`]; `None` for nodes the
    /// output does not depend on through differentiable paths.
    pub fn adjoint(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Reverse sweep from `output`. A missing seed means the output must be
    /// a single element and is seeded with 1.
    pub fn backward(&mut self, output: NodeId, seed: Option<Tensor>) -> Result<Gradients, EngineError> {
        let out_shape = self.nodes[output.0].value.shape().to_vec();
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_shape.as_slice() {
                    return Err(EngineError::SeedShape {
                        output: out_shape,
                        seed: s.shape().to_vec(),
                    });
                }
                s
            }
            None => {
                if self.nodes[output.0].value.len() != 1 {
                    return Err(EngineError::SeedShape {
                        output: out_shape,
                        seed: vec![],
                    });
                }
                Tensor::filled(&out_shape, 1.0)
            }
        };

        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let NodeKind::Prim(p) = node.kind else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].needs_grad).collect();
            let contribs = prim::backward(p, &inputs, &node.value, &grad, &needs);
            for (input, contrib) in node.inputs.iter().zip(contribs) {
                if let Some(c) = contrib {
                    match &mut adjoints[input.0] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            adjoints[idx] = Some(grad);
        }

        let mut grads = Gradients::default();
        for (node, adj) in self.nodes.iter().zip(&adjoints) {
            if let NodeKind::Input(name) = &node.kind {
                let g = adj.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match grads.by_name.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.by_name.insert(name.clone(), g);
                    }
                }
            }
        }
        self.adjoints = adjoints;
        Ok(grads)
    }
}

/// Something that can evaluate primitives: either the recording graph or
/// a plain eager evaluator. Model code is written once against this trait.
pub trait Backend {
    type Var: Clone;

    /// A model parameter. Differentiable under the graph backend.
    fn parameter(&mut self, name: &str, value: &Tensor) -> Self::Var;
    fn constant(&mut self, value: Tensor) -> Self::Var;
    fn apply(&mut self, prim: Prim, inputs: &[&Self::Var]) -> Result<Self::Var, EngineError>;
    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var, EngineError> {
        self.apply(Prim::MatMul, &[a, b])
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var, EngineError> {
        self.apply(Prim::Add, &[a, b])
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var, EngineError> {
        self.apply(Prim::Mul, &[a, b])
    }
    fn tanh(&mut self, a: &Self::Var) -> Result<Self::Var, EngineError> {
        self.apply(Prim::Tanh, &[a])
    }
    fn sigmoid(&mut self, a: &Self::Var) -> Result<Self::Var, EngineError> {
        self.apply(Prim::Sigmoid, &[a])
    }
    fn concat(&mut self, parts: &[&Self::Var], axis: usize) -> Result<Self::Var, EngineError> {
        self.apply(Prim::Concat { axis }, parts)
    }
    fn slice(&mut self, a: &Self::Var, axis: usize, start: usize, end: usize) -> Result<Self::Var, EngineError> {
        self.apply(Prim::Slice { axis, start, end }, &[a])
    }
    fn sum(&mut self, a: &Self::Var) -> Result<Self::Var, EngineError> {
        self.apply(Prim::Sum, &[a])
    }
    fn mse(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var, EngineError> {
        self.apply(Prim::Mse, &[a, b])
    }
    /// `a * c` for a plain number `c`.
    fn scale(&mut self, a: &Self::Var, c: f64) -> Result<Self::Var, EngineError> {
        let c = self.constant(Tensor::scalar(c));
        self.mul(a, &c)
    }
}

impl Backend for CompGraph {
    type Var = NodeId;

    fn parameter(&mut self, name: &str, value: &Tensor) -> NodeId {
        self.input(name, value.clone())
    }

    fn constant(&mut self, value: Tensor) -> NodeId {
        CompGraph::constant(self, value)
    }

    fn apply(&mut self, prim: Prim, inputs: &[&NodeId]) -> Result<NodeId, EngineError> {
        let ids: Vec<NodeId> = inputs.iter().map(|&&id| id).collect();
        CompGraph::apply(self, prim, &ids)
    }

    fn value<'a>(&'a self, var: &'a NodeId) -> &'a Tensor {
        CompGraph::value(self, *var)
    }
}

/// Evaluates primitives immediately without recording anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Backend for Eager {
    type Var = Rc<Tensor>;

    fn parameter(&mut self, _name: &str, value: &Tensor) -> Rc<Tensor> {
        Rc::new(value.clone())
    }

    fn constant(&mut self, value: Tensor) -> Rc<Tensor> {
        Rc::new(value)
    }

    fn apply(&mut self, prim: Prim, inputs: &[&Rc<Tensor>]) -> Result<Rc<Tensor>, EngineError> {
        let vals: Vec<&Tensor> = inputs.iter().map(|t| t.as_ref()).collect();
        prim::forward(prim, &vals).map(Rc::new)
    }

    fn value<'a>(&'a self, var: &'a Rc<Tensor>) -> &'a Tensor {
        var
    }
}

/// Builds a graph from named inputs and a program over them, returning the
/// program's output value together with the recorded graph.
pub fn eval_graph<F>(inputs: &[(&str, Tensor)], program: F) -> Result<(Tensor, CompGraph, NodeId), EngineError>
where
    F: FnOnce(&mut CompGraph, &[NodeId]) -> Result<NodeId, EngineError>,
{
    let mut graph = CompGraph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|(name, t)| graph.input(*name, t.clone()))
        .collect();
    let out = program(&mut graph, &ids)?;
    Ok((graph.value(out).clone(), graph, out))
}
