//! Reverse-mode differentiation over an eagerly evaluated tape.
//!
//! Operations execute immediately and record a node on the owning [`Graph`];
//! nodes are therefore already in topological order and [`Graph::backward`]
//! is a single reverse sweep. Parameters live outside the graph and are
//! registered per pass as leaves; their gradients accumulate on the graph
//! until it is dropped.
//!
//! Training runs at f32; gradient checks instantiate the same code at f64,
//! where finite-difference tolerances are meaningful.

pub mod conv;
mod ops;

pub use ops::RunningStats;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Scalar element type of tensors and graphs.
pub trait Elem:
    num_traits::Float + std::ops::AddAssign + std::iter::Sum + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).unwrap()
    }
}

impl Elem for f32 {}
impl Elem for f64 {}

/// Dense n-dimensional array; row-major, activations use [N, C, Z, Y, X].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Elem> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} != shape {:?} product {}",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    /// Shape as [N, C, Z, Y, X].
    pub fn dims5(&self) -> Result<[usize; 5]> {
        if self.shape.len() != 5 {
            return Err(Error::ShapeMismatch(format!(
                "expected a 5-d tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok([
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
            self.shape[4],
        ])
    }

    /// Convert element type (used to run f32 networks at f64 in checks).
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(num_traits::cast(*v).unwrap()))
                .collect(),
        }
    }
}

/// Handle to a node on a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Backward rule: given the output gradient, the node's value and its input
/// values, return one optional gradient contribution per input (`None` for
/// inputs flagged as not needing gradients).
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &Tensor<T>, &[&Tensor<T>], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Elem> {
    name: &'static str,
    parents: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    backward: Option<BackwardFn<T>>,
    /// Accumulated gradient; populated for leaves by [`Graph::backward`].
    acc_grad: Option<Vec<T>>,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Recorded computation: a topologically ordered tape of operations.
pub struct Graph<T: Elem> {
    id: u64,
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.nodes.push(Node {
            name: "leaf",
            parents: Vec::new(),
            requires_grad,
            is_leaf: true,
            backward: None,
            acc_grad: None,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "var from another graph");
        &self.values[v.index]
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        assert_eq!(v.graph, self.id, "var from another graph");
        self.nodes[v.index].acc_grad.as_deref()
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedGraph);
        }
        Ok(v.index)
    }

    pub(crate) fn requires(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.index].requires_grad)
    }

    /// Append an eagerly computed node. `backward` may be `None` when no
    /// parent needs gradients.
    pub(crate) fn record(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        parents: Vec<Var>,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        let requires_grad = self.requires(&parents);
        self.values.push(value);
        self.nodes.push(Node {
            name,
            parents: parents.iter().map(|p| p.index).collect(),
            requires_grad,
            is_leaf: false,
            backward: if requires_grad { backward } else { None },
            acc_grad: None,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Number of recorded nodes with the given op name.
    pub fn count_ops(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.name == name).count()
    }

    /// Reverse sweep from a scalar loss; leaf gradients accumulate across
    /// repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        let n = self.values[root].numel();
        if n != 1 {
            return Err(Error::NotScalar(n));
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].is_leaf {
                if self.nodes[i].requires_grad {
                    match &mut self.nodes[i].acc_grad {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&gout) {
                                *a += *g;
                            }
                        }
                        None => self.nodes[i].acc_grad = Some(gout),
                    }
                }
                continue;
            }
            let Some(backward) = &self.nodes[i].backward else {
                continue;
            };
            let parents = self.nodes[i].parents.clone();
            let inputs: Vec<&Tensor<T>> = parents.iter().map(|p| &self.values[*p]).collect();
            let needs: Vec<bool> = parents
                .iter()
                .map(|p| self.nodes[*p].requires_grad)
                .collect();
            let contribs = backward(&gout, &self.values[i], &inputs, &needs);
            debug_assert_eq!(contribs.len(), parents.len());
            for (p, contrib) in parents.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !self.nodes[*p].requires_grad {
                    continue;
                }
                debug_assert_eq!(c.len(), self.values[*p].numel());
                match &mut grads[*p] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&c) {
                            *a += *g;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }
}
