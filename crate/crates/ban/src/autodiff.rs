//! Reverse-mode automatic differentiation over `ndarray`, f32 throughout.
//!
//! A `Tensor` is a node in an eagerly evaluated DAG. Ops record a backward
//! closure plus the parent handles they need; `backward()` runs a reverse
//! topological sweep accumulating gradients into every `requires_grad`
//! ancestor. Leaves created with [`Tensor::var`] keep their gradient until
//! [`Tensor::zero_grad`]; constants never allocate one, which is what keeps
//! the frozen-encoder path free of gradient storage.

use ndarray::{ArrayD, IxDyn};
use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::checkpoint::{check_keys, Container};
use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: RefCell<u64> = const { RefCell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let mut v = c.borrow_mut();
        *v += 1;
        *v
    })
}

type BackwardFn = Box<dyn Fn(&ArrayD<f32>)>;

pub(crate) struct Node {
    id: u64,
    data: RefCell<ArrayD<f32>>,
    grad: RefCell<Option<ArrayD<f32>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// A handle to one autodiff node. Cloning shares the node.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// A leaf that participates in differentiation (a trainable parameter).
    pub fn var(data: ArrayD<f32>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    /// A leaf outside differentiation (inputs, detached encoder features).
    pub fn constant(data: ArrayD<f32>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    pub(crate) fn from_op(
        data: ArrayD<f32>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward_fn: Some(backward_fn),
            }),
        }
    }

    pub fn data(&self) -> Ref<'_, ArrayD<f32>> {
        self.node.data.borrow()
    }

    /// Mutable access to a leaf's values (the optimizer path). Must not be
    /// called while a graph built on this leaf is still alive.
    pub fn data_mut(&self) -> RefMut<'_, ArrayD<f32>> {
        self.node.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<ArrayD<f32>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Extract the value of a single-element tensor.
    pub fn scalar(&self) -> f32 {
        let d = self.data();
        assert_eq!(d.len(), 1, "scalar() on tensor of shape {:?}", d.shape());
        *d.iter().next().unwrap()
    }

    pub(crate) fn accumulate_grad(&self, delta: &ArrayD<f32>) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => *g += delta,
            // normalize to standard layout so callers may take slices
            None => *slot = Some(delta.as_standard_layout().into_owned()),
        }
    }

    /// Reverse sweep from this node, seeding with ones.
    pub fn backward(&self) {
        let seed = ArrayD::ones(IxDyn(&self.shape()));
        self.backward_with(&seed);
    }

    pub fn backward_with(&self, seed: &ArrayD<f32>) {
        if !self.node.requires_grad {
            return;
        }
        // Iterative post-order DFS over requires_grad ancestors.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((t, child)) = stack.pop() {
            let parents = &t.node.parents;
            if child < parents.len() {
                stack.push((t.clone(), child + 1));
                let p = &parents[child];
                if p.node.requires_grad && visited.insert(p.node.id) {
                    stack.push((p.clone(), 0));
                }
            } else {
                order.push(t);
            }
        }
        self.accumulate_grad(seed);
        for t in order.iter().rev() {
            if let Some(f) = &t.node.backward_fn {
                let g = t.node.grad.borrow().clone();
                if let Some(g) = g {
                    f(&g);
                }
            }
        }
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

/// A named trainable leaf.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> Param {
        Param {
            name: name.into(),
            group,
            tensor,
        }
    }
}

/// The full learnable set of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, param: Param) {
        debug_assert!(
            self.params.iter().all(|p| p.name != param.name),
            "duplicate parameter name {}",
            param.name
        );
        self.params.push(param);
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for p in &self.params {
            c.insert(p.name.clone(), p.tensor.data().clone());
        }
        c
    }

    /// Load values by name. Missing keys error (all listed); extra keys are
    /// returned for the caller to warn about. Shapes must match exactly.
    pub fn load_container(&self, container: &Container) -> Result<Vec<String>> {
        let expected: Vec<String> = self.params.iter().map(|p| p.name.clone()).collect();
        let extras = check_keys(container, &expected)?;
        for p in &self.params {
            let src = container.require(&p.name)?;
            if src.shape() != p.tensor.shape().as_slice() {
                return Err(Error::shape(format!(
                    "checkpoint tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    src.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().assign(src);
        }
        Ok(extras)
    }
}
