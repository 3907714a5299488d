use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use super::ops::{eval, OpKind};
use super::tensor::Tensor;
use crate::error::{Error, Result};

struct Node {
    value: Rc<Tensor>,
    op: Option<OpKind>,
    parents: [usize; 2],
}

/// Append-only computation graph.
///
/// Values are computed eagerly as nodes are recorded. Gradients are
/// themselves recorded as graph nodes when `create_graph` is set, so they can
/// be differentiated again.
///
/// Operations never fail eagerly on non-finite results: the first such
/// result is remembered and reported by [`Graph::check`] and
/// [`Graph::gradient`]. Shape mismatches in the operator methods on [`Var`]
/// panic; use [`Graph::apply`] for a checked variant.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    fault: RefCell<Option<String>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input tensor. Any leaf can be differentiated against.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_value(Rc::new(value), None, [0, 0])
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    fn push_value(&self, value: Rc<Tensor>, op: Option<OpKind>, parents: [usize; 2]) -> Var<'_> {
        if !value.is_finite() {
            let mut fault = self.fault.borrow_mut();
            if fault.is_none() {
                *fault = Some(op.as_ref().map_or("leaf", OpKind::name).to_string());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, parents });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `op` applied to `operands`, validating shapes.
    pub fn apply<'g>(&'g self, op: OpKind, operands: &[Var<'g>]) -> Result<Var<'g>> {
        if operands.len() != op.arity() {
            return Err(Error::contract(
                op.name(),
                format!("expected {} operands, got {}", op.arity(), operands.len()),
            ));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let xs: Vec<&Tensor> = operands.iter().map(|v| &*nodes[v.id].value).collect();
            eval(&op, &xs)?
        };
        let mut parents = [0; 2];
        for (slot, v) in parents.iter_mut().zip(operands) {
            debug_assert!(std::ptr::eq(v.graph, self), "operand from another graph");
            *slot = v.id;
        }
        Ok(self.push_value(Rc::new(value), Some(op), parents))
    }

    fn op<'g>(&'g self, op: OpKind, operands: &[Var<'g>]) -> Var<'g> {
        self.apply(op, operands).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Fails if any recorded value is non-finite.
    pub fn check(&self) -> Result<()> {
        match &*self.fault.borrow() {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Tensors that do not influence `output` get a zero gradient. With
    /// `create_graph` the returned gradients stay connected to the graph;
    /// otherwise they are fresh leaves and the intermediate backward nodes
    /// are discarded.
    pub fn gradient<'g>(
        &'g self,
        output: Var<'g>,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g>>> {
        self.check()?;
        let out_shape = output.shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::contract(
                "gradient",
                format!("output must be scalar, got shape {out_shape:?}"),
            ));
        }
        let start = self.len();
        let top = output.id;

        // Nodes on some path from a `wrt` tensor to the output.
        let mut needed = vec![false; top + 1];
        for w in wrt {
            if w.id <= top {
                needed[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..=top {
                if needed[id] {
                    continue;
                }
                if let Some(op) = &nodes[id].op {
                    let p = &nodes[id].parents[..op.arity()];
                    needed[id] = p.iter().any(|&q| needed[q]);
                }
            }
        }

        let mut adjoint: Vec<Option<Var<'g>>> = vec![None; top + 1];
        if needed[top] {
            adjoint[top] = Some(self.leaf(Tensor::full(&out_shape, 1.0)));
        }
        for id in (0..=top).rev() {
            let Some(g) = adjoint[id] else { continue };
            let (op, parents) = {
                let nodes = self.nodes.borrow();
                match &nodes[id].op {
                    Some(op) => (op.clone(), nodes[id].parents),
                    None => continue,
                }
            };
            let arity = op.arity();
            let want = [needed[parents[0]], arity == 2 && needed[parents[1]]];
            let grads = self.vjp(&op, parents, id, g, want);
            for k in 0..arity {
                if let Some(gp) = grads[k] {
                    let p = parents[k];
                    adjoint[p] = Some(match adjoint[p] {
                        Some(acc) => acc + gp,
                        None => gp,
                    });
                }
            }
        }

        let mut result = Vec::with_capacity(wrt.len());
        for w in wrt {
            let g = match adjoint.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.leaf(Tensor::zeros(&w.shape())),
            };
            result.push(g);
        }
        self.check()?;
        if create_graph {
            return Ok(result);
        }
        let values: Vec<Rc<Tensor>> = result.iter().map(|v| v.value()).collect();
        self.nodes.borrow_mut().truncate(start);
        Ok(values
            .into_iter()
            .map(|v| self.push_value(v, None, [0, 0]))
            .collect())
    }

    /// Vector-Jacobian products of node `id` for the parents flagged in `want`.
    fn vjp<'g>(
        &'g self,
        op: &OpKind,
        parents: [usize; 2],
        id: usize,
        g: Var<'g>,
        want: [bool; 2],
    ) -> [Option<Var<'g>>; 2] {
        let a = Var {
            graph: self,
            id: parents[0],
        };
        let b = Var {
            graph: self,
            id: parents[1],
        };
        let y = Var { graph: self, id };
        let only_a = |v: Var<'g>| [Some(v), None];
        match op {
            OpKind::Add => [want[0].then_some(g), want[1].then_some(g)],
            OpKind::Sub => [want[0].then_some(g), want[1].then(|| -g)],
            OpKind::Mul => [want[0].then(|| g * b), want[1].then(|| g * a)],
            OpKind::Div => [want[0].then(|| g / b), want[1].then(|| -(g * y / b))],
            OpKind::MatMul { ta, tb } => {
                let mm = |x: Var<'g>, z: Var<'g>, tx: bool, tz: bool| {
                    self.op(OpKind::MatMul { ta: tx, tb: tz }, &[x, z])
                };
                match (ta, tb) {
                    (false, false) => [
                        want[0].then(|| mm(g, b, false, true)),
                        want[1].then(|| mm(a, g, true, false)),
                    ],
                    (false, true) => [
                        want[0].then(|| mm(g, b, false, false)),
                        want[1].then(|| mm(g, a, true, false)),
                    ],
                    (true, false) => [
                        want[0].then(|| mm(b, g, false, true)),
                        want[1].then(|| mm(a, g, false, false)),
                    ],
                    (true, true) => [
                        want[0].then(|| mm(b, g, true, true)),
                        want[1].then(|| mm(g, a, true, true)),
                    ],
                }
            }
            OpKind::Scale(c) => only_a(g.scale(*c)),
            OpKind::AddScalar(_) => only_a(g),
            OpKind::Negate => only_a(-g),
            OpKind::Softplus { alpha } => only_a(g * a.sigmoid(*alpha)),
            OpKind::Sigmoid { alpha } => {
                let one_minus = (-y).add_scalar(1.0);
                only_a(g * (y * one_minus).scale(*alpha))
            }
            OpKind::Tanh => only_a(g * (-y.square()).add_scalar(1.0)),
            OpKind::Abs => {
                let sign = a.value().map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                only_a(g * self.leaf(sign))
            }
            OpKind::Sqrt => only_a((g / y).scale(0.5)),
            OpKind::Square => only_a((g * a).scale(2.0)),
            OpKind::Recip => only_a(-(g * y * y)),
            OpKind::Exp => only_a(g * y),
            OpKind::Ln => only_a(g / a),
            OpKind::Sin => only_a(g * a.cos()),
            OpKind::Cos => only_a(-(g * a.sin())),
            OpKind::Sum => only_a(g.expand(&a.shape())),
            OpKind::Mean => {
                let shape = a.shape();
                let n: usize = shape.iter().product();
                only_a(g.expand(&shape).scale(1.0 / n as f64))
            }
            OpKind::Expand { .. } => {
                let s = g.sum();
                let target = a.shape();
                // Keep the source's rank (scalar vs 1-element tensors).
                if target.is_empty() {
                    only_a(s)
                } else {
                    only_a(self.op(OpKind::Expand { shape: target }, &[s]))
                }
            }
            OpKind::BroadcastRow { .. } => {
                let s = g.sum_rows();
                if a.shape().len() == 2 {
                    // [1, d] source.
                    let d = s.shape()[0];
                    only_a(
                        s.broadcast_row(1)
                            .select_cols_rc((0..d).collect::<Vec<_>>().into()),
                    )
                } else {
                    only_a(s)
                }
            }
            OpKind::SumRows => only_a(g.broadcast_row(a.shape()[0])),
            OpKind::BroadcastCol { .. } => only_a(g.sum_cols()),
            OpKind::SumCols => only_a(g.broadcast_col(a.shape()[1])),
            OpKind::SelectCols { idx } => {
                let cols = a.shape()[1];
                only_a(self.op(
                    OpKind::ScatterCols {
                        idx: idx.clone(),
                        cols,
                    },
                    &[g],
                ))
            }
            OpKind::ScatterCols { idx, .. } => only_a(g.select_cols_rc(idx.clone())),
            OpKind::RepeatRows { k } => only_a(g.sum_row_groups(*k)),
            OpKind::SumRowGroups { k } => only_a(g.repeat_rows(*k)),
            OpKind::Transpose => only_a(g.transpose()),
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut off from everything upstream.
    pub fn detach(&self) -> Var<'g> {
        let v = self.value();
        self.graph.push_value(v, None, [0, 0])
    }

    fn unary(&self, op: OpKind) -> Var<'g> {
        self.graph.op(op, &[*self])
    }

    /// `self @ other`.
    pub fn matmul(&self, other: &Var<'g>) -> Var<'g> {
        self.graph.op(
            OpKind::MatMul {
                ta: false,
                tb: false,
            },
            &[*self, *other],
        )
    }

    /// `self @ other^T`.
    pub fn matmul_t(&self, other: &Var<'g>) -> Var<'g> {
        self.graph.op(
            OpKind::MatMul {
                ta: false,
                tb: true,
            },
            &[*self, *other],
        )
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(OpKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(OpKind::AddScalar(c))
    }

    pub fn softplus(&self, alpha: f64) -> Var<'g> {
        self.unary(OpKind::Softplus { alpha })
    }

    pub fn sigmoid(&self, alpha: f64) -> Var<'g> {
        self.unary(OpKind::Sigmoid { alpha })
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(OpKind::Tanh)
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(OpKind::Abs)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(OpKind::Sqrt)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(OpKind::Square)
    }

    pub fn recip(&self) -> Var<'g> {
        self.unary(OpKind::Recip)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(OpKind::Exp)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(OpKind::Ln)
    }

    pub fn sin(&self) -> Var<'g> {
        self.unary(OpKind::Sin)
    }

    pub fn cos(&self) -> Var<'g> {
        self.unary(OpKind::Cos)
    }

    pub fn sum(&self) -> Var<'g> {
        self.unary(OpKind::Sum)
    }

    pub fn mean(&self) -> Var<'g> {
        self.unary(OpKind::Mean)
    }

    /// Scalar replicated to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Var<'g> {
        self.unary(OpKind::Expand {
            shape: shape.to_vec(),
        })
    }

    pub fn broadcast_row(&self, rows: usize) -> Var<'g> {
        self.unary(OpKind::BroadcastRow { rows })
    }

    pub fn sum_rows(&self) -> Var<'g> {
        self.unary(OpKind::SumRows)
    }

    pub fn broadcast_col(&self, cols: usize) -> Var<'g> {
        self.unary(OpKind::BroadcastCol { cols })
    }

    pub fn sum_cols(&self) -> Var<'g> {
        self.unary(OpKind::SumCols)
    }

    pub fn select_cols(&self, idx: &[usize]) -> Var<'g> {
        self.select_cols_rc(idx.into())
    }

    pub fn select_cols_rc(&self, idx: Rc<[usize]>) -> Var<'g> {
        self.unary(OpKind::SelectCols { idx })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'g> {
        self.select_cols(&(start..start + len).collect::<Vec<_>>())
    }

    pub fn repeat_rows(&self, k: usize) -> Var<'g> {
        if k == 1 {
            return *self;
        }
        self.unary(OpKind::RepeatRows { k })
    }

    pub fn sum_row_groups(&self, k: usize) -> Var<'g> {
        if k == 1 {
            return *self;
        }
        self.unary(OpKind::SumRowGroups { k })
    }

    pub fn transpose(&self) -> Var<'g> {
        self.unary(OpKind::Transpose)
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl<'g> ops::$trait for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                self.graph.op($kind, &[self, rhs])
            }
        }
    };
}

binary_op!(Add, add, OpKind::Add);
binary_op!(Sub, sub, OpKind::Sub);
binary_op!(Mul, mul, OpKind::Mul);
binary_op!(Div, div, OpKind::Div);

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.unary(OpKind::Negate)
    }
}
