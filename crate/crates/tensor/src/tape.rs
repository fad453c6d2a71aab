//! Operation recording and reverse-mode replay.
//!
//! A [`Tape`] is an append-only list of records. Each record names its
//! primitive, keeps its inputs and output by value, and is identified by its
//! index, so inputs always precede outputs. Backward walks indices downward
//! from the loss, visiting each node once.
//!
//! Backward rules are written with the same differentiable primitives as the
//! forward pass. With `create_graph` the gradient computation is itself
//! appended to the tape, which is what makes grad-of-grad possible.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};
use crate::ops::backward::backward_rule;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Softplus,
    Sqrt,
    LeakyRelu(f64),
    SumAll,
    SumAxis { axis: usize, keepdim: bool },
    BroadcastTo,
    SumTo,
    MatMul { ta: bool, tb: bool },
    Reshape,
    Permute(Vec<usize>),
    Slice { axis: usize, start: usize },
    Pad { axis: usize, before: usize },
    Concat { axis: usize },
    Flip(usize),
    Conv2d { stride: usize, pad: usize },
    Conv2dInput { stride: usize, pad: usize },
    Conv2dWeight { stride: usize, pad: usize },
    Upsample2x,
    SumPool2x,
    PlaneSample { du: u8, dv: u8 },
    PlaneScatter { du: u8, dv: u8 },
    CumSum { axis: usize, reverse: bool },
}

/// Value snapshot of a tensor as seen by a record. Holds no tape pointer, so
/// records never keep their own tape alive.
#[derive(Clone)]
pub(crate) struct Saved {
    pub data: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub id: Option<usize>,
}

#[derive(Clone)]
pub(crate) struct Record {
    pub op: Op,
    pub inputs: Vec<Saved>,
    pub out: Saved,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

/// Single-threaded operation log. Independent tapes may live on different
/// threads.
#[derive(Clone, Default)]
pub struct Tape {
    records: Arc<Mutex<Vec<Record>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_as(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.records, &other.records)
    }

    /// Registers a requires-grad leaf sharing `t`'s buffer.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let out = Saved {
            data: t.data.clone(),
            shape: t.shape.clone(),
            id: None,
        };
        let id = self.push(Record {
            op: Op::Leaf,
            inputs: Vec::new(),
            out,
        });
        Tensor {
            data: t.data.clone(),
            shape: t.shape.clone(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, mut rec: Record) -> usize {
        let mut records = self.records.lock().unwrap();
        let id = records.len();
        rec.out.id = Some(id);
        records.push(rec);
        id
    }

    fn get(&self, id: usize) -> Record {
        self.records.lock().unwrap()[id].clone()
    }

    fn materialize(&self, s: &Saved, tracked: bool) -> Tensor {
        Tensor {
            data: s.data.clone(),
            shape: s.shape.clone(),
            node: match (tracked, s.id) {
                (true, Some(id)) => Some(NodeRef {
                    tape: self.clone(),
                    id,
                }),
                _ => None,
            },
        }
    }

    /// Reverse sweep from `loss`. `keep` decides which node ids have their
    /// final gradient returned.
    fn sweep(
        &self,
        loss: &Tensor,
        create_graph: bool,
        keep: impl Fn(usize, &Op) -> bool,
        relevant: Option<&[bool]>,
    ) -> Result<HashMap<usize, Tensor>> {
        let root = loss.node_id().ok_or(TensorError::Detached)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(&loss.shape));
        let mut kept = HashMap::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let rec = self.get(id);
            if keep(id, &rec.op) {
                kept.insert(id, g.clone());
            }
            if matches!(rec.op, Op::Leaf) {
                continue;
            }
            let g = if create_graph { g } else { g.detach() };
            let inputs: Vec<Tensor> = rec
                .inputs
                .iter()
                .map(|s| self.materialize(s, create_graph))
                .collect();
            let out = self.materialize(&rec.out, create_graph);
            let needs: Vec<bool> = rec
                .inputs
                .iter()
                .map(|s| s.id.is_some_and(|p| relevant.is_none_or(|r| r[p])))
                .collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let input_grads = backward_rule(&rec.op, &inputs, &out, &g, &needs)?;
            for ((saved, ig), need) in rec.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(pid), Some(ig), true) = (saved.id, ig, need) else { continue };
                debug_assert_eq!(ig.shape, saved.shape);
                grads[pid] = Some(match grads[pid].take() {
                    Some(acc) => acc.add(&ig)?,
                    None => ig,
                });
            }
        }
        Ok(kept)
    }

    /// Marks the nodes up to `root` that depend on any of `from`.
    fn descendants(&self, from: &std::collections::HashSet<usize>, root: usize) -> Vec<bool> {
        let records = self.records.lock().unwrap();
        let mut mark = vec![false; root + 1];
        let Some(&start) = from.iter().min() else { return mark };
        for id in start..=root {
            mark[id] = from.contains(&id)
                || records[id].inputs.iter().any(|s| s.id.is_some_and(|p| mark[p]));
        }
        mark
    }
}

fn check_loss(loss: &Tensor) -> Result<&Tape> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape.clone()));
    }
    loss.tape().ok_or(TensorError::Detached)
}

/// Leaf gradients produced by [`Tensor::backward`].
pub struct Gradients {
    tape: Tape,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        let node = leaf.node.as_ref()?;
        if !node.tape.same_as(&self.tape) {
            return None;
        }
        self.grads.get(&node.id)
    }

    /// Gradient of `leaf`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, leaf: &Tensor) -> Tensor {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tensor {
    /// Populates gradients for every leaf the scalar loss depends on.
    pub fn backward(&self) -> Result<Gradients> {
        self.backward_impl(false)
    }

    /// Like [`Tensor::backward`], but the returned gradients are themselves
    /// recorded and can be differentiated again.
    pub fn backward_create_graph(&self) -> Result<Gradients> {
        self.backward_impl(true)
    }

    fn backward_impl(&self, create_graph: bool) -> Result<Gradients> {
        let tape = check_loss(self)?.clone();
        let grads = tape.sweep(self, create_graph, |_, op| matches!(op, Op::Leaf), None)?;
        Ok(Gradients { tape, grads })
    }
}

/// Gradients of a scalar `loss` with respect to each tensor in `wrt`
/// (zeros where there is no dependency).
pub fn grad(loss: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    let tape = check_loss(loss)?;
    let mut wanted = Vec::with_capacity(wrt.len());
    for t in wrt {
        match &t.node {
            Some(n) if n.tape.same_as(tape) => wanted.push(Some(n.id)),
            Some(_) => return Err(TensorError::TapeMismatch),
            None => wanted.push(None),
        }
    }
    let ids: std::collections::HashSet<usize> = wanted.iter().flatten().copied().collect();
    let root = loss.node_id().ok_or(TensorError::Detached)?;
    let relevant = tape.descendants(&ids, root);
    let kept = tape.sweep(loss, create_graph, |id, _| ids.contains(&id), Some(&relevant))?;
    Ok(wanted
        .iter()
        .zip(wrt)
        .map(|(id, t)| {
            id.and_then(|id| kept.get(&id).cloned())
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// Builds the result of a primitive. The output is recorded when any input
/// is tracked; all tracked inputs must share one tape.
pub(crate) fn record(
    op: Op,
    inputs: &[&Tensor],
    data: impl Into<Arc<Vec<f64>>>,
    shape: Vec<usize>,
) -> Result<Tensor> {
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match tape {
                None => tape = Some(&n.tape),
                Some(existing) if existing.same_as(&n.tape) => {}
                Some(_) => return Err(TensorError::TapeMismatch),
            }
        }
    }
    let data = data.into();
    debug_assert_eq!(data.len(), crate::tensor::numel(&shape));
    let out = Tensor {
        data,
        shape,
        node: None,
    };
    let Some(tape) = tape else { return Ok(out) };
    let rec = Record {
        op,
        inputs: inputs
            .iter()
            .map(|t| Saved {
                data: t.data.clone(),
                shape: t.shape.clone(),
                id: t.node_id(),
            })
            .collect(),
        out: Saved {
            data: out.data.clone(),
            shape: out.shape.clone(),
            id: None,
        },
    };
    let id = tape.push(rec);
    Ok(Tensor {
        node: Some(NodeRef {
            tape: tape.clone(),
            id,
        }),
        ..out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(t: &Tensor) -> usize {
        t.node.as_ref().unwrap().id
    }

    #[test]
    fn descendants_skip_unrelated_branches() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(&[1.0, 2.0]));
        let b = tape.leaf(&Tensor::vector(&[3.0, 4.0]));
        let side = b.square().unwrap();
        let mixed = a.mul(&side).unwrap();
        let loss = mixed.sum().unwrap();
        let from = [id(&a)].into_iter().collect();
        let mark = tape.descendants(&from, id(&loss));
        assert!(mark[id(&a)] && mark[id(&mixed)] && mark[id(&loss)]);
        assert!(!mark[id(&b)] && !mark[id(&side)]);
    }

    #[test]
    fn pruned_gradient_matches_full_sweep() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(&[0.5, -1.5, 2.0]));
        let b = tape.leaf(&Tensor::vector(&[1.0, 0.25, -3.0]));
        let loss = a.mul(&b.tanh().unwrap()).unwrap().square().unwrap().sum().unwrap();
        let full = loss.backward().unwrap();
        let pruned = grad(&loss, &[&a], false).unwrap();
        assert!(pruned[0].bit_eq(full.get(&a).unwrap()));
    }
}
