//! Wengert tape over whole tensors.
//!
//! Every op appends one node holding its inputs, its output value and any
//! saved intermediates. [`Tape::backward`] walks the nodes in exact reverse
//! execution order; [`Tape::replay`] re-executes them forward from the leaf
//! values.

use indexmap::IndexMap;

use crate::eac::{eac_apply, eac_apply_backward};
use crate::error::{Error, Result};
use crate::numerics::ops::{self, AttentionCache, GroupStats};
use crate::numerics::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise op kinds. Binary kinds require equal shapes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<T> {
    Add,
    Sub,
    Mul,
    Scale(T),
    Silu,
    Square,
}

impl<T> Elementwise<T> {
    fn is_binary(&self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { stride: usize, pad: usize },
    Elementwise(Elementwise<T>),
    GroupNorm { groups: usize, eps: T },
    Attention2d,
    Linear,
    AddChannelBias,
    ConcatChannels,
    UpsampleNearest2x,
    Eac { k: usize },
    Sum,
    Mean,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Elementwise(_) => "elementwise",
            Op::GroupNorm { .. } => "group_norm",
            Op::Attention2d => "attention2d",
            Op::Linear => "linear",
            Op::AddChannelBias => "add_channel_bias",
            Op::ConcatChannels => "concat_channels",
            Op::UpsampleNearest2x => "upsample_nearest2x",
            Op::Eac { .. } => "eac",
            Op::Sum => "sum",
            Op::Mean => "mean",
        }
    }
}

#[derive(Clone, Debug)]
enum Saved<T> {
    None,
    Group(GroupStats<T>),
    Attention(Box<AttentionCache<T>>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    saved: Saved<T>,
    requires_grad: bool,
}

/// Records tensor ops for reverse-mode differentiation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
}

fn eval<T: Real>(op: &Op<T>, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
    let plain = |t: Result<Tensor<T>>| t.map(|t| (t, Saved::None));
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Conv2d { stride, pad } => plain(ops::conv2d(
            inputs[0],
            inputs[1],
            inputs.get(2).copied(),
            *stride,
            *pad,
        )),
        Op::Elementwise(kind) => plain(match kind {
            Elementwise::Add => inputs[0].zip_map(inputs[1], "add", |a, b| a + b),
            Elementwise::Sub => inputs[0].zip_map(inputs[1], "sub", |a, b| a - b),
            Elementwise::Mul => inputs[0].zip_map(inputs[1], "mul", |a, b| a * b),
            Elementwise::Scale(s) => Ok(inputs[0].scale(*s)),
            Elementwise::Silu => Ok(inputs[0].map(ops::silu)),
            Elementwise::Square => Ok(inputs[0].map(|v| v * v)),
        }),
        Op::GroupNorm { groups, eps } => {
            let (y, stats) = ops::group_norm(inputs[0], *groups, inputs[1], inputs[2], *eps)?;
            Ok((y, Saved::Group(stats)))
        }
        Op::Attention2d => {
            let (y, cache) =
                ops::attention2d(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4])?;
            Ok((y, Saved::Attention(Box::new(cache))))
        }
        Op::Linear => plain(ops::linear(inputs[0], inputs[1], inputs[2])),
        Op::AddChannelBias => plain(ops::add_channel_bias(inputs[0], inputs[1])),
        Op::ConcatChannels => plain(ops::concat_channels(inputs[0], inputs[1])),
        Op::UpsampleNearest2x => plain(ops::upsample_nearest2x(inputs[0])),
        Op::Eac { k } => plain(eac_apply(inputs[0], inputs[1], *k)),
        Op::Sum => Ok((Tensor::scalar(inputs[0].sum()), Saved::None)),
        Op::Mean => Ok((Tensor::scalar(inputs[0].mean()), Saved::None)),
    }
}

/// Input gradients of one node. Entries are `None` where `needs` is false.
fn grads_of<T: Real>(
    node: &Node<T>,
    inputs: &[&Tensor<T>],
    needs: &[bool],
    g: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Conv2d { stride, pad } => {
            let (dx, dw, db) =
                ops::conv2d_backward(inputs[0], inputs[1], g, *stride, *pad, want(0))?;
            let mut out = vec![dx, Some(dw)];
            if inputs.len() == 3 {
                out.push(Some(db));
            }
            out
        }
        Op::Elementwise(kind) => match kind {
            Elementwise::Add => vec![Some(g.clone()), Some(g.clone())],
            Elementwise::Sub => vec![Some(g.clone()), Some(g.scale(-T::one()))],
            Elementwise::Mul => vec![
                want(0)
                    .then(|| g.zip_map(inputs[1], "mul", |a, b| a * b))
                    .transpose()?,
                want(1)
                    .then(|| g.zip_map(inputs[0], "mul", |a, b| a * b))
                    .transpose()?,
            ],
            Elementwise::Scale(s) => vec![Some(g.scale(*s))],
            Elementwise::Silu => {
                vec![Some(g.zip_map(inputs[0], "silu", |gv, x| {
                    gv * ops::silu_grad(x)
                })?)]
            }
            Elementwise::Square => {
                let two = T::one() + T::one();
                vec![Some(g.zip_map(inputs[0], "square", |gv, x| two * x * gv)?)]
            }
        },
        Op::GroupNorm { groups, .. } => {
            let Saved::Group(stats) = &node.saved else {
                unreachable!()
            };
            let (dx, dg, db) = ops::group_norm_backward(inputs[0], *groups, inputs[1], stats, g)?;
            vec![Some(dx), Some(dg), Some(db)]
        }
        Op::Attention2d => {
            let Saved::Attention(cache) = &node.saved else {
                unreachable!()
            };
            let grads = ops::attention2d_backward(
                inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], cache, g,
            )?;
            grads.into_iter().map(Some).collect()
        }
        Op::Linear => {
            let (x, w) = (inputs[0], inputs[1]);
            let (o, i) = (w.shape()[0], w.shape()[1]);
            let mut dx = vec![T::zero(); i];
            T::gemm(i, o, 1, w.data(), true, g.data(), false, &mut dx, false);
            let mut dw = vec![T::zero(); o * i];
            T::gemm(o, 1, i, g.data(), false, x.data(), false, &mut dw, false);
            vec![
                Some(Tensor::new(vec![i], dx)?),
                Some(Tensor::new(vec![o, i], dw)?),
                Some(g.clone()),
            ]
        }
        Op::AddChannelBias => {
            let (c, h, w) = g.dims3("add_channel_bias")?;
            let dv = g
                .data()
                .chunks(h * w)
                .map(|p| p.iter().copied().sum())
                .collect();
            vec![Some(g.clone()), Some(Tensor::new(vec![c], dv)?)]
        }
        Op::ConcatChannels => {
            let ca = inputs[0].shape()[0];
            let cb = inputs[1].shape()[0];
            vec![Some(g.channels(0, ca)?), Some(g.channels(ca, cb)?)]
        }
        Op::UpsampleNearest2x => vec![Some(ops::upsample_nearest2x_backward(g)?)],
        Op::Eac { k } => {
            let (dz, df) = eac_apply_backward(inputs[0], inputs[1], *k, g)?;
            vec![Some(dz), Some(df)]
        }
        Op::Sum => {
            let gv = g.item()?;
            vec![Some(Tensor::full(inputs[0].shape(), gv))]
        }
        Op::Mean => {
            let n = T::from_usize(inputs[0].numel()).unwrap();
            let gv = g.item()? / n;
            vec![Some(Tensor::full(inputs[0].shape(), gv))]
        }
    })
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: IndexMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any recorded value; zeros when the loss does
    /// not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).map(|&v| self.wrt(v))
    }

    /// Gradient for every registered parameter, in registration order.
    pub fn into_param_map(self) -> IndexMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt(v)))
            .collect()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            saved: Saved::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input. Gradients with respect to it are still
    /// available through [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a constant that never needs a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Registers a named parameter. Registering the same name twice returns
    /// the first handle.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push_leaf(value, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, &v)| (n.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn record(&mut self, op: Op<T>, inputs: Vec<Var>) -> Result<Var> {
        let (value, saved) = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            eval(&op, &vals)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record(Op::Conv2d { stride, pad }, inputs)
    }

    pub fn elementwise(&mut self, kind: Elementwise<T>, a: Var, b: Option<Var>) -> Result<Var> {
        let inputs = match (kind.is_binary(), b) {
            (true, Some(b)) => vec![a, b],
            (false, None) => vec![a],
            (true, None) => {
                return Err(Error::InvalidArgument(format!(
                    "{kind:?} needs two operands"
                )))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidArgument(format!(
                    "{kind:?} takes one operand"
                )))
            }
        };
        self.record(Op::Elementwise(kind), inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.elementwise(Elementwise::Scale(s), a, None)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Silu, a, None)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Square, a, None)
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var> {
        self.record(Op::GroupNorm { groups, eps }, vec![x, gamma, beta])
    }

    pub fn attention2d(&mut self, x: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> Result<Var> {
        self.record(Op::Attention2d, vec![x, wq, wk, wv, wo])
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.record(Op::Linear, vec![x, weight, bias])
    }

    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Result<Var> {
        self.record(Op::AddChannelBias, vec![x, v])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::ConcatChannels, vec![a, b])
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        self.record(Op::UpsampleNearest2x, vec![x])
    }

    pub fn eac(&mut self, z: Var, field: Var, k: usize) -> Result<Var> {
        self.record(Op::Eac { k }, vec![z, field])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Mean, vec![x])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = grads_of(node, &inputs, &needs, &g)?;
            for ((v, need), dg) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(dg)) = (*need, dg) else {
                    continue;
                };
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dg)?,
                    slot @ None => *slot = Some(dg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            params: self.params.clone(),
        })
    }

    /// Re-executes every recorded op from the leaf values and returns the
    /// recomputed value of each node.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = if matches!(node.op, Op::Leaf) {
                node.value.clone()
            } else {
                let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &values[v.0]).collect();
                eval(&node.op, &ins)?.0
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when [`Tape::replay`] reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(self.nodes.iter().zip(&replayed).all(|(n, r)| {
            n.value.shape() == r.shape()
                && n.value
                    .data()
                    .iter()
                    .zip(r.data())
                    .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.square(p).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("p").unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unreachable_param_gets_zeros() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param("p", Tensor::ones(&[2]));
        let _q = tape.param("q", Tensor::ones(&[2, 3]));
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap().into_param_map();
        assert_eq!(g["q"], Tensor::zeros(&[2, 3]));
        assert_eq!(g["p"], Tensor::ones(&[2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param("p", Tensor::ones(&[2]));
        assert!(matches!(tape.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![2], vec![1.5, -3.0]).unwrap());
        let z = tape.constant(Tensor::zeros(&[2]));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let zero = tape.constant(Tensor::zeros(&[1]));
        let y = tape.silu(zero).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
        let three = tape.constant(Tensor::scalar(3.0));
        let sq = tape.square(three).unwrap();
        assert_eq!(tape.value(sq).data(), &[9.0]);
        let other = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(x, other).is_err());
        assert!(tape.elementwise(Elementwise::Mul, x, None).is_err());
    }

    #[test]
    fn shared_param_accumulates() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param("p", Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
        let p2 = tape.param("p", Tensor::zeros(&[2]));
        assert_eq!(p, p2);
        let m = tape.mul(p, p).unwrap();
        let loss = tape.sum(m).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("p").unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let big = tape.input(Tensor::full(&[2], 1e200));
        assert!(matches!(tape.square(big), Err(Error::NonFinite(_))));
    }
}
