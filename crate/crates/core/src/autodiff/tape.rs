use super::{add_bias_fwd, group_broadcast_add_fwd, group_pool_fwd, BnBuffers, BnConfig, Ops};
use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::ssm;
use crate::tensor::ops::{self as k, Activation, NormSaved, RunningStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Conv1d {
        x: Var,
        k: Var,
    },
    Upsample {
        x: Var,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        saved: NormSaved,
    },
    BatchNorm {
        x: Var,
        g: Var,
        b: Var,
        saved: NormSaved,
        training: bool,
    },
    Act {
        x: Var,
        f: Activation,
    },
    Exp {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        a: Var,
        b: Var,
        ca: usize,
    },
    Pad {
        x: Var,
        top: isize,
        bottom: isize,
        left: isize,
        right: isize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Flip {
        x: Var,
        axis: usize,
    },
    GroupPool {
        x: Var,
        weights: Tensor,
    },
    GroupBroadcastAdd {
        x: Var,
        y: Var,
    },
    Scan {
        x: Var,
        delta: Var,
        a: Var,
        bm: Var,
        cm: Var,
        states: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    ScalarFn {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording backend. Nodes are appended in evaluation order, so the node
/// list is a topological order of the computation DAG.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    bn_updates: Vec<(BnBuffers, RunningStats)>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to a parameter; `None` when the parameter was
    /// not used on the path to the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.grads[v.0].as_ref())
    }

    /// Gradient for every trainable parameter, zero-filled where unused.
    pub fn param_map(&self, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = self
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
                (id, g)
            })
            .collect()
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            bn_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_of(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    /// Propagates adjoints from a scalar `loss` back to every leaf.
    ///
    /// Does not consume the tape; calling it twice yields identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).len() != 1 {
            return invalid(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.val(loss).shape()),
            );
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.val(loss).shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.accumulate(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            } => {
                let (dx, dw, db) = k::conv2d_backward(g, self.val(x), self.val(w), stride, pad, groups)?;
                acc(x, dx)?;
                acc(w, dw)?;
                if let Some(b) = b {
                    acc(b, db)?;
                }
            }
            &Op::Conv1d { x, k: kern } => {
                let (dx, dk) = k::conv1d_causal_tokens_backward(g, self.val(x), self.val(kern))?;
                acc(x, dx)?;
                acc(kern, dk)?;
            }
            &Op::Upsample { x } => {
                acc(x, k::bilinear_upsample2x_backward(g, self.val(x).shape())?)?;
            }
            Op::LayerNorm { x, g: gm, b, saved } => {
                let (dx, dg, db) = k::layer_norm_backward(g, saved, self.val(*gm));
                acc(*x, dx)?;
                acc(*gm, dg)?;
                acc(*b, db)?;
            }
            Op::BatchNorm {
                x,
                g: gm,
                b,
                saved,
                training,
            } => {
                let (dx, dg, db) = k::batch_norm2d_backward(g, saved, self.val(*gm), *training);
                acc(*x, dx)?;
                acc(*gm, dg)?;
                acc(*b, db)?;
            }
            &Op::Act { x, f } => {
                let xv = self.val(x);
                acc(x, xv.zip_map(g, "act_backward", |xi, gi| gi * f.derivative(xi))?)?;
            }
            &Op::Exp { x } => acc(x, node.value.mul(g)?)?,
            &Op::Add { a, b } => {
                acc(a, g.clone())?;
                acc(b, g.clone())?;
            }
            &Op::Sub { a, b } => {
                acc(a, g.clone())?;
                acc(b, g.scale(-1.0))?;
            }
            &Op::Mul { a, b } => {
                acc(a, g.mul(self.val(b))?)?;
                acc(b, g.mul(self.val(a))?)?;
            }
            &Op::Scale { x, s } => acc(x, g.scale(s))?,
            &Op::AddBias { x, b } => {
                let c = self.val(b).len();
                let mut db = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(x, g.clone())?;
                acc(b, Tensor::new([c], db)?)?;
            }
            &Op::Linear { x, w, b } => {
                let (dx, dw, db) = k::linear_backward(g, self.val(x), self.val(w));
                acc(x, dx)?;
                acc(w, dw)?;
                if let Some(b) = b {
                    acc(b, db)?;
                }
            }
            &Op::Concat { a, b, ca } => {
                let (ga, gb) = k::split_channels(g, ca)?;
                acc(a, ga)?;
                acc(b, gb)?;
            }
            &Op::Pad {
                x,
                top,
                bottom,
                left,
                right,
            } => acc(x, k::pad_spatial(g, -top, -bottom, -left, -right)?)?,
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                acc(*x, g.permute(&inv)?)?;
            }
            &Op::Reshape { x } => acc(x, g.clone().reshape(self.val(x).shape())?)?,
            &Op::Flip { x, axis } => acc(x, g.flip(axis)?)?,
            Op::GroupPool { x, weights } => {
                let xs = self.val(*x).shape();
                let (b, gn, s, c) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; b * gn * s * c];
                for bi in 0..b {
                    for gi in 0..gn {
                        let src = &g.data()[(bi * gn + gi) * c..][..c];
                        for si in 0..s {
                            let wv = weights.data()[gi * s + si];
                            for (d, v) in dx[((bi * gn + gi) * s + si) * c..][..c].iter_mut().zip(src) {
                                *d = wv * v;
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xs, dx)?)?;
            }
            &Op::GroupBroadcastAdd { x, y } => {
                let xs = self.val(x).shape();
                let (b, gn, s, c) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dy = vec![0.0; b * gn * c];
                for bi in 0..b {
                    for gi in 0..gn {
                        let d = &mut dy[(bi * gn + gi) * c..][..c];
                        for si in 0..s {
                            for (dv, gv) in d.iter_mut().zip(&g.data()[((bi * gn + gi) * s + si) * c..][..c]) {
                                *dv += gv;
                            }
                        }
                    }
                }
                acc(x, g.clone())?;
                acc(y, Tensor::new([b, gn, c], dy)?)?;
            }
            Op::Scan {
                x,
                delta,
                a,
                bm,
                cm,
                states,
            } => {
                let gr = ssm::scan_backward(
                    g,
                    self.val(*x),
                    self.val(*delta),
                    self.val(*a),
                    self.val(*bm),
                    self.val(*cm),
                    states,
                )?;
                acc(*x, gr.x)?;
                acc(*delta, gr.delta)?;
                acc(*a, gr.a)?;
                acc(*bm, gr.bm)?;
                acc(*cm, gr.cm)?;
            }
            &Op::Softmax { x, axis } => acc(x, k::softmax_backward(g, &node.value, axis))?,
            &Op::Sum { x } => acc(x, Tensor::full(self.val(x).shape(), g.item()))?,
            Op::ScalarFn { x, grad } => acc(*x, grad.scale(g.item()))?,
        }
        Ok(())
    }
}

impl<'p> Ops for Tape<'p> {
    type V = Var;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Leaf);
        if self.store.kind(id) == ParamKind::Trainable {
            self.param_vars[id.0] = Some(v);
        }
        v
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let y = k::conv2d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), stride, pad, groups)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x: *x,
                w: *w,
                b: b.copied(),
                stride,
                pad,
                groups,
            },
        ))
    }

    fn conv1d_causal(&mut self, x: &Var, kern: &Var) -> Result<Var> {
        let y = k::conv1d_causal_tokens(self.val(*x), self.val(*kern))?;
        Ok(self.push(y, Op::Conv1d { x: *x, k: *kern }))
    }

    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        let y = k::bilinear_upsample2x(self.val(*x))?;
        Ok(self.push(y, Op::Upsample { x: *x }))
    }

    fn layer_norm(&mut self, x: &Var, g: &Var, b: &Var, eps: f64) -> Result<Var> {
        let (y, saved) = k::layer_norm_fwd(self.val(*x), self.val(*g), self.val(*b), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x: *x,
                g: *g,
                b: *b,
                saved,
            },
        ))
    }

    fn batch_norm2d(&mut self, x: &Var, g: &Var, b: &Var, buffers: BnBuffers, cfg: BnConfig) -> Result<Var> {
        let stats = buffers.stats(self.store);
        let (y, upd, saved) = k::batch_norm2d_fwd(
            self.val(*x),
            &stats,
            self.val(*g),
            self.val(*b),
            cfg.eps,
            cfg.momentum,
            cfg.training,
        )?;
        if let Some(u) = upd {
            self.bn_updates.push((buffers, u));
        }
        Ok(self.push(
            y,
            Op::BatchNorm {
                x: *x,
                g: *g,
                b: *b,
                saved,
                training: cfg.training,
            },
        ))
    }

    fn act(&mut self, f: Activation, x: &Var) -> Var {
        let y = k::elementwise(f, self.val(*x));
        self.push(y, Op::Act { x: *x, f })
    }

    fn exp(&mut self, x: &Var) -> Var {
        let y = self.val(*x).map(f64::exp);
        self.push(y, Op::Exp { x: *x })
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.val(*a).add(self.val(*b))?;
        Ok(self.push(y, Op::Add { a: *a, b: *b }))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.val(*a).sub(self.val(*b))?;
        Ok(self.push(y, Op::Sub { a: *a, b: *b }))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.val(*a).mul(self.val(*b))?;
        Ok(self.push(y, Op::Mul { a: *a, b: *b }))
    }

    fn scale(&mut self, x: &Var, s: f64) -> Var {
        let y = self.val(*x).scale(s);
        self.push(y, Op::Scale { x: *x, s })
    }

    fn add_bias(&mut self, x: &Var, b: &Var) -> Result<Var> {
        let y = add_bias_fwd(self.val(*x), self.val(*b))?;
        Ok(self.push(y, Op::AddBias { x: *x, b: *b }))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = k::linear(self.val(*x), self.val(*w), b.map(|b| self.val(*b)))?;
        Ok(self.push(
            y,
            Op::Linear {
                x: *x,
                w: *w,
                b: b.copied(),
            },
        ))
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = k::concat_channels(self.val(*a), self.val(*b))?;
        let ca = self.val(*a).shape()[1];
        Ok(self.push(y, Op::Concat { a: *a, b: *b, ca }))
    }

    fn pad_spatial(&mut self, x: &Var, top: isize, bottom: isize, left: isize, right: isize) -> Result<Var> {
        let y = k::pad_spatial(self.val(*x), top, bottom, left, right)?;
        Ok(self.push(
            y,
            Op::Pad {
                x: *x,
                top,
                bottom,
                left,
                right,
            },
        ))
    }

    fn permute(&mut self, x: &Var, axes: &[usize]) -> Result<Var> {
        let y = self.val(*x).permute(axes)?;
        Ok(self.push(
            y,
            Op::Permute {
                x: *x,
                axes: axes.to_vec(),
            },
        ))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.val(*x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x: *x }))
    }

    fn flip(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let y = self.val(*x).flip(axis)?;
        Ok(self.push(y, Op::Flip { x: *x, axis }))
    }

    fn group_pool(&mut self, x: &Var, weights: &Tensor) -> Result<Var> {
        let y = group_pool_fwd(self.val(*x), weights)?;
        Ok(self.push(
            y,
            Op::GroupPool {
                x: *x,
                weights: weights.clone(),
            },
        ))
    }

    fn group_broadcast_add(&mut self, x: &Var, y: &Var) -> Result<Var> {
        let out = group_broadcast_add_fwd(self.val(*x), self.val(*y))?;
        Ok(self.push(out, Op::GroupBroadcastAdd { x: *x, y: *y }))
    }

    fn selective_scan(&mut self, x: &Var, delta: &Var, a: &Var, bm: &Var, cm: &Var) -> Result<Var> {
        let (y, states) = ssm::scan_forward(
            self.val(*x),
            self.val(*delta),
            self.val(*a),
            self.val(*bm),
            self.val(*cm),
            true,
        )?;
        Ok(self.push(
            y,
            Op::Scan {
                x: *x,
                delta: *delta,
                a: *a,
                bm: *bm,
                cm: *cm,
                states: states.expect("states requested"),
            },
        ))
    }

    fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let y = k::softmax(self.val(*x), axis)?;
        Ok(self.push(y, Op::Softmax { x: *x, axis }))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let s = Tensor::scalar(self.val(*x).sum());
        self.push(s, Op::Sum { x: *x })
    }

    fn scalar_fn(&mut self, x: &Var, f: &dyn Fn(&Tensor) -> Result<(f64, Tensor)>) -> Result<Var> {
        let (v, grad) = f(self.val(*x))?;
        Ok(self.push(Tensor::scalar(v), Op::ScalarFn { x: *x, grad }))
    }

    fn take_bn_updates(&mut self) -> Vec<(BnBuffers, RunningStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Ops;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| s.insert(*n, t.clone(), ParamKind::Trainable).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let (store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ids[0]);
        let y = tape.mul(&x, &x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(ids[0]).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let (store, ids) = store_with(&[("x", Tensor::full([3], 2.0))]);
        let mut tape = Tape::new(&store);
        let _x = tape.param(ids[0]);
        let c = tape.constant(Tensor::scalar(4.0));
        let g = tape.backward(c).unwrap();
        let map = g.param_map(&store);
        assert_eq!(map.len(), 1);
        assert!(map[0].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let (store, ids) = store_with(&[("x", Tensor::full([3], 2.0))]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ids[0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates_and_backward_is_repeatable() {
        let (store, ids) = store_with(&[("x", Tensor::new([2], vec![1.5, -0.5]).unwrap())]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ids[0]);
        let a = tape.act(Activation::Silu, &x);
        let b = tape.scale(&x, 3.0);
        let c = tape.add(&a, &b).unwrap();
        let l = tape.sum(&c);
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        let want: Vec<f64> = [1.5f64, -0.5]
            .iter()
            .map(|&v| Activation::Silu.derivative(v) + 3.0)
            .collect();
        assert_eq!(g1.param(ids[0]).unwrap().data(), &want[..]);
        assert_eq!(g1.param(ids[0]), g2.param(ids[0]));
    }
}
