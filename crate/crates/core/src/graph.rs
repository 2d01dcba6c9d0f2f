//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough context to propagate gradients. [`Graph::backward`] walks
//! the tape once in reverse from a scalar root.

use crate::deform::{deform_conv2d, deform_conv2d_backward};
use crate::error::{Error, Result};
use crate::losses;
use crate::numerics::{
    conv2d, conv2d_backward, conv_transpose2x2, conv_transpose2x2_backward, pool2d,
    pool2d_backward, resize_bilinear, resize_bilinear_backward, sigmoid_scalar, ConvSpec, PoolSpec,
};
use crate::params::ParameterStore;
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Pool {
        x: Var,
        spec: PoolSpec,
        argmax: Vec<u32>,
    },
    Resize {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Relu6 {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Deform {
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Bce {
        logits: Var,
        target: Tensor<T>,
    },
    Dice {
        logits: Var,
        target: Tensor<T>,
        eps: T,
    },
    Dot {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(Var, String)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter; its gradient can be accumulated back
    /// into the store with [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some((v, _)) = self.bindings.iter().find(|(_, n)| n == name) {
            return Ok(*v);
        }
        let value = store.value(name)?.clone();
        let v = self.leaf(value);
        self.bindings.push((v, name.to_string()));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn bindings(&self) -> &[(Var, String)] {
        &self.bindings
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let rg = self.grad_any(&[x, w]) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::Conv { x, w, b, spec: *spec }, rg))
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = conv_transpose2x2(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.grad_any(&[x, w]) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::ConvTranspose { x, w, b }, rg))
    }

    pub fn pool2d(&mut self, x: Var, spec: &PoolSpec) -> Result<Var> {
        let (y, argmax) = pool2d(self.value(x), spec)?;
        let rg = self.needs(x);
        Ok(self.push(y, Op::Pool { x, spec: *spec, argmax }, rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = resize_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.needs(x);
        Ok(self.push(y, Op::Resize { x }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid_scalar);
        let rg = self.needs(x);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.needs(x);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let six = T::lit(6.0);
        let y = self.value(x).map(|v| v.max(T::zero()).min(six));
        let rg = self.needs(x);
        self.push(y, Op::Relu6 { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).scale(s);
        let rg = self.needs(x);
        self.push(y, Op::Scale { x, s }, rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&values)?;
        let rg = self.grad_any(parts);
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, len)?;
        let rg = self.needs(x);
        Ok(self.push(y, Op::Slice { x, start }, rg))
    }

    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var> {
        let y = deform_conv2d(
            self.value(x),
            self.value(offsets),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let rg = self.grad_any(&[x, offsets, w]) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            y,
            Op::Deform {
                x,
                offsets,
                w,
                b,
                spec: *spec,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a binary target.
    pub fn bce_loss(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = losses::bce_from_logits(self.value(logits), target)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Batch-wide soft Dice loss of `sigmoid(logits)` against a binary target.
    pub fn dice_loss(&mut self, logits: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let loss = losses::dice_from_logits(self.value(logits), target, eps)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                logits,
                target: target.clone(),
                eps,
            },
            rg,
        ))
    }

    /// `sum(x * weights)` as a scalar; a convenient probe for gradient checks.
    pub fn dot(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        xv.ensure_same_shape(weights, "dot")?;
        let s = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*w), spec, g, self.needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose { x, w, b } => {
                let (dx, dw, db) = conv_transpose2x2_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    b.is_some(),
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Pool { x, spec, argmax } => {
                let dx = pool2d_backward(self.shape(*x), spec, argmax, g);
                self.accumulate(grads, *x, dx);
            }
            Op::Resize { x } => {
                let dx = resize_bilinear_backward(self.shape(*x), g);
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = out
                    .zip_map(g, |s, gv| gv * s * (T::one() - s))
                    .expect("same shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = out
                    .zip_map(g, |y, gv| if y > T::zero() { gv } else { T::zero() })
                    .expect("same shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Relu6 { x } => {
                let six = T::lit(6.0);
                let dx = out
                    .zip_map(g, |y, gv| if y > T::zero() && y < six { gv } else { T::zero() })
                    .expect("same shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da = g.zip_map(self.value(*b), |gv, bv| gv * bv).expect("same shape");
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = g.zip_map(self.value(*a), |gv, av| gv * av).expect("same shape");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, g.scale(*s));
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_channels(start, c).expect("in range"));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let [n, c, h, w] = self.shape(*x);
                let len = out.channels();
                let plane = h * w;
                let mut dx = Tensor::zeros([n, c, h, w]);
                for ni in 0..n {
                    let src = g.sample(ni);
                    let dst = dx.sample_mut(ni);
                    dst[start * plane..(start + len) * plane].copy_from_slice(src);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Deform {
                x,
                offsets,
                w,
                b,
                spec,
            } => {
                let r = deform_conv2d_backward(
                    self.value(*x),
                    self.value(*offsets),
                    self.value(*w),
                    spec,
                    g,
                    self.needs(*x),
                    self.needs(*offsets),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(doff) = r.doffsets {
                    self.accumulate(grads, *offsets, doff);
                }
                self.accumulate(grads, *w, r.dweight);
                if let (Some(b), Some(db)) = (b, r.dbias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Bce { logits, target } => {
                let d = losses::bce_grad(self.value(*logits), target).scale(g.item());
                self.accumulate(grads, *logits, d);
            }
            Op::Dice {
                logits,
                target,
                eps,
            } => {
                let d = losses::dice_grad(self.value(*logits), target, *eps).scale(g.item());
                self.accumulate(grads, *logits, d);
            }
            Op::Dot { x, weights } => {
                self.accumulate(grads, *x, weights.scale(g.item()));
            }
        }
    }
}

/// Output of [`Graph::backward`]: gradients of every leaf that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of every bound parameter leaf into `store`.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParameterStore<T>) -> Result<()> {
        for (v, name) in graph.bindings() {
            if let Some(g) = self.get(*v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum((x + x) * x) = 2 * sum(x^2); df/dx = 4x
        let mut g = Graph::<f64>::new();
        let xv = Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let x = g.leaf(xv.clone());
        let s = g.add(x, x).unwrap();
        let p = g.mul(s, x).unwrap();
        let f = g.dot(p, &Tensor::full([1, 1, 1, 3], 1.0)).unwrap();
        let grads = g.backward(f).unwrap();
        let dx = grads.get(x).unwrap();
        for (d, v) in dx.data().iter().zip(xv.data()) {
            assert_eq!(*d, 4.0 * v);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.input(Tensor::full([1, 1, 2, 2], 1.0));
        let x = g.leaf(Tensor::full([1, 1, 2, 2], 2.0));
        let y = g.mul(c, x).unwrap();
        let f = g.dot(y, &Tensor::full([1, 1, 2, 2], 1.0)).unwrap();
        let grads = g.backward(f).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(g.backward(x).is_err());
    }
}
