//! Reverse-mode autodiff over dense f32 tensors.
//!
//! A `Tensor` is a cheap handle onto a graph node. Forward ops build the
//! graph eagerly; `backward()` on a scalar walks the graph in reverse
//! topological order and accumulates gradients into every node that
//! requires them. Storage is f32; every reduction (matmul and conv inner
//! products, sums, norms) accumulates in f64 before rounding once.
//!
//! Shape errors in graph ops are programmer errors and panic via assert;
//! the fallible surface (`backward` on a non-scalar, missing grads in the
//! optimizer) returns `Result`.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackFn = Box<dyn Fn(&Node)>;

pub(crate) struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
}

impl Node {
    fn grad_slice(&self) -> Vec<f32> {
        self.grad.borrow().as_ref().expect("grad visited in topo order").clone()
    }

    /// Adds `delta` into a parent's gradient buffer if it participates.
    fn accumulate(parent: &Tensor, delta: &[f32]) {
        if !parent.node.requires_grad {
            return;
        }
        let mut g = parent.node.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; parent.numel()]);
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, parents: Vec<Tensor>, backward: Option<BackFn>) -> Tensor {
        assert_eq!(numel_of(&shape), data.len(), "data length does not match shape");
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant (non-differentiable) tensor.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::make(shape, data, false, vec![], None)
    }

    /// Trainable leaf.
    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::make(shape, data, true, vec![], None)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.node.data.borrow().clone()
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn value(&self) -> f32 {
        assert_eq!(self.numel(), 1, "value() on non-scalar");
        self.node.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// In-place data mutation; used by optimizers on leaves and by loaders.
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.node.data.borrow_mut());
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.node)
    }

    /// Reverse-mode gradient of a scalar. Overwrites the gradients of every
    /// node reachable from `self` that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.requires_grad {
            return Err(Error::InvalidArgument(
                "backward on a graph with no trainable inputs".into(),
            ));
        }
        // Post-order DFS: a node is appended after everything it depends on.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((t, i)) = stack.pop() {
            let parents = &t.node.parents;
            if i < parents.len() {
                stack.push((t.clone(), i + 1));
                let p = parents[i].clone();
                if p.node.requires_grad && visited.insert(p.ptr()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }
        // Fresh gradients for this pass.
        for t in &order {
            *t.node.grad.borrow_mut() = Some(vec![0.0; t.numel()]);
        }
        *self.node.grad.borrow_mut() = Some(vec![1.0]);
        for t in order.iter().rev() {
            if let Some(back) = &t.node.backward {
                back(&t.node);
            }
        }
        Ok(())
    }

    fn unary(&self, data: Vec<f32>, back: impl Fn(&Node) + 'static) -> Tensor {
        let req = self.node.requires_grad;
        Tensor::make(
            self.node.shape.clone(),
            data,
            req,
            if req { vec![self.clone()] } else { vec![] },
            if req { Some(Box::new(back)) } else { None },
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let req = self.requires_grad() || other.requires_grad();
        let parents = vec![self.clone(), other.clone()];
        Tensor::make(
            self.node.shape.clone(),
            data,
            req,
            if req { parents } else { vec![] },
            if req {
                Some(Box::new(|n: &Node| {
                    let g = n.grad_slice();
                    Node::accumulate(&n.parents[0], &g);
                    Node::accumulate(&n.parents[1], &g);
                }))
            } else {
                None
            },
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let req = self.requires_grad() || other.requires_grad();
        Tensor::make(
            self.node.shape.clone(),
            data,
            req,
            if req { vec![self.clone(), other.clone()] } else { vec![] },
            if req {
                Some(Box::new(|n: &Node| {
                    let g = n.grad_slice();
                    Node::accumulate(&n.parents[0], &g);
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    Node::accumulate(&n.parents[1], &neg);
                }))
            } else {
                None
            },
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let req = self.requires_grad() || other.requires_grad();
        Tensor::make(
            self.node.shape.clone(),
            data,
            req,
            if req { vec![self.clone(), other.clone()] } else { vec![] },
            if req {
                Some(Box::new(|n: &Node| {
                    let g = n.grad_slice();
                    let a = n.parents[0].data().clone();
                    let b = n.parents[1].data().clone();
                    let da: Vec<f32> = g.iter().zip(&b).map(|(g, b)| g * b).collect();
                    let db: Vec<f32> = g.iter().zip(&a).map(|(g, a)| g * a).collect();
                    Node::accumulate(&n.parents[0], &da);
                    Node::accumulate(&n.parents[1], &db);
                }))
            } else {
                None
            },
        )
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v * c).collect();
        self.unary(data, move |n: &Node| {
            let g = n.grad_slice();
            let d: Vec<f32> = g.iter().map(|v| v * c).collect();
            Node::accumulate(&n.parents[0], &d);
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v + c).collect();
        self.unary(data, |n: &Node| {
            let g = n.grad_slice();
            Node::accumulate(&n.parents[0], &g);
        })
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v.max(0.0)).collect();
        self.unary(data, |n: &Node| {
            let g = n.grad_slice();
            let x = n.parents[0].data().clone();
            let d: Vec<f32> = g.iter().zip(&x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            Node::accumulate(&n.parents[0], &d);
        })
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|v| crate::numcore::special::det_exp(*v as f64) as f32)
            .collect();
        self.unary(data, |n: &Node| {
            let g = n.grad_slice();
            let out = n.data.borrow();
            let d: Vec<f32> = g.iter().zip(out.iter()).map(|(g, o)| g * o).collect();
            drop(out);
            Node::accumulate(&n.parents[0], &d);
        })
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn ln(&self) -> Tensor {
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|v| crate::numcore::special::det_ln(*v as f64) as f32)
            .collect();
        self.unary(data, |n: &Node| {
            let g = n.grad_slice();
            let x = n.parents[0].data().clone();
            let d: Vec<f32> = g.iter().zip(&x).map(|(g, x)| g / x).collect();
            Node::accumulate(&n.parents[0], &d);
        })
    }

    pub fn sqrt(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| v.sqrt()).collect();
        self.unary(data, |n: &Node| {
            let g = n.grad_slice();
            let out = n.data.borrow().clone();
            let d: Vec<f32> = g.iter().zip(&out).map(|(g, o)| 0.5 * g / o).collect();
            Node::accumulate(&n.parents[0], &d);
        })
    }

    pub fn recip(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|v| 1.0 / v).collect();
        self.unary(data, |n: &Node| {
            let g = n.grad_slice();
            let out = n.data.borrow().clone();
            let d: Vec<f32> = g.iter().zip(&out).map(|(g, o)| -g * o * o).collect();
            Node::accumulate(&n.parents[0], &d);
        })
    }

    /// Broadcast multiply by a scalar tensor.
    pub fn scale_t(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "scale_t: scalar expected");
        let sv = s.value();
        let data: Vec<f32> = self.data().iter().map(|v| v * sv).collect();
        let req = self.requires_grad() || s.requires_grad();
        Tensor::make(
            self.node.shape.clone(),
            data,
            req,
            if req { vec![self.clone(), s.clone()] } else { vec![] },
            if req {
                Some(Box::new(|n: &Node| {
                    let g = n.grad_slice();
                    let sv = n.parents[1].data()[0];
                    let x = n.parents[0].data().clone();
                    let dx: Vec<f32> = g.iter().map(|g| g * sv).collect();
                    let mut ds = 0.0f64;
                    for (g, x) in g.iter().zip(&x) {
                        ds += *g as f64 * *x as f64;
                    }
                    Node::accumulate(&n.parents[0], &dx);
                    Node::accumulate(&n.parents[1], &[ds as f32]);
                }))
            } else {
                None
            },
        )
    }

    fn dims2(&self, op: &str) -> (usize, usize) {
        assert_eq!(self.shape().len(), 2, "{op}: 2-d tensor expected, got {:?}", self.shape());
        (self.shape()[0], self.shape()[1])
    }

    /// Row-wise sum of a (B, C) matrix, giving (B,).
    pub fn rows_sum(&self) -> Tensor {
        let (b, c) = self.dims2("rows_sum");
        let x = self.data();
        let mut out = vec![0.0f32; b];
        for i in 0..b {
            let mut acc = 0.0f64;
            for j in 0..c {
                acc += x[i * c + j] as f64;
            }
            out[i] = acc as f32;
        }
        drop(x);
        let req = self.requires_grad();
        Tensor::make(
            vec![b],
            out,
            req,
            if req { vec![self.clone()] } else { vec![] },
            if req {
                Some(Box::new(move |n: &Node| {
                    let g = n.grad_slice();
                    let mut d = vec![0.0f32; b * c];
                    for i in 0..b {
                        for j in 0..c {
                            d[i * c + j] = g[i];
                        }
                    }
                    Node::accumulate(&n.parents[0], &d);
                }))
            } else {
                None
            },
        )
    }

    /// out[i, j] = self[i, j] + v[i]
    pub fn add_rows(&self, v: &Tensor) -> Tensor {
        let (b, c) = self.dims2("add_rows");
        assert_eq!(v.shape(), &[b], "add_rows: vector shape mismatch");
        let x = self.data();
        let vv = v.data();
        let mut out = vec![0.0f32; b * c];
        for i in 0..b {
            for j in 0..c {
                out[i * c + j] = x[i * c + j] + vv[i];
            }
        }
        drop(x);
        drop(vv);
        let req = self.requires_grad() || v.requires_grad();
        Tensor::make(
            vec![b, c],
            out,
            req,
            if req { vec![self.clone(), v.clone()] } else { vec![] },
            if req {
                Some(Box::new(move |n: &Node| {
                    let g = n.grad_slice();
                    Node::accumulate(&n.parents[0], &g);
                    let mut dv = vec![0.0f32; b];
                    for i in 0..b {
                        let mut acc = 0.0f64;
                        for j in 0..c {
                            acc += g[i * c + j] as f64;
                        }
                        dv[i] = acc as f32;
                    }
                    Node::accumulate(&n.parents[1], &dv);
                }))
            } else {
                None
            },
        )
    }

    /// out[i, j] = self[i, j] * v[i]
    pub fn mul_rows(&self, v: &Tensor) -> Tensor {
        let (b, c) = self.dims2("mul_rows");
        assert_eq!(v.shape(), &[b], "mul_rows: vector shape mismatch");
        let x = self.data();
        let vv = v.data();
        let mut out = vec![0.0f32; b * c];
        for i in 0..b {
            for j in 0..c {
                out[i * c + j] = x[i * c + j] * vv[i];
            }
        }
        drop(x);
        drop(vv);
        let req = self.requires_grad() || v.requires_grad();
        Tensor::make(
            vec![b, c],
            out,
            req,
            if req { vec![self.clone(), v.clone()] } else { vec![] },
            if req {
                Some(Box::new(move |n: &Node| {
                    let g = n.grad_slice();
                    let x = n.parents[0].data().clone();
                    let vv = n.parents[1].data().clone();
                    let mut dx = vec![0.0f32; b * c];
                    let mut dv = vec![0.0f32; b];
                    for i in 0..b {
                        let mut acc = 0.0f64;
                        for j in 0..c {
                            dx[i * c + j] = g[i * c + j] * vv[i];
                            acc += g[i * c + j] as f64 * x[i * c + j] as f64;
                        }
                        dv[i] = acc as f32;
                    }
                    Node::accumulate(&n.parents[0], &dx);
                    Node::accumulate(&n.parents[1], &dv);
                }))
            } else {
                None
            },
        )
    }

    /// out[i, j] = self[i, j] + bias[j]
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let (b, c) = self.dims2("add_bias");
        assert_eq!(bias.shape(), &[c], "add_bias: bias shape mismatch");
        let x = self.data();
        let bb = bias.data();
        let mut out = vec![0.0f32; b * c];
        for i in 0..b {
            for j in 0..c {
                out[i * c + j] = x[i * c + j] + bb[j];
            }
        }
        drop(x);
        drop(bb);
        let req = self.requires_grad() || bias.requires_grad();
        Tensor::make(
            vec![b, c],
            out,
            req,
            if req { vec![self.clone(), bias.clone()] } else { vec![] },
            if req {
                Some(Box::new(move |n: &Node| {
                    let g = n.grad_slice();
                    Node::accumulate(&n.parents[0], &g);
                    let mut db = vec![0.0f32; c];
                    for j in 0..c {
                        let mut acc = 0.0f64;
                        for i in 0..b {
                            acc += g[i * c + j] as f64;
                        }
                        db[j] = acc as f32;
                    }
                    Node::accumulate(&n.parents[1], &db);
                }))
            } else {
                None
            },
        )
    }

    /// Selects one column per row: out[i] = self[i, idx[i]].
    pub fn pick(&self, idx: &[usize]) -> Tensor {
        let (b, c) = self.dims2("pick");
        assert_eq!(idx.len(), b, "pick: index count mismatch");
        assert!(idx.iter().all(|&j| j < c), "pick: index out of range");
        let x = self.data();
        let out: Vec<f32> = idx.iter().enumerate().map(|(i, &j)| x[i * c + j]).collect();
        drop(x);
        let req = self.requires_grad();
        let idx_owned: Vec<usize> = idx.to_vec();
        Tensor::make(
            vec![b],
            out,
            req,
            if req { vec![self.clone()] } else { vec![] },
            if req {
                Some(Box::new(move |n: &Node| {
                    let g = n.grad_slice();
                    let mut d = vec![0.0f32; b * c];
                    for (i, &j) in idx_owned.iter().enumerate() {
                        d[i * c + j] = g[i];
                    }
                    Node::accumulate(&n.parents[0], &d);
                }))
            } else {
                None
            },
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2("matmul");
        let (k2, n) = other.dims2("matmul");
        assert_eq!(k, k2, "matmul: inner dimensions differ ({k} vs {k2})");
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for kk in 0..k {
                    acc += a[i * k + kk] as f64 * b[kk * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        drop(a);
        drop(b);
        let req = self.requires_grad() || other.requires_grad();
        Tensor::make(
            vec![m, n],
            out,
            req,
            if req { vec![self.clone(), other.clone()] } else { vec![] },
            if req {
                Some(Box::new(move |nd: &Node| {
                    let g = nd.grad_slice();
                    let a = nd.parents[0].data().clone();
                    let b = nd.parents[1].data().clone();
                    let mut da = vec![0.0f32; m * k];
                    let mut db = vec![0.0f32; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += g[i * n + j] as f64 * b[kk * n + j] as f64;
                            }
                            da[i * k + kk] = acc as f32;
                        }
                    }
                    for kk in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0f64;
                            for i in 0..m {
                                acc += a[i * k + kk] as f64 * g[i * n + j] as f64;
                            }
                            db[kk * n + j] = acc as f32;
                        }
                    }
                    Node::accumulate(&nd.parents[0], &da);
                    Node::accumulate(&nd.parents[1], &db);
                }))
            } else {
                None
            },
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.dims2("transpose");
        let x = self.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        drop(x);
        let req = self.requires_grad();
        Tensor::make(
            vec![n, m],
            out,
            req,
            if req { vec![self.clone()] } else { vec![] },
            if req {
                Some(Box::new(move |nd: &Node| {
                    let g = nd.grad_slice();
                    let mut d = vec![0.0f32; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] = g[j * m + i];
                        }
                    }
                    Node::accumulate(&nd.parents[0], &d);
                }))
            } else {
                None
            },
        )
    }

    /// Sum of all elements (scalar).
    pub fn sum(&self) -> Tensor {
        let mut acc = 0.0f64;
        for v in self.data().iter() {
            acc += *v as f64;
        }
        let req = self.requires_grad();
        let n = self.numel();
        Tensor::make(
            vec![1],
            vec![acc as f32],
            req,
            if req { vec![self.clone()] } else { vec![] },
            if req {
                Some(Box::new(move |nd: &Node| {
                    let g = nd.grad_slice()[0];
                    Node::accumulate(&nd.parents[0], &vec![g; n]);
                }))
            } else {
                None
            },
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f32;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(numel_of(&shape), self.numel(), "reshape: element count mismatch");
        let req = self.requires_grad();
        Tensor::make(
            shape,
            self.to_vec(),
            req,
            if req { vec![self.clone()] } else { vec![] },
            if req {
                Some(Box::new(|nd: &Node| {
                    let g = nd.grad_slice();
                    Node::accumulate(&nd.parents[0], &g);
                }))
            } else {
                None
            },
        )
    }

    /// 2-d convolution over (B, C, H, W) with zero padding.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.shape().len(), 4, "conv2d: input must be 4-d");
        assert_eq!(weight.shape().len(), 4, "conv2d: weight must be 4-d");
        let (bs, ci, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (co, ci2, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        assert_eq!(ci, ci2, "conv2d: channel mismatch");
        assert!(stride >= 1);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let x = self.data();
        let wt = weight.data();
        let mut out = vec![0.0f32; bs * co * ho * wo];
        for b in 0..bs {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for c in 0..ci {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    acc += x[((b * ci + c) * h + iy) * w + ix] as f64
                                        * wt[((o * ci + c) * kh + ky) * kw + kx] as f64;
                                }
                            }
                        }
                        out[((b * co + o) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        drop(x);
        drop(wt);
        let req = self.requires_grad() || weight.requires_grad();
        Tensor::make(
            vec![bs, co, ho, wo],
            out,
            req,
            if req { vec![self.clone(), weight.clone()] } else { vec![] },
            if req {
                Some(Box::new(move |nd: &Node| {
                    let g = nd.grad_slice();
                    let x = nd.parents[0].data().clone();
                    let wt = nd.parents[1].data().clone();
                    let mut dx = vec![0.0f64; bs * ci * h * w];
                    let mut dw = vec![0.0f64; co * ci * kh * kw];
                    for b in 0..bs {
                        for o in 0..co {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let go = g[((b * co + o) * ho + oy) * wo + ox] as f64;
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for c in 0..ci {
                                        for ky in 0..kh {
                                            let iy = oy * stride + ky;
                                            if iy < pad || iy - pad >= h {
                                                continue;
                                            }
                                            let iy = iy - pad;
                                            for kx in 0..kw {
                                                let ix = ox * stride + kx;
                                                if ix < pad || ix - pad >= w {
                                                    continue;
                                                }
                                                let ix = ix - pad;
                                                let xi = ((b * ci + c) * h + iy) * w + ix;
                                                let wi = ((o * ci + c) * kh + ky) * kw + kx;
                                                dx[xi] += go * wt[wi] as f64;
                                                dw[wi] += go * x[xi] as f64;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let dxf: Vec<f32> = dx.iter().map(|v| *v as f32).collect();
                    let dwf: Vec<f32> = dw.iter().map(|v| *v as f32).collect();
                    Node::accumulate(&nd.parents[0], &dxf);
                    Node::accumulate(&nd.parents[1], &dwf);
                }))
            } else {
                None
            },
        )
    }

    /// Global average pool: (B, C, H, W) -> (B, C).
    pub fn gap(&self) -> Tensor {
        assert_eq!(self.shape().len(), 4, "gap: input must be 4-d");
        let (bs, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let hw = h * w;
        let x = self.data();
        let mut out = vec![0.0f32; bs * c];
        for b in 0..bs {
            for ch in 0..c {
                let mut acc = 0.0f64;
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    acc += x[base + i] as f64;
                }
                out[b * c + ch] = (acc / hw as f64) as f32;
            }
        }
        drop(x);
        let req = self.requires_grad();
        Tensor::make(
            vec![bs, c],
            out,
            req,
            if req { vec![self.clone()] } else { vec![] },
            if req {
                Some(Box::new(move |nd: &Node| {
                    let g = nd.grad_slice();
                    let mut d = vec![0.0f32; bs * c * hw];
                    for b in 0..bs {
                        for ch in 0..c {
                            let gv = g[b * c + ch] / hw as f32;
                            let base = (b * c + ch) * hw;
                            for i in 0..hw {
                                d[base + i] = gv;
                            }
                        }
                    }
                    Node::accumulate(&nd.parents[0], &d);
                }))
            } else {
                None
            },
        )
    }

    /// Per-row maximum as a constant tensor (no gradient). Used as the
    /// stabilizing shift in log-softmax, where the shift cancels exactly.
    pub fn rows_max_detached(&self) -> Tensor {
        let (b, c) = self.dims2("rows_max_detached");
        let x = self.data();
        let mut out = vec![f32::NEG_INFINITY; b];
        for i in 0..b {
            for j in 0..c {
                out[i] = out[i].max(x[i * c + j]);
            }
        }
        drop(x);
        Tensor::from_vec(vec![b], out)
    }
}

/// Numerically stable log-softmax over the rows of a (B, C) matrix.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let m = x.rows_max_detached();
    let shifted = x.add_rows(&m.neg());
    let lse = shifted.exp().rows_sum().ln();
    shifted.add_rows(&lse.neg())
}

/// L2-normalizes each row of a (B, D) matrix. Rows with near-zero norm are
/// floored at 1e-12 instead of dividing by zero.
pub fn normalize_rows(x: &Tensor) -> Tensor {
    let ss = x.mul(x).rows_sum();
    let norm = ss.sqrt().add_scalar(1e-12);
    x.mul_rows(&norm.recip())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on the f32 graph. Parameters are rebuilt
    /// around each perturbation so every evaluation is a fresh forward pass.
    /// Comparison is norm-relative over all coordinates.
    pub fn fd_check(
        shapes: &[Vec<usize>],
        datas: &[Vec<f32>],
        build: &dyn Fn(&[Tensor]) -> Tensor,
        h: f32,
        tol: f64,
        label: &str,
    ) {
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(datas)
            .map(|(s, d)| Tensor::param(s.clone(), d.clone()))
            .collect();
        let loss = build(&leaves);
        loss.backward().unwrap();
        let grads: Vec<Vec<f32>> = leaves.iter().map(|l| l.grad().unwrap()).collect();

        let eval = |perturb: Option<(usize, usize, f32)>| -> f64 {
            let leaves: Vec<Tensor> = shapes
                .iter()
                .zip(datas)
                .enumerate()
                .map(|(pi, (s, d))| {
                    let mut d = d.clone();
                    if let Some((p, i, delta)) = perturb {
                        if p == pi {
                            d[i] += delta;
                        }
                    }
                    Tensor::param(s.clone(), d)
                })
                .collect();
            build(&leaves).value() as f64
        };

        let mut num = 0.0f64;
        let mut dfd = 0.0f64;
        let mut dad = 0.0f64;
        for (p, data) in datas.iter().enumerate() {
            for i in 0..data.len() {
                let fp = eval(Some((p, i, h)));
                let fm = eval(Some((p, i, -h)));
                let fd = (fp - fm) / (2.0 * h as f64);
                let ad = grads[p][i] as f64;
                num += (fd - ad) * (fd - ad);
                dfd += fd * fd;
                dad += ad * ad;
            }
        }
        let rel = num.sqrt() / dfd.sqrt().max(dad.sqrt()).max(1e-12);
        assert!(rel <= tol, "{label}: FD relative error {rel} > {tol}");
    }

    fn rand_data(n: usize, seed: u64, lo: f32, hi: f32) -> Vec<f32> {
        let mut rng = crate::numcore::Rng::new(seed);
        (0..n).map(|_| rng.uniform(lo, hi)).collect()
    }

    #[test]
    fn square_gradient_exact_and_fd() {
        let x = Tensor::param(vec![1], vec![3.0]);
        let y = x.mul(&x);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 6.0);

        fd_check(
            &[vec![1]],
            &[vec![3.0]],
            &|p| p[0].mul(&p[0]),
            1e-3,
            1e-4,
            "x^2 at 3",
        );
    }

    #[test]
    fn softmax_dot_matches_f64_fd_oracle() {
        // f(x) = sum(softmax(x) * w); oracle evaluates the same function in
        // f64 and differences it at h = 1e-3.
        let n = 6;
        let x = rand_data(n, 42, -1.0, 1.0);
        let w = rand_data(n, 43, 0.0, 1.0);

        let xs = Tensor::param(vec![1, n], x.clone());
        let wt = Tensor::from_vec(vec![1, n], w.clone());
        let sm_row = |t: &Tensor| {
            let e = t.exp();
            let denom = e.rows_sum().recip();
            e.mul_rows(&denom)
        };
        let loss = sm_row(&xs).mul(&wt).sum();
        loss.backward().unwrap();
        let ad = xs.grad().unwrap();

        let f64_eval = |x: &[f64]| -> f64 {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().zip(&w).map(|(e, wi)| e / z * *wi as f64).sum()
        };
        let h = 1e-3;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            let mut xp: Vec<f64> = x.iter().map(|v| *v as f64).collect();
            xp[i] += h;
            let fp = f64_eval(&xp);
            xp[i] -= 2.0 * h;
            let fm = f64_eval(&xp);
            let fd = (fp - fm) / (2.0 * h);
            num += (fd - ad[i] as f64).powi(2);
            den += fd * fd;
        }
        let rel = num.sqrt() / den.sqrt();
        assert!(rel <= 1e-4, "softmax-dot FD rel err {rel}");
    }

    #[test]
    fn every_op_passes_fd() {
        type Case = (&'static str, Vec<Vec<usize>>, Vec<Vec<f32>>, Box<dyn Fn(&[Tensor]) -> Tensor>);
        let cases: Vec<Case> = vec![
            (
                "add/sub/mul",
                vec![vec![2, 3], vec![2, 3]],
                vec![rand_data(6, 1, -1.0, 1.0), rand_data(6, 2, -1.0, 1.0)],
                Box::new(|p| p[0].add(&p[1]).mul(&p[0].sub(&p[1])).sum()),
            ),
            (
                "scale/add_scalar",
                vec![vec![4]],
                vec![rand_data(4, 3, -1.0, 1.0)],
                Box::new(|p| p[0].scale(0.7).add_scalar(0.3).mul(&p[0]).sum()),
            ),
            (
                "exp/ln/sqrt/recip",
                vec![vec![5]],
                vec![rand_data(5, 4, 0.5, 2.0)],
                Box::new(|p| p[0].exp().ln().sqrt().recip().sum()),
            ),
            (
                "relu",
                vec![vec![6]],
                vec![vec![-1.5, -0.4, 0.3, 0.9, 1.7, -2.2]],
                Box::new(|p| p[0].relu().mul(&p[0]).sum()),
            ),
            (
                "matmul/transpose",
                vec![vec![3, 4], vec![4, 2]],
                vec![rand_data(12, 5, -1.0, 1.0), rand_data(8, 6, -1.0, 1.0)],
                Box::new(|p| p[0].matmul(&p[1]).transpose().sum()),
            ),
            (
                "rows_sum/add_rows/mul_rows",
                vec![vec![3, 4], vec![3]],
                vec![rand_data(12, 7, -1.0, 1.0), rand_data(3, 8, 0.5, 1.5)],
                Box::new(|p| p[0].add_rows(&p[1]).mul_rows(&p[1]).rows_sum().sum()),
            ),
            (
                "add_bias",
                vec![vec![3, 4], vec![4]],
                vec![rand_data(12, 9, -1.0, 1.0), rand_data(4, 10, -0.5, 0.5)],
                Box::new(|p| p[0].add_bias(&p[1]).mul(&p[0].add_bias(&p[1])).sum()),
            ),
            (
                "pick",
                vec![vec![3, 4]],
                vec![rand_data(12, 11, -1.0, 1.0)],
                Box::new(|p| p[0].pick(&[2, 0, 3]).sum()),
            ),
            (
                "mean/reshape",
                vec![vec![2, 6]],
                vec![rand_data(12, 12, -1.0, 1.0)],
                Box::new(|p| p[0].reshape(vec![3, 4]).mean()),
            ),
            (
                "scale_t",
                vec![vec![4], vec![1]],
                vec![rand_data(4, 13, -1.0, 1.0), vec![0.8]],
                Box::new(|p| p[0].scale_t(&p[1]).mul(&p[0]).sum()),
            ),
            (
                "conv2d/gap",
                vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]],
                vec![rand_data(100, 14, -1.0, 1.0), rand_data(54, 15, -0.5, 0.5)],
                Box::new(|p| p[0].conv2d(&p[1], 2, 1).gap().sum()),
            ),
            (
                "log_softmax/normalize_rows",
                vec![vec![3, 4]],
                vec![rand_data(12, 16, -1.0, 1.0)],
                Box::new(|p| log_softmax_rows(&normalize_rows(&p[0])).pick(&[1, 0, 2]).sum()),
            ),
        ];
        for (label, shapes, datas, build) in cases {
            fd_check(&shapes, &datas, build.as_ref(), 5e-3, 1e-3, label);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn backward_accumulates_shared_subgraphs() {
        // f(x) = x*x + x*x uses the same product node twice via add.
        let x = Tensor::param(vec![1], vec![2.0]);
        let sq = x.mul(&x);
        let y = sq.add(&sq);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 8.0);
    }

    #[test]
    fn backward_overwrites_previous_grads() {
        let x = Tensor::param(vec![1], vec![2.0]);
        for _ in 0..3 {
            let y = x.mul(&x);
            y.backward().unwrap();
            assert_eq!(x.grad().unwrap()[0], 4.0);
        }
    }

    #[test]
    fn identical_graphs_give_bit_identical_grads() {
        let data = rand_data(24, 20, -1.0, 1.0);
        let run = || {
            let x = Tensor::param(vec![4, 6], data.clone());
            let y = log_softmax_rows(&x).mul(&x).sum();
            y.backward().unwrap();
            x.grad().unwrap()
        };
        let a = run();
        let b = run();
        let ab: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }

    #[test]
    fn normalize_rows_unit_norm_and_zero_row() {
        let x = Tensor::param(vec![2, 3], vec![3.0, 0.0, 4.0, 0.0, 0.0, 0.0]);
        let y = normalize_rows(&x);
        let d = y.to_vec();
        let n0 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        assert!((n0 - 1.0).abs() < 1e-5);
        assert!(d[3..].iter().all(|v| *v == 0.0), "zero row stays zero");
    }

    #[test]
    fn constant_subgraphs_are_pruned() {
        let c = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let d = c.scale(3.0).exp();
        assert!(!d.requires_grad());
        assert!(d.node.parents.is_empty());
    }
}
