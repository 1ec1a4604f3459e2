use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Activation, ConvGeom};
use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor produced inside a [`Graph`].
///
/// Cloning is cheap; the value is shared.
#[derive(Clone, Debug)]
pub struct Var<T> {
    graph: u64,
    id: Option<usize>,
    requires_grad: bool,
    value: Rc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Position on the tape, or `None` for values computed without recording.
    pub fn node(&self) -> Option<usize> {
        self.id
    }

    pub fn item(&self) -> Result<T> {
        self.value.item()
    }
}

enum Op<T> {
    /// Inputs, parameters and any value whose ancestors need no gradient.
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        xv: Rc<Tensor<T>>,
        wv: Rc<Tensor<T>>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul {
        a: usize,
        b: usize,
        av: Rc<Tensor<T>>,
        bv: Rc<Tensor<T>>,
    },
    Scale(usize, T),
    Offset(usize),
    Act {
        a: usize,
        kind: Activation,
        xv: Rc<Tensor<T>>,
        yv: Rc<Tensor<T>>,
    },
    Sigmoid {
        a: usize,
        yv: Rc<Tensor<T>>,
    },
    Sqrt {
        a: usize,
        yv: Rc<Tensor<T>>,
    },
    Abs {
        a: usize,
        xv: Rc<Tensor<T>>,
    },
    Square {
        a: usize,
        xv: Rc<Tensor<T>>,
    },
    AvgPool {
        a: usize,
        input: Shape,
    },
    ChannelScale {
        x: usize,
        gate: usize,
        xv: Rc<Tensor<T>>,
        gv: Rc<Tensor<T>>,
    },
    PixelShuffle {
        a: usize,
        r: usize,
    },
    MaxPool {
        a: usize,
        arg: Vec<usize>,
        input: Shape,
    },
    Resize {
        a: usize,
        input: Shape,
    },
    Sum {
        a: usize,
        input: Shape,
    },
    Mean {
        a: usize,
        input: Shape,
    },
}

struct Node<T> {
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered tape of executed operations.
///
/// Nodes are appended as ops run, so every node's inputs precede it. A graph
/// created with [`Graph::inference`] records nothing: intermediates are freed
/// as soon as their [`Var`]s drop, and [`Graph::backward`] is rejected.
///
/// Gradients of `requires_grad` leaves accumulate across `backward` calls
/// until [`Graph::zero_grad`].
pub struct Graph<T: Scalar> {
    id: u64,
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<BTreeMap<usize, Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            recording,
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf. Parameters pass `requires_grad = true`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.push(Op::Leaf, requires_grad && self.recording, value)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    fn push(&self, op: Op<T>, requires_grad: bool, value: Tensor<T>) -> Var<T> {
        self.push_shared(op, requires_grad, Rc::new(value))
    }

    fn check(&self, v: &Var<T>) -> Result<()> {
        if v.graph != self.id {
            return Err(Error::Graph("variable belongs to a different graph".into()));
        }
        Ok(())
    }

    fn check_all(&self, vs: &[&Var<T>]) -> Result<()> {
        vs.iter().try_for_each(|v| self.check(v))
    }

    // Only called while recording, when every operand has a tape id.
    fn ix(v: &Var<T>) -> usize {
        v.id.unwrap_or(usize::MAX)
    }

    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, stride: usize, padding: usize) -> Result<Var<T>> {
        self.check_all(&[x, w])?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let geom = ConvGeom::new(x.value(), w.value(), b.map(|b| b.value()), stride, padding)?;
        let y = kernels::conv2d_unchecked(&geom, x.value(), w.value(), b.map(|b| b.value()));
        let rg = x.requires_grad || w.requires_grad || b.is_some_and(|b| b.requires_grad);
        let op = Op::Conv {
            x: Self::ix(x),
            w: Self::ix(w),
            b: b.map(Self::ix),
            geom,
            xv: x.value.clone(),
            wv: w.value.clone(),
        };
        Ok(self.push(op, rg, y))
    }

    fn same_shape(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            let dim = if sa.n != sb.n {
                "n"
            } else if sa.c != sb.c {
                "c"
            } else if sa.h != sb.h {
                "h"
            } else {
                "w"
            };
            return Err(Error::shape(op, dim, format!("{sa} vs {sb}")));
        }
        Ok(())
    }

    fn zip(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(a.shape(), data)
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.check_all(&[a, b])?;
        Self::same_shape("add", a, b)?;
        let y = Self::zip(a.value(), b.value(), |x, y| x + y);
        Ok(self.push(Op::Add(Self::ix(a), Self::ix(b)), a.requires_grad || b.requires_grad, y))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.check_all(&[a, b])?;
        Self::same_shape("sub", a, b)?;
        let y = Self::zip(a.value(), b.value(), |x, y| x - y);
        Ok(self.push(Op::Sub(Self::ix(a), Self::ix(b)), a.requires_grad || b.requires_grad, y))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.check_all(&[a, b])?;
        Self::same_shape("mul", a, b)?;
        let y = Self::zip(a.value(), b.value(), |x, y| x * y);
        let op = Op::Mul {
            a: Self::ix(a),
            b: Self::ix(b),
            av: a.value.clone(),
            bv: b.value.clone(),
        };
        Ok(self.push(op, a.requires_grad || b.requires_grad, y))
    }

    /// `k * a` for a constant `k`.
    pub fn scale(&self, a: &Var<T>, k: T) -> Result<Var<T>> {
        self.check(a)?;
        let y = a.value().map(|v| v * k);
        Ok(self.push(Op::Scale(Self::ix(a), k), a.requires_grad, y))
    }

    /// `a + k` for a constant `k`.
    pub fn offset(&self, a: &Var<T>, k: T) -> Result<Var<T>> {
        self.check(a)?;
        let y = a.value().map(|v| v + k);
        Ok(self.push(Op::Offset(Self::ix(a)), a.requires_grad, y))
    }

    pub fn activation(&self, a: &Var<T>, kind: Activation) -> Result<Var<T>> {
        self.check(a)?;
        let y = Rc::new(a.value().map(|v| kind.apply(v)));
        let op = Op::Act {
            a: Self::ix(a),
            kind,
            xv: a.value.clone(),
            yv: y.clone(),
        };
        Ok(self.push_shared(op, a.requires_grad, y))
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Result<Var<T>> {
        self.check(a)?;
        let y = Rc::new(a.value().map(kernels::sigmoid));
        let op = Op::Sigmoid {
            a: Self::ix(a),
            yv: y.clone(),
        };
        Ok(self.push_shared(op, a.requires_grad, y))
    }

    pub fn relu(&self, a: &Var<T>) -> Result<Var<T>> {
        self.activation(a, Activation::Relu)
    }

    pub fn sqrt(&self, a: &Var<T>) -> Result<Var<T>> {
        self.check(a)?;
        if a.value().data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        let y = Rc::new(a.value().map(|v| v.sqrt()));
        let op = Op::Sqrt {
            a: Self::ix(a),
            yv: y.clone(),
        };
        Ok(self.push_shared(op, a.requires_grad, y))
    }

    pub fn abs(&self, a: &Var<T>) -> Result<Var<T>> {
        self.check(a)?;
        let y = a.value().map(|v| v.abs());
        let op = Op::Abs {
            a: Self::ix(a),
            xv: a.value.clone(),
        };
        Ok(self.push(op, a.requires_grad, y))
    }

    pub fn square(&self, a: &Var<T>) -> Result<Var<T>> {
        self.check(a)?;
        let y = a.value().map(|v| v * v);
        let op = Op::Square {
            a: Self::ix(a),
            xv: a.value.clone(),
        };
        Ok(self.push(op, a.requires_grad, y))
    }

    pub fn global_avg_pool(&self, a: &Var<T>) -> Result<Var<T>> {
        self.check(a)?;
        let y = kernels::global_avg_pool(a.value())?;
        let op = Op::AvgPool {
            a: Self::ix(a),
            input: a.shape(),
        };
        Ok(self.push(op, a.requires_grad, y))
    }

    /// Broadcast multiply of `x` (n,c,h,w) by a per-channel `gate` (n,c,1,1).
    pub fn channel_scale(&self, x: &Var<T>, gate: &Var<T>) -> Result<Var<T>> {
        self.check_all(&[x, gate])?;
        let y = kernels::channel_scale(x.value(), gate.value())?;
        let op = Op::ChannelScale {
            x: Self::ix(x),
            gate: Self::ix(gate),
            xv: x.value.clone(),
            gv: gate.value.clone(),
        };
        Ok(self.push(op, x.requires_grad || gate.requires_grad, y))
    }

    pub fn pixel_shuffle(&self, a: &Var<T>, r: usize) -> Result<Var<T>> {
        self.check(a)?;
        let y = kernels::pixel_shuffle(a.value(), r)?;
        Ok(self.push(Op::PixelShuffle { a: Self::ix(a), r }, a.requires_grad, y))
    }

    pub fn max_pool2d(&self, a: &Var<T>, kernel: usize, stride: usize, padding: usize) -> Result<Var<T>> {
        self.check(a)?;
        let (y, arg) = kernels::max_pool2d(a.value(), kernel, stride, padding)?;
        let op = Op::MaxPool {
            a: Self::ix(a),
            arg,
            input: a.shape(),
        };
        Ok(self.push(op, a.requires_grad, y))
    }

    pub fn resize_bilinear(&self, a: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        self.check(a)?;
        let y = kernels::resize_bilinear(a.value(), h, w)?;
        let op = Op::Resize {
            a: Self::ix(a),
            input: a.shape(),
        };
        Ok(self.push(op, a.requires_grad, y))
    }

    /// Sum of all elements, left to right in storage order.
    pub fn sum(&self, a: &Var<T>) -> Result<Var<T>> {
        self.check(a)?;
        let y = Tensor::scalar(a.value().sum());
        let op = Op::Sum {
            a: Self::ix(a),
            input: a.shape(),
        };
        Ok(self.push(op, a.requires_grad, y))
    }

    /// Sum in storage order divided by the element count.
    pub fn mean(&self, a: &Var<T>) -> Result<Var<T>> {
        self.check(a)?;
        if a.value().is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let y = Tensor::scalar(a.value().mean());
        let op = Op::Mean {
            a: Self::ix(a),
            input: a.shape(),
        };
        Ok(self.push(op, a.requires_grad, y))
    }

    fn push_shared(&self, op: Op<T>, requires_grad: bool, value: Rc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var {
                graph: self.id,
                id: None,
                requires_grad: false,
                value,
            };
        }
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, requires_grad });
        Var {
            graph: self.id,
            id: Some(nodes.len() - 1),
            requires_grad,
            value,
        }
    }

    /// Accumulated gradient of a leaf, if any has been written.
    pub fn grad(&self, v: &Var<T>) -> Option<Tensor<T>> {
        if v.graph != self.id {
            return None;
        }
        v.id.and_then(|id| self.grads.borrow().get(&id).cloned())
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into the
    /// gradients of every `requires_grad` leaf it depends on.
    pub fn backward(&self, loss: &Var<T>) -> Result<()> {
        if loss.graph != self.id {
            return Err(Error::Graph("loss was not produced by this graph".into()));
        }
        let root = loss
            .id
            .ok_or_else(|| Error::Graph("loss is not recorded in the graph (inference mode?)".into()))?;
        if loss.value().len() != 1 {
            return Err(Error::Graph(format!("loss must be a scalar, got shape {}", loss.shape())));
        }
        let nodes = self.nodes.borrow();
        if !nodes[root].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.shape()));

        let acc = |grads: &mut Vec<Option<Tensor<T>>>, id: usize, g: Tensor<T>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += *v;
                    }
                }
                slot => *slot = Some(g),
            }
        };

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf => {
                    let mut leaf_grads = self.grads.borrow_mut();
                    match leaf_grads.get_mut(&i) {
                        Some(existing) => {
                            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                                *e += *v;
                            }
                        }
                        None => {
                            leaf_grads.insert(i, g);
                        }
                    }
                }
                Op::Conv { x, w, b, geom, xv, wv } => {
                    if nodes[*x].requires_grad {
                        acc(&mut grads, *x, kernels::conv2d_grad_input(geom, wv, &g));
                    }
                    let need_b = b.is_some_and(|b| nodes[b].requires_grad);
                    if nodes[*w].requires_grad || need_b {
                        let (gw, gb) = kernels::conv2d_grad_params(geom, xv, &g);
                        acc(&mut grads, *w, gw);
                        if let Some(b) = b {
                            acc(&mut grads, *b, gb);
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul { a, b, av, bv } => {
                    acc(&mut grads, *a, Self::zip(&g, bv, |g, y| g * y));
                    acc(&mut grads, *b, Self::zip(&g, av, |g, x| g * x));
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(&mut grads, *a, g.map(|v| v * k));
                }
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Act { a, kind, xv, yv } => {
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data().iter().zip(yv.data()))
                        .map(|(&g, (&x, &y))| g * kind.derivative(x, y))
                        .collect();
                    acc(&mut grads, *a, Tensor::from_parts(g.shape(), data));
                }
                Op::Sigmoid { a, yv } => {
                    acc(&mut grads, *a, Self::zip(&g, yv, |g, s| g * s * (T::one() - s)));
                }
                Op::Sqrt { a, yv } => {
                    acc(&mut grads, *a, Self::zip(&g, yv, |g, y| g / (y + y)));
                }
                Op::Abs { a, xv } => {
                    acc(&mut grads, *a, Self::zip(&g, xv, |g, x| g * x.signum() * T::of(f64::from(x != T::zero()))));
                }
                Op::Square { a, xv } => {
                    acc(&mut grads, *a, Self::zip(&g, xv, |g, x| g * (x + x)));
                }
                Op::AvgPool { a, input } => {
                    let denom = T::of(input.plane() as f64);
                    let gi = Tensor::from_fn(*input, |n, c, _, _| g.at(n, c, 0, 0) / denom);
                    acc(&mut grads, *a, gi);
                }
                Op::ChannelScale { x, gate, xv, gv } => {
                    if nodes[*x].requires_grad {
                        acc(&mut grads, *x, kernels::channel_scale(&g, gv)?);
                    }
                    if nodes[*gate].requires_grad {
                        let s = xv.shape();
                        let gg = Tensor::from_fn([s.n, s.c, 1, 1], |n, c, _, _| {
                            let mut sum = T::zero();
                            for (&gv, &xv) in g.plane(n, c).iter().zip(xv.plane(n, c)) {
                                sum += gv * xv;
                            }
                            sum
                        });
                        acc(&mut grads, *gate, gg);
                    }
                }
                Op::PixelShuffle { a, r } => {
                    acc(&mut grads, *a, kernels::pixel_unshuffle(&g, *r)?);
                }
                Op::MaxPool { a, arg, input } => {
                    let mut gi = Tensor::zeros(*input);
                    let d = gi.data_mut();
                    for (&at, &gv) in arg.iter().zip(g.data()) {
                        d[at] += gv;
                    }
                    acc(&mut grads, *a, gi);
                }
                Op::Resize { a, input } => {
                    acc(&mut grads, *a, kernels::resize_bilinear_backward(&g, *input));
                }
                Op::Sum { a, input } => {
                    acc(&mut grads, *a, Tensor::full(*input, g.data()[0]));
                }
                Op::Mean { a, input } => {
                    let v = g.data()[0] / T::of(input.numel() as f64);
                    acc(&mut grads, *a, Tensor::full(*input, v));
                }
            }
        }
        Ok(())
    }
}
