//! Define-by-run reverse-mode automatic differentiation over `ndarray`.
//!
//! Every operation appends a node to a [`Graph`] and computes its value
//! eagerly. [`Graph::grad`] walks the tape backwards and *builds the
//! gradients out of ordinary graph nodes*, so a gradient is itself a
//! differentiable expression: calling `grad` on a function of a gradient
//! yields correct second-order derivatives. This is what the WGAN-GP
//! gradient penalty needs.
//!
//! Shapes are validated with panics (misuse is a programming error); the
//! layers above expose `Result`-based contracts.

mod conv;

use ndarray::{ArrayD, Axis, IxDyn, NdFloat};

/// Scalar element: `f32` for training, `f64` for high-precision checks.
pub trait Element: NdFloat + 'static {}
impl Element for f32 {}
impl Element for f64 {}

/// Shorthand for writing literals in generic numeric code.
pub fn lit<T: Element>(v: f64) -> T {
    T::from(v).expect("literal conversion")
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    /// Sum over given axes, keeping them as size-1 dims.
    SumAxes(NodeId),
    BroadcastTo(NodeId),
    /// Reduce (by summation) to a target shape reachable by broadcasting.
    SumTo(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    MatMul(NodeId, NodeId),
    Transpose2(NodeId),
    Conv3d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvT3d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    Conv3dWGrad {
        x: NodeId,
        gy: NodeId,
        stride: usize,
        pad: usize,
    },
    ConcatC(Vec<NodeId>),
    SliceC(NodeId, usize, usize),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::SumAxes(a)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Transpose2(a)
            | Op::SliceC(a, _, _) => vec![*a],
            Op::Conv3d { x, w, .. } | Op::ConvT3d { x, w, .. } => vec![*x, *w],
            Op::Conv3dWGrad { x, gy, .. } => vec![*x, *gy],
            Op::ConcatC(ids) => ids.clone(),
        }
    }
}

struct Node<T: Element> {
    value: ArrayD<T>,
    op: Op,
}

/// A tape of eagerly evaluated tensor operations.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a leaf node. Whether it receives a gradient is decided by the
    /// `wrt` set passed to [`Graph::grad`].
    pub fn leaf(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Cuts the tape: a fresh leaf carrying a copy of the node's value.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.leaf(v)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes[id.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not scalar: shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{what}: shape mismatch"
        );
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "add");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "sub");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "mul");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "div");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = lit::<T>(c);
        let v = self.nodes[a.0].value.mapv(|x| x + cv);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = lit::<T>(c);
        let v = self.nodes[a.0].value.mapv(|x| x * cv);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = T::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = lit::<T>(slope);
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { s * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (lit::<T>(lo), lit::<T>(hi));
        let v = self.nodes[a.0].value.mapv(|x| x.max(l).min(h));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    // ---- reductions and shape --------------------------------------------

    /// Sum of all elements (0-dim result).
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let mut v = self.nodes[a.0].value.clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in sorted.iter().rev() {
            v = v.sum_axis(Axis(ax));
        }
        let mut shape = self.nodes[a.0].value.shape().to_vec();
        for &ax in &sorted {
            shape[ax] = 1;
        }
        let v = v.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(v, Op::SumAxes(a))
    }

    pub fn mean_axes(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let shape = self.shape(a);
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Broadcasts to `shape` following numpy alignment rules.
    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| {
                panic!(
                    "cannot broadcast {:?} to {shape:?}",
                    self.nodes[a.0].value.shape()
                )
            })
            .to_owned();
        self.push(v, Op::BroadcastTo(a))
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of
    /// [`Graph::broadcast_to`]).
    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = sum_to_shape(&self.nodes[a.0].value, shape);
        self.push(v, Op::SumTo(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let value = &self.nodes[a.0].value;
        assert_eq!(
            value.len(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch: {:?} to {shape:?}",
            value.shape()
        );
        let v = value
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.push(v, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.push(v, Op::Permute(a, axes.to_vec()))
    }

    // ---- linear algebra ---------------------------------------------------

    /// 2-D matrix product `[n, k] x [k, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = to2(&self.nodes[a.0].value);
        let bv = to2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let v = to2(&self.nodes[a.0].value)
            .t()
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        self.push(v, Op::Transpose2(a))
    }

    // ---- convolutions ------------------------------------------------------

    /// 3-D correlation: `x [N, I, D, H, W]` with weight `[O, I, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv::conv3d(&self.nodes[x.0].value, &self.nodes[w.0].value, stride, pad);
        self.push(v, Op::Conv3d { x, w, stride, pad })
    }

    /// 3-D transpose convolution: `x [N, Cin, ...]` with weight
    /// `[Cin, Cout, kd, kh, kw]`.
    pub fn conv_transpose3d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv::conv_transpose3d(&self.nodes[x.0].value, &self.nodes[w.0].value, stride, pad);
        self.push(v, Op::ConvT3d { x, w, stride, pad })
    }

    fn conv3d_wgrad(
        &mut self,
        x: NodeId,
        gy: NodeId,
        kernel: [usize; 3],
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let v = conv::conv3d_wgrad(
            &self.nodes[x.0].value,
            &self.nodes[gy.0].value,
            kernel,
            stride,
            pad,
        );
        self.push(
            v,
            Op::Conv3dWGrad {
                x,
                gy,
                stride,
                pad,
            },
        )
    }

    // ---- channel concat / slice (axis 1) -----------------------------------

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        self.push(v, Op::ConcatC(parts.to_vec()))
    }

    pub fn slice_channels(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let value = &self.nodes[a.0].value;
        let v = value
            .slice_axis(Axis(1), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        self.push(v, Op::SliceC(a, start, len))
    }

    // ---- autodiff -----------------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
    ///
    /// The returned nodes live in this graph and can be differentiated again.
    /// A `None` entry means the loss does not depend on that node.
    pub fn grad(&mut self, loss: NodeId, wrt: &[NodeId]) -> Vec<Option<NodeId>> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "loss must be scalar, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let n = loss.0 + 1;

        // forward reachability: does node i depend on any wrt target?
        let mut reaches = vec![false; n];
        for w in wrt {
            assert!(w.0 < n, "wrt node created after the loss");
            reaches[w.0] = true;
        }
        for i in 0..n {
            if !reaches[i] {
                reaches[i] = self.nodes[i]
                    .op
                    .parents()
                    .iter()
                    .any(|p| reaches[p.0]);
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        let seed_shape = self.shape(loss);
        let seed = self.leaf(ArrayD::from_elem(IxDyn(&seed_shape), T::one()));
        grads[loss.0] = Some(seed);

        for i in (0..n).rev() {
            let Some(gy) = grads[i] else { continue };
            if !reaches[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = NodeId(i);
            self.backprop_one(&op, out, gy, &reaches, &mut grads);
        }

        wrt.iter().map(|w| grads[w.0]).collect()
    }

    /// Distributes `gy` (cotangent of `out`) to the parents of one op.
    fn backprop_one(
        &mut self,
        op: &Op,
        out: NodeId,
        gy: NodeId,
        reaches: &[bool],
        grads: &mut [Option<NodeId>],
    ) {
        let need = |id: NodeId| reaches[id.0];
        macro_rules! acc {
            ($parent:expr, $grad:expr) => {{
                let p: NodeId = $parent;
                let g: NodeId = $grad;
                grads[p.0] = Some(match grads[p.0] {
                    None => g,
                    Some(e) => self.add(e, g),
                });
            }};
        }

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    acc!(*a, gy);
                }
                if need(*b) {
                    acc!(*b, gy);
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    acc!(*a, gy);
                }
                if need(*b) {
                    let g = self.neg(gy);
                    acc!(*b, g);
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let g = self.mul(gy, *b);
                    acc!(*a, g);
                }
                if need(*b) {
                    let g = self.mul(gy, *a);
                    acc!(*b, g);
                }
            }
            Op::Div(a, b) => {
                if need(*a) {
                    let g = self.div(gy, *b);
                    acc!(*a, g);
                }
                if need(*b) {
                    let ga = self.mul(gy, *a);
                    let b2 = self.square(*b);
                    let g = self.div(ga, b2);
                    let g = self.neg(g);
                    acc!(*b, g);
                }
            }
            Op::Neg(a) => {
                if need(*a) {
                    let g = self.neg(gy);
                    acc!(*a, g);
                }
            }
            Op::AddScalar(a) => {
                if need(*a) {
                    acc!(*a, gy);
                }
            }
            Op::MulScalar(a, c) => {
                if need(*a) {
                    let g = self.mul_scalar(gy, *c);
                    acc!(*a, g);
                }
            }
            Op::Exp(a) => {
                if need(*a) {
                    let g = self.mul(gy, out);
                    acc!(*a, g);
                }
            }
            Op::Ln(a) => {
                if need(*a) {
                    let g = self.div(gy, *a);
                    acc!(*a, g);
                }
            }
            Op::Sqrt(a) => {
                if need(*a) {
                    let g = self.div(gy, out);
                    let g = self.mul_scalar(g, 0.5);
                    acc!(*a, g);
                }
            }
            Op::Square(a) => {
                if need(*a) {
                    let g = self.mul(gy, *a);
                    let g = self.mul_scalar(g, 2.0);
                    acc!(*a, g);
                }
            }
            Op::Sigmoid(a) => {
                if need(*a) {
                    // y·(1 − y), built from graph nodes so it stays differentiable
                    let neg_y = self.neg(out);
                    let one_minus = self.add_scalar(neg_y, 1.0);
                    let dy = self.mul(out, one_minus);
                    let g = self.mul(gy, dy);
                    acc!(*a, g);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if need(*a) {
                    let s = lit::<T>(*slope);
                    let mask = self.nodes[a.0]
                        .value
                        .mapv(|x| if x > T::zero() { T::one() } else { s });
                    let m = self.leaf(mask);
                    let g = self.mul(gy, m);
                    acc!(*a, g);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if need(*a) {
                    let (l, h) = (lit::<T>(*lo), lit::<T>(*hi));
                    let mask = self.nodes[a.0]
                        .value
                        .mapv(|x| if x >= l && x <= h { T::one() } else { T::zero() });
                    let m = self.leaf(mask);
                    let g = self.mul(gy, m);
                    acc!(*a, g);
                }
            }
            Op::SumAll(a) => {
                if need(*a) {
                    let shape = self.shape(*a);
                    let g = self.broadcast_to(gy, &shape);
                    acc!(*a, g);
                }
            }
            Op::SumAxes(a) => {
                if need(*a) {
                    let shape = self.shape(*a);
                    let g = self.broadcast_to(gy, &shape);
                    acc!(*a, g);
                }
            }
            Op::BroadcastTo(a) => {
                if need(*a) {
                    let shape = self.shape(*a);
                    let g = self.sum_to(gy, &shape);
                    acc!(*a, g);
                }
            }
            Op::SumTo(a) => {
                if need(*a) {
                    let shape = self.shape(*a);
                    let g = self.broadcast_to(gy, &shape);
                    acc!(*a, g);
                }
            }
            Op::Reshape(a) => {
                if need(*a) {
                    let shape = self.shape(*a);
                    let g = self.reshape(gy, &shape);
                    acc!(*a, g);
                }
            }
            Op::Permute(a, axes) => {
                if need(*a) {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let g = self.permute(gy, &inverse);
                    acc!(*a, g);
                }
            }
            Op::MatMul(a, b) => {
                if need(*a) {
                    let bt = self.transpose2(*b);
                    let g = self.matmul(gy, bt);
                    acc!(*a, g);
                }
                if need(*b) {
                    let at = self.transpose2(*a);
                    let g = self.matmul(at, gy);
                    acc!(*b, g);
                }
            }
            Op::Transpose2(a) => {
                if need(*a) {
                    let g = self.transpose2(gy);
                    acc!(*a, g);
                }
            }
            Op::Conv3d { x, w, stride, pad } => {
                let kernel = kernel_of(&self.nodes[w.0].value);
                if need(*x) {
                    let g = self.conv_transpose3d(gy, *w, *stride, *pad);
                    acc!(*x, g);
                }
                if need(*w) {
                    let g = self.conv3d_wgrad(*x, gy, kernel, *stride, *pad);
                    acc!(*w, g);
                }
            }
            Op::ConvT3d { x, w, stride, pad } => {
                let kernel = kernel_of(&self.nodes[w.0].value);
                if need(*x) {
                    let g = self.conv3d(gy, *w, *stride, *pad);
                    acc!(*x, g);
                }
                if need(*w) {
                    let g = self.conv3d_wgrad(gy, *x, kernel, *stride, *pad);
                    acc!(*w, g);
                }
            }
            Op::Conv3dWGrad {
                x,
                gy: y,
                stride,
                pad,
            } => {
                // output cotangent `gy` has the weight's shape
                if need(*x) {
                    let g = self.conv_transpose3d(*y, gy, *stride, *pad);
                    acc!(*x, g);
                }
                if need(*y) {
                    let g = self.conv3d(*x, gy, *stride, *pad);
                    acc!(*y, g);
                }
            }
            Op::ConcatC(parts) => {
                let mut start = 0usize;
                for &p in parts {
                    let len = self.shape(p)[1];
                    if need(p) {
                        let g = self.slice_channels(gy, start, len);
                        acc!(p, g);
                    }
                    start += len;
                }
            }
            Op::SliceC(a, start, len) => {
                if need(*a) {
                    let shape = self.shape(*a);
                    let before = *start;
                    let after = shape[1] - start - len;
                    let mut parts = Vec::new();
                    if before > 0 {
                        let mut s = shape.clone();
                        s[1] = before;
                        parts.push(self.leaf(ArrayD::zeros(IxDyn(&s))));
                    }
                    parts.push(gy);
                    if after > 0 {
                        let mut s = shape.clone();
                        s[1] = after;
                        parts.push(self.leaf(ArrayD::zeros(IxDyn(&s))));
                    }
                    let g = self.concat_channels(&parts);
                    acc!(*a, g);
                }
            }
        }
    }
}

fn kernel_of<T: Element>(w: &ArrayD<T>) -> [usize; 3] {
    let s = w.shape();
    [s[2], s[3], s[4]]
}

fn to2<T: Element>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap_or_else(|_| panic!("expected 2-D array, got {:?}", a.shape()))
}

/// Sums `a` down to `shape` (which must be broadcast-compatible with it).
fn sum_to_shape<T: Element>(a: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if a.shape() == shape {
        return a.clone();
    }
    if shape.is_empty() {
        return ArrayD::from_elem(IxDyn(&[]), a.sum());
    }
    let extra = a.ndim() - shape.len();
    let mut v = a.clone();
    for _ in 0..extra {
        v = v.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && v.shape()[ax] != 1 {
            let summed = v.sum_axis(Axis(ax));
            let mut keep = summed.into_dyn();
            keep = {
                let mut s = keep.shape().to_vec();
                s.insert(ax, 1);
                keep.into_shape_with_order(IxDyn(&s)).unwrap()
            };
            v = keep;
        }
    }
    assert_eq!(v.shape(), shape, "sum_to incompatible target");
    v
}

#[cfg(test)]
mod tests;
