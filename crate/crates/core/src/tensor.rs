//! Dense 4-D tensors and a reverse-mode tape.
//!
//! Every value lives in a [`Tape`] arena and is addressed through a [`Var`]
//! handle. An operation is recorded (and later differentiated) only when at
//! least one of its inputs requires a gradient; otherwise the result is
//! stored as a plain constant. Running a whole forward pass with no
//! gradient-requiring leaves therefore costs no tape bookkeeping, which is
//! how detached inference is done.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on axis `{axis}` (expected {expected}, found {found})")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// `(n, c, h, w)` extents.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { n: 1, c: 1, h: 1, w: 1 };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Flat offset of `(n, c, y, x)` in row-major order.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    fn expect_same(&self, other: &Shape, op: &'static str) -> Result<()> {
        let names = ["n", "c", "h", "w"];
        for ((a, b), axis) in self.dims().iter().zip(other.dims()).zip(names) {
            if *a != b {
                return Err(TensorError::Dimension {
                    op,
                    axis,
                    expected: *a,
                    found: b,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(TensorError::Contract(format!(
                "tensor of shape {:?} needs {} values, got {}",
                shape,
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    /// Convenience for 1-D test vectors laid out along the width axis.
    pub fn row(values: &[f64]) -> Self {
        Tensor::from_vec(Shape::new(1, 1, 1, values.len()), values.to_vec()).unwrap()
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a 1×1×1×1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape, Shape::SCALAR);
        self.data[0]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.offset(n, c, y, x)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of sample `i` along the batch axis.
    pub fn sample(&self, i: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        let data = self.data[i * per..(i + 1) * per].to_vec();
        Tensor::from_vec(Shape::new(1, self.shape.c, self.shape.h, self.shape.w), data).unwrap()
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::Contract("stack of zero tensors".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            let ts = t.shape;
            Shape::new(ts.n, s.c, s.h, s.w).expect_same(&ts, "stack")?;
            data.extend_from_slice(&t.data);
            n += ts.n;
        }
        Tensor::from_vec(Shape::new(n, s.c, s.h, s.w), data)
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.shape.expect_same(&other.shape, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Handle to a value held by a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Leaf or un-recorded result; nothing to propagate.
    Constant,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    L1Mean(Var, Var),
    MseMean(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Constant => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => vec![input, weight, bias],
            Op::Relu(a) | Op::Scale(a, _) | Op::Sum(a) => vec![a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::L1Mean(a, b) | Op::MseMean(a, b) => vec![a, b],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only operation record plus value arena.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of operations currently recorded for differentiation.
    pub fn recorded(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Constant))
            .count()
    }

    /// Places a tensor in the arena. Its `requires_grad` flag decides
    /// whether it collects a gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Constant)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves the value (and any gradient) out, leaving an empty tensor.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(Shape::new(0, 0, 0, 0)))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Records `op` when any input tracks gradients, otherwise stores a constant.
    fn emit(&mut self, data: Vec<f64>, shape: Shape, op: Op) -> Var {
        let track = op.inputs().iter().any(|&v| self.requires(v));
        let value = Tensor {
            shape,
            data,
            requires_grad: track,
            grad: None,
        };
        self.push(value, if track { op } else { Op::Constant })
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(weight);
        let b = self.value(bias);
        let geo = ConvGeometry::new(x.shape, k.shape, b.shape, stride, padding)?;
        let out = conv2d_forward(&geo, &x.data, &k.data, &b.data);
        let shape = geo.out_shape();
        Ok(self.emit(
            out,
            shape,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect();
        let shape = x.shape;
        self.emit(data, shape, Op::Relu(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.shape.expect_same(&y.shape, "add")?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let shape = x.shape;
        Ok(self.emit(data, shape, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.shape.expect_same(&y.shape, "sub")?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let shape = x.shape;
        Ok(self.emit(data, shape, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|p| p * k).collect();
        let shape = x.shape;
        self.emit(data, shape, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        self.emit(vec![total], Shape::SCALAR, Op::Sum(a))
    }

    /// Mean absolute difference, as a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.shape.expect_same(&y.shape, "l1_mean")?;
        let total: f64 = x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()).sum();
        let mean = total / x.len() as f64;
        Ok(self.emit(vec![mean], Shape::SCALAR, Op::L1Mean(a, b)))
    }

    /// Mean squared difference, as a scalar.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.shape.expect_same(&y.shape, "mse_mean")?;
        let total: f64 = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let mean = total / x.len() as f64;
        Ok(self.emit(vec![mean], Shape::SCALAR, Op::MseMean(a, b)))
    }

    /// Propagates d(root)/d(·) to every gradient-tracking value reachable
    /// from `root`, accumulating into existing `grad` arrays. The recorded
    /// operations are discarded afterwards; values stay readable.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| TensorError::Contract("backward: unknown root".into()))?;
        if node.value.shape != Shape::SCALAR {
            return Err(TensorError::Contract(format!(
                "backward: root must be 1x1x1x1, got {:?}",
                node.value.shape
            )));
        }
        if !node.value.requires_grad || matches!(node.op, Op::Constant) {
            return Err(TensorError::Contract(
                "backward: root was not produced through the tape".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Constant);
            self.propagate(&op, &upstream, &mut grads);
            let value = &mut self.nodes[i].value;
            match value.grad.as_mut() {
                Some(g) => g.iter_mut().zip(&upstream).for_each(|(a, b)| *a += b),
                None => value.grad = Some(upstream),
            }
        }
        for node in &mut self.nodes {
            node.op = Op::Constant;
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut accumulate = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].value.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match *op {
            Op::Constant => {}
            Op::Relu(a) => accumulate(a, &mut |dst| {
                for ((d, &x), &gi) in dst.iter_mut().zip(&val(a).data).zip(g) {
                    if x > 0.0 {
                        *d += gi;
                    }
                }
            }),
            Op::Add(a, b) => {
                accumulate(a, &mut |dst| add_into(dst, g, 1.0));
                accumulate(b, &mut |dst| add_into(dst, g, 1.0));
            }
            Op::Sub(a, b) => {
                accumulate(a, &mut |dst| add_into(dst, g, 1.0));
                accumulate(b, &mut |dst| add_into(dst, g, -1.0));
            }
            Op::Scale(a, k) => accumulate(a, &mut |dst| add_into(dst, g, k)),
            Op::Sum(a) => accumulate(a, &mut |dst| dst.iter_mut().for_each(|d| *d += g[0])),
            Op::L1Mean(a, b) => {
                let (x, y) = (&val(a).data, &val(b).data);
                let coef = g[0] / x.len() as f64;
                let sign = |p: f64, q: f64| {
                    if p > q {
                        coef
                    } else if p < q {
                        -coef
                    } else {
                        0.0
                    }
                };
                accumulate(a, &mut |dst| {
                    for ((d, &p), &q) in dst.iter_mut().zip(x).zip(y) {
                        *d += sign(p, q);
                    }
                });
                accumulate(b, &mut |dst| {
                    for ((d, &p), &q) in dst.iter_mut().zip(x).zip(y) {
                        *d -= sign(p, q);
                    }
                });
            }
            Op::MseMean(a, b) => {
                let (x, y) = (&val(a).data, &val(b).data);
                let coef = 2.0 * g[0] / x.len() as f64;
                accumulate(a, &mut |dst| {
                    for ((d, &p), &q) in dst.iter_mut().zip(x).zip(y) {
                        *d += coef * (p - q);
                    }
                });
                accumulate(b, &mut |dst| {
                    for ((d, &p), &q) in dst.iter_mut().zip(x).zip(y) {
                        *d -= coef * (p - q);
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (x, k, b) = (val(input), val(weight), val(bias));
                let geo = ConvGeometry::new(x.shape, k.shape, b.shape, stride, padding)
                    .expect("geometry validated at record time");
                accumulate(input, &mut |dst| conv2d_grad_input(&geo, g, &k.data, dst));
                accumulate(weight, &mut |dst| conv2d_grad_weight(&geo, g, &x.data, dst));
                accumulate(bias, &mut |dst| conv2d_grad_bias(&geo, g, dst));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    if k == 1.0 {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
    } else {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
    }
}

/// Validated convolution layout.
#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    input: Shape,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: Shape, weight: Shape, bias: Shape, stride: usize, pad: usize) -> Result<Self> {
        let dim = |axis, expected, found| TensorError::Dimension {
            op: "conv2d",
            axis,
            expected,
            found,
        };
        if stride == 0 {
            return Err(TensorError::Contract("conv2d: stride must be positive".into()));
        }
        if weight.c != input.c {
            return Err(dim("c", weight.c, input.c));
        }
        if weight.h != weight.w {
            return Err(dim("w", weight.h, weight.w));
        }
        if bias != Shape::new(1, weight.n, 1, 1) {
            if bias.c != weight.n {
                return Err(dim("c", weight.n, bias.c));
            }
            let axis = if bias.n != 1 { "n" } else if bias.h != 1 { "h" } else { "w" };
            let found = match axis {
                "n" => bias.n,
                "h" => bias.h,
                _ => bias.w,
            };
            return Err(dim(axis, 1, found));
        }
        let k = weight.h;
        if input.h + 2 * pad < k {
            return Err(dim("h", k, input.h + 2 * pad));
        }
        if input.w + 2 * pad < k {
            return Err(dim("w", k, input.w + 2 * pad));
        }
        Ok(ConvGeometry {
            input,
            c_out: weight.n,
            k,
            stride,
            pad,
            oh: (input.h + 2 * pad - k) / stride + 1,
            ow: (input.w + 2 * pad - k) / stride + 1,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape::new(self.input.n, self.c_out, self.oh, self.ow)
    }
}

/// Copies every `h × w` plane into a zero border of width `p`.
fn pad_planes(x: &[f64], planes: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; planes * ph * pw];
    for i in 0..planes {
        for y in 0..h {
            out[i * ph * pw + (y + p) * pw + p..][..w].copy_from_slice(&x[i * h * w + y * w..][..w]);
        }
    }
    out
}

/// `dst[o] += Σ_k wr[k] · row[o·s + k]`
fn accumulate_row(dst: &mut [f64], row: &[f64], wr: &[f64], s: usize) {
    let n = dst.len();
    if let (&[a, b, c], 1) = (wr, s) {
        for (((d, &x0), &x1), &x2) in dst.iter_mut().zip(&row[..n]).zip(&row[1..n + 1]).zip(&row[2..n + 2]) {
            *d += a * x0 + b * x1 + c * x2;
        }
        return;
    }
    for (o, d) in dst.iter_mut().enumerate() {
        let taps = &row[o * s..o * s + wr.len()];
        *d += wr.iter().zip(taps).map(|(k, x)| k * x).sum::<f64>();
    }
}

/// `dst[o] += Σ k[3·ky + kx] · rows[ky][o·s + kx]` for a 3×3 kernel.
fn accumulate_3x3(dst: &mut [f64], rows: [&[f64]; 3], k: &[f64], s: usize) {
    let k: &[f64; 9] = k.try_into().unwrap();
    let n = dst.len();
    let span = (n - 1) * s + 3;
    let [r0, r1, r2] = rows.map(|r| &r[..span]);
    if s == 1 {
        let (a0, a1, a2) = (&r0[..n], &r0[1..n + 1], &r0[2..n + 2]);
        let (b0, b1, b2) = (&r1[..n], &r1[1..n + 1], &r1[2..n + 2]);
        let (c0, c1, c2) = (&r2[..n], &r2[1..n + 1], &r2[2..n + 2]);
        for o in 0..n {
            dst[o] += (k[0] * a0[o] + k[1] * a1[o] + k[2] * a2[o])
                + (k[3] * b0[o] + k[4] * b1[o] + k[5] * b2[o])
                + (k[6] * c0[o] + k[7] * c1[o] + k[8] * c2[o]);
        }
        return;
    }
    for (o, d) in dst.iter_mut().enumerate() {
        let i = o * s;
        *d += (k[0] * r0[i] + k[1] * r0[i + 1] + k[2] * r0[i + 2])
            + (k[3] * r1[i] + k[4] * r1[i + 1] + k[5] * r1[i + 2])
            + (k[6] * r2[i] + k[7] * r2[i + 1] + k[8] * r2[i + 2]);
    }
}

fn conv2d_forward(geo: &ConvGeometry, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
    let Shape { n, c, h, w } = geo.input;
    let (oh, ow, kk, s, p) = (geo.oh, geo.ow, geo.k, geo.stride, geo.pad);
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let xp = pad_planes(x, n * c, h, w, p);
    let mut out = vec![0.0; n * geo.c_out * oh * ow];
    for ni in 0..n {
        for co in 0..geo.c_out {
            let plane = &mut out[(ni * geo.c_out + co) * oh * ow..][..oh * ow];
            plane.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..c {
                let x_base = (ni * c + ci) * ph * pw;
                let k_base = (co * c + ci) * kk * kk;
                for oy in 0..oh {
                    let dst = &mut plane[oy * ow..(oy + 1) * ow];
                    let row = |ky: usize| &xp[x_base + (oy * s + ky) * pw..][..pw];
                    if kk == 3 {
                        accumulate_3x3(dst, [row(0), row(1), row(2)], &k[k_base..k_base + 9], s);
                        continue;
                    }
                    for ky in 0..kk {
                        accumulate_row(dst, row(ky), &k[k_base + ky * kk..][..kk], s);
                    }
                }
            }
        }
    }
    out
}

fn conv2d_grad_input(geo: &ConvGeometry, g: &[f64], k: &[f64], dst: &mut [f64]) {
    let Shape { n, c, h, w } = geo.input;
    let (oh, ow, kk, s, p) = (geo.oh, geo.ow, geo.k, geo.stride, geo.pad);
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut dp = vec![0.0; n * c * ph * pw];
    for ni in 0..n {
        for co in 0..geo.c_out {
            let gp = &g[(ni * geo.c_out + co) * oh * ow..][..oh * ow];
            for ci in 0..c {
                let x_base = (ni * c + ci) * ph * pw;
                let k_base = (co * c + ci) * kk * kk;
                for oy in 0..oh {
                    let grow = &gp[oy * ow..(oy + 1) * ow];
                    for ky in 0..kk {
                        let row = &mut dp[x_base + (oy * s + ky) * pw..][..pw];
                        let wr = &k[k_base + ky * kk..][..kk];
                        if let (&[a, b, c], 1) = (wr, s) {
                            // row[j] += a·g[j] + b·g[j−1] + c·g[j−2]
                            let head = &mut row[..ow + 2];
                            head[0] += a * grow[0];
                            if ow > 1 {
                                head[1] += a * grow[1] + b * grow[0];
                            }
                            for (j, d) in head.iter_mut().enumerate().take(ow).skip(2) {
                                *d += a * grow[j] + b * grow[j - 1] + c * grow[j - 2];
                            }
                            if ow > 1 {
                                head[ow] += b * grow[ow - 1] + c * grow[ow - 2];
                            } else {
                                head[ow] += b * grow[0];
                            }
                            head[ow + 1] += c * grow[ow - 1];
                            continue;
                        }
                        for (kx, &wv) in wr.iter().enumerate() {
                            if s == 1 {
                                for (d, &gv) in row[kx..kx + ow].iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (d, &gv) in row[kx..].iter_mut().step_by(s).zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for i in 0..n * c {
        for y in 0..h {
            let src = &dp[i * ph * pw + (y + p) * pw + p..][..w];
            for (d, &v) in dst[i * h * w + y * w..][..w].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
}

fn conv2d_grad_weight(geo: &ConvGeometry, g: &[f64], x: &[f64], dst: &mut [f64]) {
    let Shape { n, c, h, w } = geo.input;
    let (oh, ow, kk, s, p) = (geo.oh, geo.ow, geo.k, geo.stride, geo.pad);
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let xp = pad_planes(x, n * c, h, w, p);
    for ni in 0..n {
        for co in 0..geo.c_out {
            let gp = &g[(ni * geo.c_out + co) * oh * ow..][..oh * ow];
            for ci in 0..c {
                let x_base = (ni * c + ci) * ph * pw;
                let kd = &mut dst[(co * c + ci) * kk * kk..][..kk * kk];
                for oy in 0..oh {
                    let grow = &gp[oy * ow..(oy + 1) * ow];
                    if (kk, s) == (3, 1) {
                        let rows = [0, 1, 2].map(|ky| &xp[x_base + (oy + ky) * pw..][..ow + 2]);
                        let mut acc = [0.0; 9];
                        for (o, &gv) in grow.iter().enumerate() {
                            for (ky, r) in rows.iter().enumerate() {
                                acc[3 * ky] += gv * r[o];
                                acc[3 * ky + 1] += gv * r[o + 1];
                                acc[3 * ky + 2] += gv * r[o + 2];
                            }
                        }
                        for (d, a) in kd.iter_mut().zip(acc) {
                            *d += a;
                        }
                        continue;
                    }
                    for ky in 0..kk {
                        let row = &xp[x_base + (oy * s + ky) * pw..][..pw];
                        for kx in 0..kk {
                            kd[ky * kk + kx] += if s == 1 {
                                dot(grow, &row[kx..kx + ow])
                            } else {
                                grow.iter().zip(row[kx..].iter().step_by(s)).map(|(a, b)| a * b).sum()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            lanes[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn conv2d_grad_bias(geo: &ConvGeometry, g: &[f64], dst: &mut [f64]) {
    let plane = geo.oh * geo.ow;
    for ni in 0..geo.input.n {
        for (co, d) in dst.iter_mut().enumerate() {
            *d += g[(ni * geo.c_out + co) * plane..][..plane].iter().sum::<f64>();
        }
    }
}
