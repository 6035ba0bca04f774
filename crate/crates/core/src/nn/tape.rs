//! Reverse-mode differentiation over dense matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 × 1`. Ops append a node to the
//! tape and [`Tape::backward`] walks the nodes in reverse. Shape mismatches
//! are programming errors and panic.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::moments::{phi, phi_prime};
use crate::pscan::{parallel_scan_buffer, ScanBuffer};
use crate::types::expm;

pub type Mat = DMatrix<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct GruCache {
    x: Mat,
    r: Mat,
    z: Mat,
    n: Mat,
    /// `h_{t-1} W_hn + b_hn`, the candidate's recurrent term before gating.
    hn: Mat,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    Square(Var),
    Phi(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Sum(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Gru { x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, cache: Box<GruCache> },
    AffineScan(Var, Var, Var),
    Expm(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(a: &Mat, b: &Mat, what: &str) {
    assert!(a.shape() == b.shape(), "{what}: shapes {:?} and {:?} differ", a.shape(), b.shape());
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Mat::from_element(1, 1, v))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.ncols() == vb.nrows(), "matmul: {:?} by {:?}", va.shape(), vb.shape());
        let v = va * vb;
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.nrows() == 1 && vr.ncols() == va.ncols(), "add_row: {:?} and {:?}", va.shape(), vr.shape());
        let mut v = va.clone();
        for mut r in v.row_iter_mut() {
            r += vr;
        }
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.nrows() == 1 && vr.ncols() == va.ncols(), "mul_row: {:?} and {:?}", va.shape(), vr.shape());
        let mut v = va.clone();
        for mut r in v.row_iter_mut() {
            r.component_mul_assign(vr);
        }
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    /// Multiplies every column of `a` elementwise by a `k × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert!(vc.ncols() == 1 && vc.nrows() == va.nrows(), "mul_col: {:?} and {:?}", va.shape(), vc.shape());
        let mut v = va.clone();
        for mut c in v.column_iter_mut() {
            c.component_mul_assign(vc);
        }
        self.push(v, Op::MulCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::Shift(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// `(1 - e^{-x}) / x` elementwise.
    pub fn phi(&mut self, a: Var) -> Var {
        self.map(a, phi, Op::Phi(a))
    }

    /// Row-wise softmax of `a + mask`. Entries with a `-inf` mask get exactly
    /// zero weight and zero gradient.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mat>) -> Var {
        let mut v = self.value(a).clone();
        if let Some(m) = mask {
            same_shape(&v, m, "softmax mask");
            v += m;
        }
        for mut r in v.row_iter_mut() {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(mx.is_finite(), "softmax row has no unmasked entry");
            r.apply(|x| *x = (*x - mx).exp());
            let s: f64 = r.sum();
            r /= s;
        }
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Row-wise standardization without an affine part.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.ncols() as f64;
        let mut v = va.clone();
        let mut inv = Vec::with_capacity(va.nrows());
        for mut r in v.row_iter_mut() {
            let mean = r.sum() / n;
            r.add_scalar_mut(-mean);
            let var = r.norm_squared() / n;
            let s = 1.0 / (var + LN_EPS).sqrt();
            r *= s;
            inv.push(s);
        }
        self.push(v, Op::LayerNorm(a, inv), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums as a `1 × n` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Mat::from_fn(1, va.ncols(), |_, j| va.column(j).sum());
        self.push(v, Op::SumRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let vp = self.value(p);
            assert!(vp.nrows() == rows, "concat_cols: row counts differ");
            v.columns_mut(at, vp.ncols()).copy_from(vp);
            at += vp.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).columns(start, len).into_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    /// Row `i` of the result is row `index[i]` of `a`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let va = self.value(a);
        let v = Mat::from_fn(index.len(), va.ncols(), |i, j| va[(index[i], j)]);
        self.push(v, Op::GatherRows(a, index.to_vec()), &[a])
    }

    /// Gated recurrent unit over the rows of `x`, starting from a zero state.
    /// Gate columns are ordered reset, update, candidate.
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Var {
        let xv = self.value(x).clone();
        let whh = self.value(w_hh).clone();
        let h = whh.nrows();
        assert!(whh.ncols() == 3 * h, "gru: recurrent weights must be h × 3h");
        assert!(self.value(w_ih).shape() == (xv.ncols(), 3 * h), "gru: input weights must be n × 3h");
        assert!(self.value(b_ih).shape() == (1, 3 * h) && self.value(b_hh).shape() == (1, 3 * h), "gru: biases");
        let mut gi = &xv * self.value(w_ih);
        let bi = self.value(b_ih).clone();
        for mut r in gi.row_iter_mut() {
            r += &bi;
        }
        let bh = self.value(b_hh).clone();
        let t = xv.nrows();
        let (mut rr, mut zz, mut nn, mut hnn) = (Mat::zeros(t, h), Mat::zeros(t, h), Mat::zeros(t, h), Mat::zeros(t, h));
        let mut out = Mat::zeros(t, h);
        let mut prev = Mat::zeros(1, h);
        for s in 0..t {
            let gh = &prev * &whh + &bh;
            for j in 0..h {
                let r = sigmoid(gi[(s, j)] + gh[(0, j)]);
                let z = sigmoid(gi[(s, h + j)] + gh[(0, h + j)]);
                let hn = gh[(0, 2 * h + j)];
                let n = (gi[(s, 2 * h + j)] + r * hn).tanh();
                let hv = (1.0 - z) * n + z * prev[(0, j)];
                rr[(s, j)] = r;
                zz[(s, j)] = z;
                nn[(s, j)] = n;
                hnn[(s, j)] = hn;
                out[(s, j)] = hv;
            }
            prev = out.rows(s, 1).into_owned();
        }
        let cache = Box::new(GruCache { x: xv, r: rr, z: zz, n: nn, hn: hnn });
        self.push(out, Op::Gru { x, w_ih, w_hh, b_ih, b_hh, cache }, &[x, w_ih, w_hh, b_ih, b_hh])
    }

    /// States of `s_{i+1} = a_i ⊙ s_i + b_i` with `s_0 = init`. `a` and `b`
    /// are `(k-1) × d`, `init` is `1 × d`; the result is `k × d`.
    pub fn affine_scan(&mut self, a: Var, b: Var, init: Var) -> Var {
        let (va, vb, v0) = (self.value(a), self.value(b), self.value(init));
        same_shape(va, vb, "affine_scan");
        let d = v0.ncols();
        assert!(v0.nrows() == 1 && va.ncols() == d, "affine_scan: init must be 1 × d");
        let k = va.nrows() + 1;
        let mut out = Mat::zeros(k, d);
        out.row_mut(0).copy_from(v0);
        if k > 1 {
            let mut buf = ScanBuffer { dim: d, scale: Vec::with_capacity((k - 1) * d), offset: Vec::with_capacity((k - 1) * d) };
            for i in 0..k - 1 {
                buf.scale.extend(va.row(i).iter());
                buf.offset.extend(vb.row(i).iter());
            }
            let pre = parallel_scan_buffer(&buf).expect("nonempty scan");
            for i in 0..k - 1 {
                for j in 0..d {
                    out[(i + 1, j)] = pre.scale[i * d + j] * v0[(0, j)] + pre.offset[i * d + j];
                }
            }
        }
        self.push(out, Op::AffineScan(a, b, init), &[a, b, init])
    }

    /// Matrix exponential of a square matrix.
    pub fn expm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.is_square(), "expm of a non-square matrix");
        let v = expm(va);
        self.push(v, Op::Expm(a), &[a])
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, found shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_element(1, 1, 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => *e += d,
                slot => *slot = Some(d),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g * self.value(*b).transpose());
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).transpose() * g);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.component_mul(self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, g.component_mul(self.value(*a)));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.needs(*row) {
                    acc(*row, Mat::from_fn(1, g.ncols(), |_, j| g.column(j).sum()));
                }
            }
            Op::MulRow(a, row) => {
                let vr = self.value(*row);
                if self.needs(*a) {
                    let mut d = g.clone();
                    for mut r in d.row_iter_mut() {
                        r.component_mul_assign(vr);
                    }
                    acc(*a, d);
                }
                if self.needs(*row) {
                    let va = self.value(*a);
                    acc(*row, Mat::from_fn(1, g.ncols(), |_, j| g.column(j).dot(&va.column(j))));
                }
            }
            Op::MulCol(a, col) => {
                let vc = self.value(*col);
                if self.needs(*a) {
                    let mut d = g.clone();
                    for mut c in d.column_iter_mut() {
                        c.component_mul_assign(vc);
                    }
                    acc(*a, d);
                }
                if self.needs(*col) {
                    let va = self.value(*a);
                    acc(*col, Mat::from_fn(g.nrows(), 1, |i, _| g.row(i).dot(&va.row(i))));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g.component_mul(y)),
            Op::Log(a) => acc(*a, g.component_div(self.value(*a))),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |g, x| g * gelu_prime(x))),
            Op::Sqrt(a) => acc(*a, g.zip_map(y, |g, s| 0.5 * g / s)),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |g, x| 2.0 * g * x)),
            Op::Phi(a) => acc(*a, g.zip_map(self.value(*a), |g, x| g * phi_prime(x))),
            Op::Softmax(a) => {
                let mut d = g.component_mul(y);
                for (i, mut r) in d.row_iter_mut().enumerate() {
                    let s: f64 = r.sum();
                    for (j, v) in r.iter_mut().enumerate() {
                        *v -= y[(i, j)] * s;
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm(a, inv) => {
                let n = y.ncols() as f64;
                let mut d = g.clone();
                for (i, mut r) in d.row_iter_mut().enumerate() {
                    let sg: f64 = r.sum();
                    let sgy: f64 = r.iter().zip(y.row(i).iter()).map(|(a, b)| a * b).sum();
                    for (j, v) in r.iter_mut().enumerate() {
                        *v = inv[i] * (*v - sg / n - y[(i, j)] * sgy / n);
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Mat::from_element(r, c, g[(0, 0)]));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Mat::from_fn(r, c, |_, j| g[(0, j)]));
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let c = self.value(p).ncols();
                    if self.needs(p) {
                        acc(p, g.columns(at, c).into_owned());
                    }
                    at += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                d.columns_mut(*start, g.ncols()).copy_from(g);
                acc(*a, d);
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for (i, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        d[(src, j)] += g[(i, j)];
                    }
                }
                acc(*a, d);
            }
            Op::Gru { x, w_ih, w_hh, b_ih, b_hh, cache } => {
                let whh = self.value(*w_hh);
                let h = whh.nrows();
                let t = y.nrows();
                let mut dgi = Mat::zeros(t, 3 * h);
                let mut dgh = Mat::zeros(t, 3 * h);
                let mut carry = Mat::zeros(1, h);
                for s in (0..t).rev() {
                    let mut dh = g.rows(s, 1).into_owned();
                    dh += &carry;
                    let mut dprev = Mat::zeros(1, h);
                    for j in 0..h {
                        let (r, z, n, hn) = (cache.r[(s, j)], cache.z[(s, j)], cache.n[(s, j)], cache.hn[(s, j)]);
                        let hp = if s > 0 { y[(s - 1, j)] } else { 0.0 };
                        let dn = dh[(0, j)] * (1.0 - z);
                        let dz = dh[(0, j)] * (hp - n);
                        dprev[(0, j)] = dh[(0, j)] * z;
                        let dn_pre = dn * (1.0 - n * n);
                        let dr_pre = dn_pre * hn * r * (1.0 - r);
                        let dz_pre = dz * z * (1.0 - z);
                        dgi[(s, j)] = dr_pre;
                        dgi[(s, h + j)] = dz_pre;
                        dgi[(s, 2 * h + j)] = dn_pre;
                        dgh[(s, j)] = dr_pre;
                        dgh[(s, h + j)] = dz_pre;
                        dgh[(s, 2 * h + j)] = dn_pre * r;
                    }
                    dprev += dgh.rows(s, 1) * whh.transpose();
                    carry = dprev;
                }
                if self.needs(*x) {
                    acc(*x, &dgi * self.value(*w_ih).transpose());
                }
                if self.needs(*w_ih) {
                    acc(*w_ih, cache.x.transpose() * &dgi);
                }
                if self.needs(*b_ih) {
                    acc(*b_ih, Mat::from_fn(1, 3 * h, |_, j| dgi.column(j).sum()));
                }
                if self.needs(*w_hh) {
                    // Previous states: zero row then the outputs shifted by one.
                    let mut hp = Mat::zeros(t, h);
                    if t > 1 {
                        hp.rows_mut(1, t - 1).copy_from(&y.rows(0, t - 1));
                    }
                    acc(*w_hh, hp.transpose() * &dgh);
                }
                if self.needs(*b_hh) {
                    acc(*b_hh, Mat::from_fn(1, 3 * h, |_, j| dgh.column(j).sum()));
                }
            }
            Op::AffineScan(a, b, init) => {
                let va = self.value(*a);
                let k = y.nrows();
                let d = y.ncols();
                let mut da = Mat::zeros(k - 1, d);
                let mut db = Mat::zeros(k - 1, d);
                let mut carry = g.rows(k - 1, 1).into_owned();
                for i in (0..k - 1).rev() {
                    for j in 0..d {
                        da[(i, j)] = carry[(0, j)] * y[(i, j)];
                        db[(i, j)] = carry[(0, j)];
                        carry[(0, j)] = g[(i, j)] + carry[(0, j)] * va[(i, j)];
                    }
                }
                if k > 1 {
                    acc(*a, da);
                    acc(*b, db);
                }
                acc(*init, carry);
            }
            Op::Expm(a) => {
                // Adjoint of the exponential: upper-right block of
                // expm([[Aᵀ, G], [0, Aᵀ]]).
                let at = self.value(*a).transpose();
                let n = at.nrows();
                let mut big = Mat::zeros(2 * n, 2 * n);
                big.view_mut((0, 0), (n, n)).copy_from(&at);
                big.view_mut((n, n), (n, n)).copy_from(&at);
                big.view_mut((0, n), (n, n)).copy_from(g);
                let e = expm(&big);
                acc(*a, e.view((0, n), (n, n)).into_owned());
            }
        }
    }
}
