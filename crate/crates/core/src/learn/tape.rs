//! Reverse-mode tape over dense `f64` matrices.
//!
//! Every value is a 2-D array. Sequence batches are stacked as `B·T` rows
//! with channels as columns; sequence-aware ops take `seq_len` to find the
//! boundaries. Complex tensors are stored as `[re | im]` column halves and
//! their gradients use `G = ∂L/∂re + i·∂L/∂im`.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use num_complex::Complex64;

use super::adjoint::scan_backward;
use super::params::ParamStore;
use crate::error::{Result, SsmError};
use crate::exec::{causal_conv_fft, scan_with};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Expm1,
    Ln,
    Sqrt,
    Rsqrt,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Softplus,
    Silu,
    Square,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Expm1 => x.exp_m1(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Rsqrt => 1.0 / x.sqrt(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Square => x * x,
        }
    }

    /// `dy/dx` given input and output.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Expm1 => y + 1.0,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Rsqrt => -0.5 * y / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Square => 2.0 * x,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    TileCols(Var, usize),
    RepeatEach(Var, usize),
    GroupSumCols(Var, usize),
    Scan { a: Var, d: Var, seq_len: usize },
    CScan { a: Var, d: Var, seq_len: usize },
    CMul(Var, Var),
    CDiv(Var, Var),
    CExp(Var),
    CConj(Var),
    CPowers(Var),
    CausalConv { u: Var, k: Var, seq_len: usize },
    FftConv { u: Var, k: Var, seq_len: usize },
    Shift { u: Var, shift: usize, seq_len: usize },
    MeanPool { u: Var, seq_len: usize, lengths: Vec<usize> },
    LastPool { u: Var, seq_len: usize, lengths: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Array2<f64> },
    Opaque { name: String, _inputs: Vec<Var> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Computation record. Build a graph with the op methods, then call
/// [`Tape::backward`] on a `1×1` result.
pub struct Tape {
    nodes: Vec<Node>,
    workers: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Output shape of a broadcast binary op.
fn bshape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sum `g` down to `shape` along broadcast axes.
fn sum_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn split_halves(x: &Array2<f64>) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
    let c = x.ncols();
    assert!(c % 2 == 0, "complex tensor needs an even column count, got {c}");
    (x.slice(s![.., ..c / 2]), x.slice(s![.., c / 2..]))
}

fn join_halves(re: Array2<f64>, im: Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[re.view(), im.view()]).expect("halves")
}

/// Broadcast both complex halves of `a` and `b` to a common shape and map.
fn cbinary(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(Complex64, Complex64) -> Complex64,
) -> Array2<f64> {
    let (ar, ai) = split_halves(a);
    let (br, bi) = split_halves(b);
    let shape = bshape(ar.dim(), br.dim());
    let (ar, ai, br, bi) = (
        ar.broadcast(shape).unwrap(),
        ai.broadcast(shape).unwrap(),
        br.broadcast(shape).unwrap(),
        bi.broadcast(shape).unwrap(),
    );
    let mut re = Array2::zeros(shape);
    let mut im = Array2::zeros(shape);
    for ((i, j), r) in re.indexed_iter_mut() {
        let z = f(Complex64::new(ar[[i, j]], ai[[i, j]]), Complex64::new(br[[i, j]], bi[[i, j]]));
        *r = z.re;
        im[[i, j]] = z.im;
    }
    join_halves(re, im)
}

fn cget(x: &Array2<f64>, i: usize, j: usize) -> Complex64 {
    let h = x.ncols() / 2;
    Complex64::new(x[[i, j]], x[[i, j + h]])
}

fn to_complex(x: ArrayView2<'_, f64>) -> Array2<Complex64> {
    let h = x.ncols() / 2;
    Array2::from_shape_fn((x.nrows(), h), |(i, j)| Complex64::new(x[[i, j]], x[[i, j + h]]))
}

fn from_complex(z: &Array2<Complex64>) -> Array2<f64> {
    join_halves(z.mapv(|v| v.re), z.mapv(|v| v.im))
}

/// Reduce a complex gradient to the half-shape of an input.
fn csum_to(g: Array2<f64>, half_shape: (usize, usize)) -> Array2<f64> {
    let (gr, gi) = split_halves(&g);
    join_halves(sum_to(gr.to_owned(), half_shape), sum_to(gi.to_owned(), half_shape))
}

fn half_dim(x: &Array2<f64>) -> (usize, usize) {
    (x.nrows(), x.ncols() / 2)
}

fn reverse_seqs(x: ArrayView2<'_, f64>, seq_len: usize) -> Array2<f64> {
    let mut out = x.to_owned();
    for b in 0..x.nrows() / seq_len {
        let r0 = b * seq_len;
        out.slice_mut(s![r0..r0 + seq_len, ..]).assign(&x.slice(s![r0..r0 + seq_len;-1, ..]));
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), workers: 1 }
    }

    /// Worker count handed to the scan engine inside sequence ops.
    pub fn with_workers(workers: usize) -> Self {
        Tape { nodes: Vec::new(), workers: workers.max(1) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    /// Parameter node; its gradient flows back into `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store.index(name).ok_or_else(|| SsmError::UnknownParam(name.to_string()))?;
        Ok(self.push(store.view_at(idx).to_owned(), Op::Param(idx)))
    }

    /// A node whose backward rule is not registered.
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Array2<f64>) -> Var {
        self.push(value, Op::Opaque { name: name.to_string(), _inputs: inputs.to_vec() })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = bshape(av.dim(), bv.dim());
        let mut out = Array2::zeros(shape);
        Zip::from(&mut out)
            .and(&av.broadcast(shape).unwrap())
            .and(&bv.broadcast(shape).unwrap())
            .for_each(|o, &x, &y| *o = f(x, y));
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value + k;
        self.push(v, Op::AddScalar(a))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| f.apply(x));
        self.push(v, Op::Unary(a, f))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// `x · wᵀ`.
    pub fn matmul_bt(&mut self, x: Var, w: Var) -> Var {
        let v = self.nodes[x.0].value.dot(&self.nodes[w.0].value.t());
        self.push(v, Op::MatMulBt(x, w))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Column sums as a `1×C` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    /// Row sums as an `R×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows column counts");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows of `table` at `idx` (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let mut v = Array2::zeros((idx.len(), t.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&t.row(i));
        }
        self.push(v, Op::Gather(table, idx.to_vec()))
    }

    /// `out[:, j·C + i] = x[:, i]` for `j < n`.
    pub fn tile_cols(&mut self, a: Var, n: usize) -> Var {
        let x = &self.nodes[a.0].value;
        let views: Vec<_> = (0..n).map(|_| x.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("tile");
        self.push(v, Op::TileCols(a, n))
    }

    /// `out[:, i·n + k] = x[:, i]` for `k < n`.
    pub fn repeat_each(&mut self, a: Var, n: usize) -> Var {
        let x = &self.nodes[a.0].value;
        let (r, c) = x.dim();
        let v = Array2::from_shape_fn((r, c * n), |(i, j)| x[[i, j / n]]);
        self.push(v, Op::RepeatEach(a, n))
    }

    /// `out[:, i] = Σ_k x[:, i·g + k]`.
    pub fn group_sum_cols(&mut self, a: Var, g: usize) -> Var {
        let x = &self.nodes[a.0].value;
        let (r, c) = x.dim();
        assert!(c % g == 0, "group size {g} does not divide {c} columns");
        let mut v = Array2::zeros((r, c / g));
        for i in 0..r {
            for j in 0..c {
                v[[i, j / g]] += x[[i, j]];
            }
        }
        self.push(v, Op::GroupSumCols(a, g))
    }

    /// Real recurrence `x(k) = a(k) ⊙ x(k−1) + d(k)` per sequence.
    ///
    /// `a` has one row (shared) or as many rows as `d`.
    pub fn scan(&mut self, a: Var, d: Var, seq_len: usize) -> Result<Var> {
        let (av, dv) = (&self.nodes[a.0].value, &self.nodes[d.0].value);
        let mut out = Array2::zeros(dv.dim());
        for b in 0..dv.nrows() / seq_len {
            let r = b * seq_len..(b + 1) * seq_len;
            let ab = if av.nrows() == 1 { av.view() } else { av.slice(s![r.clone(), ..]) };
            let (x, _) = scan_with(ab, dv.slice(s![r.clone(), ..]), self.workers)?;
            out.slice_mut(s![r, ..]).assign(&x);
        }
        Ok(self.push(out, Op::Scan { a, d, seq_len }))
    }

    /// Complex recurrence on `[re | im]` tensors.
    pub fn complex_scan(&mut self, a: Var, d: Var, seq_len: usize) -> Result<Var> {
        let ac = to_complex(self.nodes[a.0].value.view());
        let dc = to_complex(self.nodes[d.0].value.view());
        let mut out = Array2::<Complex64>::zeros(dc.dim());
        for b in 0..dc.nrows() / seq_len {
            let r = b * seq_len..(b + 1) * seq_len;
            let ab = if ac.nrows() == 1 { ac.view() } else { ac.slice(s![r.clone(), ..]) };
            let (x, _) = scan_with(ab, dc.slice(s![r.clone(), ..]), self.workers)?;
            out.slice_mut(s![r, ..]).assign(&x);
        }
        Ok(self.push(from_complex(&out), Op::CScan { a, d, seq_len }))
    }

    pub fn cmul(&mut self, a: Var, b: Var) -> Var {
        let v = cbinary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(v, Op::CMul(a, b))
    }

    pub fn cdiv(&mut self, a: Var, b: Var) -> Var {
        let v = cbinary(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        self.push(v, Op::CDiv(a, b))
    }

    pub fn cexp(&mut self, a: Var) -> Var {
        let z = to_complex(self.nodes[a.0].value.view()).mapv(|z| z.exp());
        self.push(from_complex(&z), Op::CExp(a))
    }

    pub fn cconj(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let (re, im) = split_halves(x);
        let v = join_halves(re.to_owned(), im.mapv(|v| -v));
        self.push(v, Op::CConj(a))
    }

    /// Real part of a complex tensor.
    pub fn creal(&mut self, a: Var) -> Var {
        let h = self.nodes[a.0].value.ncols() / 2;
        self.slice_cols(a, 0, h)
    }

    pub fn cimag(&mut self, a: Var) -> Var {
        let c = self.nodes[a.0].value.ncols();
        self.slice_cols(a, c / 2, c)
    }

    /// `out[j] = aʲ` for `j < len`, from a `1×2P` complex row.
    pub fn cpowers(&mut self, a: Var, len: usize) -> Var {
        let ac = to_complex(self.nodes[a.0].value.view());
        assert_eq!(ac.nrows(), 1, "cpowers takes a single row");
        let p = ac.ncols();
        let mut out = Array2::<Complex64>::zeros((len, p));
        for i in 0..p {
            let mut z = Complex64::new(1.0, 0.0);
            for j in 0..len {
                out[[j, i]] = z;
                z *= ac[[0, i]];
            }
        }
        self.push(from_complex(&out), Op::CPowers(a))
    }

    /// Depthwise causal FIR: `y[t,c] = Σ_w k[w,c] u[t−w,c]` within each sequence.
    pub fn causal_conv(&mut self, u: Var, k: Var, seq_len: usize) -> Var {
        let (uv, kv) = (&self.nodes[u.0].value, &self.nodes[k.0].value);
        assert_eq!(uv.ncols(), kv.ncols(), "causal_conv channels");
        let mut out = Array2::zeros(uv.dim());
        for b in 0..uv.nrows() / seq_len {
            let r0 = b * seq_len;
            for t in 0..seq_len {
                for w in 0..kv.nrows().min(t + 1) {
                    for c in 0..uv.ncols() {
                        out[[r0 + t, c]] += kv[[w, c]] * uv[[r0 + t - w, c]];
                    }
                }
            }
        }
        self.push(out, Op::CausalConv { u, k, seq_len })
    }

    /// Depthwise causal convolution with a `T×C` kernel via FFT.
    pub fn fft_conv(&mut self, u: Var, k: Var, seq_len: usize) -> Var {
        let v = causal_conv_fft(self.nodes[k.0].value.view(), self.nodes[u.0].value.view(), seq_len);
        self.push(v, Op::FftConv { u, k, seq_len })
    }

    /// `y(t) = u(t − shift)` within each sequence, zero-filled.
    pub fn shift(&mut self, u: Var, shift: usize, seq_len: usize) -> Var {
        let uv = &self.nodes[u.0].value;
        let mut out = Array2::zeros(uv.dim());
        for b in 0..uv.nrows() / seq_len {
            let r0 = b * seq_len;
            for t in shift..seq_len {
                out.row_mut(r0 + t).assign(&uv.row(r0 + t - shift));
            }
        }
        self.push(out, Op::Shift { u, shift, seq_len })
    }

    /// Mean over the first `lengths[b]` rows of each sequence.
    pub fn mean_pool(&mut self, u: Var, seq_len: usize, lengths: &[usize]) -> Var {
        let uv = &self.nodes[u.0].value;
        let mut out = Array2::zeros((lengths.len(), uv.ncols()));
        for (b, &len) in lengths.iter().enumerate() {
            let r0 = b * seq_len;
            let m = uv.slice(s![r0..r0 + len, ..]).sum_axis(Axis(0)) / len as f64;
            out.row_mut(b).assign(&m);
        }
        self.push(out, Op::MeanPool { u, seq_len, lengths: lengths.to_vec() })
    }

    /// Row `lengths[b] − 1` of each sequence.
    pub fn last_pool(&mut self, u: Var, seq_len: usize, lengths: &[usize]) -> Var {
        let uv = &self.nodes[u.0].value;
        let mut out = Array2::zeros((lengths.len(), uv.ncols()));
        for (b, &len) in lengths.iter().enumerate() {
            out.row_mut(b).assign(&uv.row(b * seq_len + len - 1));
        }
        self.push(out, Op::LastPool { u, seq_len, lengths: lengths.to_vec() })
    }

    /// Mean cross-entropy of row-wise logits against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.nrows() != labels.len() {
            return Err(SsmError::shape("cross_entropy labels", lv.nrows(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= lv.ncols()) {
            return Err(SsmError::LabelOutOfRange { label: l, n_classes: lv.ncols() });
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &label) in probs.rows_mut().into_iter().zip(labels) {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let v = Array2::from_elem((1, 1), loss / labels.len() as f64);
        Ok(self.push(v, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(SsmError::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Add parameter gradients into `store`'s buffer.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(idx), Some(Some(g))) = (&node.op, grads.grads.get(i)) {
                store.accumulate_grad(*idx, g.view());
            }
        }
    }

    fn backprop(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        let mut acc = |v: Var, delta: Array2<f64>| {
            debug_assert_eq!(delta.dim(), self.nodes[v.0].value.dim(), "gradient shape at node {}", v.0);
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, sum_to(g.clone(), val(*a).dim()));
                acc(*b, sum_to(g.clone(), val(*b).dim()));
            }
            Op::Sub(a, b) => {
                acc(*a, sum_to(g.clone(), val(*a).dim()));
                acc(*b, sum_to(-g, val(*b).dim()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let shape = g.dim();
                let ga = g * &bv.broadcast(shape).unwrap();
                let gb = g * &av.broadcast(shape).unwrap();
                acc(*a, sum_to(ga, av.dim()));
                acc(*b, sum_to(gb, bv.dim()));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let shape = g.dim();
                let bb = bv.broadcast(shape).unwrap();
                let ga = g / &bb;
                let gb = -(&ga * out);
                acc(*a, sum_to(ga, av.dim()));
                acc(*b, sum_to(gb, bv.dim()));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Unary(a, f) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(*a)).and(out).for_each(|gv, &x, &y| *gv *= f.deriv(x, y));
                acc(*a, ga);
            }
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::MatMulBt(x, w) => {
                acc(*x, g.dot(val(*w)));
                acc(*w, g.t().dot(val(*x)));
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::SumRows(a) | Op::SumCols(a) | Op::SumAll(a) => {
                let shape = val(*a).dim();
                acc(*a, g.broadcast(shape).unwrap().to_owned());
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g * out;
                let dots = ga.sum_axis(Axis(1));
                for (mut row, (yrow, d)) in ga.rows_mut().into_iter().zip(out.rows().into_iter().zip(dots.iter())) {
                    Zip::from(&mut row).and(&yrow).for_each(|gv, &y| *gv -= y * d);
                }
                acc(*a, ga);
            }
            Op::SliceCols(a, s0, s1) => {
                let mut ga = Array2::zeros(val(*a).dim());
                ga.slice_mut(s![.., *s0..*s1]).assign(g);
                acc(*a, ga);
            }
            Op::SliceRows(a, s0, s1) => {
                let mut ga = Array2::zeros(val(*a).dim());
                ga.slice_mut(s![*s0..*s1, ..]).assign(g);
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    acc(*p, g.slice(s![.., c0..c0 + w]).to_owned());
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    acc(*p, g.slice(s![r0..r0 + h, ..]).to_owned());
                    r0 += h;
                }
            }
            Op::Gather(table, idx) => {
                let mut gt = Array2::zeros(val(*table).dim());
                for (r, &k) in idx.iter().enumerate() {
                    let mut row = gt.row_mut(k);
                    row += &g.row(r);
                }
                acc(*table, gt);
            }
            Op::TileCols(a, n) => {
                let c = val(*a).ncols();
                let mut ga = Array2::zeros(val(*a).dim());
                for j in 0..*n {
                    ga += &g.slice(s![.., j * c..(j + 1) * c]);
                }
                acc(*a, ga);
            }
            Op::RepeatEach(a, n) => {
                let mut ga = Array2::zeros(val(*a).dim());
                for ((r, j), v) in g.indexed_iter() {
                    ga[[r, j / n]] += v;
                }
                acc(*a, ga);
            }
            Op::GroupSumCols(a, gsz) => {
                let shape = val(*a).dim();
                let ga = Array2::from_shape_fn(shape, |(r, j)| g[[r, j / gsz]]);
                acc(*a, ga);
            }
            Op::Scan { a, d, seq_len } => {
                let (av, dv) = (val(*a), val(*d));
                let mut ga = Array2::zeros(av.dim());
                let mut gd = Array2::zeros(dv.dim());
                for b in 0..dv.nrows() / seq_len {
                    let r = b * seq_len..(b + 1) * seq_len;
                    let ab = if av.nrows() == 1 { av.view() } else { av.slice(s![r.clone(), ..]) };
                    let (gab, gdb) =
                        scan_backward(ab, out.slice(s![r.clone(), ..]), g.slice(s![r.clone(), ..]), self.workers)?;
                    if av.nrows() == 1 {
                        ga += &gab;
                    } else {
                        ga.slice_mut(s![r.clone(), ..]).assign(&gab);
                    }
                    gd.slice_mut(s![r, ..]).assign(&gdb);
                }
                acc(*a, ga);
                acc(*d, gd);
            }
            Op::CScan { a, d, seq_len } => {
                let ac = to_complex(val(*a).view());
                let xc = to_complex(out.view());
                let gc = to_complex(g.view());
                let mut ga = Array2::<Complex64>::zeros(ac.dim());
                let mut gd = Array2::<Complex64>::zeros(xc.dim());
                for b in 0..xc.nrows() / seq_len {
                    let r = b * seq_len..(b + 1) * seq_len;
                    let ab = if ac.nrows() == 1 { ac.view() } else { ac.slice(s![r.clone(), ..]) };
                    let (gab, gdb) =
                        scan_backward(ab, xc.slice(s![r.clone(), ..]), gc.slice(s![r.clone(), ..]), self.workers)?;
                    if ac.nrows() == 1 {
                        ga += &gab;
                    } else {
                        ga.slice_mut(s![r.clone(), ..]).assign(&gab);
                    }
                    gd.slice_mut(s![r, ..]).assign(&gdb);
                }
                acc(*a, from_complex(&ga));
                acc(*d, from_complex(&gd));
            }
            Op::CMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = cbinary(g, bv, |g, b| g * b.conj());
                let gb = cbinary(g, av, |g, a| g * a.conj());
                acc(*a, csum_to(ga, half_dim(av)));
                acc(*b, csum_to(gb, half_dim(bv)));
            }
            Op::CDiv(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = cbinary(g, bv, |g, b| g / b.conj());
                // G_b = −G ⊙ conj(z / b)
                let zb = cbinary(out, bv, |z, b| z / b);
                let gb = cbinary(g, &zb, |g, w| -(g * w.conj()));
                acc(*a, csum_to(ga, half_dim(av)));
                acc(*b, csum_to(gb, half_dim(bv)));
            }
            Op::CExp(a) => acc(*a, cbinary(g, out, |g, z| g * z.conj())),
            Op::CConj(a) => {
                let (gr, gi) = split_halves(g);
                acc(*a, join_halves(gr.to_owned(), gi.mapv(|v| -v)));
            }
            Op::CPowers(a) => {
                let av = val(*a);
                let p = av.ncols() / 2;
                let mut ga = Array2::zeros(av.dim());
                for i in 0..p {
                    let mut sum = Complex64::new(0.0, 0.0);
                    for j in 1..out.nrows() {
                        let deriv = cget(out, j - 1, i) * j as f64;
                        sum += cget(g, j, i) * deriv.conj();
                    }
                    ga[[0, i]] = sum.re;
                    ga[[0, i + p]] = sum.im;
                }
                acc(*a, ga);
            }
            Op::CausalConv { u, k, seq_len } => {
                let (uv, kv) = (val(*u), val(*k));
                let mut gu = Array2::zeros(uv.dim());
                let mut gk = Array2::zeros(kv.dim());
                for b in 0..uv.nrows() / seq_len {
                    let r0 = b * seq_len;
                    for t in 0..*seq_len {
                        for w in 0..kv.nrows().min(t + 1) {
                            for c in 0..uv.ncols() {
                                let gv = g[[r0 + t, c]];
                                gu[[r0 + t - w, c]] += kv[[w, c]] * gv;
                                gk[[w, c]] += uv[[r0 + t - w, c]] * gv;
                            }
                        }
                    }
                }
                acc(*u, gu);
                acc(*k, gk);
            }
            Op::FftConv { u, k, seq_len } => {
                let (uv, kv) = (val(*u), val(*k));
                let t = *seq_len;
                let grev = reverse_seqs(g.view(), t);
                let gu = reverse_seqs(causal_conv_fft(kv.view(), grev.view(), t).view(), t);
                let mut gk = Array2::zeros(kv.dim());
                let klen = kv.nrows().min(t);
                for b in 0..uv.nrows() / t {
                    let r = b * t..(b + 1) * t;
                    let corr = causal_conv_fft(uv.slice(s![r.clone(), ..]), grev.slice(s![r, ..]), t);
                    for j in 0..klen {
                        let mut row = gk.row_mut(j);
                        row += &corr.row(t - 1 - j);
                    }
                }
                acc(*u, gu);
                acc(*k, gk);
            }
            Op::Shift { u, shift, seq_len } => {
                let mut gu = Array2::zeros(val(*u).dim());
                for b in 0..g.nrows() / seq_len {
                    let r0 = b * seq_len;
                    for t in *shift..*seq_len {
                        gu.row_mut(r0 + t - shift).assign(&g.row(r0 + t));
                    }
                }
                acc(*u, gu);
            }
            Op::MeanPool { u, seq_len, lengths } => {
                let mut gu = Array2::zeros(val(*u).dim());
                for (b, &len) in lengths.iter().enumerate() {
                    let r0 = b * seq_len;
                    let gr = g.row(b).mapv(|v| v / len as f64);
                    for t in 0..len {
                        gu.row_mut(r0 + t).assign(&gr);
                    }
                }
                acc(*u, gu);
            }
            Op::LastPool { u, seq_len, lengths } => {
                let mut gu = Array2::zeros(val(*u).dim());
                for (b, &len) in lengths.iter().enumerate() {
                    gu.row_mut(b * seq_len + len - 1).assign(&g.row(b));
                }
                acc(*u, gu);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g[[0, 0]] / labels.len() as f64;
                let mut gl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gl[[r, l]] -= 1.0;
                }
                acc(*logits, gl * scale);
            }
            Op::Opaque { name, .. } => return Err(SsmError::UnregisteredOp(name.clone())),
        }
        Ok(())
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
