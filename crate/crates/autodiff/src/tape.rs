//! The recording tape.
//!
//! Every operation appends one node holding its primal value; `backward`
//! walks the nodes in reverse and accumulates adjoints additively. Nodes only
//! reference earlier nodes, so the graph is a DAG by construction.
//!
//! Shape mismatches between operands are programming errors and panic.

use crate::svd::PolarSvd;
use crate::tensor::{matmul_nt, matmul_tn, Gradients, Tensor};
use crate::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy(Var, Var),
    Sin(Var),
    Cos(Var),
    Powi(Var, i32),
    Sqrt(Var),
    Ln(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    RowSum(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    DivRows(Var, Var),
    BatchOuter(Var, Var),
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    ApplyLocal {
        state: Var,
        gate: Var,
        left: usize,
        k: usize,
        right: usize,
    },
    GroupSum {
        input: Var,
        left: usize,
        k: usize,
        right: usize,
    },
    Unitarize(Var, Box<PolarSvd>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-threaded recording of tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// An input leaf. Its adjoint is available from [`Adjoints`] but it is
    /// not reported among the parameter gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A named trainable leaf. Registering the same name twice accumulates
    /// both adjoints into a single gradient entry.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        self.push(t, Op::Param(name.into()))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    /// Multiplies every entry of `a` by the single entry of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(
            self.value(s).len(),
            1,
            "scale_by expects a one-element scale"
        );
        let c = self.value(s).data()[0];
        self.unary(a, |x| c * x, Op::ScaleBy(a, s))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn powi(&mut self, a: Var, n: i32) -> Var {
        self.unary(a, |x| x.powi(n), Op::Powi(a, n))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `[B, n] → [B]`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (b, n) = (t.rows(), t.cols());
        let out = t
            .data()
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect::<Vec<f64>>();
        debug_assert_eq!(out.len(), b);
        self.push(Tensor::vector(out), Op::RowSum(a))
    }

    /// `[m, k] · [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `[B, n] + [n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let t = self.value(a);
        let bv = self.value(bias);
        let n = t.cols();
        assert_eq!(bv.len(), n, "bias length mismatch");
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(a, bias))
    }

    /// `[B, n] / [B]`, each row divided by its own scalar.
    pub fn div_rows(&mut self, a: Var, r: Var) -> Var {
        let t = self.value(a);
        let rv = self.value(r);
        let n = t.cols();
        assert_eq!(rv.len(), t.rows(), "div_rows: divisor length mismatch");
        let mut out = t.clone();
        for (row, &d) in out.data_mut().chunks_mut(n).zip(rv.data()) {
            for o in row {
                *o /= d;
            }
        }
        self.push(out, Op::DivRows(a, r))
    }

    /// Row-wise outer product `[B, m] × [B, n] → [B, m·n]`, index `i·n + j`.
    pub fn batch_outer(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let rows = ta.rows();
        assert_eq!(rows, tb.rows(), "batch_outer: batch size mismatch");
        let (m, n) = (ta.cols(), tb.cols());
        let mut out = vec![0.0; rows * m * n];
        for r in 0..rows {
            let ar = &ta.data()[r * m..(r + 1) * m];
            let br = &tb.data()[r * n..(r + 1) * n];
            let o = &mut out[r * m * n..(r + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    o[i * n + j] = ar[i] * br[j];
                }
            }
        }
        self.push(Tensor::new(vec![rows, m * n], out), Op::BatchOuter(a, b))
    }

    /// Columns `start..start+len` of a `[B, n]` tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let (rows, n) = (t.rows(), t.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for row in t.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(
            Tensor::new(vec![rows, len], out),
            Op::SliceCols {
                input: a,
                start,
                len,
            },
        )
    }

    /// Column-wise concatenation of `[B, n_i]` (or `[B]`) tensors.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols: batch size mismatch");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.push(
            Tensor::new(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    /// Applies a `k×k` matrix to the middle index of a state viewed as
    /// `[B, left, k, right]`: `out[b,l,i,r] = Σ_j gate[i,j] · state[b,l,j,r]`.
    pub fn apply_local(
        &mut self,
        state: Var,
        gate: Var,
        left: usize,
        k: usize,
        right: usize,
    ) -> Var {
        let s = self.value(state);
        let g = self.value(gate);
        assert_eq!(g.shape(), &[k, k], "apply_local: gate must be k×k");
        let block = left * k * right;
        assert_eq!(s.cols(), block, "apply_local: state width mismatch");
        let mut out = vec![0.0; s.len()];
        for (src, dst) in s.data().chunks(block).zip(out.chunks_mut(block)) {
            apply_block(g.data(), src, dst, left, k, right);
        }
        let shape = s.shape().to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::ApplyLocal {
                state,
                gate,
                left,
                k,
                right,
            },
        )
    }

    /// Sums a `[B, left, k, right]` view over `left` and `right`, giving `[B, k]`.
    pub fn group_sum(&mut self, input: Var, left: usize, k: usize, right: usize) -> Var {
        let s = self.value(input);
        let block = left * k * right;
        assert_eq!(s.cols(), block, "group_sum: width mismatch");
        let rows = s.rows();
        let mut out = vec![0.0; rows * k];
        for (src, dst) in s.data().chunks(block).zip(out.chunks_mut(k)) {
            for l in 0..left {
                for i in 0..k {
                    let base = (l * k + i) * right;
                    dst[i] += src[base..base + right].iter().sum::<f64>();
                }
            }
        }
        self.push(
            Tensor::new(vec![rows, k], out),
            Op::GroupSum {
                input,
                left,
                k,
                right,
            },
        )
    }

    /// Orthogonal polar factor `U Vᵀ` of a square latent matrix.
    pub fn unitarize(&mut self, g: Var) -> Result<Var, DiffError> {
        let svd = PolarSvd::compute(self.value(g))?;
        let v = svd.polar();
        Ok(self.push(v, Op::Unitarize(g, Box::new(svd))))
    }

    /// Reverse sweep from a one-element output, returning parameter gradients.
    ///
    /// Fails if any parameter adjoint is NaN or infinite.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let adj = self.adjoints(loss)?;
        let grads = adj.gradients();
        if let Some(name) = grads.first_non_finite() {
            return Err(DiffError::NonFinite {
                param: name.to_string(),
            });
        }
        Ok(grads)
    }

    /// Reverse sweep from a one-element output keeping every node's adjoint.
    pub fn adjoints(&self, output: Var) -> Result<Adjoints<'_>, DiffError> {
        if self.value(output).len() != 1 {
            return Err(DiffError::NotScalar(self.value(output).shape().to_vec()));
        }
        Ok(self.adjoints_seeded(
            output,
            Tensor::filled(self.value(output).shape().to_vec(), 1.0),
        ))
    }

    /// Reverse sweep with an explicit seed adjoint for `output`.
    pub fn adjoints_seeded(&self, output: Var, seed: Tensor) -> Adjoints<'_> {
        assert_eq!(
            seed.shape(),
            self.value(output).shape(),
            "seed shape mismatch"
        );
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Adjoints { tape: self, adj }
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(adj, *a, g.zip_map(val(*b), |x, y| x * y));
                acc(adj, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(adj, *a, g.zip_map(bv, |x, y| x / y));
                let t = g.zip_map(out, |x, o| x * o);
                acc(adj, *b, t.zip_map(bv, |x, y| -x / y));
            }
            Op::Scale(a, c) => acc(adj, *a, g.map(|x| c * x)),
            Op::Offset(a) => acc(adj, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let c = val(*s).data()[0];
                acc(adj, *a, g.map(|x| c * x));
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, y)| x * y)
                    .sum();
                acc(adj, *s, Tensor::new(val(*s).shape().to_vec(), vec![ds]));
            }
            Op::Sin(a) => acc(adj, *a, g.zip_map(val(*a), |x, y| x * y.cos())),
            Op::Cos(a) => acc(adj, *a, g.zip_map(val(*a), |x, y| -x * y.sin())),
            Op::Powi(a, n) => {
                let n = *n;
                acc(
                    adj,
                    *a,
                    g.zip_map(val(*a), |x, y| {
                        if n == 0 {
                            0.0
                        } else {
                            x * n as f64 * y.powi(n - 1)
                        }
                    }),
                )
            }
            Op::Sqrt(a) => acc(
                adj,
                *a,
                g.zip_map(out, |x, o| if o == 0.0 { 0.0 } else { x * 0.5 / o }),
            ),
            Op::Ln(a) => acc(adj, *a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Sigmoid(a) => acc(adj, *a, g.zip_map(out, |x, o| x * o * (1.0 - o))),
            Op::Tanh(a) => acc(adj, *a, g.zip_map(out, |x, o| x * (1.0 - o * o))),
            Op::Square(a) => acc(adj, *a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::Sum(a) => {
                let s = g.data()[0];
                acc(adj, *a, Tensor::filled(val(*a).shape().to_vec(), s));
            }
            Op::RowSum(a) => {
                let t = val(*a);
                let n = t.cols();
                let mut d = Vec::with_capacity(t.len());
                for &x in g.data() {
                    d.extend(std::iter::repeat(x).take(n));
                }
                acc(adj, *a, Tensor::new(t.shape().to_vec(), d));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let da = matmul_nt(g.data(), tb.data(), m, n, k);
                let db = matmul_tn(ta.data(), g.data(), m, k, n);
                acc(adj, *a, Tensor::new(ta.shape().to_vec(), da));
                acc(adj, *b, Tensor::new(tb.shape().to_vec(), db));
            }
            Op::AddBias(a, b) => {
                acc(adj, *a, g.clone());
                let bv = val(*b);
                let n = bv.len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(adj, *b, Tensor::new(bv.shape().to_vec(), db));
            }
            Op::DivRows(a, r) => {
                let (ta, tr) = (val(*a), val(*r));
                let n = ta.cols();
                let mut da = g.clone();
                let mut dr = vec![0.0; tr.len()];
                for (((drow, orow), &d), dri) in da
                    .data_mut()
                    .chunks_mut(n)
                    .zip(out.data().chunks(n))
                    .zip(tr.data())
                    .zip(dr.iter_mut())
                {
                    let dot: f64 = drow.iter().zip(orow).map(|(x, o)| x * o).sum();
                    *dri = -dot / d;
                    for x in drow {
                        *x /= d;
                    }
                }
                acc(adj, *a, da);
                acc(adj, *r, Tensor::new(tr.shape().to_vec(), dr));
            }
            Op::BatchOuter(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let rows = ta.rows();
                let (m, n) = (ta.cols(), tb.cols());
                let mut da = vec![0.0; rows * m];
                let mut db = vec![0.0; rows * n];
                for r in 0..rows {
                    let gr = &g.data()[r * m * n..(r + 1) * m * n];
                    let ar = &ta.data()[r * m..(r + 1) * m];
                    let br = &tb.data()[r * n..(r + 1) * n];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = gr[i * n + j];
                            da[r * m + i] += gv * br[j];
                            db[r * n + j] += gv * ar[i];
                        }
                    }
                }
                acc(adj, *a, Tensor::new(ta.shape().to_vec(), da));
                acc(adj, *b, Tensor::new(tb.shape().to_vec(), db));
            }
            Op::SliceCols { input, start, len } => {
                let t = val(*input);
                let n = t.cols();
                let mut d = vec![0.0; t.len()];
                for (dst, src) in d.chunks_mut(n).zip(g.data().chunks(*len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                acc(adj, *input, Tensor::new(t.shape().to_vec(), d));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let t = val(p);
                    let w = t.cols();
                    let mut d = Vec::with_capacity(t.len());
                    for row in g.data().chunks(total) {
                        d.extend_from_slice(&row[off..off + w]);
                    }
                    acc(adj, p, Tensor::new(t.shape().to_vec(), d));
                    off += w;
                }
            }
            Op::Reshape(a) => acc(adj, *a, g.clone().reshaped(val(*a).shape().to_vec())),
            Op::ApplyLocal {
                state,
                gate,
                left,
                k,
                right,
            } => {
                let (left, k, right) = (*left, *k, *right);
                let s = val(*state);
                let gm = val(*gate);
                let block = left * k * right;
                let gt = gm.transposed();
                let mut ds = vec![0.0; s.len()];
                let mut dg = vec![0.0; k * k];
                for ((src, up), dst) in s
                    .data()
                    .chunks(block)
                    .zip(g.data().chunks(block))
                    .zip(ds.chunks_mut(block))
                {
                    apply_block(gt.data(), up, dst, left, k, right);
                    gate_adjoint(up, src, &mut dg, left, k, right);
                }
                acc(adj, *state, Tensor::new(s.shape().to_vec(), ds));
                acc(adj, *gate, Tensor::new(vec![k, k], dg));
            }
            Op::GroupSum {
                input,
                left,
                k,
                right,
            } => {
                let (left, k, right) = (*left, *k, *right);
                let t = val(*input);
                let block = left * k * right;
                let mut d = vec![0.0; t.len()];
                for (dst, gr) in d.chunks_mut(block).zip(g.data().chunks(k)) {
                    for l in 0..left {
                        for i in 0..k {
                            let base = (l * k + i) * right;
                            dst[base..base + right].iter_mut().for_each(|x| *x = gr[i]);
                        }
                    }
                }
                acc(adj, *input, Tensor::new(t.shape().to_vec(), d));
            }
            Op::Unitarize(a, svd) => acc(adj, *a, svd.vjp(g)),
        }
    }
}

fn acc(adj: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// `dst[l,i,r] = Σ_j m[i,j] · src[l,j,r]` for one batch row.
fn apply_block(m: &[f64], src: &[f64], dst: &mut [f64], left: usize, k: usize, right: usize) {
    if right < WIDE {
        match k {
            4 => return apply_narrow::<4>(m, src, dst, left, right),
            9 => return apply_narrow::<9>(m, src, dst, left, right),
            _ => {}
        }
    }
    let kr = k * right;
    for (s, d) in src
        .chunks_exact(kr)
        .zip(dst.chunks_exact_mut(kr))
        .take(left)
    {
        d.fill(0.0);
        for (drow, mrow) in d.chunks_exact_mut(right).zip(m.chunks_exact(k)) {
            for (&mij, srow) in mrow.iter().zip(s.chunks_exact(right)) {
                for (o, &v) in drow.iter_mut().zip(srow) {
                    *o += mij * v;
                }
            }
        }
    }
}

/// Fixed-size kernel for short trailing extents: gathers the strided
/// `K`-vector at each `(l, r)` and multiplies it whole.
fn apply_narrow<const K: usize>(
    m: &[f64],
    src: &[f64],
    dst: &mut [f64],
    left: usize,
    right: usize,
) {
    // columns of m, so the accumulation runs across the output index
    let mut cols = [[0.0; K]; K];
    for (i, chunk) in m.chunks_exact(K).enumerate() {
        for (j, &x) in chunk.iter().enumerate() {
            cols[j][i] = x;
        }
    }
    let kr = K * right;
    for (s, d) in src
        .chunks_exact(kr)
        .zip(dst.chunks_exact_mut(kr))
        .take(left)
    {
        for r in 0..right {
            let mut out = [0.0; K];
            for (j, col) in cols.iter().enumerate() {
                let vj = s[j * right + r];
                for i in 0..K {
                    out[i] += col[i] * vj;
                }
            }
            for (i, &o) in out.iter().enumerate() {
                d[i * right + r] = o;
            }
        }
    }
}

/// `dg[i,j] += Σ_{l,r} up[l,i,r] · src[l,j,r]` over one `[left, k, right]` block.
fn gate_adjoint(up: &[f64], src: &[f64], dg: &mut [f64], left: usize, k: usize, right: usize) {
    if right < WIDE {
        match k {
            4 => return adjoint_narrow::<4>(up, src, dg, left, right),
            9 => return adjoint_narrow::<9>(up, src, dg, left, right),
            _ => {}
        }
    }
    let kr = k * right;
    for (ub, sb) in up.chunks_exact(kr).zip(src.chunks_exact(kr)).take(left) {
        for (i, ui) in ub.chunks_exact(right).enumerate() {
            for (j, sj) in sb.chunks_exact(right).enumerate() {
                dg[i * k + j] += ui.iter().zip(sj).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
}

fn adjoint_narrow<const K: usize>(
    up: &[f64],
    src: &[f64],
    dg: &mut [f64],
    left: usize,
    right: usize,
) {
    let mut acc = [[0.0; K]; K];
    let kr = K * right;
    for (ub, sb) in up.chunks_exact(kr).zip(src.chunks_exact(kr)).take(left) {
        for r in 0..right {
            let (mut u, mut v) = ([0.0; K], [0.0; K]);
            for j in 0..K {
                u[j] = ub[j * right + r];
                v[j] = sb[j * right + r];
            }
            for (row, &ui) in acc.iter_mut().zip(&u) {
                for j in 0..K {
                    row[j] += ui * v[j];
                }
            }
        }
    }
    for (o, a) in dg.iter_mut().zip(acc.iter().flatten()) {
        *o += a;
    }
}

/// Below this trailing extent the local-gate kernels gather strided vectors.
const WIDE: usize = 16;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints of every node reached by a reverse sweep.
pub struct Adjoints<'t> {
    tape: &'t Tape,
    adj: Vec<Option<Tensor>>,
}

impl Adjoints<'_> {
    /// Adjoint of `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj[v.0].as_ref()
    }

    /// Adjoint of `v`, zero-filled when the output does not depend on it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.tape.value(v).shape().to_vec()))
    }

    /// Parameter adjoints summed by name. Parameters the output does not
    /// depend on get zero gradients.
    pub fn gradients(&self) -> Gradients {
        let mut grads = Gradients::new();
        for (i, node) in self.tape.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = self.adj[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                let mut one = Gradients::new();
                one.insert(name.clone(), g);
                grads.accumulate(&one);
            }
        }
        grads
    }
}
