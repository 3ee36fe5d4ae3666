//! Minimal reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A `Graph` records operations as they execute (define-by-run); `backward`
//! walks the tape in reverse creation order, which is always a valid reverse
//! topological order because operations can only reference earlier nodes.
//! The primitive set is closed: everything the policy, critic, and their
//! training losses need, and nothing else. All accumulation loops run in a
//! fixed order, so results are bitwise deterministic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    /// `backward` seeds d(loss)/d(loss) = 1 and therefore needs a 1x1 loss.
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    /// Reserved for operations without a registered derivative. The shipped
    /// primitive set is closed, so this is unreachable today; it exists so
    /// forward-only extensions fail loudly instead of silently.
    #[error("primitive {0} has no registered derivative")]
    UnsupportedPrimitive(&'static str),
}

/// Dense row-major 2-D tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input leaf; `slot` links it to a parameter bucket for gradient export.
    Leaf { slot: Option<usize> },
    MatMul(usize, usize),
    /// Elementwise sum of same-shape tensors.
    Add(usize, usize),
    /// Adds a 1xC row vector to every row of an RxC tensor.
    AddRow(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    /// Elementwise minimum; ties route the gradient to the first operand.
    MinElem(usize, usize),
    Relu(usize),
    Exp(usize),
    Square(usize),
    Scale(usize, f64),
    AddConst(usize),
    /// Clamp to [lo, hi]; gradient passes where lo <= x <= hi.
    Clamp(usize, f64, f64),
    /// Numerically stable log-softmax along each row.
    LogSoftmaxRows(usize),
    /// RxC -> Rx1 row sums.
    SumRows(usize),
    /// RxC -> 1x1 mean of all entries.
    MeanAll(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    /// Columns [start, end) of the source.
    SliceCols(usize, usize, usize),
    Transpose(usize),
    /// Row-major reinterpretation with the same element count.
    Reshape(usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded computation. Values are computed eagerly as ops are added.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input: receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { slot: None }, value)
    }

    /// Parameter input: `backward` exports its gradient under `slot`.
    pub fn param(&mut self, value: Tensor, slot: usize) -> NodeId {
        self.push(Op::Leaf { slot: Some(slot) }, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.cols, bv.rows, "matmul inner dims");
        let (r, k, c) = (av.rows, av.cols, bv.cols);
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            for p in 0..k {
                let aip = av.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv.data[p * c..(p + 1) * c];
                let orow = &mut out.data[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.push(Op::MatMul(a.0, b.0), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shapes");
        let data = av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Add(a.0, b.0), t)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(bv.rows, 1, "add_row needs a 1xC row");
        assert_eq!(av.cols, bv.cols, "add_row widths");
        let mut out = av.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += bv.data[c];
            }
        }
        self.push(Op::AddRow(a.0, row.0), out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "sub shapes");
        let data = av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Sub(a.0, b.0), t)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "mul shapes");
        let data = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::MulElem(a.0, b.0), t)
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "min shapes");
        let data = av.iter().zip(bv.iter()).map(|(x, y)| x.min(*y)).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::MinElem(a.0, b.0), t)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let data = av.iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Relu(a.0), t)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let data = av.iter().map(|x| x.exp()).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Exp(a.0), t)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let data = av.iter().map(|x| x * x).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Square(a.0), t)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let av = &self.nodes[a.0].value;
        let data = av.iter().map(|x| x * k).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Scale(a.0, k), t)
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let av = &self.nodes[a.0].value;
        let data = av.iter().map(|x| x + k).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::AddConst(a.0), t)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi);
        let av = &self.nodes[a.0].value;
        let data = av.iter().map(|x| x.clamp(lo, hi)).collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(Op::Clamp(a.0, lo, hi), t)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let mut out = av.clone();
        for r in 0..av.rows {
            let row = &av.data[r * av.cols..(r + 1) * av.cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, &x) in out.data[r * av.cols..(r + 1) * av.cols].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.push(Op::LogSoftmaxRows(a.0), out)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(av.rows, 1);
        for r in 0..av.rows {
            out.data[r] = av.data[r * av.cols..(r + 1) * av.cols].iter().sum();
        }
        self.push(Op::SumRows(a.0), out)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert!(!av.is_empty(), "mean of empty tensor");
        let mean = av.iter().sum::<f64>() / av.len() as f64;
        self.push(Op::MeanAll(a.0), Tensor::scalar(mean))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols;
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols, cols, "concat_rows widths");
            data.extend_from_slice(&v.data);
        }
        let t = Tensor::from_vec(rows, cols, data);
        self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), t)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows;
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows, rows, "concat_cols heights");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + v.cols]
                    .copy_from_slice(&v.data[r * v.cols..(r + 1) * v.cols]);
            }
            offset += v.cols;
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert!(start < end && end <= av.cols, "slice bounds");
        let mut out = Tensor::zeros(av.rows, end - start);
        for r in 0..av.rows {
            out.data[r * (end - start)..(r + 1) * (end - start)]
                .copy_from_slice(&av.data[r * av.cols + start..r * av.cols + end]);
        }
        self.push(Op::SliceCols(a.0, start, end), out)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(av.cols, av.rows);
        for r in 0..av.rows {
            for c in 0..av.cols {
                out.data[c * av.rows + r] = av.data[r * av.cols + c];
            }
        }
        self.push(Op::Transpose(a.0), out)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.len(), rows * cols, "reshape must preserve element count");
        let out = Tensor {
            rows,
            cols,
            data: av.data.clone(),
        };
        self.push(Op::Reshape(a.0), out)
    }

    /// Reverse-mode sweep from the scalar `loss`. Returns, for each slot in
    /// `0..n_slots`, the accumulated gradient of every `param` node
    /// registered under that slot (zeros tensor of matching shape when the
    /// slot never received gradient, `None` when the slot was never used).
    pub fn backward(
        &self,
        loss: NodeId,
        n_slots: usize,
    ) -> Result<Vec<Option<Tensor>>, TapeError> {
        let lv = &self.nodes[loss.0].value;
        if lv.rows != 1 || lv.cols != 1 {
            return Err(TapeError::NonScalarLoss {
                rows: lv.rows,
                cols: lv.cols,
            });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            // Re-insert so leaves keep their gradient for export.
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (r, k, c) = (av.rows, av.cols, bv.cols);
                    // dA = G * B^T
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for i in 0..r {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &g.data[i * c..(i + 1) * c];
                            let brow = &bv.data[p * c..(p + 1) * c];
                            for j in 0..c {
                                acc += grow[j] * brow[j];
                            }
                            ga.data[i * k + p] += acc;
                        }
                    }
                    // dB = A^T * G
                    let gb = grads[*b].get_or_insert_with(|| Tensor::zeros(bv.rows, bv.cols));
                    for p in 0..k {
                        for i in 0..r {
                            let aip = av.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &g.data[i * c..(i + 1) * c];
                            let brow = &mut gb.data[p * c..(p + 1) * c];
                            for j in 0..c {
                                brow[j] += aip * grow[j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for src in [*a, *b] {
                        let sv = &self.nodes[src].value;
                        let gs = grads[src].get_or_insert_with(|| Tensor::zeros(sv.rows, sv.cols));
                        for (o, i) in gs.data.iter_mut().zip(g.iter()) {
                            *o += i;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    let av = &self.nodes[*a].value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for (o, i) in ga.data.iter_mut().zip(g.iter()) {
                        *o += i;
                    }
                    let rv = &self.nodes[*row].value;
                    let gr = grads[*row].get_or_insert_with(|| Tensor::zeros(1, rv.cols));
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.data[r * g.cols + c];
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let av = &self.nodes[*a].value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for (o, i) in ga.data.iter_mut().zip(g.iter()) {
                        *o += i;
                    }
                    let bv = &self.nodes[*b].value;
                    let gb = grads[*b].get_or_insert_with(|| Tensor::zeros(bv.rows, bv.cols));
                    for (o, i) in gb.data.iter_mut().zip(g.iter()) {
                        *o -= i;
                    }
                }
                Op::MulElem(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for ((o, i), y) in ga.data.iter_mut().zip(g.iter()).zip(bv.iter()) {
                        *o += i * y;
                    }
                    let gb = grads[*b].get_or_insert_with(|| Tensor::zeros(bv.rows, bv.cols));
                    for ((o, i), x) in gb.data.iter_mut().zip(g.iter()).zip(av.iter()) {
                        *o += i * x;
                    }
                }
                Op::MinElem(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for idx2 in 0..g.len() {
                        if av.data[idx2] <= bv.data[idx2] {
                            ga.data[idx2] += g.data[idx2];
                        }
                    }
                    let gb = grads[*b].get_or_insert_with(|| Tensor::zeros(bv.rows, bv.cols));
                    for idx2 in 0..g.len() {
                        if av.data[idx2] > bv.data[idx2] {
                            gb.data[idx2] += g.data[idx2];
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for idx2 in 0..g.len() {
                        if av.data[idx2] > 0.0 {
                            ga.data[idx2] += g.data[idx2];
                        }
                    }
                }
                Op::Exp(a) => {
                    let av = &self.nodes[*a].value;
                    let yv = &node.value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for idx2 in 0..g.len() {
                        ga.data[idx2] += g.data[idx2] * yv.data[idx2];
                    }
                }
                Op::Square(a) => {
                    let av = &self.nodes[*a].value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for idx2 in 0..g.len() {
                        ga.data[idx2] += g.data[idx2] * 2.0 * av.data[idx2];
                    }
                }
                Op::Scale(a, k) => {
                    let av = &self.nodes[*a].value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for idx2 in 0..g.len() {
                        ga.data[idx2] += g.data[idx2] * k;
                    }
                }
                Op::AddConst(a) => {
                    let av = &self.nodes[*a].value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for idx2 in 0..g.len() {
                        ga.data[idx2] += g.data[idx2];
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[*a].value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for idx2 in 0..g.len() {
                        let x = av.data[idx2];
                        if x >= *lo && x <= *hi {
                            ga.data[idx2] += g.data[idx2];
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    // y = x - lse(x); dx = g - softmax(x) * sum(g over row)
                    let av = &self.nodes[*a].value;
                    let yv = &node.value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for r in 0..av.rows {
                        let gsum: f64 = g.data[r * av.cols..(r + 1) * av.cols].iter().sum();
                        for c in 0..av.cols {
                            let p = yv.data[r * av.cols + c].exp();
                            ga.data[r * av.cols + c] += g.data[r * av.cols + c] - p * gsum;
                        }
                    }
                }
                Op::SumRows(a) => {
                    let av = &self.nodes[*a].value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for r in 0..av.rows {
                        for c in 0..av.cols {
                            ga.data[r * av.cols + c] += g.data[r];
                        }
                    }
                }
                Op::MeanAll(a) => {
                    let av = &self.nodes[*a].value;
                    let scale = g.data[0] / av.len() as f64;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for o in ga.data.iter_mut() {
                        *o += scale;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for src in parts {
                        let sv = &self.nodes[*src].value;
                        let n = sv.len();
                        let gs = grads[*src].get_or_insert_with(|| Tensor::zeros(sv.rows, sv.cols));
                        for i in 0..n {
                            gs.data[i] += g.data[offset + i];
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows;
                    let total_cols = node.value.cols;
                    let mut offset = 0;
                    for src in parts {
                        let sv = &self.nodes[*src].value;
                        let gs = grads[*src].get_or_insert_with(|| Tensor::zeros(sv.rows, sv.cols));
                        for r in 0..rows {
                            for c in 0..sv.cols {
                                gs.data[r * sv.cols + c] += g.data[r * total_cols + offset + c];
                            }
                        }
                        offset += sv.cols;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let av = &self.nodes[*a].value;
                    let w = end - start;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for r in 0..av.rows {
                        for c in 0..w {
                            ga.data[r * av.cols + start + c] += g.data[r * w + c];
                        }
                    }
                }
                Op::Transpose(a) => {
                    let av = &self.nodes[*a].value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for r in 0..av.rows {
                        for c in 0..av.cols {
                            ga.data[r * av.cols + c] += g.data[c * g.cols + r];
                        }
                    }
                }
                Op::Reshape(a) => {
                    let av = &self.nodes[*a].value;
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(av.rows, av.cols));
                    for (o, i) in ga.data.iter_mut().zip(g.data.iter()) {
                        *o += i;
                    }
                }
            }
        }

        let mut by_slot: Vec<Option<Tensor>> = vec![None; n_slots];
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { slot: Some(s) } = node.op {
                let grad = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows, node.value.cols));
                match &mut by_slot[s] {
                    None => by_slot[s] = Some(grad),
                    Some(existing) => {
                        for (o, i) in existing.data.iter_mut().zip(grad.iter()) {
                            *o += i;
                        }
                    }
                }
            }
        }
        Ok(by_slot)
    }
}
