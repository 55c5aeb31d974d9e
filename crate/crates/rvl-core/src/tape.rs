//! Reverse-mode differentiation over [`Tensor`] values. Nodes are matrix
//! granular: one node per matmul or fused loss, not per scalar, which keeps
//! tape overhead negligible at the batch sizes the toy trainer uses.
//!
//! The op set is exactly what the five objectives and the toy encoders need.
//! Non-smooth ops (relu, masked min) take the conventional subgradient; the
//! gradient checker samples points away from their kinks.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input node; `grad` marks whether backward accumulates into it.
    Leaf { grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Neg(Var),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    /// [m,n] + [n], bias added to every row.
    AddRowBroadcast(Var, Var),
    /// Tensor times a one-element node.
    MulScalarNode(Var, Var),
    /// [m,k] x [k,n] -> [m,n]
    MatMul(Var, Var),
    /// [m,k] x [n,k]^T -> [m,n]
    MatMulTransB(Var, Var),
    /// Row-wise selection with duplicates allowed; backward scatter-adds.
    GatherRows(Var, Vec<usize>),
    /// Stacks rank-1 rows (or [1,n] rows) into [m,n].
    StackRows(Vec<Var>),
    ConcatRows(Var, Var),
    /// [m,n] -> [n], arithmetic mean over rows.
    MeanRows(Var),
    Row(Var, usize),
    L2NormRows(Var),
    SoftmaxRows(Var),
    /// Mean over rows of -log softmax(row)[target]. Scalar output.
    NllRowsMean(Var, Vec<usize>),
    /// -log of masked softmax of a rank-1 tensor at `target`. Scalar output.
    MaskedNll { x: Var, mask: Vec<bool>, target: usize },
    /// Min over unmasked entries; subgradient to the first argmin. Scalar.
    MaskedMin(Var, Vec<bool>),
    SumScalars(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_node[v.0].take()
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..r {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    debug_assert_eq!(out.cols(), c);
    out
}

/// log(sum(exp(x_j))) over unmasked entries.
fn masked_lse(x: &[f64], mask: &[bool]) -> f64 {
    let m = x
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(v, _)| (v - m).exp())
        .sum();
    m + s.ln()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { grad: true })
    }

    /// Non-differentiable input (momentum outputs, queue contents).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { grad: false })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut v = self.value(a).clone();
        v.add_scaled(self.value(b), 1.0);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let mut v = self.value(a).clone();
        v.add_scaled(self.value(b), -1.0);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x *= s;
        }
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x += c;
        }
        self.push(v, Op::AddConst(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = -*x;
        }
        self.push(v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.exp();
        }
        self.push(v, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.tanh();
        }
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.max(0.0);
        }
        self.push(v, Op::Relu(a))
    }

    pub fn add_row_broadcast(&mut self, m: Var, bias: Var) -> Var {
        let b = self.value(bias).clone();
        assert_eq!(self.value(m).cols(), b.len(), "bias length");
        let mut v = self.value(m).clone();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRowBroadcast(m, bias))
    }

    pub fn mul_scalar_node(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scalar node");
        let sv = self.value(s).item();
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x *= sv;
        }
        self.push(v, Op::MulScalarNode(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = (self.value(a).rows(), self.value(a).cols());
        let (bk, bn) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(ak, bk, "matmul inner dims");
        let mut out = Tensor::zeros(vec![am, bn]);
        for i in 0..am {
            let arow = self.value(a).row(i);
            for (k, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = self.value(b).row(k);
                let orow = out.row_mut(i);
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_trans_b(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = (self.value(a).rows(), self.value(a).cols());
        let (bn, bk) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(ak, bk, "matmul_trans_b inner dims");
        let mut out = Tensor::zeros(vec![am, bn]);
        for i in 0..am {
            let arow = self.value(a).row(i);
            for j in 0..bn {
                out.row_mut(i)[j] = crate::tensor::dot(arow, self.value(b).row(j));
            }
        }
        self.push(out, Op::MatMulTransB(a, b))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let c = self.value(a).cols();
        let mut out = Tensor::zeros(vec![rows.len(), c]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.value(a).row(r));
        }
        self.push(out, Op::GatherRows(a, rows))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let c = self.value(rows[0]).cols();
        let mut out = Tensor::zeros(vec![rows.len(), c]);
        for (i, &r) in rows.iter().enumerate() {
            assert_eq!(self.value(r).len(), c, "stacked row width");
            out.row_mut(i).copy_from_slice(self.value(r).data());
        }
        self.push(out, Op::StackRows(rows.to_vec()))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let c = self.value(a).cols();
        assert_eq!(c, self.value(b).cols(), "concat widths");
        let (ra, rb) = (self.value(a).rows(), self.value(b).rows());
        let mut data = Vec::with_capacity((ra + rb) * c);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        self.push(Tensor::matrix(ra + rb, c, data), Op::ConcatRows(a, b))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.value(a).row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::vector(out), Op::MeanRows(a))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let v = Tensor::vector(self.value(a).row(i).to_vec());
        self.push(v, Op::Row(a, i))
    }

    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            crate::tensor::l2_normalize(v.row_mut(i));
        }
        self.push(v, Op::L2NormRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn nll_rows_mean(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "one target per row");
        let mask = vec![true; x.cols()];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < x.cols(), "target in range");
            let row = x.row(i);
            total += masked_lse(row, &mask) - row[t];
        }
        let v = Tensor::scalar(total / targets.len() as f64);
        self.push(v, Op::NllRowsMean(logits, targets))
    }

    pub fn masked_nll(&mut self, x: Var, mask: Vec<bool>, target: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), mask.len(), "mask length");
        assert!(mask[target], "target must be a valid position");
        let loss = masked_lse(xv.data(), &mask) - xv.data()[target];
        self.push(Tensor::scalar(loss), Op::MaskedNll { x, mask, target })
    }

    pub fn masked_min(&mut self, x: Var, mask: Vec<bool>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), mask.len(), "mask length");
        let m = xv
            .data()
            .iter()
            .zip(&mask)
            .filter(|(_, &ok)| ok)
            .map(|(v, _)| *v)
            .fold(f64::INFINITY, f64::min);
        assert!(m.is_finite(), "min over empty mask");
        self.push(Tensor::scalar(m), Op::MaskedMin(x, mask))
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut total = 0.0;
        for &p in parts {
            total += self.value(p).item();
        }
        self.push(Tensor::scalar(total), Op::SumScalars(parts.to_vec()))
    }

    /// Accumulates d(out)/d(node) for every node, seeding d(out)/d(out) = 1.
    pub fn backward(&mut self, out: Var) -> Grads {
        assert_eq!(self.value(out).len(), 1, "backward from a scalar");
        let mut g: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        g[out.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=out.0).rev() {
            let Some(gy) = g[idx].take() else { continue };
            // Ops read node values immutably; accumulate into parent slots.
            let op = self.nodes[idx].op.clone();
            let acc = |slot: usize, delta: Tensor, g: &mut Vec<Option<Tensor>>| {
                match &mut g[slot] {
                    Some(t) => t.add_scaled(&delta, 1.0),
                    none => *none = Some(delta),
                }
            };
            match op {
                Op::Leaf { grad } => {
                    if grad {
                        g[idx] = Some(gy);
                    }
                }
                Op::Add(a, b) => {
                    acc(a.0, gy.clone(), &mut g);
                    acc(b.0, gy, &mut g);
                }
                Op::Sub(a, b) => {
                    acc(a.0, gy.clone(), &mut g);
                    let mut n = gy;
                    for x in n.data_mut() {
                        *x = -*x;
                    }
                    acc(b.0, n, &mut g);
                }
                Op::MulElem(a, b) => {
                    let mut da = gy.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *x *= y;
                    }
                    let mut db = gy;
                    for (x, y) in db.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *x *= y;
                    }
                    acc(a.0, da, &mut g);
                    acc(b.0, db, &mut g);
                }
                Op::Scale(a, s) => {
                    let mut d = gy;
                    for x in d.data_mut() {
                        *x *= s;
                    }
                    acc(a.0, d, &mut g);
                }
                Op::AddConst(a) => acc(a.0, gy, &mut g),
                Op::Neg(a) => {
                    let mut d = gy;
                    for x in d.data_mut() {
                        *x = -*x;
                    }
                    acc(a.0, d, &mut g);
                }
                Op::Exp(a) => {
                    let mut d = gy;
                    for (x, y) in d.data_mut().iter_mut().zip(self.nodes[idx].value.data()) {
                        *x *= y;
                    }
                    acc(a.0, d, &mut g);
                }
                Op::Tanh(a) => {
                    let mut d = gy;
                    for (x, y) in d.data_mut().iter_mut().zip(self.nodes[idx].value.data()) {
                        *x *= 1.0 - y * y;
                    }
                    acc(a.0, d, &mut g);
                }
                Op::Relu(a) => {
                    let mut d = gy;
                    for (x, y) in d.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        if *y <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    acc(a.0, d, &mut g);
                }
                Op::AddRowBroadcast(m, bias) => {
                    let c = gy.cols();
                    let mut db = vec![0.0; c];
                    for i in 0..gy.rows() {
                        for (o, v) in db.iter_mut().zip(gy.row(i)) {
                            *o += v;
                        }
                    }
                    acc(m.0, gy, &mut g);
                    acc(bias.0, Tensor::vector(db), &mut g);
                }
                Op::MulScalarNode(a, s) => {
                    let sv = self.nodes[s.0].value.item();
                    let mut da = gy.clone();
                    for x in da.data_mut() {
                        *x *= sv;
                    }
                    let ds: f64 = gy
                        .data()
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(x, y)| x * y)
                        .sum();
                    acc(a.0, da, &mut g);
                    acc(s.0, Tensor::scalar(ds), &mut g);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA = dC x B^T
                    let mut da = Tensor::zeros(vec![av.rows(), av.cols()]);
                    for i in 0..av.rows() {
                        for k in 0..av.cols() {
                            da.row_mut(i)[k] = crate::tensor::dot(gy.row(i), bv.row(k));
                        }
                    }
                    // dB = A^T x dC
                    let mut db = Tensor::zeros(vec![bv.rows(), bv.cols()]);
                    for i in 0..av.rows() {
                        let arow = av.row(i);
                        let grow = gy.row(i);
                        for (k, &avk) in arow.iter().enumerate() {
                            if avk == 0.0 {
                                continue;
                            }
                            for (o, &gv) in db.row_mut(k).iter_mut().zip(grow) {
                                *o += avk * gv;
                            }
                        }
                    }
                    acc(a.0, da, &mut g);
                    acc(b.0, db, &mut g);
                }
                Op::MatMulTransB(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // C = A B^T: dA = dC x B, dB = dC^T x A
                    let mut da = Tensor::zeros(vec![av.rows(), av.cols()]);
                    for i in 0..av.rows() {
                        let grow = gy.row(i);
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, &bvv) in da.row_mut(i).iter_mut().zip(bv.row(j)) {
                                *o += gv * bvv;
                            }
                        }
                    }
                    let mut db = Tensor::zeros(vec![bv.rows(), bv.cols()]);
                    for i in 0..av.rows() {
                        let arow = av.row(i);
                        let grow = gy.row(i);
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, &avv) in db.row_mut(j).iter_mut().zip(arow) {
                                *o += gv * avv;
                            }
                        }
                    }
                    acc(a.0, da, &mut g);
                    acc(b.0, db, &mut g);
                }
                Op::GatherRows(a, rows) => {
                    let av = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, v) in da.row_mut(r).iter_mut().zip(gy.row(i)) {
                            *o += v;
                        }
                    }
                    acc(a.0, da, &mut g);
                }
                Op::StackRows(rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        let shape = self.nodes[r.0].value.shape().to_vec();
                        let d = Tensor::new(shape, gy.row(i).to_vec());
                        acc(r.0, d, &mut g);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let (ra, c) = (self.nodes[a.0].value.rows(), gy.cols());
                    let da = Tensor::matrix(ra, c, gy.data()[..ra * c].to_vec());
                    let rb = self.nodes[b.0].value.rows();
                    let db = Tensor::matrix(rb, c, gy.data()[ra * c..].to_vec());
                    acc(a.0, da, &mut g);
                    acc(b.0, db, &mut g);
                }
                Op::MeanRows(a) => {
                    let av = &self.nodes[a.0].value;
                    let r = av.rows();
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    for i in 0..r {
                        for (o, v) in da.row_mut(i).iter_mut().zip(gy.data()) {
                            *o += v / r as f64;
                        }
                    }
                    acc(a.0, da, &mut g);
                }
                Op::Row(a, i) => {
                    let av = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    for (o, v) in da.row_mut(i).iter_mut().zip(gy.data()) {
                        *o += v;
                    }
                    acc(a.0, da, &mut g);
                }
                Op::L2NormRows(a) => {
                    let av = &self.nodes[a.0].value;
                    let yv = &self.nodes[idx].value;
                    let mut da = Tensor::zeros(av.shape().to_vec());
                    for i in 0..av.rows() {
                        let norm = crate::tensor::dot(av.row(i), av.row(i)).sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let y = yv.row(i);
                        let gr = gy.row(i);
                        let gy_dot_y = crate::tensor::dot(gr, y);
                        for ((o, &gv), &yvv) in da.row_mut(i).iter_mut().zip(gr).zip(y) {
                            *o = (gv - gy_dot_y * yvv) / norm;
                        }
                    }
                    acc(a.0, da, &mut g);
                }
                Op::SoftmaxRows(a) => {
                    let yv = &self.nodes[idx].value;
                    let mut da = Tensor::zeros(yv.shape().to_vec());
                    for i in 0..yv.rows() {
                        let y = yv.row(i);
                        let gr = gy.row(i);
                        let gdoty = crate::tensor::dot(gr, y);
                        for ((o, &gv), &yvv) in da.row_mut(i).iter_mut().zip(gr).zip(y) {
                            *o = yvv * (gv - gdoty);
                        }
                    }
                    acc(a.0, da, &mut g);
                }
                Op::NllRowsMean(logits, targets) => {
                    let gv = gy.item();
                    let lv = &self.nodes[logits.0].value;
                    let mut da = softmax_rows(lv);
                    let r = targets.len() as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        da.row_mut(i)[t] -= 1.0;
                    }
                    for x in da.data_mut() {
                        *x *= gv / r;
                    }
                    acc(logits.0, da, &mut g);
                }
                Op::MaskedNll { x, mask, target } => {
                    let gv = gy.item();
                    let xv = &self.nodes[x.0].value;
                    let lse = masked_lse(xv.data(), &mask);
                    let mut da = Tensor::zeros(xv.shape().to_vec());
                    for (j, (o, &v)) in da.data_mut().iter_mut().zip(xv.data()).enumerate() {
                        if mask[j] {
                            let p = (v - lse).exp();
                            *o = gv * (p - if j == target { 1.0 } else { 0.0 });
                        }
                    }
                    acc(x.0, da, &mut g);
                }
                Op::MaskedMin(x, mask) => {
                    let xv = &self.nodes[x.0].value;
                    let mv = self.nodes[idx].value.item();
                    let mut da = Tensor::zeros(xv.shape().to_vec());
                    for (j, &v) in xv.data().iter().enumerate() {
                        if mask[j] && v == mv {
                            da.data_mut()[j] = gy.item();
                            break;
                        }
                    }
                    acc(x.0, da, &mut g);
                }
                Op::SumScalars(parts) => {
                    for p in parts {
                        acc(p.0, gy.clone(), &mut g);
                    }
                }
            }
        }
        Grads { by_node: g }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Central-difference check of one scalar-valued tape program against its
    /// backward pass. Builder maps flat inputs to (tape, output, leaf vars).
    fn check<F>(build: F, inputs: &[Tensor], tol: f64)
    where
        F: Fn(&mut Tape, &[Tensor]) -> (Var, Vec<Var>),
    {
        let h = 1e-5;
        let mut tape = Tape::new();
        let (out, leaves) = build(&mut tape, inputs);
        let mut grads = tape.backward(out);
        let analytic: Vec<Tensor> = leaves
            .iter()
            .map(|&l| {
                grads
                    .take(l)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(l).shape().to_vec()))
            })
            .collect();

        let eval = |xs: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let (o, _) = build(&mut t, xs);
            t.value(o).item()
        };

        for (ti, t) in inputs.iter().enumerate() {
            for k in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[k] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[k] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = analytic[ti].data()[k];
                let denom = ana.abs().max(num.abs()).max(1e-8);
                let rel = (ana - num).abs() / denom;
                assert!(
                    rel < tol,
                    "input {ti} coord {k}: analytic {ana} vs numeric {num} (rel {rel})"
                );
            }
        }
    }

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn matmul_chain_grad() {
        let mut r = rng::stream(3);
        let a = rand_tensor(vec![3, 4], &mut r);
        let b = rand_tensor(vec![4, 2], &mut r);
        check(
            |t, xs| {
                let a = t.leaf(xs[0].clone());
                let b = t.leaf(xs[1].clone());
                let c = t.matmul(a, b);
                let th = t.tanh(c);
                let targets = vec![0, 1, 0];
                let out = t.nll_rows_mean(th, targets);
                (out, vec![a, b])
            },
            &[a, b],
            1e-5,
        );
    }

    #[test]
    fn matmul_trans_b_grad() {
        let mut r = rng::stream(4);
        let a = rand_tensor(vec![2, 5], &mut r);
        let b = rand_tensor(vec![3, 5], &mut r);
        check(
            |t, xs| {
                let a = t.leaf(xs[0].clone());
                let b = t.leaf(xs[1].clone());
                let c = t.matmul_trans_b(a, b);
                let sm = t.softmax_rows(c);
                let picked = t.gather_rows(sm, vec![0, 1]);
                let mr = t.mean_rows(picked);
                let e = t.exp(mr);
                let row = t.stack_rows(&[e]);
                let out = t.nll_rows_mean(row, vec![2]);
                (out, vec![a, b])
            },
            &[a, b],
            1e-5,
        );
    }

    #[test]
    fn normalize_and_masked_ops_grad() {
        let mut r = rng::stream(5);
        let a = rand_tensor(vec![4, 3], &mut r);
        let q = rand_tensor(vec![1, 3], &mut r);
        let mask = vec![true, false, true, true];
        check(
            |t, xs| {
                let a = t.leaf(xs[0].clone());
                let q = t.leaf(xs[1].clone());
                let n = t.l2_norm_rows(a);
                let qn = t.l2_norm_rows(q);
                let sims = t.matmul_trans_b(n, qn); // [4,1]
                let m = t.masked_min(sims, mask.clone());
                let m5 = t.add_const(m, 0.5);
                let out = t.relu(m5);
                (out, vec![a, q])
            },
            &[a, q],
            1e-4,
        );
    }

    #[test]
    fn masked_nll_grad() {
        let mut r = rng::stream(6);
        let x = rand_tensor(vec![6], &mut r);
        let mask = vec![false, true, true, true, false, true];
        check(
            |t, xs| {
                let x = t.leaf(xs[0].clone());
                let s = t.scale(x, 1.7);
                let out = t.masked_nll(s, mask.clone(), 2);
                (out, vec![x])
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn broadcast_bias_and_scalar_node_grad() {
        let mut r = rng::stream(7);
        let m = rand_tensor(vec![3, 4], &mut r);
        let b = rand_tensor(vec![4], &mut r);
        let s = Tensor::scalar(0.4);
        check(
            |t, xs| {
                let m = t.leaf(xs[0].clone());
                let b = t.leaf(xs[1].clone());
                let s = t.leaf(xs[2].clone());
                let e = t.exp(s);
                let mb = t.add_row_broadcast(m, b);
                let sc = t.mul_scalar_node(mb, e);
                let out = t.nll_rows_mean(sc, vec![1, 3, 0]);
                (out, vec![m, b, s])
            },
            &[m, b, s],
            1e-5,
        );
    }

    #[test]
    fn constants_accumulate_no_grad() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let l = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let s = t.add(c, l);
        let row = t.stack_rows(&[s]);
        let out = t.nll_rows_mean(row, vec![0]);
        let grads = t.backward(out);
        assert!(grads.wrt(c).is_none());
        assert!(grads.wrt(l).is_some());
    }

    #[test]
    fn masked_min_takes_first_argmin() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![2.0, 1.0, 1.0, 5.0]));
        let m = t.masked_min(x, vec![true; 4]);
        assert_eq!(t.value(m).item(), 1.0);
        let grads = t.backward(m);
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // both MulElem parents point at x, so d/dx (x*x) = 2x
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0]));
        let y = t.mul_elem(x, x);
        let grads = t.backward(y);
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }
}
