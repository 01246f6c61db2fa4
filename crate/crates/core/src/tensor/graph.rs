use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::{dot, matmul_acc, matmul_t_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    RepeatRows(Var, usize),
    RowSum(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Contrastive {
        pos: Var,
        neg: Var,
        tau: f64,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    fn add(&mut self, id: ParamId, g: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

/// A recorded computation. Parameter nodes read their values from the
/// borrowed [`ParamStore`] and are never copied.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    /// One node per parameter, so each gets a single gradient buffer.
    param_nodes: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("op produced consistent shape")
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A graph with no parameter store; only constants can be recorded.
    pub fn standalone() -> Graph<'static> {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .params
                .expect("param node without store")
                .value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("graph has no parameter store");
        assert!(id.0 < store.len(), "unknown parameter");
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (ta.dims2(), tb.dims2());
        if k != k2 {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_t_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(mat(m, n, out), Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(shape_err("add", ta, tb));
        }
        let (r, c) = ta.dims2();
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(mat(r, c, out), Op::Add(a, b), &[a, b]))
    }

    /// Adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((r, c), (br, bc)) = (ta.dims2(), tb.dims2());
        if br != 1 || bc != c {
            return Err(shape_err("add_row", ta, tb));
        }
        let bias = tb.data();
        let out = ta
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(mat(r, c, out), Op::AddRow(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(shape_err("mul", ta, tb));
        }
        let (r, c) = ta.dims2();
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        Ok(self.push(mat(r, c, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let out = ta.data().iter().map(|x| x * s).collect();
        self.push(mat(r, c, out), Op::Scale(a, s), &[a])
    }

    /// Adds a fixed tensor (e.g. an attention mask); no gradient flows to it.
    pub fn add_const(&mut self, a: Var, k: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.dims2() != k.dims2() {
            return Err(shape_err("add_const", ta, k));
        }
        let (r, c) = ta.dims2();
        let out = ta.data().iter().zip(k.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(mat(r, c, out), Op::AddConst(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let out = ta.data().iter().map(|&x| x.max(0.0)).collect();
        self.push(mat(r, c, out), Op::Relu(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1×c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = tx.dims2();
        if tg.dims2() != (1, c) {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.dims2() != (1, c) {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        Ok(self.push(
            mat(r, c, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise softmax. Rows that are entirely `-inf` produce zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(ta.row_slice(i), &mut out[i * c..(i + 1) * c]);
        }
        self.push(mat(r, c, out), Op::Softmax(a), &[a])
    }

    /// Gathers rows of `table` (`V×d`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape {
                op: "embedding",
                left: tt.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row_slice(i));
        }
        Ok(self.push(
            mat(ids.len(), d, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        if start > end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: tx.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&tx.row_slice(i)[start..end]);
        }
        Ok(self.push(mat(r, w, out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        if start > end || end > r {
            return Err(Error::Shape {
                op: "slice_rows",
                left: tx.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let out = tx.data()[start * c..end * c].to_vec();
        Ok(self.push(mat(end - start, c, out), Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(mat(r, total, out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(shape_err("concat_rows", self.value(parts[0]), self.value(p)));
            }
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c.max(1);
        Ok(self.push(mat(r, c, out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let tx = self.value(x);
        if rows * cols != tx.numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: tx.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        let out = tx.data().to_vec();
        Ok(self.push(mat(rows, cols, out), Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        self.push(mat(c, r, out), Op::Transpose(x), &[x])
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let mut out = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            out.extend_from_slice(tx.data());
        }
        self.push(mat(r * times, c, out), Op::RepeatRows(x, times), &[x])
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let out = (0..r).map(|i| tx.row_slice(i).iter().sum()).collect();
        let _ = c;
        self.push(mat(r, 1, out), Op::RowSum(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean token cross entropy of `logits` (`n×V`) against `targets`;
    /// positions whose target equals `pad` are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = tl.dims2();
        if targets.len() != n || targets.iter().any(|&t| t >= v) {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        let mut count = 0;
        let mut kept = Vec::with_capacity(n);
        for i in 0..n {
            let row = &mut probs[i * v..(i + 1) * v];
            softmax_into(tl.row_slice(i), row);
            if targets[i] == pad {
                kept.push(None);
                continue;
            }
            let t = targets[i];
            let lrow = tl.row_slice(i);
            let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lrow.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - lrow[t];
            count += 1;
            kept.push(Some(t));
        }
        let value = if count > 0 { loss / count as f64 } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Scales each row to unit L2 norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row_slice(i);
            let nrm = dot(row, row).sqrt();
            norms[i] = nrm;
            if nrm > 0.0 {
                for j in 0..c {
                    out[i * c + j] = row[j] / nrm;
                }
            }
        }
        self.push(mat(r, c, out), Op::L2Normalize { x, norms }, &[x])
    }

    /// Multi-head InfoNCE. `pos` is `H×P` and `neg` is `H×N` similarity
    /// scores; every positive of a head is contrasted against all of that
    /// head's negatives and the terms are summed over heads and positives.
    pub fn contrastive(&mut self, pos: Var, neg: Var, tau: f64) -> Result<Var> {
        let (tp, tn) = (self.value(pos), self.value(neg));
        if tp.rows() != tn.rows() && tn.numel() > 0 {
            return Err(shape_err("contrastive", tp, tn));
        }
        let (h, p) = tp.dims2();
        let n = if tn.numel() == 0 { 0 } else { tn.cols() };
        let mut loss = 0.0;
        for k in 0..h {
            let negs = if n == 0 { &[][..] } else { tn.row_slice(k) };
            for j in 0..p {
                loss += infonce_term(tp.data()[k * p + j], negs, tau).0;
            }
        }
        Ok(self.push(Tensor::scalar(loss), Op::Contrastive { pos, neg, tau }, &[pos, neg]))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(mat(r, c, out), Op::Dropout { x, mask }, &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, Var(i), &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        this: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.value(v).numel();
                grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
            }};
        }
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => out.add(*id, g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                if needs(*a) {
                    matmul_t_acc(g, tb.data(), acc!(*a), m, n, k);
                }
                if needs(*b) {
                    matmul_tn_acc(ta.data(), g, acc!(*b), m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (n, _)) = (ta.dims2(), tb.dims2());
                if needs(*a) {
                    matmul_acc(g, tb.data(), acc!(*a), m, n, k);
                }
                if needs(*b) {
                    matmul_tn_acc(g, ta.data(), acc!(*b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if needs(*b) {
                    let c = self.value(*b).cols();
                    let db = acc!(*b);
                    for row in g.chunks(c.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let da = acc!(*a);
                    for ((d, s), y) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += s * y;
                    }
                }
                if needs(*b) {
                    let db = acc!(*b);
                    for ((d, s), x) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let da = acc!(*a);
                for ((d, v), x) in da.iter_mut().zip(g).zip(ta.data()) {
                    if *x > 0.0 {
                        *d += v;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.value(*x).dims2();
                let gam = self.value(*gamma).data();
                if needs(*gamma) {
                    let dg = acc!(*gamma);
                    for i in 0..r * c {
                        dg[i % c] += g[i] * xhat[i];
                    }
                }
                if needs(*beta) {
                    let db = acc!(*beta);
                    for i in 0..r * c {
                        db[i % c] += g[i];
                    }
                }
                if needs(*x) {
                    let dx = acc!(*x);
                    let cf = c as f64;
                    for i in 0..r {
                        let gi = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let d = gi[j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        for j in 0..c {
                            let d = gi[j] * gam[j];
                            dx[i * c + j] += inv_std[i] / cf * (cf * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.value(this);
                let (r, c) = y.dims2();
                let da = acc!(*a);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let s = dot(yr, gr);
                    for j in 0..c {
                        da[i * c + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                let dt = acc!(*table);
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g[row * d..(row + 1) * d];
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = self.value(this).cols();
                let dx = acc!(*x);
                for (i, row) in g.chunks(w.max(1)).enumerate() {
                    dx[i * c + start..i * c + start + w]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                let dx = acc!(*x);
                dx[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
            Op::ConcatCols(parts) => {
                let total = self.value(this).cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if needs(p) {
                        let dp = acc!(p);
                        for (i, row) in g.chunks(total.max(1)).enumerate() {
                            dp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&row[offset..offset + w])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if needs(p) {
                        acc!(p)
                            .iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2();
                let dx = acc!(*x);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::RepeatRows(x, times) => {
                let n = self.value(*x).numel();
                let dx = acc!(*x);
                for t in 0..*times {
                    dx.iter_mut()
                        .zip(&g[t * n..(t + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::RowSum(x) => {
                let c = self.value(*x).cols();
                let dx = acc!(*x);
                for (i, gi) in g.iter().enumerate() {
                    dx[i * c..(i + 1) * c].iter_mut().for_each(|a| *a += gi);
                }
            }
            Op::Sum(x) => {
                acc!(*x).iter_mut().for_each(|a| *a += g[0]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                let dl = acc!(*logits);
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for j in 0..v {
                        dl[i * v + j] += scale * probs[i * v + j];
                    }
                    dl[i * v + t] -= scale;
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = self.value(this);
                let c = y.cols();
                let dx = acc!(*x);
                for (i, &nrm) in norms.iter().enumerate() {
                    if nrm == 0.0 {
                        continue;
                    }
                    let yr = y.row_slice(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let s = dot(yr, gr);
                    for j in 0..c {
                        dx[i * c + j] += (gr[j] - yr[j] * s) / nrm;
                    }
                }
            }
            Op::Contrastive { pos, neg, tau } => {
                let (tp, tn) = (self.value(*pos), self.value(*neg));
                let (h, p) = tp.dims2();
                let n = if tn.numel() == 0 { 0 } else { tn.cols() };
                let mut dpos = vec![0.0; h * p];
                let mut dneg = vec![0.0; h * n];
                for k in 0..h {
                    let negs = if n == 0 { &[][..] } else { tn.row_slice(k) };
                    for j in 0..p {
                        let (_, wpos, wneg) = infonce_term(tp.data()[k * p + j], negs, *tau);
                        dpos[k * p + j] += g[0] * (wpos - 1.0) / tau;
                        for (i, w) in wneg.iter().enumerate() {
                            dneg[k * n + i] += g[0] * w / tau;
                        }
                    }
                }
                if needs(*pos) {
                    acc!(*pos).iter_mut().zip(&dpos).for_each(|(a, b)| *a += b);
                }
                if needs(*neg) && n > 0 {
                    acc!(*neg).iter_mut().zip(&dneg).for_each(|(a, b)| *a += b);
                }
            }
            Op::Dropout { x, mask } => {
                let dx = acc!(*x);
                for ((d, v), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += v * m;
                }
            }
        }
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// One `-log(e^{a} / (e^{a} + Σ e^{b_i}))` term with `a = pos/τ`,
/// `b_i = neg_i/τ`, stabilized by max subtraction. Also returns the
/// softmax weights of the positive and of each negative.
pub(crate) fn infonce_term(pos: f64, negs: &[f64], tau: f64) -> (f64, f64, Vec<f64>) {
    let a = pos / tau;
    let max = negs.iter().map(|s| s / tau).fold(a, f64::max);
    let ea = (a - max).exp();
    let eb: Vec<f64> = negs.iter().map(|s| (s / tau - max).exp()).collect();
    let z = ea + eb.iter().sum::<f64>();
    let loss = z.ln() - (a - max);
    (loss, ea / z, eb.into_iter().map(|e| e / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn grad_check(store: &mut ParamStore, f: &dyn Fn(&mut Graph) -> Var) -> f64 {
        crate::tensor::gradcheck::max_relative_error(store, &|g| Ok(f(g)), 1e-5).unwrap()
    }

    /// Reduces an arbitrary-shaped output to a scalar with fixed random weights
    /// so that every output element carries a distinct gradient.
    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let (r, c) = g.value(y).dims2();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(rand_tensor(&mut rng, r, c));
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    }

    fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for &(name, r, c) in shapes {
            s.add(name, rand_tensor(&mut rng, r, c));
        }
        s
    }

    const TOL: f64 = 1e-4;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::row(vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::standalone();
        let x = g.constant(rand_tensor(&mut rng, 5, 7));
        let x = g.scale(x, 30.0);
        let y = g.softmax(x);
        for i in 0..5 {
            let s: f64 = g.value(y).row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_of_identity_table() {
        let mut g = Graph::standalone();
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let t = g.constant(eye);
        let e = g.embedding(t, &[0]).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, 0.0, 0.0]);
        assert!(g.embedding(t, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut g = Graph::standalone();
        let logits = g.constant(
            Tensor::matrix(2, 3, vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap(),
        );
        let l = g.cross_entropy(logits, &[0, 2], 99).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn cross_entropy_skips_pad() {
        let mut g = Graph::standalone();
        let logits = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 10.0, -10.0]).unwrap());
        let l = g.cross_entropy(logits, &[1, 0], 0).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::standalone();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
        assert!(matches!(g.add_row(a, b), Err(Error::Shape { op: "add_row", .. })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::zeros(vec![3, 4]));
        let mut g = Graph::new(&s);
        let xv = g.param(x);
        let l = g.sum(xv);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_square() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::scalar(3.0));
        let mut g = Graph::new(&s);
        let xv = g.param(x);
        let l = g.mul(xv, xv).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::zeros(vec![2, 2]));
        let mut g = Graph::new(&s);
        let xv = g.param(x);
        assert!(matches!(g.backward(xv), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates_in_store() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::scalar(2.0));
        let grads = {
            let mut g = Graph::new(&s);
            let xv = g.param(x);
            let l = g.scale(xv, 5.0);
            g.backward(l).unwrap()
        };
        s.accumulate(&grads);
        s.accumulate(&grads);
        assert_eq!(s.grad(x).unwrap(), &[10.0]);
    }

    #[test]
    fn grad_matmul_family() {
        let mut s = store_with(&[("a", 3, 4), ("b", 4, 2), ("c", 5, 4)], 1);
        let (a, b, c) = (ParamId(0), ParamId(1), ParamId(2));
        let err = grad_check(&mut s, &|g| {
            let (av, bv, cv) = (g.param(a), g.param(b), g.param(c));
            let ab = g.matmul(av, bv).unwrap();
            let act = g.matmul_t(av, cv).unwrap();
            let x = weighted_sum(g, ab, 10);
            let y = weighted_sum(g, act, 11);
            g.add(x, y).unwrap()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn grad_elementwise_family() {
        let mut s = store_with(&[("a", 3, 4), ("b", 3, 4), ("r", 1, 4)], 2);
        let (a, b, r) = (ParamId(0), ParamId(1), ParamId(2));
        let mask = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let err = grad_check(&mut s, &|g| {
            let (av, bv, rv) = (g.param(a), g.param(b), g.param(r));
            let x = g.add(av, bv).unwrap();
            let x = g.add_row(x, rv).unwrap();
            let x = g.mul(x, av).unwrap();
            let x = g.scale(x, 1.7);
            let x = g.add_const(x, &mask).unwrap();
            let x = g.relu(x);
            weighted_sum(g, x, 12)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn grad_layer_norm() {
        let mut s = store_with(&[("x", 4, 6), ("g", 1, 6), ("b", 1, 6)], 3);
        let err = grad_check(&mut s, &|g| {
            let (x, ga, be) = (g.param(ParamId(0)), g.param(ParamId(1)), g.param(ParamId(2)));
            let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
            weighted_sum(g, y, 13)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn grad_softmax_and_cross_entropy() {
        let mut s = store_with(&[("x", 3, 5)], 4);
        let err = grad_check(&mut s, &|g| {
            let x = g.param(ParamId(0));
            let y = g.softmax(x);
            weighted_sum(g, y, 14)
        });
        assert!(err < TOL, "{err}");
        let err = grad_check(&mut s, &|g| {
            let x = g.param(ParamId(0));
            g.cross_entropy(x, &[1, 0, 4], 0).unwrap()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn grad_shape_ops() {
        let mut s = store_with(&[("t", 5, 3), ("x", 2, 6)], 5);
        let (t, x) = (ParamId(0), ParamId(1));
        let err = grad_check(&mut s, &|g| {
            let (tv, xv) = (g.param(t), g.param(x));
            let e = g.embedding(tv, &[4, 0, 4, 2]).unwrap(); // 4×3
            let left = g.slice_cols(xv, 0, 3).unwrap();
            let right = g.slice_cols(xv, 3, 6).unwrap();
            let cat = g.concat_cols(&[right, left]).unwrap(); // 2×6
            let r = g.reshape(cat, 4, 3).unwrap();
            let rows = g.slice_rows(r, 1, 3).unwrap();
            let stacked = g.concat_rows(&[rows, e]).unwrap(); // 6×3
            let rep = g.repeat_rows(stacked, 2);
            let rep = g.transpose(rep);
            let rs = g.row_sum(rep);
            let a = weighted_sum(g, rs, 15);
            let m = g.mean(stacked);
            g.add(a, m).unwrap()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn grad_l2_normalize() {
        let mut s = store_with(&[("x", 3, 4)], 6);
        let err = grad_check(&mut s, &|g| {
            let x = g.param(ParamId(0));
            let y = g.l2_normalize_rows(x);
            weighted_sum(g, y, 16)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let y = g.l2_normalize_rows(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
    }

    #[test]
    fn grad_contrastive() {
        let mut s = store_with(&[("p", 3, 2), ("n", 3, 4)], 7);
        let err = grad_check(&mut s, &|g| {
            let (p, n) = (g.param(ParamId(0)), g.param(ParamId(1)));
            g.contrastive(p, n, 0.1).unwrap()
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn grad_dropout_uses_fixed_mask() {
        let mut s = store_with(&[("x", 4, 4)], 8);
        let err = grad_check(&mut s, &|g| {
            let x = g.param(ParamId(0));
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let y = g.dropout(x, 0.3, &mut rng);
            weighted_sum(g, y, 17)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn infonce_closed_forms() {
        assert_eq!(infonce_term(0.7, &[], 0.1).0, 0.0);
        for tau in [0.05, 0.1, 1.0, 3.0] {
            let l = infonce_term(0.3, &[0.3], tau).0;
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }
}
