//! Dense f64 tensors with a tape-based reverse-mode autodiff graph, the
//! transformer layers both models are built from, and Adam with warmup.

mod graph;
pub mod gradcheck;
pub mod layers;
mod optim;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{Gradients, Graph, Var};
pub use optim::{warmup_lr, Adam, AdamConfig, TrainReport};
pub use params::{Checkpoint, ParamId, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

/// Row-major dense tensor. Graph operations work on rank-2 tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` view: rank 1 is a single row, rank 0 a 1×1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [c] => (1, *c),
            [r, c] => (*r, *c),
            more => {
                let c = *more.last().unwrap();
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn matmul_t_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out += aᵀ · b` for `a: m×k`, `b: m×n`, giving `k×n`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
