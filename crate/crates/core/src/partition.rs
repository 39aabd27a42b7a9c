//! Turning `S×n` node features into `P+Z+1` visual representations.
//!
//! Static partitioning averages fixed node sets. Adaptive partitioning lets
//! each description row attend over all nodes:
//!
//! ```text
//! Q = F·W_Q     K = G·W_K     A = softmax_rows(Q·Kᵀ / √h)     R = A·G
//! ```

use crate::bundle::{Dims, StaticPartitionMap};
use crate::tape::{GradTape, Var};
use crate::tensor::{self, matmul, softmax_rows, Result, Tensor, TensorError};

/// Learnable cross-attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPartition {
    /// `m×h`
    pub w_q: Tensor,
    /// `n×h`
    pub w_k: Tensor,
}

impl AttentionPartition {
    pub fn new(w_q: Tensor, w_k: Tensor) -> Result<Self> {
        let (_, h) = w_q.dims2("attention w_q")?;
        let (_, h2) = w_k.dims2("attention w_k")?;
        if h != h2 {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: w_q.shape().to_vec(),
                right: w_k.shape().to_vec(),
            });
        }
        Ok(Self { w_q, w_k })
    }

    pub fn projection_dim(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn text_dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.w_k.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOutput {
    /// `(P+Z+1)×n`, or a single row for a global-only query.
    pub r: Tensor,
    /// Attention weights `rows×S`; adaptive mode only.
    pub a: Option<Tensor>,
}

/// Averages node features over the static part, interval and global sets.
pub fn partition_static(nodes: &Tensor, map: &StaticPartitionMap, dims: &Dims) -> Result<PartitionOutput> {
    let (s, _) = nodes.dims2("partition_static")?;
    if s != dims.nodes() {
        return Err(TensorError::ShapeMismatch {
            op: "partition_static",
            left: nodes.shape().to_vec(),
            right: vec![dims.nodes(), dims.feature_dim],
        });
    }
    let r = matmul(&map.averaging_matrix(dims), nodes)?;
    Ok(PartitionOutput { r, a: None })
}

/// Mean over all nodes: the static global row.
pub fn node_mean(nodes: &Tensor) -> Result<Tensor> {
    let (s, n) = nodes.dims2("node_mean")?;
    let mut out = vec![0.0; n];
    for i in 0..s {
        for (o, v) in out.iter_mut().zip(nodes.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= s as f64);
    Tensor::matrix(1, n, out)
}

/// Cross-attention partitioning. `queries` are description rows (`k×m`),
/// normally a full `(P+Z+1)×m` bank.
pub fn partition_adaptive(nodes: &Tensor, queries: &Tensor, att: &AttentionPartition) -> Result<PartitionOutput> {
    let (_, n) = nodes.dims2("partition_adaptive")?;
    let (_, m) = queries.dims2("partition_adaptive")?;
    if n != att.feature_dim() || m != att.text_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "partition_adaptive",
            left: vec![m, n],
            right: vec![att.text_dim(), att.feature_dim()],
        });
    }
    let h = att.projection_dim();
    let q = matmul(queries, &att.w_q)?;
    let k = matmul(nodes, &att.w_k)?;
    let (qr, _) = q.dims2("q")?;
    let (s, _) = k.dims2("k")?;
    let scale = 1.0 / (h as f64).sqrt();
    let logits: Vec<f64> = tensor::matmul_nt_kernel(q.data(), k.data(), qr, h, s)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    let a = softmax_rows(&Tensor::matrix(qr, s, logits)?)?;
    let r = matmul(&a, nodes)?;
    Ok(PartitionOutput { r, a: Some(a) })
}

/// Records adaptive partitioning on a tape; returns `(R, A)`.
pub fn partition_adaptive_on_tape(
    tape: &mut GradTape,
    nodes: Var,
    queries: Var,
    w_q: Var,
    w_k: Var,
) -> Result<(Var, Var)> {
    let h = tape.value(w_q).shape()[1];
    let q = tape.matmul(queries, w_q)?;
    let k = tape.matmul(nodes, w_k)?;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (h as f64).sqrt())?;
    let a = tape.softmax_rows(logits)?;
    let r = tape.matmul(a, nodes)?;
    Ok((r, a))
}
