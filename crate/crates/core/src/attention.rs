//! Scaled dot-product attention with log-sum-exp tracking, chunk combination
//! and grouped-query head mapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, softmax_into, Matrix};

/// Layer/head geometry of a grouped-query attention model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl ModelShape {
    pub fn new(
        num_layers: usize,
        num_q_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let s = Self {
            num_layers,
            num_q_heads,
            num_kv_heads,
            head_dim,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "degenerate model shape {self:?}"
            )));
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::InvalidConfig(format!(
                "{} query heads not divisible by {} kv heads",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    /// Contiguous block of query heads served by `kv_head`.
    pub fn q_heads_for(&self, kv_head: usize) -> std::ops::Range<usize> {
        let g = self.group_size();
        kv_head * g..(kv_head + 1) * g
    }

    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }
}

/// Partial attention result of one chunk: output rows and their log-sum-exp.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Matrix,
    pub lse: Vec<f64>,
}

impl AttentionOutput {
    /// Contribution of a chunk with no keys: zero output, `lse = -inf`.
    pub fn empty(n_q: usize, d: usize) -> Self {
        Self {
            output: Matrix::zeros(n_q, d),
            lse: vec![f64::NEG_INFINITY; n_q],
        }
    }
}

/// `softmax(Q Kᵀ / √head_dim) V` with per-row log-sum-exp.
pub fn attend(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    head_dim: usize,
) -> Result<AttentionOutput> {
    if keys.rows() == 0 {
        return Err(Error::EmptyCache);
    }
    if queries.cols() != keys.cols() || keys.rows() != values.rows() {
        return Err(Error::DimensionMismatch(format!(
            "attend: q {:?}, k {:?}, v {:?}",
            queries.shape(),
            keys.shape(),
            values.shape()
        )));
    }
    if queries.cols() != head_dim {
        return Err(Error::DimensionMismatch(format!(
            "attend: head_dim {head_dim} but queries have {} columns",
            queries.cols()
        )));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let n_k = keys.rows();
    let mut scores = vec![0.0; n_k];
    let mut probs = vec![0.0; n_k];
    let mut output = Matrix::zeros(queries.rows(), values.cols());
    let mut lse = Vec::with_capacity(queries.rows());
    for i in 0..queries.rows() {
        let q = queries.row(i);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(q, keys.row(j)) * scale;
        }
        lse.push(softmax_into(&scores, &mut probs));
        let out = output.row_mut(i);
        for (j, &p) in probs.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(values.row(j)) {
                *o += p * v;
            }
        }
    }
    if lse.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("attention log-sum-exp"));
    }
    Ok(AttentionOutput { output, lse })
}

/// Merges the partial results of two disjoint key chunks.
pub fn combine_chunks(a: &AttentionOutput, b: &AttentionOutput) -> Result<AttentionOutput> {
    if a.output.shape() != b.output.shape() || a.lse.len() != b.lse.len() {
        return Err(Error::DimensionMismatch(format!(
            "combine_chunks: {:?} vs {:?}",
            a.output.shape(),
            b.output.shape()
        )));
    }
    let (n_q, d) = a.output.shape();
    let mut output = Matrix::zeros(n_q, d);
    let mut lse = Vec::with_capacity(n_q);
    for i in 0..n_q {
        let (la, lb) = (a.lse[i], b.lse[i]);
        if lb == f64::NEG_INFINITY {
            output.row_mut(i).copy_from_slice(a.output.row(i));
            lse.push(la);
            continue;
        }
        if la == f64::NEG_INFINITY {
            output.row_mut(i).copy_from_slice(b.output.row(i));
            lse.push(lb);
            continue;
        }
        let mx = la.max(lb);
        let l = mx + ((la - mx).exp() + (lb - mx).exp()).ln();
        let (wa, wb) = ((la - l).exp(), (lb - l).exp());
        for ((o, &x), &y) in output
            .row_mut(i)
            .iter_mut()
            .zip(a.output.row(i))
            .zip(b.output.row(i))
        {
            *o = wa * x + wb * y;
        }
        lse.push(l);
    }
    Ok(AttentionOutput { output, lse })
}

/// The query matrices of the `g` query heads served by `kv_head_index`.
pub fn gqa_expand<'a>(
    queries_by_qhead: &'a [Matrix],
    shape: &ModelShape,
    kv_head_index: usize,
) -> Result<&'a [Matrix]> {
    if kv_head_index >= shape.num_kv_heads {
        return Err(Error::IndexOutOfRange {
            index: kv_head_index,
            len: shape.num_kv_heads,
        });
    }
    if queries_by_qhead.len() != shape.num_q_heads {
        return Err(Error::DimensionMismatch(format!(
            "{} query matrices for {} query heads",
            queries_by_qhead.len(),
            shape.num_q_heads
        )));
    }
    Ok(&queries_by_qhead[shape.q_heads_for(kv_head_index)])
}
