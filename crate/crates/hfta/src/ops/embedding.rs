//! Embedding lookup and its fused form.
//!
//! B tables of shape [eps_rows, xi] concatenate row-wise into one
//! [B*eps_rows, xi] table; model b's indices are offset by b*eps_rows before
//! the lookup, so every model reads only its own block. Indices are carried
//! as integral f64 values and validated against the serial table size
//! before offsetting.

use crate::error::{Error, Result};
use crate::ops::{counter, FusedParameter};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingConfig {
    pub num_embeddings: usize,
    pub embedding_dim: usize,
}

fn index_of(v: f64, limit: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 {
        return Err(Error::Range(format!("embedding index {v} is not a non-negative integer")));
    }
    let idx = v as usize;
    if idx >= limit {
        return Err(Error::Range(format!("embedding index {idx} >= table rows {limit}")));
    }
    Ok(idx)
}

/// Serial lookup: output shape = indices.shape() + [embedding_dim].
pub fn embedding_forward(indices: &Tensor, table: &Tensor, cfg: &EmbeddingConfig) -> Result<Tensor> {
    embedding_forward_offset(indices, table, cfg, 0, cfg.num_embeddings)
}

/// Lookup with a per-call row offset; the fused path validates each index
/// against the serial row count `serial_rows` BEFORE offsetting.
pub fn embedding_forward_offset(
    indices: &Tensor,
    table: &Tensor,
    cfg: &EmbeddingConfig,
    offset: usize,
    serial_rows: usize,
) -> Result<Tensor> {
    let xi = cfg.embedding_dim;
    if table.shape().len() != 2 || table.shape()[1] != xi {
        return Err(Error::dim(format!(
            "embedding table {:?} does not match embedding_dim {xi}",
            table.shape()
        )));
    }
    counter::bump("embedding");
    let mut shape = indices.shape().to_vec();
    shape.push(xi);
    let mut out = vec![0.0; indices.numel() * xi];
    for (i, &v) in indices.data().iter().enumerate() {
        let idx = index_of(v, serial_rows)? + offset;
        out[i * xi..(i + 1) * xi].copy_from_slice(&table.data()[idx * xi..(idx + 1) * xi]);
    }
    Tensor::new(shape, out)
}

/// Gradient w.r.t. the table: scatter-add of the upstream gradient rows.
pub fn embedding_backward(
    grad_y: &Tensor,
    indices: &Tensor,
    table_shape: &[usize],
    offset: usize,
) -> Tensor {
    let xi = table_shape[1];
    let mut gt = vec![0.0; table_shape.iter().product()];
    for (i, &v) in indices.data().iter().enumerate() {
        let idx = v as usize + offset;
        for j in 0..xi {
            gt[idx * xi + j] += grad_y.data()[i * xi + j];
        }
    }
    Tensor::new(table_shape.to_vec(), gt).unwrap()
}

/// Fuse B embedding tables with identical (rows, dim) into one row-stacked
/// table; the index-offset rule is b*rows for model b.
pub fn fuse_embedding(
    configs: &[EmbeddingConfig],
    tables: &[Tensor],
) -> Result<(EmbeddingConfig, FusedParameter)> {
    if configs.is_empty() {
        return Err(Error::EmptyFusion("no embedding configs".into()));
    }
    let first = &configs[0];
    for c in &configs[1..] {
        if c.num_embeddings != first.num_embeddings {
            return Err(Error::Infusible {
                field: "num_embeddings".into(),
                detail: format!("{} vs {}", first.num_embeddings, c.num_embeddings),
            });
        }
        if c.embedding_dim != first.embedding_dim {
            return Err(Error::Infusible {
                field: "embedding_dim".into(),
                detail: format!("{} vs {}", first.embedding_dim, c.embedding_dim),
            });
        }
    }
    let fused_cfg = EmbeddingConfig {
        num_embeddings: configs.len() * first.num_embeddings,
        embedding_dim: first.embedding_dim,
    };
    let table = FusedParameter::fuse(tables, 0)?;
    Ok((fused_cfg, table))
}
