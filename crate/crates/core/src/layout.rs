//! Shape conventions shared by the kernels.
//!
//! Queries are `[n_q, h_q, d_h]`, keys and values `[n_k, h_kv, d_h]`, token
//! axis outermost. Query row `r` sits at absolute position
//! `n_k - n_q + r`, so `n_q == n_k` is ordinary self-attention and a shorter
//! query block is the trailing slice of the sequence (chunked prefill or a
//! decode step). Query head `h` reads KV head `h / G` (0-based).

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub n_q: usize,
    pub n_k: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub group_size: usize,
    pub head_dim: usize,
}

impl Geometry {
    /// Absolute position of query row 0.
    #[inline]
    pub fn q_offset(&self) -> usize {
        self.n_k - self.n_q
    }

    #[inline]
    pub fn position(&self, row: usize) -> usize {
        self.q_offset() + row
    }

    /// Number of keys query `row` may read.
    #[inline]
    pub fn visible_len(&self, row: usize, causal: bool) -> usize {
        if causal {
            self.position(row) + 1
        } else {
            self.n_k
        }
    }

    pub fn from_queries<T: Scalar>(q: &Tensor<T>, n_k: usize, cfg: &AttentionConfig) -> Result<Self> {
        expect_rank3(q, "queries")?;
        let [n_q, h_q, d_h] = [q.shape()[0], q.shape()[1], q.shape()[2]];
        if n_q == 0 || n_k == 0 {
            return Err(Error::EmptySequence);
        }
        let expected = vec![n_q.min(n_k), cfg.query_heads, cfg.head_dim];
        if n_q > n_k || h_q != cfg.query_heads || d_h != cfg.head_dim {
            return Err(Error::ShapeMismatch {
                what: "queries",
                expected,
                got: q.shape().to_vec(),
            });
        }
        if cfg.kv_heads == 0 || !cfg.query_heads.is_multiple_of(cfg.kv_heads) {
            return Err(Error::InvalidArgument(format!(
                "h_q = {} is not a multiple of h_kv = {}",
                cfg.query_heads, cfg.kv_heads
            )));
        }
        Ok(Self {
            n_q,
            n_k,
            query_heads: h_q,
            kv_heads: cfg.kv_heads,
            group_size: h_q / cfg.kv_heads,
            head_dim: d_h,
        })
    }

    pub fn from_qkv<T: Scalar>(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        expect_rank3(k, "keys")?;
        let geom = Self::from_queries(q, k.shape()[0], cfg)?;
        let kv_shape = [geom.n_k, geom.kv_heads, geom.head_dim];
        for (t, what) in [(k, "keys"), (v, "values")] {
            if t.shape() != kv_shape {
                return Err(Error::ShapeMismatch {
                    what,
                    expected: kv_shape.to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(geom)
    }

    pub fn check_output_grad<T: Scalar>(&self, d_out: &Tensor<T>) -> Result<()> {
        let expected = [self.n_q, self.query_heads, self.head_dim];
        if d_out.shape() != expected {
            return Err(Error::ShapeMismatch {
                what: "output gradient",
                expected: expected.to_vec(),
                got: d_out.shape().to_vec(),
            });
        }
        Ok(())
    }
}

fn expect_rank3<T: Scalar>(t: &Tensor<T>, what: &'static str) -> Result<()> {
    if t.rank() != 3 {
        return Err(Error::ShapeMismatch {
            what,
            expected: vec![0, 0, 0],
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Row-major `[tokens, heads, d_h]` buffer widened to `f64`.
pub(crate) struct Heads {
    data: Vec<f64>,
    heads: usize,
    head_dim: usize,
}

impl Heads {
    pub fn new<T: Scalar>(t: &Tensor<T>) -> Self {
        Self {
            data: t.to_f64_vec(),
            heads: t.shape()[1],
            head_dim: t.shape()[2],
        }
    }

    #[inline(always)]
    pub fn row(&self, token: usize, head: usize) -> &[f64] {
        let start = (token * self.heads + head) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }
}
