//! Multi-head attention, clustered head attention and the prunable cache.
//!
//! Both paths share [`head_probs`] and [`weighted_values`], and the clustered
//! path projects queries/keys with [`matmul_cols`], so a plan of singleton
//! clusters reproduces multi-head attention bit for bit.

mod cache;
mod trace;

pub use cache::{prune_cache, prune_cache_with_values, CacheSummary, KVCache, LayerCache};
pub use trace::{AttentionTrace, TraceTarget, TRACE_CSV_HEADER};

use crate::error::{ChaiError, Result};
use crate::model::LayerWeights;
use crate::plan::ClusterPlan;
use crate::tensor::{self, apply_rope_in_place, matmul, matmul_cols, softmax_rows, Matrix};

/// Which attention computation a forward pass uses.
#[derive(Debug, Clone, Copy)]
pub enum AttentionPath<'a> {
    Mha,
    Clustered {
        plan: &'a ClusterPlan,
        /// Reuse the representative's values for every head in its cluster.
        reuse_values: bool,
    },
}

/// Causal attention probabilities of `queries` (rows at absolute positions
/// `start..`) over the first `start + queries.rows()` cached keys.
pub fn head_probs(queries: &Matrix, keys: &[f32], start: usize) -> Result<Matrix> {
    let dh = queries.cols();
    let n = start + queries.rows();
    if keys.len() < n * dh {
        return Err(ChaiError::Contract(format!(
            "{} cached keys, need {n}",
            keys.len() / dh.max(1)
        )));
    }
    let scale = 1.0 / (dh as f32).sqrt();
    let mut scores = Matrix::zeros(queries.rows(), n);
    for i in 0..queries.rows() {
        let q = queries.row(i);
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate().take(start + i + 1) {
            *s = tensor::dot(q, &keys[j * dh..(j + 1) * dh]) * scale;
        }
    }
    softmax_rows(&scores, Some(start))
}

/// `probs · V` for one head, accumulating positions in ascending order.
pub fn weighted_values(probs: &Matrix, values: &[f32], dh: usize) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), dh);
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let o = out.row_mut(i);
        for (j, &pj) in p.iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            for (ot, &v) in o.iter_mut().zip(&values[j * dh..(j + 1) * dh]) {
                *ot += pj * v;
            }
        }
    }
    out
}

/// Standard multi-head attention over `x` (`T x d`), appending the new keys
/// and values to the layer's cache.
pub fn mha_forward(
    x: &Matrix,
    lw: &LayerWeights,
    cache: &mut KVCache,
    layer: usize,
    mut trace: Option<&mut TraceTarget<'_>>,
) -> Result<Matrix> {
    let h_count = cache.num_heads();
    let dh = cache.head_dim();
    if cache.is_pruned() {
        return Err(ChaiError::ModeMismatch(
            "multi-head attention needs an unpruned cache".into(),
        ));
    }
    let t = x.rows();
    let lc = cache.layer_mut(layer)?;
    let start = lc.len();

    let q = matmul(x, &lw.wq)?;
    let k = matmul(x, &lw.wk)?;
    let v = matmul(x, &lw.wv)?;

    let mut queries = Vec::with_capacity(h_count);
    for h in 0..h_count {
        let mut qh = q.col_block(h * dh, dh);
        apply_rope_in_place(&mut qh, start)?;
        let mut kh = k.col_block(h * dh, dh);
        apply_rope_in_place(&mut kh, start)?;
        lc.push_keys(h, kh.data())?;
        lc.push_values(h, v.col_block(h * dh, dh).data())?;
        queries.push(qh);
    }
    lc.advance(t);

    let mut concat = Matrix::zeros(t, h_count * dh);
    for (h, qh) in queries.iter().enumerate() {
        let probs = head_probs(qh, lc.keys(h).expect("unpruned"), start)?;
        let out = weighted_values(&probs, lc.values(h).expect("unpruned"), dh);
        concat.set_col_block(h * dh, &out);
        if let Some(target) = trace.as_deref_mut() {
            for i in 0..t {
                if let Some(step) = target.step_of_row(i, t) {
                    let row = probs.row(i)[..start + i + 1].to_vec();
                    target.trace.record(layer, h, step, row);
                }
            }
        }
    }
    matmul(&concat, &lw.wo)
}

/// Clustered head attention: queries and keys only for each cluster's
/// representative, one probability row per cluster shared by its members.
pub fn clustered_forward(
    x: &Matrix,
    lw: &LayerWeights,
    cache: &mut KVCache,
    layer: usize,
    plan: &ClusterPlan,
    reuse_values: bool,
) -> Result<Matrix> {
    let h_count = cache.num_heads();
    let dh = cache.head_dim();
    let lp = plan
        .layers
        .get(layer)
        .ok_or_else(|| ChaiError::Contract(format!("plan has no layer {layer}")))?;
    lp.validate(h_count)?;
    let reps = lp.sorted_representatives();
    let lc = cache.layer_mut(layer)?;
    if lc.stored_key_heads() != reps.as_slice() {
        return Err(ChaiError::Contract(format!(
            "layer {layer} caches keys for heads {:?} but the plan's representatives are {reps:?}",
            lc.stored_key_heads()
        )));
    }
    let values_ok = if reuse_values {
        lc.stored_value_heads() == reps.as_slice()
    } else {
        lc.stored_value_heads().len() == h_count
    };
    if !values_ok {
        return Err(ChaiError::Contract(format!(
            "layer {layer} value storage {:?} does not match reuse_values={reuse_values}",
            lc.stored_value_heads()
        )));
    }

    let t = x.rows();
    let start = lc.len();

    let mut rep_queries = Vec::with_capacity(reps.len());
    for &r in &reps {
        let mut qr = matmul_cols(x, &lw.wq, r * dh, dh)?;
        apply_rope_in_place(&mut qr, start)?;
        let mut kr = matmul_cols(x, &lw.wk, r * dh, dh)?;
        apply_rope_in_place(&mut kr, start)?;
        lc.push_keys(r, kr.data())?;
        rep_queries.push(qr);
    }
    if reuse_values {
        for &r in &reps {
            lc.push_values(r, matmul_cols(x, &lw.wv, r * dh, dh)?.data())?;
        }
    } else {
        let v = matmul(x, &lw.wv)?;
        for h in 0..h_count {
            lc.push_values(h, v.col_block(h * dh, dh).data())?;
        }
    }
    lc.advance(t);

    // probability rows indexed by head, filled for representatives only
    let mut probs: Vec<Option<Matrix>> = vec![None; h_count];
    for (&r, qr) in reps.iter().zip(&rep_queries) {
        probs[r] = Some(head_probs(qr, lc.keys(r).expect("representative"), start)?);
    }

    let mut concat = Matrix::zeros(t, h_count * dh);
    let mut shared: Vec<Option<Matrix>> = vec![None; h_count];
    for h in 0..h_count {
        let rep = lp.representative_of(h);
        let p = probs[rep].as_ref().expect("representative row");
        let out = if reuse_values {
            shared[rep]
                .get_or_insert_with(|| weighted_values(p, lc.values(rep).expect("representative"), dh))
                .clone()
        } else {
            weighted_values(p, lc.values(h).expect("all values cached"), dh)
        };
        concat.set_col_block(h * dh, &out);
    }
    matmul(&concat, &lw.wo)
}
