use alloc::format;
use alloc::vec::Vec;

use super::params::LayerDims;
use super::{AttentionMask, Graph};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Output of one attention block.
pub struct AttentionOutput {
    pub hidden: Var,
    /// Attention distributions, `[heads, queries, memory + queries]`.
    pub attention: Var,
}

fn relative_indices(heads: usize, range: usize, queries: usize, memory: usize) -> Vec<usize> {
    let keys = memory + queries;
    let width = 2 * range + 1;
    let mut idx = Vec::with_capacity(heads * queries * keys);
    for a in 0..heads {
        for q in 0..queries {
            for k in 0..keys {
                let offset = (memory + q) as i64 - k as i64;
                let clipped = offset.clamp(-(range as i64), range as i64);
                idx.push(a * width + (clipped + range as i64) as usize);
            }
        }
    }
    idx
}

/// Multi-head attention with residual and layer norm:
/// `LN(H + concat_a(A_a (H W^V_a)) W^O)` with
/// `A_a = softmax(Q_a K_aᵀ / sqrt(d') + relative bias + mask)`.
///
/// `memory` rows are prepended on the key/value side only.
pub fn multi_head_attention<E: Element>(
    g: &mut Graph<'_, '_, E>,
    prefix: &str,
    dims: LayerDims,
    eps: f64,
    input: Var,
    memory: Option<Var>,
    mask: AttentionMask,
) -> Result<AttentionOutput> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 2 || shape[1] != dims.hidden {
        return Err(Error::shape(
            "multi_head_attention",
            format!("input {shape:?} for hidden {}", dims.hidden),
        ));
    }
    let queries = shape[0];
    let mem_rows = match memory {
        Some(m) => {
            let ms = g.value(m).shape();
            if ms.len() != 2 || ms[1] != dims.hidden {
                return Err(Error::shape(
                    "multi_head_attention",
                    format!("memory {ms:?} for hidden {}", dims.hidden),
                ));
            }
            ms[0]
        }
        None => 0,
    };
    let keys = queries + mem_rows;
    let kv_input = match memory {
        Some(m) => g.tape().concat_rows(&[m, input])?,
        None => input,
    };
    let mask_var = if mask.is_bidirectional() {
        None
    } else {
        let additive = mask.additive(queries, mem_rows);
        Some(g.constant(Tensor::from_parts(
            alloc::vec![queries, keys],
            additive.into_iter().map(E::from_f64).collect(),
        )))
    };
    let rel_table = g.param(&format!("{prefix}.attn.rel_bias"))?;
    let rel_idx = relative_indices(dims.heads, dims.relative_range, queries, mem_rows);
    let scale = 1.0 / libm::sqrt(dims.head_dim() as f64);
    let per_head = queries * keys;

    let mut head_outputs = Vec::with_capacity(dims.heads);
    let mut maps = Vec::with_capacity(dims.heads);
    for a in 0..dims.heads {
        let wq = g.param(&format!("{prefix}.attn.head{a}.wq"))?;
        let wk = g.param(&format!("{prefix}.attn.head{a}.wk"))?;
        let wv = g.param(&format!("{prefix}.attn.head{a}.wv"))?;
        let t = g.tape();
        let q = t.matmul(input, wq)?;
        let k = t.matmul(kv_input, wk)?;
        let v = t.matmul(kv_input, wv)?;
        let kt = t.transpose(k)?;
        let scores = t.matmul(q, kt)?;
        let scores = t.scale(scores, scale)?;
        let bias = t.gather(
            rel_table,
            rel_idx[a * per_head..(a + 1) * per_head].to_vec(),
            &[queries, keys],
        )?;
        let mut scores = t.add(scores, bias)?;
        if let Some(mv) = mask_var {
            scores = t.add(scores, mv)?;
        }
        let probs = t.softmax(scores, 1)?;
        head_outputs.push(t.matmul(probs, v)?);
        maps.push(probs);
    }
    let wo = g.param(&format!("{prefix}.attn.wo"))?;
    let gain = g.param(&format!("{prefix}.ln1.gain"))?;
    let bias = g.param(&format!("{prefix}.ln1.bias"))?;
    let t = g.tape();
    let concat = t.concat_cols(&head_outputs)?;
    let projected = t.matmul(concat, wo)?;
    let residual = t.add(input, projected)?;
    let hidden = t.layer_norm(residual, gain, bias, eps)?;
    let attention = t.stack(&maps)?;
    Ok(AttentionOutput { hidden, attention })
}

/// `LN(H' + W2 gelu(W1 H' + b1) + b2)`.
pub fn feed_forward<E: Element>(
    g: &mut Graph<'_, '_, E>,
    prefix: &str,
    eps: f64,
    input: Var,
) -> Result<Var> {
    let w1 = g.param(&format!("{prefix}.ffn.w1"))?;
    let b1 = g.param(&format!("{prefix}.ffn.b1"))?;
    let w2 = g.param(&format!("{prefix}.ffn.w2"))?;
    let b2 = g.param(&format!("{prefix}.ffn.b2"))?;
    let gain = g.param(&format!("{prefix}.ln2.gain"))?;
    let bias = g.param(&format!("{prefix}.ln2.bias"))?;
    let t = g.tape();
    let h = t.matmul(input, w1)?;
    let h = t.add_bias(h, b1)?;
    let h = t.gelu(h)?;
    let h = t.matmul(h, w2)?;
    let h = t.add_bias(h, b2)?;
    let residual = t.add(input, h)?;
    t.layer_norm(residual, gain, bias, eps)
}

/// One transformer block: attention followed by the feed-forward network.
pub fn transformer_layer<E: Element>(
    g: &mut Graph<'_, '_, E>,
    prefix: &str,
    dims: LayerDims,
    eps: f64,
    input: Var,
    memory: Option<Var>,
    mask: AttentionMask,
) -> Result<AttentionOutput> {
    let attn = multi_head_attention(g, prefix, dims, eps, input, memory, mask)?;
    let hidden = feed_forward(g, prefix, eps, attn.hidden)?;
    Ok(AttentionOutput {
        hidden,
        attention: attn.attention,
    })
}
