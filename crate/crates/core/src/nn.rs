//! Transformer building blocks on top of the tape.
//!
//! Token tensors are `[batch, tokens, dim]`; a bare `[tokens, dim]` input is
//! treated as a batch of one. Blocks are pre-norm:
//!
//! ```text
//! h   = x + attn(ln1(x))
//! out = h + fc2(gelu(fc1(ln2(h))))
//! ```
//!
//! A block under path `p` owns `p.ln1_gain`, `p.ln1_bias`, `p.attn.{q,k,v,out}_{w,b}`,
//! `p.ln2_gain`, `p.ln2_bias` and `p.ffn.fc{1,2}_{w,b}`. Linear weights are
//! stored `[fan_in, fan_out]` and applied as `x @ w + b`.

use crate::error::{Error, Result};
use crate::params::{init_layer_norm, init_linear, Bindings, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, TensorResult, Var};

pub const LN_EPS: f64 = 1e-6;
pub const FFN_RATIO: usize = 4;

pub fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Var) -> TensorResult<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn layer_norm<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    gain: Var,
    bias: Var,
    eps: f64,
) -> TensorResult<Var> {
    let z = g.standardize(x, eps)?;
    let z = g.mul(z, gain)?;
    g.add(z, bias)
}

/// Graph handles of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl AttentionVars {
    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        let get = |n: &str| b.get(&format!("{prefix}.{n}"));
        Ok(AttentionVars {
            q_w: get("q_w")?,
            q_b: get("q_b")?,
            k_w: get("k_w")?,
            k_b: get("k_b")?,
            v_w: get("v_w")?,
            v_b: get("v_b")?,
            out_w: get("out_w")?,
            out_b: get("out_b")?,
        })
    }
}

/// Graph handles of one pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub attn: AttentionVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl BlockVars {
    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        let get = |n: &str| b.get(&format!("{prefix}.{n}"));
        Ok(BlockVars {
            ln1_gain: get("ln1_gain")?,
            ln1_bias: get("ln1_bias")?,
            attn: AttentionVars::bind(b, &format!("{prefix}.attn"))?,
            ln2_gain: get("ln2_gain")?,
            ln2_bias: get("ln2_bias")?,
            fc1_w: get("ffn.fc1_w")?,
            fc1_b: get("ffn.fc1_b")?,
            fc2_w: get("ffn.fc2_w")?,
            fc2_b: get("ffn.fc2_b")?,
        })
    }
}

pub fn init_block<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, dim: usize, rng: &mut Rng) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    for proj in ["q", "k", "v", "out"] {
        init_linear(store, &format!("{prefix}.attn.{proj}"), dim, dim, rng);
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_linear(
        store,
        &format!("{prefix}.ffn.fc1"),
        dim,
        dim * FFN_RATIO,
        rng,
    );
    init_linear(
        store,
        &format!("{prefix}.ffn.fc2"),
        dim * FFN_RATIO,
        dim,
        rng,
    );
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embedding dim {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Attention output plus the per-head attention probabilities
/// `[batch, heads, tokens, tokens]`, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

fn as_batched<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<(Var, bool)> {
    match *g.shape(x) {
        [t, d] => Ok((g.reshape(x, &[1, t, d])?, true)),
        [_, _, _] => Ok((x, false)),
        ref other => Err(crate::error::invalid(
            "attention",
            format!("expected [tokens, dim] or [batch, tokens, dim], got {other:?}"),
        )),
    }
}

pub fn multi_head_self_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<AttentionOutput> {
    let (xb, squeezed) = as_batched(g, x)?;
    let [b, t, d] = *g.shape(xb) else {
        unreachable!()
    };
    check_heads(d, heads)?;
    let dh = d / heads;

    let mut split = |w: Var, bias: Var, perm: &[usize]| -> TensorResult<Var> {
        let y = linear(g, xb, w, bias)?;
        let y = g.reshape(y, &[b, t, heads, dh])?;
        g.permute(y, perm)
    };
    let q = split(p.q_w, p.q_b, &[0, 2, 1, 3])?; // [b, h, t, dh]
    let k_t = split(p.k_w, p.k_b, &[0, 2, 3, 1])?; // [b, h, dh, t]
    let v = split(p.v_w, p.v_b, &[0, 2, 1, 3])?;

    let scores = g.matmul(q, k_t)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    let mut out = linear(g, ctx, p.out_w, p.out_b)?;
    if squeezed {
        out = g.reshape(out, &[t, d])?;
    }
    Ok(AttentionOutput { out, weights })
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub attn_weights: Var,
}

pub fn transformer_block<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: &BlockVars,
    heads: usize,
) -> Result<BlockOutput> {
    let h = layer_norm(g, x, p.ln1_gain, p.ln1_bias, LN_EPS)?;
    let attn = multi_head_self_attention(g, h, &p.attn, heads)?;
    let x = g.add(x, attn.out)?;
    let h = layer_norm(g, x, p.ln2_gain, p.ln2_bias, LN_EPS)?;
    let h = linear(g, h, p.fc1_w, p.fc1_b)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, p.fc2_w, p.fc2_b)?;
    let out = g.add(x, h)?;
    Ok(BlockOutput {
        out,
        attn_weights: attn.weights,
    })
}
