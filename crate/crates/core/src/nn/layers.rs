//! Transformer building blocks composed from graph primitives.
//!
//! Parameters are looked up by hierarchical name (`prefix.w`, `prefix.b`, ...)
//! in a [`ParamStore`]; the `init_*` functions create them.

use rand::Rng;

use super::params::init;
use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), init::xavier(rng, d_in, d_out))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, d_out]))
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[1, d], 1.0))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, d]))
}

/// `x @ W + b`.
pub fn linear(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let b = g.param(p, &format!("{prefix}.b"))?;
    let (_, d_in) = g.shape(x);
    let (wr, wc) = g.shape(w);
    if wr != d_in || g.shape(b) != (1, wc) {
        return Err(Error::config(format!(
            "{prefix}: input width {d_in} against weight {wr}x{wc}"
        )));
    }
    let y = g.matmul(x, w);
    Ok(g.add(y, b))
}

pub fn layer_norm(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(p, &format!("{prefix}.gain"))?;
    let bias = g.param(p, &format!("{prefix}.bias"))?;
    if g.shape(gain).1 != g.shape(x).1 {
        return Err(Error::config(format!(
            "{prefix}: layer norm width mismatch"
        )));
    }
    Ok(g.layer_norm(x, gain, bias, LN_EPS))
}

/// Two-layer GELU MLP `d -> hidden -> d`.
pub fn init_mlp(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    d: usize,
    hidden: usize,
) -> Result<()> {
    init_linear(store, rng, &format!("{prefix}.fc1"), d, hidden)?;
    init_linear(store, rng, &format!("{prefix}.fc2"), hidden, d)
}

pub fn mlp(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

/// Query/key/value/output projections of width `d`.
pub fn init_attention(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    d: usize,
) -> Result<()> {
    for proj in ["q", "k", "v", "out"] {
        init_linear(store, rng, &format!("{prefix}.{proj}"), d, d)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product attention of `queries` over `context`.
///
/// Self-attention passes the same node twice; attention pooling passes a
/// single probe row as `queries`. Output has the row count of `queries`.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    queries: Var,
    context: Var,
    n_heads: usize,
) -> Result<Var> {
    segmented_attention(g, p, prefix, queries, context, n_heads, 1)
}

/// [`multi_head_attention`] over `segs` independent sequences stacked by rows.
pub fn segmented_attention(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    queries: Var,
    context: Var,
    n_heads: usize,
    segs: usize,
) -> Result<Var> {
    let (nq, d) = g.shape(queries);
    let (nk, dc) = g.shape(context);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(format!(
            "{prefix}: width {d} not divisible by {n_heads} heads"
        )));
    }
    if dc != d {
        return Err(Error::config(format!("{prefix}: context width mismatch")));
    }
    if segs == 0 || nq % segs != 0 || nk % segs != 0 {
        return Err(Error::config(format!(
            "{prefix}: rows not divisible into {segs} sequences"
        )));
    }
    let q = linear(g, p, &format!("{prefix}.q"), queries)?;
    let k = linear(g, p, &format!("{prefix}.k"), context)?;
    let v = linear(g, p, &format!("{prefix}.v"), context)?;
    let merged = g.attention(q, k, v, n_heads, segs);
    linear(g, p, &format!("{prefix}.out"), merged)
}

/// Pre-norm Transformer block parameters.
pub fn init_block(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    d: usize,
    mlp_dim: usize,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), d)?;
    init_attention(store, rng, &format!("{prefix}.attn"), d)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), d)?;
    init_mlp(store, rng, &format!("{prefix}.mlp"), d, mlp_dim)
}

/// `x + attn(ln1(x))`, then `x + mlp(ln2(x))`, for `skip.len()` sequences
/// stacked by rows.
///
/// Sequences flagged in `skip` (stochastic depth) pass through unchanged:
/// both residual branches are dropped for them.
pub fn block(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    x: Var,
    n_heads: usize,
    skip: &[bool],
) -> Result<Var> {
    let segs = skip.len();
    if segs == 0 || skip.iter().all(|&s| s) {
        return Ok(x);
    }
    let mask = if skip.iter().any(|&s| s) {
        let rows = g.shape(x).0 / segs;
        let m: Vec<f64> = skip
            .iter()
            .flat_map(|&s| std::iter::repeat_n(if s { 0.0 } else { 1.0 }, rows))
            .collect();
        Some(g.constant(Tensor::matrix(m.len(), 1, m)))
    } else {
        None
    };
    let residual = |g: &mut Graph, x: Var, branch: Var| match mask {
        Some(m) => {
            let b = g.mul(branch, m);
            g.add(x, b)
        }
        None => g.add(x, branch),
    };
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let a = segmented_attention(g, p, &format!("{prefix}.attn"), h, h, n_heads, segs)?;
    let x = residual(g, x, a);
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let m = mlp(g, p, &format!("{prefix}.mlp"), h)?;
    Ok(residual(g, x, m))
}
