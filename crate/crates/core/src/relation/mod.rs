//! Relation learning over the AU feature sequence.
//!
//! All three modules map `[N, n_au, d_au]` to the same shape. The attention
//! and Hopfield encoders share one layer implementation; they differ only in
//! the logit scale and in how many retrieval updates each head runs.

pub mod attention;
pub mod bilstm;
pub mod hopfield;

use crate::error::Result;
use crate::params::{Forward, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub use attention::{positional_encoding, self_attention, AttentionConfig};
pub use bilstm::{bilstm_forward, BiLstmConfig};
pub use hopfield::{hopfield_update, HopfieldConfig};

/// `softmax(scale · state · Kᵀ)` over the last axis.
pub fn attention_weights(tape: &mut Tape, state: Var, k: Var, scale: f64) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(state, kt)?;
    let logits = tape.scale(logits, scale);
    let axis = tape.shape(logits).len() - 1;
    tape.softmax(logits, axis)
}

/// Result of iterating the retrieval update on one head.
pub struct Retrieval {
    pub output: Var,
    /// Attention weights of every executed update, in order.
    pub weights: Vec<Var>,
    /// Query states fed to each update; `states[0]` is the initial query.
    pub states: Vec<Var>,
    pub executed: usize,
}

/// Iterate `ξ ← softmax(scale·ξKᵀ)·P` and return `softmax(scale·ξKᵀ)·V`
/// after at most `steps` updates. `P` holds the stored patterns in query
/// space. Stops early once successive states differ by less than `eps` in
/// max-norm.
#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    tape: &mut Tape,
    state: Var,
    k: Var,
    v: Var,
    p: Var,
    scale: f64,
    steps: usize,
    eps: f64,
) -> Result<Retrieval> {
    let mut xi = state;
    let mut a = attention_weights(tape, xi, k, scale)?;
    let mut weights = vec![a];
    let mut states = vec![xi];
    let mut executed = 1;
    while executed < steps {
        let next = tape.matmul(a, p)?;
        let delta = tape.value(next).max_abs_diff(tape.value(xi));
        xi = next;
        a = attention_weights(tape, xi, k, scale)?;
        weights.push(a);
        states.push(xi);
        executed += 1;
        if delta < eps {
            break;
        }
    }
    let output = tape.matmul(a, v)?;
    Ok(Retrieval {
        output,
        weights,
        states,
        executed,
    })
}

/// Head layout and retrieval settings of one encoder.
#[derive(Clone, Debug)]
pub(crate) struct EncoderSpec<'a> {
    pub prefix: &'a str,
    pub dims: &'a AttentionConfig,
    pub scale: f64,
    pub steps: usize,
    pub eps: f64,
    /// Positional table to add in place of the standard one.
    pub pe: Option<&'a Tensor>,
}

pub(crate) fn init_encoder(
    store: &mut ParamStore,
    rng: &SeededRng,
    prefix: &str,
    d_au: usize,
    dims: &AttentionConfig,
) {
    let d = dims.d;
    store.init_linear(rng, &format!("{prefix}.pre"), d_au, d);
    store.init_layer_norm(&format!("{prefix}.pre_norm"), d);
    for l in 0..dims.n_layers {
        for h in 0..dims.n_heads {
            let hp = format!("{prefix}.layer{l}.head{h}");
            store.init_linear(rng, &format!("{hp}.q"), d, dims.d_k);
            store.init_linear_no_bias(rng, &format!("{hp}.k"), d, dims.d_k);
            store.init_linear(rng, &format!("{hp}.v"), d, dims.d_v);
        }
        store.init_linear(rng, &format!("{prefix}.layer{l}.out"), dims.n_heads * dims.d_v, d);
        store.init_layer_norm(&format!("{prefix}.layer{l}.norm"), d);
    }
    store.init_linear(rng, &format!("{prefix}.post"), d, d_au);
}

/// Linear, layer-norm, dropout, then add the positional table.
pub(crate) fn preprocess(fwd: &mut Forward<'_>, spec: &EncoderSpec<'_>, x: Var, mode: Mode) -> Result<Var> {
    let n_au = fwd.tape.shape(x)[1];
    let h = fwd.linear(x, &format!("{}.pre", spec.prefix))?;
    let h = fwd.layer_norm(h, &format!("{}.pre_norm", spec.prefix))?;
    let h = fwd.dropout(h, spec.dims.dropout, mode)?;
    let pe = match spec.pe {
        Some(t) => t.clone(),
        None => positional_encoding(n_au, spec.dims.d)?,
    };
    let pe = fwd.tape.constant(pe);
    fwd.tape.add_broadcast(h, pe)
}

/// One encoding layer: per-head retrieval, concat, output linear, residual, layer-norm.
pub(crate) fn encoder_layer(
    fwd: &mut Forward<'_>,
    spec: &EncoderSpec<'_>,
    layer: usize,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let lp = format!("{}.layer{layer}", spec.prefix);
    let n = fwd.tape.shape(x)[0];
    let mut heads = Vec::with_capacity(spec.dims.n_heads);
    for h in 0..spec.dims.n_heads {
        let hp = format!("{lp}.head{h}");
        let q = fwd.linear(x, &format!("{hp}.q"))?;
        let k = fwd.linear(x, &format!("{hp}.k"))?;
        let v = fwd.linear(x, &format!("{hp}.v"))?;
        let out = if spec.steps == 1 {
            let a = attention_weights(&mut fwd.tape, q, k, spec.scale)?;
            let a = fwd.dropout(a, spec.dims.dropout, mode)?;
            fwd.tape.matmul(a, v)?
        } else {
            // Early stopping is decided per sample so results do not depend
            // on batch composition.
            let mut rows = Vec::with_capacity(n);
            for s in 0..n {
                let qs = fwd.tape.slice(q, 0, s, 1)?;
                let ks = fwd.tape.slice(k, 0, s, 1)?;
                let vs = fwd.tape.slice(v, 0, s, 1)?;
                let r = retrieve(&mut fwd.tape, qs, ks, vs, qs, spec.scale, spec.steps, spec.eps)?;
                let last = *r.weights.last().unwrap();
                let out = if mode.is_train() && spec.dims.dropout > 0.0 {
                    let a = fwd.dropout(last, spec.dims.dropout, mode)?;
                    fwd.tape.matmul(a, vs)?
                } else {
                    r.output
                };
                rows.push(out);
            }
            if rows.len() == 1 { rows[0] } else { fwd.tape.concat(&rows, 0)? }
        };
        heads.push(out);
    }
    let cat = if heads.len() == 1 { heads[0] } else { fwd.tape.concat(&heads, 2)? };
    let o = fwd.linear(cat, &format!("{lp}.out"))?;
    let r = fwd.tape.add(x, o)?;
    fwd.layer_norm(r, &format!("{lp}.norm"))
}

pub(crate) fn encode(fwd: &mut Forward<'_>, spec: &EncoderSpec<'_>, x: Var, mode: Mode) -> Result<Var> {
    let mut h = preprocess(fwd, spec, x, mode)?;
    for l in 0..spec.dims.n_layers {
        h = encoder_layer(fwd, spec, l, h, mode)?;
    }
    fwd.linear(h, &format!("{}.post", spec.prefix))
}
