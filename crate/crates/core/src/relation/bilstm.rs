//! Bidirectional LSTM over the AU index sequence, with a residual projection.

use serde::{Deserialize, Serialize};

use crate::au_region::AUFeatureSet;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::rng::SeededRng;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const PREFIX: &str = "relation.bilstm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiLstmConfig {
    pub hidden: usize,
}

impl Default for BiLstmConfig {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

pub fn cell_prefix(direction: &str) -> String {
    format!("{PREFIX}.{direction}")
}

/// Gates are stacked input, forget, cell, output. Cells `fwd`/`bwd` each hold `x_proj` (`[4h, d]` + bias) and `h_proj`
/// (`[4h, h]`, no bias). The output is `x + W_f·h_fwd + W_b·h_bwd + b`.
pub fn init(cfg: &BiLstmConfig, d_au: usize, store: &mut ParamStore, rng: &SeededRng) {
    let h = cfg.hidden;
    for dir in ["fwd", "bwd"] {
        let p = cell_prefix(dir);
        store.init_linear(rng, &format!("{p}.x_proj"), d_au, 4 * h);
        store.init_linear_no_bias(rng, &format!("{p}.h_proj"), h, 4 * h);
        let bias = store.get_mut(&format!("{p}.x_proj.bias")).expect("just inserted");
        bias.data_mut()[h..2 * h].fill(1.0);
    }
    let fan_in = 2 * h;
    let bound = ParamStore::bound(fan_in);
    for key in ["out_fwd", "out_bwd"] {
        let mut r = rng.split(&format!("{PREFIX}.{key}"));
        store.insert(format!("{PREFIX}.{key}.weight"), Tensor::uniform(&[d_au, h], bound, &mut r));
    }
    store.insert(format!("{PREFIX}.out.bias"), Tensor::zeros(&[d_au]));
}

/// Hidden states of one direction over `xs` (already input-projected),
/// returned in the order the steps were taken.
fn run_cell(fwd: &mut Forward<'_>, prefix: &str, xs: &[Var], h: usize) -> Result<Vec<Var>> {
    let mut hs = Vec::with_capacity(xs.len());
    let mut state: Option<(Var, Var)> = None;
    for &x in xs {
        let z = match state {
            Some((h_prev, _)) => {
                let r = fwd.linear(h_prev, &format!("{prefix}.h_proj"))?;
                fwd.tape.add(x, r)?
            }
            None => x,
        };
        let i = fwd.tape.slice(z, 1, 0, h)?;
        let f = fwd.tape.slice(z, 1, h, h)?;
        let g = fwd.tape.slice(z, 1, 2 * h, h)?;
        let o = fwd.tape.slice(z, 1, 3 * h, h)?;
        let i = fwd.tape.sigmoid(i);
        let f = fwd.tape.sigmoid(f);
        let g = fwd.tape.tanh(g);
        let o = fwd.tape.sigmoid(o);
        let ig = fwd.tape.mul(i, g)?;
        let c = match state {
            Some((_, c_prev)) => {
                let fc = fwd.tape.mul(f, c_prev)?;
                fwd.tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = fwd.tape.tanh(c);
        let h_new = fwd.tape.mul(o, tc)?;
        hs.push(h_new);
        state = Some((h_new, c));
    }
    Ok(hs)
}

pub fn bilstm_forward(fwd: &mut Forward<'_>, aus: &AUFeatureSet, cfg: &BiLstmConfig) -> Result<AUFeatureSet> {
    let x = aus.features;
    let shape = fwd.tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::Config(format!("BiLSTM expects [N, n_au, d_au], got {shape:?}")));
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let expected = fwd.store.get(&format!("{}.x_proj.weight", cell_prefix("fwd")))?.shape()[1];
    if d != expected {
        return Err(Error::Config(format!("BiLSTM input dim {d} but cells expect {expected}")));
    }
    let h = cfg.hidden;
    let mut dirs = Vec::with_capacity(2);
    for dir in ["fwd", "bwd"] {
        let p = cell_prefix(dir);
        let proj = fwd.linear(x, &format!("{p}.x_proj"))?;
        let mut steps = Vec::with_capacity(t);
        for s in 0..t {
            let st = fwd.tape.slice(proj, 1, s, 1)?;
            steps.push(fwd.tape.reshape(st, &[n, 4 * h])?);
        }
        if dir == "bwd" {
            steps.reverse();
        }
        let mut hs = run_cell(fwd, &p, &steps, h)?;
        if dir == "bwd" {
            hs.reverse();
        }
        let hs: Vec<Var> = hs
            .into_iter()
            .map(|v| fwd.tape.reshape(v, &[n, 1, h]))
            .collect::<Result<_>>()?;
        let seq = if hs.len() == 1 { hs[0] } else { fwd.tape.concat(&hs, 1)? };
        dirs.push(seq);
    }
    let yf = fwd.linear(dirs[0], &format!("{PREFIX}.out_fwd"))?;
    let yb = fwd.linear(dirs[1], &format!("{PREFIX}.out_bwd"))?;
    let y = fwd.tape.add(yf, yb)?;
    let b = fwd.param(&format!("{PREFIX}.out.bias"))?;
    let y = fwd.tape.add_broadcast(y, b)?;
    let features = fwd.tape.add(x, y)?;
    Ok(AUFeatureSet {
        features,
        au_ids: aus.au_ids.clone(),
    })
}
