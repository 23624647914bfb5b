//! Self-attention encoding of the AU sequence.

use serde::{Deserialize, Serialize};

use super::{attention_weights, encode, init_encoder, EncoderSpec};
use crate::au_region::AUFeatureSet;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const PREFIX: &str = "relation.attention";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_k: 16,
            d_v: 16,
            n_heads: 4,
            n_layers: 2,
            dropout: 0.1,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_k == 0 || self.n_layers == 0 {
            return Err(Error::Config("heads, d_k and layers must be positive".into()));
        }
        if self.d != self.n_heads * self.d_v {
            return Err(Error::Config(format!(
                "d = {} must equal n_heads·d_v = {}·{}",
                self.d, self.n_heads, self.d_v
            )));
        }
        if self.d_k != self.d_v {
            return Err(Error::Config(format!("d_k = {} must equal d_v = {}", self.d_k, self.d_v)));
        }
        if self.d % 2 != 0 {
            return Err(Error::Config(format!("model dim d = {} must be even", self.d)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// `pe[pos][2i] = sin(pos / 10000^(2i/d))`, `pe[pos][2i+1] = cos(...)`.
pub fn positional_encoding(au_count: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs even d, got {d}")));
    }
    let mut pe = vec![0.0; au_count * d];
    for pos in 0..au_count {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            pe[pos * d + 2 * i] = angle.sin();
            pe[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[au_count, d], pe)
}

/// `softmax(QKᵀ/√d_k)·V`.
pub fn self_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let r = sq.len();
    if sk.len() != r || sv.len() != r || sq[r - 1] != sk[r - 1] || sk[r - 2] != sv[r - 2] {
        return Err(Error::dim("self_attention", format!("Q {sq:?}, K {sk:?}, V {sv:?}")));
    }
    let scale = 1.0 / (sq[r - 1] as f64).sqrt();
    let a = attention_weights(tape, q, k, scale)?;
    tape.matmul(a, v)
}

pub fn init(cfg: &AttentionConfig, d_au: usize, store: &mut ParamStore, rng: &SeededRng) {
    init_encoder(store, rng, PREFIX, d_au, cfg);
}

pub fn encode_stack(
    fwd: &mut Forward<'_>,
    aus: &AUFeatureSet,
    cfg: &AttentionConfig,
    mode: Mode,
) -> Result<AUFeatureSet> {
    encode_stack_scaled(fwd, aus, cfg, 1.0 / (cfg.d_k as f64).sqrt(), mode)
}

/// [`encode_stack`] with an explicit logit scale in place of `1/√d_k`.
pub fn encode_stack_scaled(
    fwd: &mut Forward<'_>,
    aus: &AUFeatureSet,
    cfg: &AttentionConfig,
    scale: f64,
    mode: Mode,
) -> Result<AUFeatureSet> {
    encode_with(fwd, aus, cfg, scale, None, mode)
}

/// [`encode_stack`] with an explicit `[n_au, d]` positional table.
pub fn encode_stack_with_pe(
    fwd: &mut Forward<'_>,
    aus: &AUFeatureSet,
    cfg: &AttentionConfig,
    pe: &Tensor,
    mode: Mode,
) -> Result<AUFeatureSet> {
    let n_au = fwd.tape.shape(aus.features)[1];
    if pe.shape() != [n_au, cfg.d] {
        return Err(Error::Config(format!("positional table {:?} for {n_au} AUs, d = {}", pe.shape(), cfg.d)));
    }
    encode_with(fwd, aus, cfg, 1.0 / (cfg.d_k as f64).sqrt(), Some(pe), mode)
}

fn encode_with(
    fwd: &mut Forward<'_>,
    aus: &AUFeatureSet,
    cfg: &AttentionConfig,
    scale: f64,
    pe: Option<&Tensor>,
    mode: Mode,
) -> Result<AUFeatureSet> {
    cfg.validate()?;
    let spec = EncoderSpec {
        prefix: PREFIX,
        dims: cfg,
        scale,
        steps: 1,
        eps: 0.0,
        pe,
    };
    let features = encode(fwd, &spec, aus.features, mode)?;
    Ok(AUFeatureSet {
        features,
        au_ids: aus.au_ids.clone(),
    })
}
