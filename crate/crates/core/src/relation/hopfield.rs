//! Continuous modern Hopfield encoding: attention applied iteratively to a
//! query state, with the AU features themselves as stored patterns.

use serde::{Deserialize, Serialize};

use super::{attention_weights, encode, init_encoder, AttentionConfig, EncoderSpec};
use crate::au_region::AUFeatureSet;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Mode, Tape, Var};

pub const PREFIX: &str = "relation.hopfield";
pub const MAX_UPDATE_STEPS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HopfieldConfig {
    pub update_steps: usize,
    pub convergence_epsilon: f64,
    /// Inverse temperature; logits are `beta · ξKᵀ / √d_k`.
    pub beta: f64,
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
}

impl Default for HopfieldConfig {
    fn default() -> Self {
        let a = AttentionConfig::default();
        Self {
            update_steps: 3,
            convergence_epsilon: 1e-4,
            beta: 2.0,
            d: a.d,
            d_k: a.d_k,
            d_v: a.d_v,
            n_heads: a.n_heads,
            n_layers: 1,
            dropout: a.dropout,
        }
    }
}

impl HopfieldConfig {
    pub fn dims(&self) -> AttentionConfig {
        AttentionConfig {
            d: self.d,
            d_k: self.d_k,
            d_v: self.d_v,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            dropout: self.dropout,
        }
    }

    pub fn scale(&self) -> f64 {
        self.beta / (self.d_k as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if self.update_steps == 0 || self.update_steps > MAX_UPDATE_STEPS {
            return Err(Error::Config(format!(
                "update_steps = {} outside 1..={MAX_UPDATE_STEPS}",
                self.update_steps
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta = {} must be finite and positive", self.beta)));
        }
        if !(self.convergence_epsilon > 0.0) {
            return Err(Error::Config("convergence_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One update `softmax(beta·state·Kᵀ/√d_k)·V`.
pub fn hopfield_update(tape: &mut Tape, state: Var, k: Var, v: Var, beta: f64) -> Result<Var> {
    let d_k = *tape.shape(k).last().unwrap();
    let a = attention_weights(tape, state, k, beta / (d_k as f64).sqrt())?;
    tape.matmul(a, v)
}

pub fn init(cfg: &HopfieldConfig, d_au: usize, store: &mut ParamStore, rng: &SeededRng) {
    init_encoder(store, rng, PREFIX, d_au, &cfg.dims());
}

pub fn hopfield_forward(
    fwd: &mut Forward<'_>,
    aus: &AUFeatureSet,
    cfg: &HopfieldConfig,
    mode: Mode,
) -> Result<AUFeatureSet> {
    cfg.validate()?;
    let dims = cfg.dims();
    let spec = EncoderSpec {
        prefix: PREFIX,
        dims: &dims,
        scale: cfg.scale(),
        steps: cfg.update_steps,
        eps: cfg.convergence_epsilon,
        pe: None,
    };
    let features = encode(fwd, &spec, aus.features, mode)?;
    Ok(AUFeatureSet {
        features,
        au_ids: aus.au_ids.clone(),
    })
}
