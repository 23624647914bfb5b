//! Named parameter storage and the layer helpers that read from it.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Mode, RunningStats, Tape, Var};
use crate::tensor::Tensor;

const BN_MOMENTUM: f64 = 0.1;

/// Role of a stored tensor, derived from its name suffix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormAffine,
    Slope,
    Buffer,
}

impl ParamKind {
    pub fn of(name: &str) -> ParamKind {
        let suffix = name.rsplit('.').next().unwrap_or(name);
        match suffix {
            "bias" => ParamKind::Bias,
            "gamma" | "beta" => ParamKind::NormAffine,
            "alpha" => ParamKind::Slope,
            "running" => ParamKind::Buffer,
            _ => ParamKind::Weight,
        }
    }

    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    /// Weight decay applies to weights and slopes only.
    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Slope)
    }
}

/// Name-ordered map of every tensor a model owns, learnable or not.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Names starting with any of `prefixes`.
    pub fn names_under(&self, prefixes: &[&str]) -> BTreeSet<String> {
        self.entries
            .keys()
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect()
    }

    pub fn bound(fan_in: usize) -> f64 {
        (1.0 / fan_in as f64).sqrt()
    }

    pub fn init_linear(&mut self, rng: &SeededRng, prefix: &str, fan_in: usize, fan_out: usize) {
        let mut r = rng.split(prefix);
        let b = Self::bound(fan_in);
        self.insert(format!("{prefix}.weight"), Tensor::uniform(&[fan_out, fan_in], b, &mut r));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_linear_no_bias(
        &mut self,
        rng: &SeededRng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) {
        let mut r = rng.split(prefix);
        let b = Self::bound(fan_in);
        self.insert(format!("{prefix}.weight"), Tensor::uniform(&[fan_out, fan_in], b, &mut r));
    }

    pub fn init_conv(&mut self, rng: &SeededRng, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        let mut r = rng.split(prefix);
        let b = Self::bound(c_in * k * k);
        self.insert(format!("{prefix}.weight"), Tensor::uniform(&[c_out, c_in, k, k], b, &mut r));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]));
    }

    /// Convolution feeding a normalization layer, which absorbs any bias.
    pub fn init_conv_no_bias(&mut self, rng: &SeededRng, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        let mut r = rng.split(prefix);
        let b = Self::bound(c_in * k * k);
        self.insert(format!("{prefix}.weight"), Tensor::uniform(&[c_out, c_in, k, k], b, &mut r));
    }

    pub fn init_batch_norm(&mut self, prefix: &str, c: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::filled(&[c], 1.0));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
        let mut running = vec![0.0; 2 * c];
        running[c..].fill(1.0);
        self.insert(format!("{prefix}.running"), Tensor::new(&[2, c], running).unwrap());
    }

    pub fn init_layer_norm(&mut self, prefix: &str, d: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::filled(&[d], 1.0));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]));
    }

    pub fn init_prelu(&mut self, prefix: &str, c: usize) {
        self.insert(format!("{prefix}.alpha"), Tensor::filled(&[c], 0.25));
    }
}

/// One forward pass: a tape plus the parameters it reads.
pub struct Forward<'a> {
    pub tape: Tape,
    pub store: &'a mut ParamStore,
    frozen: &'a BTreeSet<String>,
    pub rng: SeededRng,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a mut ParamStore, frozen: &'a BTreeSet<String>, rng: SeededRng) -> Self {
        Self {
            tape: Tape::new(),
            store,
            frozen,
            rng,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.tape.param_var(name) {
            return Ok(v);
        }
        let trainable = ParamKind::of(name).trainable() && !self.frozen.contains(name);
        let t = self.store.get(name)?;
        Ok(self.tape.param(name, t, trainable))
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.store.contains(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.tape.linear(x, w, b)
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.store.contains(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, stride, padding)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str, mode: Mode) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let running = self.store.get_mut(&format!("{prefix}.running"))?;
        let c = running.shape()[1];
        let (mean, var) = running.data_mut().split_at_mut(c);
        let stats = RunningStats {
            mean,
            var,
            momentum: BN_MOMENTUM,
        };
        self.tape.batch_norm(x, gamma, beta, stats, mode)
    }

    pub fn prelu(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let a = self.param(&format!("{prefix}.alpha"))?;
        self.tape.prelu(x, a)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, g, b)
    }

    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode) -> Result<Var> {
        self.tape.dropout(x, p, mode, &mut self.rng)
    }
}
