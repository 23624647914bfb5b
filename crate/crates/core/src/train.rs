//! SGD with momentum and the two-stage training protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::data::{f1_per_au, flip_sample, normalize_image, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{frozen_prefixes, total_loss, Model, ModelConfig, Plan};
use crate::params::{Forward, ParamKind, ParamStore};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Factor applied to the learning rate every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub augment_flip: bool,
    /// Worker threads for inference and feature caching.
    pub threads: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.3,
            decay_every: 2,
            epochs_stage1: 30,
            epochs_stage2: 30,
            batch_size: 16,
            augment_flip: false,
            threads: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be > 0, momentum in [0,1), weight decay >= 0".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 || self.threads == 0 {
            return Err(Error::Config("batch size, decay period and threads must be positive".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Stage1 => self.epochs_stage1,
            Stage::Stage2 => self.epochs_stage2,
        }
    }
}

/// `v ← μv + g + λw` (λ only for decayed kinds), `w ← w − lr·v`.
pub fn sgd_update(
    w: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    kind: ParamKind,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let wd = if kind.decayed() { weight_decay } else { 0.0 };
    for ((w, &g), v) in w.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + wd * *w;
        *w -= lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_macro_f1: f64,
}

impl EpochRecord {
    /// `epoch, stage, lr, train_loss, eval_macro_F1`, tab-separated.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.4}",
            self.epoch,
            self.stage.name(),
            self.lr,
            self.train_loss,
            self.eval_macro_f1
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub momentum: BTreeMap<String, Vec<f64>>,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    pub lr: f64,
    pub stage: Stage,
    pub frozen: BTreeSet<String>,
    pub history: Vec<EpochRecord>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config_digest: String,
    checkpoint_digest: String,
    seed: u64,
    stage: Stage,
    epoch: usize,
    lr: f64,
    frozen: Vec<String>,
    history: Vec<EpochRecord>,
    model: ModelConfig,
}

pub const MODEL_FILE: &str = "model.hcmx";
pub const OPTIM_FILE: &str = "optim.hcmx";
pub const SIDECAR_FILE: &str = "state.json";

impl TrainState {
    pub fn new_stage1(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::new(config, seed)?;
        Ok(Self {
            model,
            momentum: BTreeMap::new(),
            epoch: 0,
            lr: 0.0,
            stage: Stage::Stage1,
            frozen: BTreeSet::new(),
            history: Vec::new(),
            seed,
        })
    }

    /// Turn a finished stage-1 state into the start of stage 2 under
    /// `config` (which may enable a different set of relation modules).
    pub fn begin_stage2(stage1: &TrainState, config: ModelConfig) -> Result<Self> {
        if stage1.stage != Stage::Stage1 {
            return Err(Error::Checkpoint("stage 2 must start from a stage-1 state".into()));
        }
        if stage1.model.config.extractor_digest()? != config.extractor_digest()? {
            return Err(Error::Checkpoint(
                "stage-1 checkpoint was trained with an incompatible config (digest mismatch)".into(),
            ));
        }
        let rel = stage1.model.params.names_under(&crate::model::relation_prefixes());
        let mut params = ParamStore::new();
        for (n, t) in stage1.model.params.iter() {
            if !rel.contains(n) {
                params.insert(n, t.clone());
            }
        }
        let mut model = Model::from_params_unchecked(config, params)?;
        model.init_relations(stage1.seed);
        model.check_params()?;
        let frozen = model.params.names_under(&frozen_prefixes());
        Ok(Self {
            model,
            momentum: BTreeMap::new(),
            epoch: 0,
            lr: 0.0,
            stage: Stage::Stage2,
            frozen,
            history: stage1.history.clone(),
            seed: stage1.seed,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config_digest: self.model.config.extractor_digest()?,
            params: self.model.params.clone(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ck = self.checkpoint()?;
        ck.save(&dir.join(MODEL_FILE))?;
        let mut optim = ParamStore::new();
        for (name, v) in &self.momentum {
            optim.insert(name.clone(), Tensor::from_vec(v.clone()));
        }
        Checkpoint {
            config_digest: ck.config_digest,
            params: optim,
        }
        .save(&dir.join(OPTIM_FILE))?;
        let side = Sidecar {
            config_digest: ck.config_digest.iter().map(|b| format!("{b:02x}")).collect(),
            checkpoint_digest: ck.digest(),
            seed: self.seed,
            stage: self.stage,
            epoch: self.epoch,
            lr: self.lr,
            frozen: self.frozen.iter().cloned().collect(),
            history: self.history.clone(),
            model: self.model.config.clone(),
        };
        let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let p = dir.join(SIDECAR_FILE);
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let side: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
        let ck = Checkpoint::load(&dir.join(MODEL_FILE))?;
        if ck.config_digest != side.model.extractor_digest()? {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint digest does not match its recorded config",
                dir.display()
            )));
        }
        let optim = Checkpoint::load(&dir.join(OPTIM_FILE))?;
        let momentum = optim
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
        let model = Model::from_params_unchecked(side.model, ck.params)?;
        model.check_coverage(side.stage == Stage::Stage2)?;
        Ok(Self {
            model,
            momentum,
            epoch: side.epoch,
            lr: side.lr,
            stage: side.stage,
            frozen: side.frozen.into_iter().collect(),
            history: side.history,
            seed: side.seed,
        })
    }
}

/// Normalized `[B, C, H, W]` batch.
pub fn image_batch(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?
        .image
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.iter().product::<usize>());
    for s in samples {
        if s.image.shape() != first.as_slice() {
            return Err(Error::Data(format!("image {:?} vs {:?} in one batch", s.image.shape(), first)));
        }
        data.extend_from_slice(normalize_image(&s.image).data());
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(&first);
    Tensor::new(&shape, data)
}

fn targets(samples: &[&Sample]) -> (Vec<f64>, Vec<f64>) {
    let labels = samples
        .iter()
        .flat_map(|s| s.au_labels.iter().map(|&y| y as f64))
        .collect();
    let lms = samples.iter().flat_map(|s| s.landmarks.flat()).collect();
    (labels, lms)
}

fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

/// Eval-mode backbone features of one sample: `(global, landmark)`, each
/// without the batch axis.
type Features = (Tensor, Tensor);

fn run_chunked<T: Send>(
    n: usize,
    threads: usize,
    params: &ParamStore,
    work: impl Fn(&mut ParamStore, std::ops::Range<usize>) -> Result<Vec<T>> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        let mut p = params.clone();
        return work(&mut p, 0..n);
    }
    let per = n.div_ceil(threads);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let work = &work;
                s.spawn(move || {
                    let mut p = params.clone();
                    work(&mut p, t * per..((t + 1) * per).min(n))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

const INFER_BATCH: usize = 16;

fn cache_features(model: &Model, samples: &[Sample], threads: usize) -> Result<Vec<Features>> {
    run_chunked(samples.len(), threads, &model.params, |params, range| {
        let frozen = BTreeSet::new();
        let mut out = Vec::with_capacity(range.len());
        let idx: Vec<usize> = range.collect();
        for chunk in idx.chunks(INFER_BATCH) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut fwd = Forward::new(params, &frozen, SeededRng::new(0));
            let x = fwd.tape.constant(image_batch(&batch)?);
            let (g, l) = model.features(&mut fwd, x, crate::tape::Mode::Eval)?;
            let split = |t: &Tensor| -> Result<Vec<Tensor>> {
                let per = t.len() / batch.len();
                t.data()
                    .chunks(per)
                    .map(|c| Tensor::new(&t.shape()[1..], c.to_vec()))
                    .collect()
            };
            let gs = split(fwd.tape.value(g))?;
            let ls = split(fwd.tape.value(l))?;
            out.extend(gs.into_iter().zip(ls));
        }
        Ok(out)
    })
}

/// Eval-mode occurrence probabilities, one row per sample.
pub fn predict(model: &Model, data: &Dataset, plan: Plan, threads: usize) -> Result<Vec<Vec<f64>>> {
    let n_au = model.config.aus.len();
    if data.aus != model.config.aus {
        return Err(Error::Data(format!(
            "dataset AU list {:?} differs from model AU list {:?}",
            data.aus, model.config.aus
        )));
    }
    run_chunked(data.len(), threads, &model.params, |params, range| {
        let frozen = BTreeSet::new();
        let idx: Vec<usize> = range.collect();
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(INFER_BATCH) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let mut fwd = Forward::new(params, &frozen, SeededRng::new(0));
            let x = fwd.tape.constant(image_batch(&batch)?);
            let o = model.forward(&mut fwd, x, plan)?;
            out.extend(fwd.tape.data(o.probs).chunks(n_au).map(<[f64]>::to_vec));
        }
        Ok(out)
    })
}

pub fn binarize(probs: &[Vec<f64>]) -> Vec<Vec<u8>> {
    probs
        .iter()
        .map(|r| r.iter().map(|&p| (p >= 0.5) as u8).collect())
        .collect()
}

pub fn macro_f1(model: &Model, data: &Dataset, plan: Plan, threads: usize) -> Result<f64> {
    let preds = binarize(&predict(model, data, plan, threads)?);
    let labels: Vec<Vec<u8>> = data.samples.iter().map(|s| s.au_labels.clone()).collect();
    Ok(f1_per_au(&data.aus, &preds, &labels)?.macro_f1)
}

/// Apply one SGD step to every trainable parameter recorded on `tape`.
fn step(state: &mut TrainState, tape: &Tape, optim: &OptimConfig, lr: f64) -> Result<()> {
    for (name, var) in tape.params() {
        if !tape.requires_grad(var) {
            continue;
        }
        let Some(grad) = tape.grad(var) else { continue };
        let w = state.model.params.get_mut(name)?;
        let v = state
            .momentum
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        sgd_update(
            w.data_mut(),
            grad,
            v,
            ParamKind::of(name),
            lr,
            optim.momentum,
            optim.weight_decay,
        );
    }
    Ok(())
}

/// Hook run after each finished epoch; an error aborts training.
pub type EpochHook<'a> = dyn FnMut(&TrainState) -> Result<()> + 'a;

/// Continue `state` until its stage has `optim.epochs(stage)` epochs.
pub fn run_epochs(
    state: &mut TrainState,
    data: &Dataset,
    eval: Option<&Dataset>,
    optim: &OptimConfig,
    hook: &mut EpochHook<'_>,
) -> Result<()> {
    optim.validate()?;
    data.validate()?;
    if data.aus != state.model.config.aus {
        return Err(Error::Data(format!(
            "dataset AU list {:?} differs from config {:?}",
            data.aus, state.model.config.aus
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let stage = state.stage;
    let total = optim.epochs(stage);
    if state.epoch >= total {
        return Ok(());
    }
    let plan = match stage {
        Stage::Stage1 => Plan::STAGE1,
        Stage::Stage2 => Plan::STAGE2,
    };
    let flipped: Vec<Sample> = if optim.augment_flip {
        data.samples.iter().map(flip_sample).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let cache: Option<(Vec<Features>, Vec<Features>)> = match stage {
        Stage::Stage1 => None,
        Stage::Stage2 => Some((
            cache_features(&state.model, &data.samples, optim.threads)?,
            cache_features(&state.model, &flipped, optim.threads)?,
        )),
    };
    let root = SeededRng::new(state.seed).split(stage.name());
    let lambda = state.model.config.lambda_lm;
    while state.epoch < total {
        let e = state.epoch;
        let lr = optim.lr_at(e);
        let mut rng = root.split_index("epoch", e as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let flips: Vec<bool> = order
            .iter()
            .map(|_| optim.augment_flip && rng.bernoulli(0.5))
            .collect();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut preds = Vec::with_capacity(data.len());
        let mut labels = Vec::with_capacity(data.len());
        for (b, chunk) in order.chunks(optim.batch_size).enumerate() {
            let fl = &flips[b * optim.batch_size..b * optim.batch_size + chunk.len()];
            let batch: Vec<&Sample> = chunk
                .iter()
                .zip(fl)
                .map(|(&i, &f)| if f { &flipped[i] } else { &data.samples[i] })
                .collect();
            let (y, lm) = targets(&batch);
            let mut params = std::mem::take(&mut state.model.params);
            let result = (|| -> Result<Tape> {
                let model = &state.model;
                let mut fwd = Forward::new(&mut params, &state.frozen, rng.split_index("batch", b as u64));
                let out = match &cache {
                    None => {
                        let x = fwd.tape.constant(image_batch(&batch)?);
                        model.forward(&mut fwd, x, plan)?
                    }
                    Some((plain, flip)) => {
                        let pick = |i: usize, f: bool| if f { &flip[i] } else { &plain[i] };
                        let gs: Vec<&Tensor> = chunk.iter().zip(fl).map(|(&i, &f)| &pick(i, f).0).collect();
                        let ls: Vec<&Tensor> = chunk.iter().zip(fl).map(|(&i, &f)| &pick(i, f).1).collect();
                        let g = fwd.tape.constant(stack(&gs)?);
                        let l = fwd.tape.constant(stack(&ls)?);
                        model.forward_from_features(&mut fwd, g, l, plan)?
                    }
                };
                let loss = total_loss(&mut fwd.tape, &out, &y, &lm, lambda)?;
                let lv = fwd.tape.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss at epoch {e}, batch {b}")));
                }
                loss_sum += lv;
                let n_au = model.config.aus.len();
                preds.extend(
                    fwd.tape
                        .data(out.probs)
                        .chunks(n_au)
                        .map(|r| r.iter().map(|&p| (p >= 0.5) as u8).collect::<Vec<u8>>()),
                );
                fwd.tape.backward(loss)?;
                Ok(fwd.tape)
            })();
            state.model.params = params;
            let tape = result?;
            step(state, &tape, optim, lr)?;
            labels.extend(batch.iter().map(|s| s.au_labels.clone()));
            batches += 1;
        }
        let eval_plan = match stage {
            Stage::Stage1 => Plan::EVAL_STAGE1,
            Stage::Stage2 => Plan::EVAL,
        };
        let eval_macro_f1 = match eval {
            Some(ev) => macro_f1(&state.model, ev, eval_plan, optim.threads)?,
            None => f1_per_au(&data.aus, &preds, &labels)?.macro_f1,
        };
        state.epoch += 1;
        state.lr = lr;
        state.history.push(EpochRecord {
            epoch: e,
            stage,
            lr,
            train_loss: loss_sum / batches as f64,
            eval_macro_f1,
        });
        hook(state)?;
    }
    Ok(())
}

pub fn train_stage1(
    config: ModelConfig,
    data: &Dataset,
    eval: Option<&Dataset>,
    optim: &OptimConfig,
    seed: u64,
) -> Result<TrainState> {
    let mut state = TrainState::new_stage1(config, seed)?;
    run_epochs(&mut state, data, eval, optim, &mut |_| Ok(()))?;
    Ok(state)
}

pub fn train_stage2(
    stage1: &TrainState,
    config: ModelConfig,
    data: &Dataset,
    eval: Option<&Dataset>,
    optim: &OptimConfig,
) -> Result<TrainState> {
    let mut state = TrainState::begin_stage2(stage1, config)?;
    run_epochs(&mut state, data, eval, optim, &mut |_| Ok(()))?;
    Ok(state)
}

/// Hex digest of the model checkpoint bytes.
pub fn checkpoint_digest(state: &TrainState) -> Result<String> {
    Ok(sha256_hex(&state.checkpoint()?.encode()))
}
