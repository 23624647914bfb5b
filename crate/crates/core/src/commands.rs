//! Subcommand bodies shared by the binary and the tests. Every command
//! writes its human-readable report to `out` and starts with the seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{f1_per_au, generate_synthetic, kfold_subject_exclusive, write_dataset, Dataset, F1Report, Manifest};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_many, param_grad_check, primitive_cases, Primitive, DEFAULT_EPS};
use crate::model::{total_loss, Model, ModelConfig, Plan};
use crate::params::Forward;
use crate::relation;
use crate::rng::SeededRng;
use crate::tape::Mode;
use crate::tensor::Tensor;
use crate::train::{binarize, predict, run_epochs, EpochRecord, Stage, TrainState, SIDECAR_FILE};

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

/// Generate the synthetic set into `dir` and report label statistics.
pub fn cmd_synth_gen(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<Manifest> {
    emit(out, format!("seed={}", cfg.seed))?;
    let stats = cfg.synthetic.resolve()?;
    let ds = generate_synthetic(&cfg.synthetic, cfg.seed)?;
    let manifest = write_dataset(&ds, dir, cfg.synthetic.image_format)?;
    let n = ds.len() as f64;
    emit(out, format!("samples={}", ds.len()))?;
    emit(out, format!("subjects={}", ds.subjects().len()))?;
    emit(out, format!("manifest={}", dir.join(crate::data::MANIFEST_FILE).display()))?;
    emit(out, "au\tmarginal")?;
    for (k, au) in ds.aus.iter().enumerate() {
        let on = ds.samples.iter().filter(|s| s.au_labels[k] == 1).count() as f64;
        emit(out, format!("AU{au}\t{:.4}", on / n))?;
    }
    for g in &stats.groups {
        let all = ds
            .samples
            .iter()
            .filter(|s| g.iter().all(|&k| s.au_labels[k] == 1))
            .count() as f64;
        let names: Vec<String> = g.iter().map(|&k| format!("AU{}", ds.aus[k])).collect();
        emit(out, format!("group {}\tjoint={:.4}", names.join("+"), all / n))?;
    }
    for &(a, b) in &stats.exclusions {
        let both = ds
            .samples
            .iter()
            .filter(|s| s.au_labels[a] == 1 && s.au_labels[b] == 1)
            .count();
        emit(out, format!("exclusion AU{}/AU{}\tviolations={both}", ds.aus[a], ds.aus[b]))?;
    }
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSel {
    One,
    Two,
    Both,
}

impl std::str::FromStr for StageSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(StageSel::One),
            "2" => Ok(StageSel::Two),
            "both" => Ok(StageSel::Both),
            _ => Err(Error::Config(format!("--stage must be 1, 2 or both, got `{s}`"))),
        }
    }
}

pub fn stage_dir(out_dir: &Path, stage: Stage, model: &ModelConfig) -> PathBuf {
    match stage {
        Stage::Stage1 => out_dir.join("stage1"),
        Stage::Stage2 => out_dir.join(format!(
            "stage2_{}",
            model.ablation().map_or("custom", |a| a.name())
        )),
    }
}

pub const LOG_FILE: &str = "train.log";

fn write_log(dir: &Path, seed: u64, history: &[EpochRecord]) -> Result<()> {
    let mut text = format!("# seed={seed}\nepoch\tstage\tlr\ttrain_loss\teval_macro_f1\n");
    for r in history {
        text.push_str(&r.log_line());
        text.push('\n');
    }
    let p = dir.join(LOG_FILE);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Relation settings do not influence stage 1.
fn stage1_view(c: &ModelConfig) -> ModelConfig {
    ModelConfig {
        use_bilstm: false,
        use_attention: false,
        use_hopfield: false,
        bilstm: Default::default(),
        attention: Default::default(),
        hopfield: Default::default(),
        ..c.clone()
    }
}

fn existing(dir: &Path) -> Result<Option<TrainState>> {
    if dir.join(SIDECAR_FILE).exists() {
        TrainState::load(dir).map(Some)
    } else {
        Ok(None)
    }
}

/// Train one stage in `dir`, resuming from its checkpoint when present.
fn run_stage(
    cfg: &RunConfig,
    stage: Stage,
    data: &Dataset,
    eval: Option<&Dataset>,
    dir: &Path,
    stage1: Option<&TrainState>,
    out: &mut dyn Write,
) -> Result<TrainState> {
    let mut state = match existing(dir)? {
        Some(s) => {
            let same = match stage {
                Stage::Stage1 => stage1_view(&s.model.config) == stage1_view(&cfg.model),
                Stage::Stage2 => s.model.config == cfg.model,
            };
            if !same || s.stage != stage || s.seed != cfg.seed {
                return Err(Error::Checkpoint(format!(
                    "{} holds a checkpoint from a different config or seed",
                    dir.display()
                )));
            }
            emit(out, format!("resuming {} at epoch {}", stage.name(), s.epoch))?;
            s
        }
        None => match stage {
            Stage::Stage1 => TrainState::new_stage1(cfg.model.clone(), cfg.seed)?,
            Stage::Stage2 => {
                let s1 = stage1.ok_or_else(|| Error::Checkpoint("stage 2 requires a stage-1 checkpoint".into()))?;
                TrainState::begin_stage2(s1, cfg.model.clone())?
            }
        },
    };
    let seed = cfg.seed;
    run_epochs(&mut state, data, eval, &cfg.optim, &mut |s: &TrainState| {
        s.save(dir)?;
        write_log(dir, seed, &s.history)?;
        emit(&mut *out, s.history.last().map(EpochRecord::log_line).unwrap_or_default())
    })?;
    if state.history.is_empty() || !dir.join(SIDECAR_FILE).exists() {
        state.save(dir)?;
        write_log(dir, seed, &state.history)?;
    }
    Ok(state)
}

/// Number of frozen tensors whose bits did not change, or an error naming
/// the first that did.
pub fn verify_frozen(stage1: &TrainState, stage2: &TrainState) -> Result<usize> {
    for name in &stage2.frozen {
        let a = stage1.model.params.get(name)?;
        let b = stage2.model.params.get(name)?;
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(Error::Numerical(format!("frozen parameter `{name}` changed during stage 2")));
        }
    }
    Ok(stage2.frozen.len())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub stage1: Option<TrainState>,
    pub stage2: Option<TrainState>,
}

/// Train on `data` under `cfg.out_dir`, one directory per stage.
pub fn train_on(
    cfg: &RunConfig,
    stage: StageSel,
    data: &Dataset,
    eval: Option<&Dataset>,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir1 = stage_dir(out_dir, Stage::Stage1, &cfg.model);
    let s1 = match stage {
        StageSel::One | StageSel::Both => run_stage(cfg, Stage::Stage1, data, eval, &dir1, None, out)?,
        StageSel::Two => {
            let s = existing(&dir1)?.ok_or_else(|| {
                Error::Checkpoint(format!("stage 2 requires a stage-1 checkpoint in {}", dir1.display()))
            })?;
            if s.epoch < cfg.optim.epochs_stage1 {
                return Err(Error::Checkpoint(format!(
                    "stage-1 checkpoint in {} has {} of {} epochs",
                    dir1.display(),
                    s.epoch,
                    cfg.optim.epochs_stage1
                )));
            }
            s
        }
    };
    emit(out, format!("{}: checkpoint {}", dir1.display(), crate::train::checkpoint_digest(&s1)?))?;
    if stage == StageSel::One {
        return Ok(TrainOutcome {
            stage1: Some(s1),
            stage2: None,
        });
    }
    let dir2 = stage_dir(out_dir, Stage::Stage2, &cfg.model);
    let s2 = run_stage(cfg, Stage::Stage2, data, eval, &dir2, Some(&s1), out)?;
    let n = verify_frozen(&s1, &s2)?;
    emit(out, format!("frozen tensors unchanged: {n}"))?;
    emit(out, format!("{}: checkpoint {}", dir2.display(), crate::train::checkpoint_digest(&s2)?))?;
    Ok(TrainOutcome {
        stage1: Some(s1),
        stage2: Some(s2),
    })
}

pub fn cmd_train(cfg: &RunConfig, stage: StageSel, out: &mut dyn Write) -> Result<TrainOutcome> {
    emit(out, format!("seed={}", cfg.seed))?;
    let data = Manifest::load(cfg.dataset()?)?;
    emit(out, format!("training on {} samples, {} subjects", data.len(), data.subjects().len()))?;
    train_on(cfg, stage, &data, None, &cfg.out_dir, out)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub folds: Vec<F1Report>,
    pub pooled: F1Report,
}

fn plan_for(state: &TrainState) -> Plan {
    match state.stage {
        Stage::Stage1 => Plan::EVAL_STAGE1,
        Stage::Stage2 => Plan::EVAL,
    }
}

fn labels_of(data: &Dataset) -> Vec<Vec<u8>> {
    data.samples.iter().map(|s| s.au_labels.clone()).collect()
}

/// Evaluate a checkpoint directory, or with `folds` train and test one
/// model per subject-exclusive fold and pool the predictions.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    folds: Option<usize>,
    out: &mut dyn Write,
) -> Result<EvalReport> {
    emit(out, format!("seed={}", cfg.seed))?;
    let data = Manifest::load(cfg.dataset()?)?;
    let report = match folds {
        None => {
            let dir = checkpoint.ok_or_else(|| Error::Config("eval needs --checkpoint or --folds".into()))?;
            let state = TrainState::load(dir)?;
            if state.model.config.aus != data.aus {
                return Err(Error::Data(format!(
                    "checkpoint AUs {:?} do not match manifest AUs {:?}",
                    state.model.config.aus, data.aus
                )));
            }
            let preds = binarize(&predict(&state.model, &data, plan_for(&state), cfg.optim.threads)?);
            let r = f1_per_au(&data.aus, &preds, &labels_of(&data))?;
            emit(out, r.table())?;
            EvalReport {
                folds: vec![r.clone()],
                pooled: r,
            }
        }
        Some(k) => {
            let ids: Vec<String> = data.samples.iter().map(|s| s.subject_id.clone()).collect();
            let splits = kfold_subject_exclusive(&ids, k, cfg.seed)?;
            let mut reports = Vec::new();
            let (mut all_p, mut all_y) = (Vec::new(), Vec::new());
            for (f, (tr, te)) in splits.iter().enumerate() {
                let (train, test) = (data.subset(tr), data.subset(te));
                emit(out, format!("fold {f}: train {} / test {} samples", train.len(), test.len()))?;
                let dir = cfg.out_dir.join(format!("fold{f}"));
                let outcome = train_on(cfg, StageSel::Both, &train, None, &dir, out)?;
                let state = outcome.stage2.expect("both stages ran");
                let preds = binarize(&predict(&state.model, &test, Plan::EVAL, cfg.optim.threads)?);
                let labels = labels_of(&test);
                let r = f1_per_au(&data.aus, &preds, &labels)?;
                emit(out, format!("fold {f}\n{}", r.table()))?;
                all_p.extend(preds);
                all_y.extend(labels);
                reports.push(r);
            }
            let pooled = f1_per_au(&data.aus, &all_p, &all_y)?;
            emit(out, format!("pooled\n{}", pooled.table()))?;
            EvalReport {
                folds: reports,
                pooled,
            }
        }
    };
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    /// Location of the worst error.
    pub worst: String,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub seed: u64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradCheckEntry::passed)
    }

    pub fn worst(&self, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.max_error)
            .fold(0.0, f64::max)
    }
}

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODULE_TOLERANCE: f64 = 1e-4;

/// Small model used by the module checks.
pub fn toy_model_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.backbone.input_size = (16, 16);
    c.backbone.patch_grid = (2, 2);
    c.backbone.patch_channels = 2;
    c.backbone.featconv_channels = vec![3, 2];
    c.aus = vec![1, 2, 4, 12, 15];
    c.region.crop = (2, 2);
    c.region.d_au = 4;
    c.bilstm.hidden = 3;
    c.attention.d = 4;
    c.attention.d_k = 2;
    c.attention.d_v = 2;
    c.attention.n_heads = 2;
    c.attention.n_layers = 1;
    c.hopfield.d = 4;
    c.hopfield.d_k = 2;
    c.hopfield.d_v = 2;
    c.hopfield.n_heads = 2;
    c
}

const ENTRIES_PER_TENSOR: usize = 3;

fn module_checks(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let cfg = toy_model_config();
    let mut model = Model::new(cfg.clone(), seed)?;
    model.init_relations(seed);
    let mut rng = SeededRng::new(seed).split("gradcheck");
    let n = 2;
    let (h, w) = cfg.backbone.input_size;
    let images = Tensor::uniform(&[n, 1, h, w], 1.0, &mut rng);
    let labels: Vec<f64> = (0..n * cfg.aus.len()).map(|_| rng.bernoulli(0.5) as u8 as f64).collect();
    let truth = crate::au_region::template(cfg.region.landmark_count)?;
    let lms: Vec<f64> = (0..n).flat_map(|_| truth.flat()).collect();
    let aus_input = Tensor::randn(&[n, cfg.aus.len(), cfg.region.d_au], &mut rng);
    let mut entries = Vec::new();
    let mut push = |name: &str, r: crate::gradcheck::ParamCheck| {
        entries.push(GradCheckEntry {
            name: format!("module/{name}"),
            max_error: r.max_error,
            tolerance: MODULE_TOLERANCE,
            worst: r.worst,
        })
    };
    let full = Plan {
        extractor: Mode::Train,
        relation: Mode::Train,
        relations: true,
    };
    let m = &model;
    push(
        "backbone",
        param_grad_check(
            &m.params,
            |fwd: &mut Forward<'_>| {
                let x = fwd.tape.constant(images.clone());
                let (g, l) = m.features(fwd, x, Mode::Train)?;
                let g = fwd.tape.mean(g);
                let l2 = fwd.tape.mul(l, l)?;
                let l2 = fwd.tape.mean(l2);
                fwd.tape.add(g, l2)
            },
            DEFAULT_EPS,
            ENTRIES_PER_TENSOR,
            seed,
        )?,
    );
    let relation_loss = |fwd: &mut Forward<'_>, which: &str| -> Result<crate::tape::Var> {
        let x = fwd.tape.constant(aus_input.clone());
        let set = crate::au_region::AUFeatureSet {
            features: x,
            au_ids: cfg.aus.clone(),
        };
        let y = match which {
            "bilstm" => relation::bilstm_forward(fwd, &set, &cfg.bilstm)?,
            "attention" => relation::attention::encode_stack(fwd, &set, &cfg.attention, Mode::Train)?,
            _ => relation::hopfield::hopfield_forward(fwd, &set, &cfg.hopfield, Mode::Train)?,
        };
        let sq = fwd.tape.mul(y.features, y.features)?;
        Ok(fwd.tape.mean(sq))
    };
    for which in ["bilstm", "attention", "hopfield"] {
        let prefix = format!("relation.{which}.");
        let mut only = crate::params::ParamStore::new();
        for (name, t) in m.params.iter() {
            if name.starts_with(&prefix) {
                only.insert(name, t.clone());
            }
        }
        push(
            which,
            param_grad_check(&only, |fwd| relation_loss(fwd, which), DEFAULT_EPS, ENTRIES_PER_TENSOR, seed)?,
        );
    }
    push(
        "full_model_loss",
        param_grad_check(
            &m.params,
            |fwd: &mut Forward<'_>| {
                let x = fwd.tape.constant(images.clone());
                let o = m.forward(fwd, x, full)?;
                total_loss(&mut fwd.tape, &o, &labels, &lms, cfg.lambda_lm)
            },
            DEFAULT_EPS,
            ENTRIES_PER_TENSOR,
            seed,
        )?,
    );
    Ok(entries)
}

/// Central-difference checks of every primitive and of each module's toy
/// instance, plus the full loss on a two-sample batch.
pub fn gradcheck_report(seed: u64) -> Result<GradReport> {
    let mut entries = Vec::new();
    for (name, shapes, f) in primitive_cases() {
        let f: Primitive = f;
        let mut worst: f64 = 0.0;
        for s in 0..3u64 {
            let mut rng = SeededRng::new(seed).split_index(name, s);
            let inputs: Vec<Tensor> = shapes.iter().map(|sh| Tensor::randn(sh, &mut rng)).collect();
            let err = grad_check_many(
                |t, v| {
                    let mut r = SeededRng::new(seed).split_index("weights", s);
                    f(t, v, &mut r)
                },
                &inputs,
                DEFAULT_EPS,
            )?;
            worst = worst.max(err);
        }
        entries.push(GradCheckEntry {
            name: format!("primitive/{name}"),
            max_error: worst,
            tolerance: PRIMITIVE_TOLERANCE,
            worst: String::new(),
        });
    }
    entries.extend(module_checks(seed)?);
    Ok(GradReport { seed, entries })
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<GradReport> {
    emit(out, format!("seed={}", cfg.seed))?;
    let report = gradcheck_report(cfg.seed)?;
    emit(out, "check\tmax_rel_error\ttolerance\tstatus\tworst")?;
    for e in &report.entries {
        emit(
            out,
            format!(
                "{}\t{:.3e}\t{:.0e}\t{}\t{}",
                e.name,
                e.max_error,
                e.tolerance,
                if e.passed() { "ok" } else { "FAIL" },
                e.worst
            ),
        )?;
    }
    emit(out, format!("gradcheck: {}", if report.passed() { "pass" } else { "FAIL" }))?;
    Ok(report)
}
