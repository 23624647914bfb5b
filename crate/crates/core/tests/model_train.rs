use std::collections::BTreeSet;

use hicomex::au_region::template;
use hicomex::commands::toy_model_config;
use hicomex::data::{generate_synthetic, SyntheticSpec};
use hicomex::data::Dataset;
use hicomex::model::{
    au_loss, frozen_prefixes, landmark_loss, relation_prefixes, total_loss, Ablation, Model, ModelConfig, Plan,
    AU_HEAD,
};
use hicomex::params::{Forward, ParamKind};
use hicomex::train::{
    checkpoint_digest, run_epochs, sgd_update, train_stage1, train_stage2, OptimConfig, Stage, TrainState,
};
use hicomex::{Error, SeededRng, Tape, Tensor};
use proptest::prelude::*;

fn probs(tape: &mut Tape, p: &[f64]) -> hicomex::Var {
    tape.constant(Tensor::new(&[1, p.len()], p.to_vec()).unwrap())
}

#[test]
fn au_loss_at_one_half_is_ln_two() {
    let mut tape = Tape::new();
    let p = probs(&mut tape, &[0.5; 6]);
    let l = au_loss(&mut tape, p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((tape.value(l).item() - 0.693147).abs() < 1e-6);
}

#[test]
fn au_loss_vanishes_when_predictions_equal_labels() {
    let mut tape = Tape::new();
    let p = probs(&mut tape, &[1.0, 0.0, 1.0]);
    let l = au_loss(&mut tape, p, &[1.0, 0.0, 1.0]).unwrap();
    assert!(tape.value(l).item() < 1e-6);
    assert!(tape.value(l).item().is_finite());
}

#[test]
fn au_loss_rejects_bad_labels() {
    let mut tape = Tape::new();
    let p = probs(&mut tape, &[0.3, 0.6]);
    assert!(matches!(au_loss(&mut tape, p, &[1.0, 2.0]), Err(Error::Data(_))));
    assert!(matches!(au_loss(&mut tape, p, &[1.0]), Err(Error::Data(_))));
}

proptest! {
    #[test]
    fn au_loss_is_symmetric(p in prop::collection::vec(0.0f64..=1.0, 1..10), seed in 0u64..100) {
        let mut rng = SeededRng::new(seed);
        let y: Vec<f64> = p.iter().map(|_| rng.bernoulli(0.5) as u8 as f64).collect();
        let q: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let z: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let mut tape = Tape::new();
        let pv = probs(&mut tape, &p);
        let qv = probs(&mut tape, &q);
        let a = au_loss(&mut tape, pv, &y).unwrap();
        let b = au_loss(&mut tape, qv, &z).unwrap();
        prop_assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-9);
    }
}

#[test]
fn landmark_loss_examples() {
    let truth = template(49).unwrap().flat();
    let mut tape = Tape::new();
    let same = tape.constant(Tensor::new(&[1, 49, 2], truth.clone()).unwrap());
    let l = landmark_loss(&mut tape, same, &truth).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let shifted: Vec<f64> = truth.iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 0.1 } else { *v }).collect();
    let off = tape.constant(Tensor::new(&[1, 49, 2], shifted).unwrap());
    let l = landmark_loss(&mut tape, off, &truth).unwrap();
    assert!((tape.value(l).item() - 0.01).abs() < 1e-12);
    assert!(matches!(landmark_loss(&mut tape, off, &truth[..96]), Err(Error::Data(_))));
}

fn toy_data(samples: usize, seed: u64) -> Dataset {
    let cfg = toy_model_config();
    let spec = SyntheticSpec {
        aus: cfg.aus.clone(),
        samples,
        subjects: 4,
        image_size: cfg.backbone.input_size,
        blob_sigma: 1.0,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}

fn small_optim(e1: usize, e2: usize) -> OptimConfig {
    OptimConfig {
        epochs_stage1: e1,
        epochs_stage2: e2,
        batch_size: 8,
        ..OptimConfig::default()
    }
}

#[test]
fn lambda_zero_reduces_total_loss_to_au_loss() {
    let model = {
        let mut m = Model::new(toy_model_config(), 1).unwrap();
        m.init_relations(1);
        m
    };
    let data = toy_data(4, 2);
    let samples: Vec<_> = data.samples.iter().collect();
    let images = hicomex::train::image_batch(&samples).unwrap();
    let labels: Vec<f64> = samples.iter().flat_map(|s| s.au_labels.iter().map(|&y| y as f64)).collect();
    let lms: Vec<f64> = samples.iter().flat_map(|s| s.landmarks.flat()).collect();
    let mut params = model.params.clone();
    let frozen = BTreeSet::new();
    let mut fwd = Forward::new(&mut params, &frozen, SeededRng::new(0));
    let x = fwd.tape.constant(images);
    let out = model.forward(&mut fwd, x, Plan::EVAL).unwrap();
    let t = total_loss(&mut fwd.tape, &out, &labels, &lms, 0.0).unwrap();
    let a = au_loss(&mut fwd.tape, out.probs, &labels).unwrap();
    assert_eq!(fwd.tape.value(t).item(), fwd.tape.value(a).item());
    let t = total_loss(&mut fwd.tape, &out, &labels, &lms, 0.5).unwrap();
    let l = landmark_loss(&mut fwd.tape, out.landmarks, &lms).unwrap();
    let want = fwd.tape.value(a).item() + 0.5 * fwd.tape.value(l).item();
    assert!((fwd.tape.value(t).item() - want).abs() < 1e-12);
}

#[test]
fn zero_head_predicts_one_half_and_probabilities_stay_in_range() {
    let data = toy_data(3, 3);
    let samples: Vec<_> = data.samples.iter().collect();
    let images = hicomex::train::image_batch(&samples).unwrap();
    for ablation in [Ablation::None, Ablation::Full] {
        let mut model = Model::new(toy_model_config().with_ablation(ablation), 4).unwrap();
        model.init_relations(4);
        let run = |model: &Model| {
            let mut params = model.params.clone();
            let frozen = BTreeSet::new();
            let mut fwd = Forward::new(&mut params, &frozen, SeededRng::new(0));
            let x = fwd.tape.constant(images.clone());
            let out = model.forward(&mut fwd, x, Plan::EVAL).unwrap();
            assert_eq!(fwd.tape.shape(out.probs), &[3, 5]);
            fwd.tape.data(out.probs).to_vec()
        };
        assert!(run(&model).iter().all(|&p| p > 0.0 && p < 1.0));
        for n in [format!("{AU_HEAD}.weight"), format!("{AU_HEAD}.bias")] {
            model.params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        assert!(run(&model).iter().all(|&p| p == 0.5));
    }
}

#[test]
fn ablation_switches_cover_the_five_rows() {
    let rows: Vec<_> = Ablation::ALL.iter().map(|a| a.switches()).collect();
    assert_eq!(
        rows,
        vec![
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, true)
        ]
    );
    let c = ModelConfig::default().with_ablation(Ablation::None);
    assert!(!c.uses_relations());
    assert_eq!(c.ablation(), Some(Ablation::None));
}

#[test]
fn no_relation_ablation_creates_no_relation_parameters() {
    let s1 = train_stage1(toy_model_config(), &toy_data(16, 1), None, &small_optim(1, 1), 2).unwrap();
    let s2 = TrainState::begin_stage2(&s1, toy_model_config().with_ablation(Ablation::None)).unwrap();
    assert!(s2.model.params.names_under(&relation_prefixes()).is_empty());
    let full = TrainState::begin_stage2(&s1, toy_model_config()).unwrap();
    for p in relation_prefixes() {
        assert!(!full.model.params.names_under(&[p]).is_empty(), "{p}");
    }
}

#[test]
fn learning_rate_schedule() {
    let o = OptimConfig::default();
    let want = [0.01, 0.01, 0.003, 0.003, 0.0009, 0.0009];
    for (e, w) in want.iter().enumerate() {
        assert!((o.lr_at(e) - w).abs() < 1e-15, "epoch {e}: {}", o.lr_at(e));
    }
    assert_eq!((o.momentum, o.weight_decay, o.epochs_stage1), (0.9, 5e-4, 30));
}

#[test]
fn sgd_step_examples() {
    let step = |kind: ParamKind, wd: f64| {
        let mut w = [1.0];
        let grad = [w[0]];
        let mut v = [0.0];
        sgd_update(&mut w, &grad, &mut v, kind, 0.1, 0.0, wd);
        w[0]
    };
    assert!((step(ParamKind::Weight, 0.0) - 0.9).abs() < 1e-15);
    assert!((step(ParamKind::Weight, 0.0005) - 0.89995).abs() < 1e-15);
    assert!((step(ParamKind::Bias, 0.0005) - 0.9).abs() < 1e-15);

    let mut w = [1.0];
    let mut v = [0.0];
    sgd_update(&mut w, &[1.0], &mut v, ParamKind::Weight, 0.1, 0.9, 0.0);
    sgd_update(&mut w, &[1.0], &mut v, ParamKind::Weight, 0.1, 0.9, 0.0);
    assert!((w[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
}

#[test]
fn weight_decay_skips_biases_and_norm_parameters() {
    let mut model = Model::new(toy_model_config(), 5).unwrap();
    model.init_relations(5);
    let mut seen = BTreeSet::new();
    for (name, t) in model.params.iter_mut() {
        let kind = ParamKind::of(name);
        if !kind.trainable() {
            assert!(name.ends_with(".running"), "{name}");
            continue;
        }
        for v in t.data_mut() {
            *v = 0.5;
        }
        let before = t.data().to_vec();
        let zeros = vec![0.0; before.len()];
        let mut vel = zeros.clone();
        sgd_update(t.data_mut(), &zeros, &mut vel, kind, 0.01, 0.9, 5e-4);
        let moved = t.data() != before.as_slice();
        let exempt = [".bias", ".gamma", ".beta"].iter().any(|s| name.ends_with(s));
        assert_eq!(moved, !exempt, "{name}");
        seen.insert(name.rsplit('.').next().unwrap().to_string());
    }
    for s in ["weight", "bias", "gamma", "beta", "alpha"] {
        assert!(seen.contains(s), "{s}");
    }
}

#[test]
fn stage_two_keeps_frozen_parameters_bit_identical() {
    let data = toy_data(24, 6);
    let s1 = train_stage1(toy_model_config(), &data, None, &small_optim(2, 2), 7).unwrap();
    let s2 = train_stage2(&s1, toy_model_config(), &data, None, &small_optim(2, 2)).unwrap();
    assert_eq!(s2.stage, Stage::Stage2);
    assert_eq!(s2.frozen, s2.model.params.names_under(&frozen_prefixes()));
    assert!(!s2.frozen.is_empty());
    for name in &s2.frozen {
        let a = s1.model.params.get(name).unwrap().data();
        let b = s2.model.params.get(name).unwrap().data();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} changed");
    }
    for head in [AU_HEAD, hicomex::au_region::LANDMARK_HEAD] {
        let n = format!("{head}.weight");
        assert_ne!(s1.model.params.get(&n).unwrap(), s2.model.params.get(&n).unwrap(), "{n} did not train");
    }
    assert_eq!(s2.history.len(), 4);
    assert_eq!(s2.history[2].stage, Stage::Stage2);
}

#[test]
fn stage_one_leaves_no_relation_parameters() {
    let s1 = train_stage1(toy_model_config(), &toy_data(8, 1), None, &small_optim(1, 1), 1).unwrap();
    assert!(s1.model.params.names_under(&relation_prefixes()).is_empty());
    assert!(s1.frozen.is_empty());
}

#[test]
fn training_is_deterministic() {
    let data = toy_data(16, 8);
    let run = || {
        let s1 = train_stage1(toy_model_config(), &data, None, &small_optim(2, 1), 9).unwrap();
        let s2 = train_stage2(&s1, toy_model_config(), &data, None, &small_optim(2, 1)).unwrap();
        (checkpoint_digest(&s2).unwrap(), s2.history)
    };
    assert_eq!(run(), run());
}

#[test]
fn interrupted_training_resumes_to_the_same_state() {
    let data = toy_data(16, 10);
    let optim = OptimConfig {
        augment_flip: true,
        ..small_optim(3, 0)
    };
    let straight = train_stage1(toy_model_config(), &data, None, &optim, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new_stage1(toy_model_config(), 11).unwrap();
    let err = run_epochs(&mut state, &data, None, &optim, &mut |s| {
        s.save(dir.path())?;
        if s.epoch == 1 {
            Err(Error::Numerical("interrupt".into()))
        } else {
            Ok(())
        }
    });
    assert!(err.is_err());
    let mut resumed = TrainState::load(dir.path()).unwrap();
    assert_eq!(resumed.epoch, 1);
    run_epochs(&mut resumed, &data, None, &optim, &mut |_| Ok(())).unwrap();
    assert_eq!(checkpoint_digest(&resumed).unwrap(), checkpoint_digest(&straight).unwrap());
    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.momentum, straight.momentum);
}

#[test]
fn loss_decreases_over_three_epochs_for_every_ablation() {
    let data = toy_data(64, 12);
    let optim = small_optim(3, 3);
    let s1 = train_stage1(toy_model_config(), &data, None, &optim, 13).unwrap();
    let l1: Vec<f64> = s1.history.iter().map(|r| r.train_loss).collect();
    assert!(l1[2] < l1[0], "stage 1: {l1:?}");
    for a in Ablation::ALL {
        let s2 = train_stage2(&s1, toy_model_config().with_ablation(a), &data, None, &optim).unwrap();
        let l: Vec<f64> = s2.history[3..].iter().map(|r| r.train_loss).collect();
        assert!(l[2] < l[0], "{}: {l:?}", a.name());
    }
}

#[test]
fn stage_two_rejects_an_incompatible_stage_one() {
    let data = toy_data(8, 14);
    let s1 = train_stage1(toy_model_config(), &data, None, &small_optim(1, 1), 15).unwrap();
    let mut other = toy_model_config();
    other.backbone.patch_channels = 3;
    assert!(matches!(TrainState::begin_stage2(&s1, other), Err(Error::Checkpoint(_))));
    let mut other = toy_model_config();
    other.region.d_au = 5;
    assert!(matches!(TrainState::begin_stage2(&s1, other), Err(Error::Checkpoint(_))));
    let s2 = TrainState::begin_stage2(&s1, toy_model_config()).unwrap();
    assert!(matches!(TrainState::begin_stage2(&s2, toy_model_config()), Err(Error::Checkpoint(_))));
    let mut relation_only = toy_model_config();
    relation_only.attention.n_layers = 2;
    relation_only.bilstm.hidden = 5;
    assert!(TrainState::begin_stage2(&s1, relation_only).is_ok());
}

#[test]
fn checkpoint_round_trip() {
    let data = toy_data(8, 16);
    let s1 = train_stage1(toy_model_config(), &data, None, &small_optim(1, 1), 17).unwrap();
    let s2 = train_stage2(&s1, toy_model_config(), &data, None, &small_optim(1, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    s2.save(dir.path()).unwrap();
    let back = TrainState::load(dir.path()).unwrap();
    assert_eq!(back.model.params, s2.model.params);
    assert_eq!(back.model.config, s2.model.config);
    assert_eq!(back.momentum, s2.momentum);
    assert_eq!(back.history, s2.history);
    assert_eq!((back.epoch, back.stage, back.seed, back.lr), (s2.epoch, s2.stage, s2.seed, s2.lr));
    assert_eq!(back.frozen, s2.frozen);
    assert_eq!(checkpoint_digest(&back).unwrap(), checkpoint_digest(&s2).unwrap());
}

#[test]
fn dataset_with_other_aus_is_rejected() {
    let mut data = toy_data(4, 18);
    data.aus = vec![1, 2, 4, 6, 7];
    let mut state = TrainState::new_stage1(toy_model_config(), 0).unwrap();
    let r = run_epochs(&mut state, &data, None, &small_optim(1, 1), &mut |_| Ok(()));
    assert!(matches!(r, Err(Error::Data(_))));
}
