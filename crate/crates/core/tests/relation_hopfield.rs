use std::collections::BTreeSet;

use hicomex::au_region::AUFeatureSet;
use hicomex::gradcheck::{param_grad_check, DEFAULT_EPS};
use hicomex::params::{Forward, ParamStore};
use hicomex::relation::attention::{self, encode_stack_scaled};
use hicomex::relation::hopfield::{self, hopfield_forward, HopfieldConfig, MAX_UPDATE_STEPS};
use hicomex::relation::{hopfield_update, retrieve};
use hicomex::{Error, Mode, SeededRng, Tape, Tensor};

fn toy(steps: usize) -> HopfieldConfig {
    HopfieldConfig {
        update_steps: steps,
        convergence_epsilon: 1e-4,
        beta: 2.0,
        d: 4,
        d_k: 2,
        d_v: 2,
        n_heads: 2,
        n_layers: 1,
        dropout: 0.1,
    }
}

fn features(fwd: &mut Forward<'_>, x: &Tensor) -> AUFeatureSet {
    let v = fwd.tape.constant(x.clone());
    AUFeatureSet {
        features: v,
        au_ids: (1..=x.shape()[1] as u32).collect(),
    }
}

#[test]
fn single_step_is_bit_identical_to_the_attention_path() {
    for seed in 0..4 {
        let cfg = HopfieldConfig {
            n_layers: 2,
            beta: 3.5,
            ..toy(1)
        };
        let mut hop = ParamStore::new();
        hopfield::init(&cfg, 3, &mut hop, &SeededRng::new(seed));
        let mut att = ParamStore::new();
        for (name, t) in hop.iter() {
            att.insert(name.replace(hopfield::PREFIX, attention::PREFIX), t.clone());
        }
        let x = Tensor::randn(&[3, 5, 3], &mut SeededRng::new(seed + 1));
        let frozen = BTreeSet::new();
        for mode in [Mode::Eval, Mode::Train] {
            let a = {
                let mut fwd = Forward::new(&mut hop, &frozen, SeededRng::new(9));
                let set = features(&mut fwd, &x);
                let y = hopfield_forward(&mut fwd, &set, &cfg, mode).unwrap();
                fwd.tape.value(y.features).clone()
            };
            let b = {
                let mut fwd = Forward::new(&mut att, &frozen, SeededRng::new(9));
                let set = features(&mut fwd, &x);
                let y = encode_stack_scaled(&mut fwd, &set, &cfg.dims(), cfg.scale(), mode).unwrap();
                fwd.tape.value(y.features).clone()
            };
            assert_eq!(a, b);
        }
    }
}

#[test]
fn single_update_matches_scaled_attention_formula() {
    let mut rng = SeededRng::new(3);
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::randn(&[3, 4], &mut rng));
    let k = tape.constant(Tensor::randn(&[5, 4], &mut rng));
    let v = tape.constant(Tensor::randn(&[5, 2], &mut rng));
    let y = hopfield_update(&mut tape, s, k, v, 2.0).unwrap();
    let r = retrieve(&mut tape, s, k, v, s, 2.0 / 2.0, 1, 0.0).unwrap();
    assert_eq!(r.executed, 1);
    assert_eq!(tape.value(y), tape.value(r.output));
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

struct Fixture {
    tape: Tape,
    r: hicomex::relation::Retrieval,
    values: Tensor,
}

/// Two orthogonal unit patterns in four dimensions, query on pattern 1,
/// run for `steps` updates with early stopping disabled.
fn orthogonal(query: &[f64], steps: usize) -> Fixture {
    let beta = 50.0;
    let d_k = 4;
    let mut tape = Tape::new();
    let keys = Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let values = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 1.1, 0.4, -0.5]).unwrap();
    let k = tape.constant(keys);
    let v = tape.constant(values.clone());
    let q = tape.constant(Tensor::new(&[1, 4], query.to_vec()).unwrap());
    let r = retrieve(&mut tape, q, k, v, k, beta / (d_k as f64).sqrt(), steps, 0.0).unwrap();
    Fixture { tape, r, values }
}

#[test]
fn orthogonal_patterns_are_retrieved_within_five_steps() {
    let f = orthogonal(&[1.0, 0.0, 0.0, 0.0], 5);
    assert_eq!(f.r.executed, 5);
    let cos = cosine(f.tape.data(f.r.output), &f.values.data()[..3]);
    assert!(cos > 0.99, "cosine {cos}");
}

#[test]
fn orthogonal_fixture_converges() {
    let f = orthogonal(&[1.0, 0.0, 0.0, 0.0], 6);
    assert_eq!(f.r.states.len(), 6);
    let delta = f.tape.value(f.r.states[5]).max_abs_diff(f.tape.value(f.r.states[4]));
    assert!(delta < 1e-6, "delta {delta}");
}

#[test]
fn attention_entropy_does_not_increase_over_updates() {
    for query in [[1.0, 0.0, 0.0, 0.0], [0.6, 0.45, 0.2, 0.0], [0.2, 0.15, 0.0, 0.3]] {
        let f = orthogonal(&query, 5);
        let hs: Vec<f64> = f.r.weights.iter().map(|&w| entropy(f.tape.data(w))).collect();
        for pair in hs.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15, "{query:?}: {hs:?}");
        }
    }
}

#[test]
fn early_stop_records_the_executed_steps() {
    let mut tape = Tape::new();
    let mut rng = SeededRng::new(4);
    let k = tape.constant(Tensor::randn(&[4, 3], &mut rng));
    let v = tape.constant(Tensor::randn(&[4, 3], &mut rng));
    let q = tape.constant(Tensor::randn(&[4, 3], &mut rng));
    let r = retrieve(&mut tape, q, k, v, q, 0.5, 10, 1e9).unwrap();
    assert_eq!(r.executed, 2);
    assert_eq!(r.weights.len(), 2);
    let r = retrieve(&mut tape, q, k, v, q, 0.5, 10, 0.0).unwrap();
    assert_eq!(r.executed, 10);
}

#[test]
fn zero_beta_gives_the_column_mean() {
    let mut rng = SeededRng::new(5);
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::randn(&[3, 4], &mut rng));
    let k = tape.constant(Tensor::randn(&[6, 4], &mut rng));
    let vt = Tensor::randn(&[6, 2], &mut rng);
    let v = tape.constant(vt.clone());
    let y = hopfield_update(&mut tape, s, k, v, 0.0).unwrap();
    for i in 0..3 {
        for c in 0..2 {
            let mean = (0..6).map(|j| vt.at(&[j, c])).sum::<f64>() / 6.0;
            assert!((tape.value(y).at(&[i, c]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn single_stored_pattern_returns_its_value() {
    let mut rng = SeededRng::new(6);
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::randn(&[2, 3], &mut rng));
    let k = tape.constant(Tensor::randn(&[1, 3], &mut rng));
    let vt = Tensor::randn(&[1, 4], &mut rng);
    let v = tape.constant(vt.clone());
    let y = hopfield_update(&mut tape, s, k, v, 7.0).unwrap();
    for row in tape.data(y).chunks(4) {
        assert_eq!(row, vt.data());
    }
}

#[test]
fn config_bounds_are_enforced() {
    assert!(HopfieldConfig::default().validate().is_ok());
    for bad in [
        toy(0),
        toy(MAX_UPDATE_STEPS + 1),
        HopfieldConfig { beta: 0.0, ..toy(2) },
        HopfieldConfig { beta: f64::INFINITY, ..toy(2) },
        HopfieldConfig { convergence_epsilon: 0.0, ..toy(2) },
        HopfieldConfig { d_k: 3, ..toy(2) },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn per_sample_early_stop_is_independent_of_batch_composition() {
    let cfg = HopfieldConfig {
        convergence_epsilon: 0.05,
        ..toy(6)
    };
    let mut store = ParamStore::new();
    hopfield::init(&cfg, 3, &mut store, &SeededRng::new(1));
    let x = Tensor::randn(&[3, 4, 3], &mut SeededRng::new(2));
    let frozen = BTreeSet::new();
    let mut run = |x: &Tensor| {
        let mut fwd = Forward::new(&mut store, &frozen, SeededRng::new(0));
        let set = features(&mut fwd, x);
        let y = hopfield_forward(&mut fwd, &set, &cfg, Mode::Eval).unwrap();
        fwd.tape.value(y.features).clone()
    };
    let batch = run(&x);
    for s in 0..3 {
        let one = Tensor::new(&[1, 4, 3], x.data()[s * 12..(s + 1) * 12].to_vec()).unwrap();
        assert_eq!(run(&one).data(), &batch.data()[s * 12..(s + 1) * 12]);
    }
}

#[test]
fn gradient_check_unrolls_two_updates_on_three_aus() {
    let cfg = HopfieldConfig {
        convergence_epsilon: 1e-12,
        ..toy(2)
    };
    for seed in 0..3 {
        let mut store = ParamStore::new();
        hopfield::init(&cfg, 3, &mut store, &SeededRng::new(seed));
        let x = Tensor::randn(&[2, 3, 3], &mut SeededRng::new(seed + 20));
        let r = param_grad_check(
            &store,
            |fwd| {
                let set = features(fwd, &x);
                let y = hopfield_forward(fwd, &set, &cfg, Mode::Train)?;
                let sq = fwd.tape.mul(y.features, y.features)?;
                Ok(fwd.tape.mean(sq))
            },
            DEFAULT_EPS,
            4,
            seed,
        )
        .unwrap();
        assert!(r.max_error < 1e-5, "seed {seed}: {} at {}", r.max_error, r.worst);
    }
}
