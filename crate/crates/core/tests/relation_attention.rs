use std::collections::BTreeSet;

use hicomex::au_region::AUFeatureSet;
use hicomex::gradcheck::{param_grad_check, DEFAULT_EPS};
use hicomex::params::{Forward, ParamStore};
use hicomex::relation::attention::{self, encode_stack, encode_stack_with_pe, PREFIX};
use hicomex::relation::{attention_weights, positional_encoding, self_attention, AttentionConfig};
use hicomex::{Error, Mode, SeededRng, Tape, Tensor};
use proptest::prelude::*;

/// Softmax-weighted sum with every weight built from explicit exp/sum loops.
fn loop_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, dk) = (q.shape()[0], q.shape()[1]);
    let (m, dv) = (v.shape()[0], v.shape()[1]);
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mut logits = vec![0.0; m];
        for j in 0..m {
            let mut s = 0.0;
            for c in 0..dk {
                s += q.at(&[i, c]) * k.at(&[j, c]);
            }
            logits[j] = s / (dk as f64).sqrt();
        }
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in &logits {
            z += (l - top).exp();
        }
        for j in 0..m {
            let w = (logits[j] - top).exp() / z;
            for c in 0..dv {
                out[i * dv + c] += w * v.at(&[j, c]);
            }
        }
    }
    out
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let y = self_attention(&mut tape, q, k, v).unwrap();
    tape.value(y).clone()
}

#[test]
fn self_attention_matches_loop_oracle_on_random_instances() {
    let mut rng = SeededRng::new(7);
    for _ in 0..100 {
        let n = 1 + rng.below(8);
        let dk = 1 + rng.below(16);
        let dv = 1 + rng.below(16);
        let q = Tensor::randn(&[n, dk], &mut rng);
        let k = Tensor::randn(&[n, dk], &mut rng);
        let v = Tensor::randn(&[n, dv], &mut rng);
        let got = attend(&q, &k, &v);
        for (a, b) in got.data().iter().zip(loop_oracle(&q, &k, &v)) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn single_row_returns_the_value_row() {
    let mut rng = SeededRng::new(1);
    let v = Tensor::randn(&[1, 5], &mut rng);
    for _ in 0..5 {
        let q = Tensor::randn(&[1, 3], &mut rng);
        let k = Tensor::randn(&[1, 3], &mut rng);
        assert_eq!(attend(&q, &k, &v), v);
    }
}

#[test]
fn identical_keys_give_the_column_mean() {
    let mut rng = SeededRng::new(2);
    let row = Tensor::randn(&[1, 4], &mut rng);
    let k = Tensor::new(&[5, 4], row.data().repeat(5)).unwrap();
    let q = Tensor::randn(&[3, 4], &mut rng);
    let v = Tensor::randn(&[5, 2], &mut rng);
    let got = attend(&q, &k, &v);
    for i in 0..3 {
        for c in 0..2 {
            let mean = (0..5).map(|j| v.at(&[j, c])).sum::<f64>() / 5.0;
            assert!((got.at(&[i, c]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[2, 3]));
    let k = tape.constant(Tensor::zeros(&[2, 4]));
    let v = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(self_attention(&mut tape, q, k, v).is_err());
}

#[test]
fn positional_table_matches_direct_evaluation() {
    let d = AttentionConfig::default().d;
    let pe = positional_encoding(12, d).unwrap();
    for pos in 0..12 {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            let want = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            assert!((pe.at(&[pos, j]) - want).abs() <= 1e-15);
        }
    }
    for j in 0..d {
        assert_eq!(pe.at(&[0, j]), if j % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert!((pe.at(&[1, 0]) - 0.841471).abs() < 1e-6);
    assert!((pe.at(&[2, 1]) - (-0.416147)).abs() < 1e-6);
    assert!(matches!(positional_encoding(4, 7), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn attention_rows_are_distributions(n in 1usize..7, m in 1usize..7, dk in 1usize..9, seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[2, n, dk], &mut rng));
        let k = tape.constant(Tensor::randn(&[2, m, dk], &mut rng));
        let a = attention_weights(&mut tape, q, k, 1.0 / (dk as f64).sqrt()).unwrap();
        for row in tape.data(a).chunks(m) {
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

fn toy() -> AttentionConfig {
    AttentionConfig {
        d: 4,
        d_k: 2,
        d_v: 2,
        n_heads: 2,
        n_layers: 2,
        dropout: 0.1,
    }
}

fn encoder(cfg: &AttentionConfig, d_au: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    attention::init(cfg, d_au, &mut store, &SeededRng::new(seed));
    store
}

fn features(fwd: &mut Forward<'_>, x: &Tensor) -> AUFeatureSet {
    let v = fwd.tape.constant(x.clone());
    AUFeatureSet {
        features: v,
        au_ids: (1..=x.shape()[1] as u32).collect(),
    }
}

#[test]
fn zeroed_branch_reduces_to_the_residual_path() {
    let cfg = AttentionConfig {
        d: 6,
        d_k: 6,
        d_v: 6,
        n_heads: 1,
        n_layers: 1,
        dropout: 0.0,
    };
    let mut store = encoder(&cfg, 5, 3);
    for name in ["layer0.head0.v.weight", "layer0.head0.v.bias", "layer0.out.weight", "layer0.out.bias"] {
        store.get_mut(&format!("{PREFIX}.{name}")).unwrap().data_mut().fill(0.0);
    }
    let x = Tensor::randn(&[2, 4, 5], &mut SeededRng::new(4));
    let frozen = BTreeSet::new();
    let mut fwd = Forward::new(&mut store, &frozen, SeededRng::new(0));
    let set = features(&mut fwd, &x);
    let y = encode_stack(&mut fwd, &set, &cfg, Mode::Eval).unwrap();
    let got = fwd.tape.value(y.features).clone();

    let h = fwd.linear(set.features, &format!("{PREFIX}.pre")).unwrap();
    let h = fwd.layer_norm(h, &format!("{PREFIX}.pre_norm")).unwrap();
    let pe = fwd.tape.constant(positional_encoding(4, 6).unwrap());
    let h = fwd.tape.add_broadcast(h, pe).unwrap();
    let h = fwd.layer_norm(h, &format!("{PREFIX}.layer0.norm")).unwrap();
    let want = fwd.linear(h, &format!("{PREFIX}.post")).unwrap();
    assert_eq!(&got, fwd.tape.value(want));
}

#[test]
fn permutation_with_matched_positions_permutes_the_output() {
    let cfg = toy();
    let (n_au, d_au) = (5, 3);
    let perm = [3, 0, 4, 1, 2];
    let mut store = encoder(&cfg, d_au, 5);
    let x = Tensor::randn(&[2, n_au, d_au], &mut SeededRng::new(6));
    let pe = positional_encoding(n_au, cfg.d).unwrap();
    let permute = |t: &Tensor| {
        let w = t.shape()[t.rank() - 1];
        let rows = t.len() / (n_au * w);
        let mut data = Vec::with_capacity(t.len());
        for b in 0..rows {
            for &p in &perm {
                data.extend_from_slice(&t.data()[(b * n_au + p) * w..(b * n_au + p + 1) * w]);
            }
        }
        Tensor::new(t.shape(), data).unwrap()
    };
    let frozen = BTreeSet::new();
    let mut run = |x: &Tensor, pe: &Tensor| {
        let mut fwd = Forward::new(&mut store, &frozen, SeededRng::new(0));
        let set = features(&mut fwd, x);
        let y = encode_stack_with_pe(&mut fwd, &set, &cfg, pe, Mode::Eval).unwrap();
        fwd.tape.value(y.features).clone()
    };
    let y = run(&x, &pe);
    let yp = run(&permute(&x), &permute(&pe));
    // Summation order inside softmax and A·V follows the permuted order, so
    // agreement is up to rounding.
    assert!(permute(&y).max_abs_diff(&yp) < 1e-12);
    let default = run(&x, &pe);
    assert_eq!(default, y);
}

#[test]
fn explicit_table_with_wrong_shape_is_config_error() {
    let cfg = toy();
    let mut store = encoder(&cfg, 3, 0);
    let frozen = BTreeSet::new();
    let mut fwd = Forward::new(&mut store, &frozen, SeededRng::new(0));
    let set = features(&mut fwd, &Tensor::zeros(&[1, 4, 3]));
    let pe = positional_encoding(3, cfg.d).unwrap();
    assert!(matches!(encode_stack_with_pe(&mut fwd, &set, &cfg, &pe, Mode::Eval), Err(Error::Config(_))));
}

#[test]
fn config_invariants_are_enforced() {
    assert!(AttentionConfig::default().validate().is_ok());
    for bad in [
        AttentionConfig { d: 6, ..toy() },
        AttentionConfig { d_k: 3, ..toy() },
        AttentionConfig { n_layers: 0, ..toy() },
        AttentionConfig { dropout: 1.0, ..toy() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn eval_is_deterministic_and_train_uses_dropout() {
    let cfg = toy();
    let mut store = encoder(&cfg, 3, 8);
    let x = Tensor::randn(&[2, 4, 3], &mut SeededRng::new(9));
    let frozen = BTreeSet::new();
    let mut run = |mode: Mode, seed: u64| {
        let mut fwd = Forward::new(&mut store, &frozen, SeededRng::new(seed));
        let set = features(&mut fwd, &x);
        let y = encode_stack(&mut fwd, &set, &cfg, mode).unwrap();
        assert_eq!(y.au_ids, vec![1, 2, 3, 4]);
        fwd.tape.value(y.features).clone()
    };
    assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
    assert_ne!(run(Mode::Train, 1), run(Mode::Train, 2));
}

#[test]
fn gradient_check_through_the_stack_on_four_aus() {
    let cfg = toy();
    for seed in 0..3 {
        let store = encoder(&cfg, 3, seed);
        let x = Tensor::randn(&[2, 4, 3], &mut SeededRng::new(seed + 10));
        let r = param_grad_check(
            &store,
            |fwd| {
                let set = features(fwd, &x);
                let y = encode_stack(fwd, &set, &cfg, Mode::Train)?;
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
