//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//! A failed contract criterion exits non-zero; the two empirical ablation
//! criteria (8 and 9) are reported but do not fail the build.

use std::collections::BTreeSet;
use std::time::Instant;

use hicomex::au_region::AUFeatureSet;
use hicomex::commands::{cmd_gradcheck, cmd_train, toy_model_config, verify_frozen, StageSel};
use hicomex::config::RunConfig;
use hicomex::data::{
    binarize_intensity, f1_from_counts, f1_per_au, generate_synthetic, kfold_subject_exclusive, Dataset, SyntheticSpec,
};
use hicomex::model::{Ablation, ModelConfig, Plan, BP4D_AUS};
use hicomex::params::{Forward, ParamStore};
use hicomex::relation::attention::{self, encode_stack_scaled};
use hicomex::relation::bilstm::{self, cell_prefix, BiLstmConfig};
use hicomex::relation::hopfield::{self, hopfield_forward, HopfieldConfig};
use hicomex::relation::{positional_encoding, retrieve, self_attention, AttentionConfig};
use hicomex::train::{binarize, predict, run_epochs, OptimConfig, TrainState};
use hicomex::{Mode, SeededRng, Tape, Tensor};

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_EPOCHS: (usize, usize) = (4, 6);
const EMPIRICAL: [usize; 2] = [8, 9];

struct Outcome {
    failed: Vec<usize>,
}

impl Outcome {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        println!("{} {id:>2}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_integrity(out: &mut Outcome) {
    let t = Instant::now();
    let mut sink = Vec::new();
    let report = cmd_gradcheck(&RunConfig::default(), &mut sink).expect("gradcheck runs");
    let secs = t.elapsed().as_secs_f64();
    let prim = report.worst("primitive/");
    let full = report.worst("module/full_model_loss");
    let pass = report.passed() && prim < 1e-6 && full < 1e-4 && secs < 120.0;
    out.record(
        1,
        "gradient integrity",
        pass,
        format!("primitive max {prim:.2e} (< 1e-6), full loss {full:.2e} (< 1e-4), {secs:.1}s (< 120s)"),
    );
}

fn oracle_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, dk) = (q.shape()[0], q.shape()[1]);
    let (m, dv) = (v.shape()[0], v.shape()[1]);
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let logits: Vec<f64> = (0..m)
            .map(|j| (0..dk).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        for j in 0..m {
            let w = (logits[j] - top).exp() / z;
            for c in 0..dv {
                out[i * dv + c] += w * v.at(&[j, c]);
            }
        }
    }
    out
}

fn attention_oracle(out: &mut Outcome) {
    let mut rng = SeededRng::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 1 + rng.below(8);
        let dk = 1 + rng.below(16);
        let dv = 1 + rng.below(16);
        let q = Tensor::randn(&[n, dk], &mut rng);
        let k = Tensor::randn(&[n, dk], &mut rng);
        let v = Tensor::randn(&[n, dv], &mut rng);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let y = self_attention(&mut tape, qv, kv, vv).unwrap();
        worst = worst.max(max_abs(tape.data(y), &oracle_attention(&q, &k, &v)));
    }
    out.record(2, "attention oracle", worst <= 1e-12, format!("100 instances, max |diff| {worst:.2e} (<= 1e-12)"));
}

fn features(fwd: &mut Forward<'_>, x: &Tensor) -> AUFeatureSet {
    let v = fwd.tape.constant(x.clone());
    AUFeatureSet {
        features: v,
        au_ids: (1..=x.shape()[1] as u32).collect(),
    }
}

fn hopfield_reduction(out: &mut Outcome) {
    let cfg = HopfieldConfig {
        update_steps: 1,
        n_layers: 2,
        ..HopfieldConfig::default()
    };
    let mut identical = true;
    for seed in 0..3 {
        let mut hop = ParamStore::new();
        hopfield::init(&cfg, 12, &mut hop, &SeededRng::new(seed));
        let mut att = ParamStore::new();
        for (name, t) in hop.iter() {
            att.insert(name.replace(hopfield::PREFIX, attention::PREFIX), t.clone());
        }
        let x = Tensor::randn(&[2, 12, 12], &mut SeededRng::new(seed + 10));
        let frozen = BTreeSet::new();
        for mode in [Mode::Eval, Mode::Train] {
            let mut fwd = Forward::new(&mut hop, &frozen, SeededRng::new(3));
            let set = features(&mut fwd, &x);
            let y = hopfield_forward(&mut fwd, &set, &cfg, mode).unwrap();
            let a = fwd.tape.value(y.features).clone();
            let mut fwd = Forward::new(&mut att, &frozen, SeededRng::new(3));
            let set = features(&mut fwd, &x);
            let y = encode_stack_scaled(&mut fwd, &set, &cfg.dims(), cfg.scale(), mode).unwrap();
            identical &= &a == fwd.tape.value(y.features);
        }
    }

    let beta = 50.0;
    let mut tape = Tape::new();
    let values = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 1.1, 0.4, -0.5]).unwrap();
    let k = tape.constant(Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
    let v = tape.constant(values.clone());
    let q = tape.constant(Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r5 = retrieve(&mut tape, q, k, v, k, beta / 2.0, 5, 0.0).unwrap();
    let got = tape.data(r5.output);
    let target = &values.data()[..3];
    let cos5 = got.iter().zip(target).map(|(a, b)| a * b).sum::<f64>() / (norm(got) * norm(target));
    let r6 = retrieve(&mut tape, q, k, v, k, beta / 2.0, 6, 0.0).unwrap();
    let delta = max_abs(tape.data(r6.states[5]), tape.data(r6.states[4]));
    out.record(
        3,
        "Hopfield reduction and retrieval",
        identical && cos5 > 0.99 && delta < 1e-6,
        format!(
            "steps=1 bit-identical: {identical}; cosine at 5 steps {cos5:.6} (> 0.99); step 4->5 delta {delta:.2e} (< 1e-6)"
        ),
    );
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn lstm_oracle_dir(store: &ParamStore, dir: &str, xs: &[Vec<f64>], h: usize) -> Vec<Vec<f64>> {
    let p = cell_prefix(dir);
    let wx = store.get(&format!("{p}.x_proj.weight")).unwrap();
    let bx = store.get(&format!("{p}.x_proj.bias")).unwrap().data().to_vec();
    let wh = store.get(&format!("{p}.h_proj.weight")).unwrap();
    let (mut hp, mut cp) = (vec![0.0; h], vec![0.0; h]);
    let mut out = Vec::new();
    for x in xs {
        let zx = matvec(wx, x);
        let zh = matvec(wh, &hp);
        let z: Vec<f64> = (0..4 * h).map(|k| zx[k] + bx[k] + zh[k]).collect();
        for j in 0..h {
            let c = sigmoid(z[h + j]) * cp[j] + sigmoid(z[j]) * z[2 * h + j].tanh();
            cp[j] = c;
            hp[j] = sigmoid(z[3 * h + j]) * c.tanh();
        }
        out.push(hp.clone());
    }
    out
}

fn lstm_oracle(store: &ParamStore, seq: &[Vec<f64>], h: usize) -> Vec<f64> {
    let hf = lstm_oracle_dir(store, "fwd", seq, h);
    let rev: Vec<Vec<f64>> = seq.iter().rev().cloned().collect();
    let mut hb = lstm_oracle_dir(store, "bwd", &rev, h);
    hb.reverse();
    let wf = store.get(&format!("{}.out_fwd.weight", bilstm::PREFIX)).unwrap();
    let wb = store.get(&format!("{}.out_bwd.weight", bilstm::PREFIX)).unwrap();
    let b = store.get(&format!("{}.out.bias", bilstm::PREFIX)).unwrap().data().to_vec();
    let mut out = Vec::new();
    for (t, x) in seq.iter().enumerate() {
        let (a, c) = (matvec(wf, &hf[t]), matvec(wb, &hb[t]));
        out.extend((0..x.len()).map(|k| x[k] + a[k] + c[k] + b[k]));
    }
    out
}

fn run_bilstm(store: &mut ParamStore, x: &Tensor, h: usize) -> Tensor {
    let frozen = BTreeSet::new();
    let mut fwd = Forward::new(store, &frozen, SeededRng::new(0));
    let set = features(&mut fwd, x);
    let y = bilstm::bilstm_forward(&mut fwd, &set, &BiLstmConfig { hidden: h }).unwrap();
    fwd.tape.value(y.features).clone()
}

fn bilstm_oracle(out: &mut Outcome) {
    let (d, h, t) = (8, 6, 4);
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut store = ParamStore::new();
        bilstm::init(&BiLstmConfig { hidden: h }, d, &mut store, &SeededRng::new(seed));
        let bias = store.get_mut(&format!("{}.out.bias", bilstm::PREFIX)).unwrap();
        *bias = Tensor::uniform(&[d], 0.5, &mut SeededRng::new(seed + 100));
        let x = Tensor::randn(&[1, t, d], &mut SeededRng::new(seed + 200));
        let seq: Vec<Vec<f64>> = x.data().chunks(d).map(<[f64]>::to_vec).collect();
        let y = run_bilstm(&mut store, &x, h);
        worst = worst.max(max_abs(y.data(), &lstm_oracle(&store, &seq, h)));
    }

    let (n, t) = (3, 7);
    let mut store = ParamStore::new();
    bilstm::init(&BiLstmConfig { hidden: h }, d, &mut store, &SeededRng::new(77));
    let mut swapped = ParamStore::new();
    for (name, v) in store.iter() {
        let name = name
            .replace(".fwd.", ".tmp.")
            .replace(".bwd.", ".fwd.")
            .replace(".tmp.", ".bwd.")
            .replace(".out_fwd.", ".out_tmp.")
            .replace(".out_bwd.", ".out_fwd.")
            .replace(".out_tmp.", ".out_bwd.");
        swapped.insert(name, v.clone());
    }
    let reverse = |x: &Tensor| {
        let rows: Vec<&[f64]> = x.data().chunks(d).collect();
        let mut data = Vec::with_capacity(x.len());
        for s in 0..n {
            for i in (0..t).rev() {
                data.extend_from_slice(rows[s * t + i]);
            }
        }
        Tensor::new(&[n, t, d], data).unwrap()
    };
    let x = Tensor::randn(&[n, t, d], &mut SeededRng::new(78));
    let exact = reverse(&run_bilstm(&mut swapped, &reverse(&x), h)) == run_bilstm(&mut store, &x, h);
    out.record(
        4,
        "BiLSTM oracle",
        worst <= 1e-12 && exact,
        format!("10 length-4 instances, max |diff| {worst:.2e} (<= 1e-12); reversal symmetry exact: {exact}"),
    );
}

fn positional(out: &mut Outcome) {
    let d = AttentionConfig::default().d;
    let n = BP4D_AUS.len();
    let pe = positional_encoding(n, d).unwrap();
    let mut worst: f64 = 0.0;
    for pos in 0..n {
        for j in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let want = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            worst = worst.max((pe.at(&[pos, j]) - want).abs());
        }
    }
    let row0 = (0..d).all(|j| pe.at(&[0, j]) == if j % 2 == 0 { 0.0 } else { 1.0 });
    out.record(
        5,
        "positional encoding",
        worst <= 1e-15 && row0,
        format!("{n}x{d} table, max |diff| {worst:.2e} (<= 1e-15); row 0 alternates 0/1: {row0}"),
    );
}

fn protocol(out: &mut Outcome) {
    let thresholds: Vec<u8> = (0..=5).map(|v| binarize_intensity(v).unwrap()).collect();
    let threshold_ok = thresholds == [0, 0, 1, 1, 1, 1];

    let ids: Vec<String> = (0..41).flat_map(|s| std::iter::repeat_n(format!("S{s}"), 3)).collect();
    let mut leaks = 0;
    for seed in 0..1000 {
        let splits = kfold_subject_exclusive(&ids, 3, seed).unwrap();
        let mut tested = BTreeSet::new();
        for (train, test) in &splits {
            let tr: BTreeSet<&str> = train.iter().map(|&i| ids[i].as_str()).collect();
            let te: BTreeSet<&str> = test.iter().map(|&i| ids[i].as_str()).collect();
            leaks += tr.intersection(&te).count();
            leaks += (train.len() + test.len() != ids.len()) as usize;
            for s in te {
                leaks += !tested.insert(s) as usize;
            }
        }
        leaks += (tested.len() != 41) as usize;
    }

    let f1 = f1_from_counts(2, 1, 1);
    let f1_ok = (f1 - 2.0 / 3.0).abs() <= 1e-12;
    out.record(
        6,
        "protocol fidelity",
        threshold_ok && leaks == 0 && f1_ok,
        format!("intensity 0..5 -> {thresholds:?}; leakage over 1000 seeds: {leaks}; F1(2,1,1) = {f1:.12}"),
    );
}

/// One seed of the ablation study; criteria 7 to 9 read from it.
struct AblationRun {
    seed: u64,
    scores: Vec<(Ablation, f64)>,
    /// Joint and marginal prediction rates of the exclusion pair, full model.
    exclusion: (f64, f64, f64),
    frozen_checked: usize,
    frozen_error: Option<String>,
}

fn ablation_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.patch_channels = 4;
    cfg.backbone.featconv_channels = vec![4, 8];
    cfg
}

fn run_ablation(seed: u64) -> AblationRun {
    let spec = SyntheticSpec::default();
    let ds = generate_synthetic(&spec, seed).unwrap();
    let ids: Vec<String> = ds.samples.iter().map(|s| s.subject_id.clone()).collect();
    let (tr, te) = kfold_subject_exclusive(&ids, 3, seed).unwrap().remove(0);
    let (train, test) = (ds.subset(&tr), ds.subset(&te));
    let cfg = ablation_model();
    let optim = OptimConfig {
        epochs_stage1: ABLATION_EPOCHS.0,
        epochs_stage2: ABLATION_EPOCHS.1,
        ..OptimConfig::default()
    };
    let t = Instant::now();
    let mut s1 = TrainState::new_stage1(cfg.clone(), seed).unwrap();
    run_epochs(&mut s1, &train, None, &optim, &mut |_| Ok(())).unwrap();
    println!("     seed {seed}: stage 1 on {} samples, {:.0}s", train.len(), t.elapsed().as_secs_f64());
    let mut run = AblationRun {
        seed,
        scores: Vec::new(),
        exclusion: (0.0, 0.0, 0.0),
        frozen_checked: 0,
        frozen_error: None,
    };
    for ab in Ablation::ALL {
        let t = Instant::now();
        let mut s2 = TrainState::begin_stage2(&s1, cfg.clone().with_ablation(ab)).unwrap();
        run_epochs(&mut s2, &train, None, &optim, &mut |_| Ok(())).unwrap();
        match verify_frozen(&s1, &s2) {
            Ok(n) => run.frozen_checked += n,
            Err(e) => run.frozen_error = Some(e.to_string()),
        }
        let preds = binarize(&predict(&s2.model, &test, Plan::EVAL, 1).unwrap());
        let f1 = macro_f1_of(&test, &preds);
        println!(
            "     seed {seed}: {:<9} macro F1 {:.2}  ({:.0}s)",
            ab.name(),
            100.0 * f1,
            t.elapsed().as_secs_f64()
        );
        if ab == Ablation::Full {
            run.exclusion = exclusion_rates(&test, &preds);
        }
        run.scores.push((ab, f1));
    }
    run
}

fn macro_f1_of(test: &Dataset, preds: &[Vec<u8>]) -> f64 {
    let labels: Vec<Vec<u8>> = test.samples.iter().map(|s| s.au_labels.clone()).collect();
    f1_per_au(&test.aus, preds, &labels).unwrap().macro_f1
}

fn exclusion_rates(test: &Dataset, preds: &[Vec<u8>]) -> (f64, f64, f64) {
    let (a, b) = SyntheticSpec::default().exclusions[0];
    let ia = test.aus.iter().position(|&x| x == a).unwrap();
    let ib = test.aus.iter().position(|&x| x == b).unwrap();
    let n = preds.len() as f64;
    let rate = |f: &dyn Fn(&Vec<u8>) -> bool| preds.iter().filter(|p| f(p)).count() as f64 / n;
    (rate(&|p| p[ia] == 1 && p[ib] == 1), rate(&|p| p[ia] == 1), rate(&|p| p[ib] == 1))
}

fn two_stage(out: &mut Outcome, runs: &[AblationRun]) {
    let optim = OptimConfig::default();
    let lrs: Vec<f64> = (0..6).map(|e| optim.lr_at(e)).collect();
    let want = [0.01, 0.01, 0.003, 0.003, 0.0009, 0.0009];
    let lr_ok = lrs.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15);
    let errors: Vec<&String> = runs.iter().filter_map(|r| r.frozen_error.as_ref()).collect();
    let checked: usize = runs.iter().map(|r| r.frozen_checked).sum();
    out.record(
        7,
        "two-stage contract",
        lr_ok && errors.is_empty() && checked > 0,
        format!(
            "{checked} frozen tensors bit-identical across {} stage-2 runs{}; lr {lrs:?}",
            runs.len() * Ablation::ALL.len(),
            errors.first().map(|e| format!(" (first change: {e})")).unwrap_or_default()
        ),
    );
}

fn directional(out: &mut Outcome, runs: &[AblationRun]) {
    let mean = |ab: Ablation| 100.0 * runs.iter().map(|r| r.scores.iter().find(|s| s.0 == ab).unwrap().1).sum::<f64>() / runs.len() as f64;
    let none = mean(Ablation::None);
    let mut pass = mean(Ablation::Full) - none >= 2.0;
    let mut parts = vec![format!("none {none:.2}")];
    for ab in [Ablation::Bilstm, Ablation::Attention, Ablation::Hopfield, Ablation::Full] {
        let m = mean(ab);
        if ab != Ablation::Full {
            pass &= m - none >= 0.5;
        }
        parts.push(format!("{} {m:.2} ({:+.2})", ab.name(), m - none));
    }
    let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    out.record(
        8,
        "directional ablation",
        pass,
        format!("macro F1 over seeds {seeds:?}: {} (full >= +2.0, singles >= +0.5)", parts.join(", ")),
    );
}

fn exclusion(out: &mut Outcome, runs: &[AblationRun]) {
    let n = runs.len() as f64;
    let joint = runs.iter().map(|r| r.exclusion.0).sum::<f64>() / n;
    let product = runs.iter().map(|r| r.exclusion.1 * r.exclusion.2).sum::<f64>() / n;
    out.record(
        9,
        "exclusion behavior",
        joint < product,
        format!("mean joint rate {joint:.4} vs mean product of marginals {product:.4}"),
    );
}

fn determinism(out: &mut Outcome) {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.model = toy_model_config();
    cfg.model.aus = BP4D_AUS.to_vec();
    cfg.synthetic.samples = 48;
    cfg.synthetic.subjects = 4;
    cfg.synthetic.image_size = (16, 16);
    cfg.synthetic.blob_sigma = 1.0;
    cfg.optim.epochs_stage1 = 2;
    cfg.optim.epochs_stage2 = 2;
    cfg.optim.batch_size = 8;
    let data = tmp.path().join("data");
    hicomex::commands::cmd_synth_gen(&cfg, &data, &mut Vec::new()).unwrap();
    cfg.dataset = Some(data.join("manifest.csv"));
    let run = |name: &str| {
        let mut c = cfg.clone();
        c.out_dir = tmp.path().join(name);
        let mut text = Vec::new();
        cmd_train(&c, StageSel::Both, &mut text).unwrap();
        let text = String::from_utf8(text).unwrap();
        let digests: Vec<String> = text
            .lines()
            .filter_map(|l| l.split_once(": checkpoint ").map(|(_, d)| d.to_string()))
            .collect();
        let logs: Vec<String> = ["stage1", "stage2_full"]
            .iter()
            .map(|d| std::fs::read_to_string(c.out_dir.join(d).join("train.log")).unwrap())
            .collect();
        (digests, logs)
    };
    let (d1, l1) = run("a");
    let (d2, l2) = run("b");
    out.record(
        10,
        "determinism",
        d1.len() == 2 && d1 == d2 && l1 == l2,
        format!("digests equal: {}, logs equal: {}", d1 == d2, l1 == l2),
    );
}

fn main() {
    let start = Instant::now();
    let mut out = Outcome { failed: Vec::new() };
    gradient_integrity(&mut out);
    attention_oracle(&mut out);
    hopfield_reduction(&mut out);
    bilstm_oracle(&mut out);
    positional(&mut out);
    protocol(&mut out);
    println!("     ablation study: {} seeds, epochs {:?}", ABLATION_SEEDS.len(), ABLATION_EPOCHS);
    let runs: Vec<AblationRun> = ABLATION_SEEDS.iter().map(|&s| run_ablation(s)).collect();
    two_stage(&mut out, &runs);
    directional(&mut out, &runs);
    exclusion(&mut out, &runs);
    determinism(&mut out);
    println!("acceptance: {} of 10 passed in {:.0}s", 10 - out.failed.len(), start.elapsed().as_secs_f64());
    if !out.failed.is_empty() {
        println!("failed: {:?}", out.failed);
    }
    if out.failed.iter().any(|id| !EMPIRICAL.contains(id)) {
        std::process::exit(1);
    }
}
