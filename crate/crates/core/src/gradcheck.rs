//! Central-difference verification of tape gradients.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Mode, RunningStats, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, 1e-8)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for parameter checks of deep composites, whose
/// central differences carry roughly 1e-11 of rounding noise.
pub const PARAM_FLOOR: f64 = 1e-6;

/// Largest relative error between backward gradients of a scalar `f` with
/// respect to `x` and central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Like [`grad_check`] but differentiates with respect to every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].len() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grad[i], numeric));
        }
    }
    Ok(worst)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

/// Worst relative error over a sample of parameter entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_error: f64,
    pub worst: String,
    pub entries: usize,
}

/// Compare tape gradients of `f` with central differences taken by
/// perturbing up to `per_tensor` randomly chosen entries of every trainable
/// parameter in `store`. Each evaluation starts from a fresh copy of
/// `store` and the same dropout seed.
pub fn param_grad_check<F>(store: &ParamStore, f: F, eps: f64, per_tensor: usize, seed: u64) -> Result<ParamCheck>
where
    F: Fn(&mut Forward<'_>) -> Result<Var>,
{
    let frozen = BTreeSet::new();
    let run = |s: &ParamStore, grads: bool| -> Result<(f64, Vec<(String, Vec<f64>)>)> {
        let mut s = s.clone();
        let mut fwd = Forward::new(&mut s, &frozen, SeededRng::new(seed));
        let out = f(&mut fwd)?;
        let v = fwd.tape.value(out).item();
        if !grads {
            return Ok((v, Vec::new()));
        }
        fwd.tape.backward(out)?;
        Ok((v, fwd.tape.param_grads()))
    };
    let (_, analytic) = run(store, true)?;
    if analytic.is_empty() {
        return Err(Error::Numerical("loss does not depend on any parameter".into()));
    }
    let mut pick = SeededRng::new(seed).split("entries");
    let mut probe = store.clone();
    let mut report = ParamCheck {
        max_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    for (name, grad) in &analytic {
        let n = grad.len();
        let mut idx: Vec<usize> = (0..n).collect();
        pick.shuffle(&mut idx);
        idx.truncate(per_tensor);
        for i in idx {
            let orig = store.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + eps;
            let (up, _) = run(&probe, false)?;
            probe.get_mut(name)?.data_mut()[i] = orig - eps;
            let (down, _) = run(&probe, false)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error_floor(grad[i], numeric, PARAM_FLOOR);
            report.entries += 1;
            if err > report.max_error || report.worst.is_empty() {
                report.max_error = report.max_error.max(err);
                report.worst = format!("{name}[{i}] analytic={:.6e} numeric={numeric:.6e}", grad[i]);
            }
        }
    }
    Ok(report)
}

pub type Primitive = fn(&mut Tape, &[Var], &mut SeededRng) -> Result<Var>;

fn weighted_sum(t: &mut Tape, y: Var, rng: &mut SeededRng) -> Result<Var> {
    let w = Tensor::randn(t.shape(y), rng);
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

/// Each primitive's inputs plus a scalar reduction with a fixed random weight.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v, r| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, r)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v, r| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, r)
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v, r| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, r)
        }),
        ("add_broadcast", vec![vec![2, 3, 4], vec![3, 4]], |t, v, r| {
            let y = t.add_broadcast(v[0], v[1])?;
            weighted_sum(t, y, r)
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v, r| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, r)
        }),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, v, r| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, r)
        }),
        ("transpose", vec![vec![2, 3, 4]], |t, v, r| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, r)
        }),
        ("linear", vec![vec![2, 3, 4], vec![5, 4], vec![5]], |t, v, r| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y, r)
        }),
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |t, v, r| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_sum(t, y, r)
        }),
        ("conv2d_strided", vec![vec![1, 2, 6, 5], vec![2, 2, 3, 2], vec![2]], |t, v, r| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            weighted_sum(t, y, r)
        }),
        ("max_pool2d", vec![vec![2, 2, 4, 4]], |t, v, r| {
            let y = t.max_pool2d(v[0], 2, 2)?;
            weighted_sum(t, y, r)
        }),
        ("batch_norm_train", vec![vec![3, 2, 2, 2], vec![2], vec![2]], |t, v, r| {
            let (mut m, mut s) = (vec![0.0; 2], vec![1.0; 2]);
            let stats = RunningStats { mean: &mut m, var: &mut s, momentum: 0.1 };
            let y = t.batch_norm(v[0], v[1], v[2], stats, Mode::Train)?;
            weighted_sum(t, y, r)
        }),
        ("batch_norm_eval", vec![vec![3, 2, 2, 2], vec![2], vec![2]], |t, v, r| {
            let (mut m, mut s) = (vec![0.3, -0.1], vec![1.7, 0.6]);
            let stats = RunningStats { mean: &mut m, var: &mut s, momentum: 0.1 };
            let y = t.batch_norm(v[0], v[1], v[2], stats, Mode::Eval)?;
            weighted_sum(t, y, r)
        }),
        ("prelu", vec![vec![2, 3, 4], vec![3]], |t, v, r| {
            let y = t.prelu(v[0], v[1])?;
            weighted_sum(t, y, r)
        }),
        ("sigmoid", vec![vec![3, 4]], |t, v, r| {
            let y = t.sigmoid(v[0]);
            weighted_sum(t, y, r)
        }),
        ("tanh", vec![vec![3, 4]], |t, v, r| {
            let y = t.tanh(v[0]);
            weighted_sum(t, y, r)
        }),
        ("exp", vec![vec![3, 4]], |t, v, r| {
            let y = t.exp(v[0]);
            weighted_sum(t, y, r)
        }),
        ("log", vec![vec![3, 4]], |t, v, r| {
            let e = t.exp(v[0]);
            let y = t.log(e)?;
            weighted_sum(t, y, r)
        }),
        ("softmax_last", vec![vec![3, 5]], |t, v, r| {
            let y = t.softmax(v[0], 1)?;
            weighted_sum(t, y, r)
        }),
        ("softmax_inner", vec![vec![3, 5, 2]], |t, v, r| {
            let y = t.softmax(v[0], 1)?;
            weighted_sum(t, y, r)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v, r| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y, r)
        }),
        ("dropout_fixed_mask", vec![vec![3, 4]], |t, v, r| {
            let mask = (0..12).map(|_| if r.bernoulli(0.3) { 0.0 } else { 1.0 / 0.7 }).collect();
            let y = t.dropout_with_mask(v[0], mask)?;
            weighted_sum(t, y, r)
        }),
        ("concat", vec![vec![2, 3, 2], vec![2, 1, 2]], |t, v, r| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y, r)
        }),
        ("slice", vec![vec![3, 5]], |t, v, r| {
            let y = t.slice(v[0], 1, 1, 3)?;
            weighted_sum(t, y, r)
        }),
        ("reshape", vec![vec![3, 4]], |t, v, r| {
            let y = t.reshape(v[0], &[2, 6])?;
            weighted_sum(t, y, r)
        }),
        ("windows", vec![vec![2, 2, 5, 5]], |t, v, r| {
            let y = t.windows(v[0], &[(0, 1), (2, 2)], 3, 3)?;
            weighted_sum(t, y, r)
        }),
        ("mean", vec![vec![3, 4]], |t, v, _| Ok(t.mean(v[0]))),
        ("scale", vec![vec![3, 4]], |t, v, r| {
            let y = t.scale(v[0], -1.7);
            weighted_sum(t, y, r)
        }),
        ("bce", vec![vec![6]], |t, v, _| {
            let p = t.sigmoid(v[0]);
            t.bce(p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
        }),
    ]
}

