//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use attnfd::{Tape64 as Tape, Tensor64 as Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
/// Gradients smaller than this count as zero when forming relative errors.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(dims, data).unwrap()
}

pub fn scalar_value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().unwrap()
}

/// Worst per-element relative error between analytic and central-difference
/// gradients of `f` at `inputs`; every input is differentiated.
pub fn fd_max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |values: &[Tensor]| -> f64 {
        let mut t = Tape::inference();
        let vs: Vec<Var> = values
            .iter()
            .map(|x| t.constant(x.clone()).unwrap())
            .collect();
        let out = f(&mut t, &vs);
        scalar_value(&t, out)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + FD_EPS;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - FD_EPS;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Random tensor whose entries are pairwise separated by at least `gap`,
/// so max-reductions have a unique, perturbation-stable winner.
pub fn distinct(rng: &mut ChaCha8Rng, dims: &[usize], gap: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::from_vec(dims, vals).unwrap()
}

/// Worst relative error between backward and central-difference gradients of
/// `loss` with respect to every parameter that `select` exposes on `model`.
pub fn fd_params_max_rel_error<P, S, L>(model: &P, select: S, loss: L) -> f64
where
    P: Clone,
    S: Fn(&mut P) -> Vec<&mut attnfd::Param>,
    L: Fn(&mut Tape, &P) -> Var,
{
    let mut m = model.clone();
    for p in select(&mut m) {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let l = loss(&mut tape, &m);
    tape.backward(l).unwrap();
    tape.accumulate_into(select(&mut m));
    let analytic: Vec<Vec<f64>> = select(&mut m)
        .into_iter()
        .map(|p| p.grad().to_vec())
        .collect();

    let eval = |q: &P| -> f64 {
        let mut t = Tape::inference();
        let out = loss(&mut t, q);
        scalar_value(&t, out)
    };
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        for (i, a) in grad.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut q = m.clone();
                let mut params = select(&mut q);
                let mut v = params[k].value().clone();
                v.data_mut()[i] += delta;
                params[k].set_value(v).unwrap();
                drop(params);
                eval(&q)
            };
            let numeric = (shifted(FD_EPS) - shifted(-FD_EPS)) / (2.0 * FD_EPS);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}
