//! Backward gradients compared against central finite differences: per op
//! on random inputs, and for any loss built from a model's parameters.

use crate::autodiff::{finite_diff_grad, Axis, Graph, OpKind, Var};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::params::{uniform, Binder, ParamGroup, ParamId};
use crate::pipeline::Model;
use crate::seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
    pub epsilon: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { rtol: 1e-4, atol: 1e-7, epsilon: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    /// Largest `|analytic − numeric| / (atol + rtol·|numeric|)`; at most 1
    /// means every entry is within tolerance.
    pub worst: f64,
    pub max_abs_err: f64,
    pub entries: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst <= 1.0
    }

    fn merge(&mut self, other: &CheckReport) {
        self.worst = self.worst.max(other.worst);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.entries += other.entries;
    }
}

fn compare(analytic: &[Matrix], numeric: &[Matrix], tol: &Tolerance) -> CheckReport {
    let mut r = CheckReport { worst: 0.0, max_abs_err: 0.0, entries: 0 };
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let err = (x - y).abs();
            r.max_abs_err = r.max_abs_err.max(err);
            r.worst = r.worst.max(err / (tol.atol + tol.rtol * y.abs()));
            r.entries += 1;
        }
    }
    r
}

/// Checks `f`, which maps leaf inputs to a scalar root.
pub fn check_fn<F>(f: F, inputs: &[Matrix], tol: &Tolerance) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| g.grad(v)).collect();
    let mut fd_err = None;
    let numeric = finite_diff_grad(
        |p| {
            let mut g = Graph::new();
            let vars: Vec<Var> = p.iter().map(|m| g.constant(m.clone())).collect();
            match f(&mut g, &vars) {
                Ok(root) => Ok(g.scalar_value(root)),
                Err(e) => {
                    fd_err = Some(e);
                    Ok(f64::NAN)
                }
            }
        },
        inputs,
        tol.epsilon,
    );
    if let Some(e) = fd_err {
        return Err(e);
    }
    Ok(compare(&analytic, &numeric?, tol))
}

/// Checks a loss over the parameters of `groups`, every other group frozen.
pub fn check_model_loss<F>(model: &Model, groups: &[ParamGroup], f: F, tol: &Tolerance) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &mut Binder, &Model) -> Result<Var>,
{
    let ids: Vec<ParamId> = model.store.iter().filter(|(_, p)| groups.contains(&p.group)).map(|(id, _)| id).collect();
    let mut g = Graph::new();
    let mut binder = Binder::new(&model.store, groups);
    let root = f(&mut g, &mut binder, model)?;
    g.backward(root)?;
    let grads = binder.grads(&g);
    let analytic: Vec<Matrix> = ids
        .iter()
        .map(|id| {
            grads[id.0]
                .clone()
                .unwrap_or_else(|| Matrix::zeros(model.store.value(*id).rows(), model.store.value(*id).cols()))
        })
        .collect();
    let values: Vec<Matrix> = ids.iter().map(|id| model.store.value(*id).clone()).collect();
    let mut fd_err = None;
    let mut work = model.clone();
    let numeric = finite_diff_grad(
        |p| {
            for (id, m) in ids.iter().zip(p) {
                work.store.get_mut(*id).value = m.clone();
            }
            let mut g = Graph::new();
            let mut binder = Binder::frozen(&work.store);
            match f(&mut g, &mut binder, &work) {
                Ok(root) => Ok(g.scalar_value(root)),
                Err(e) => {
                    fd_err = Some(e);
                    Ok(f64::NAN)
                }
            }
        },
        &values,
        tol.epsilon,
    );
    if let Some(e) = fd_err {
        return Err(e);
    }
    Ok(compare(&analytic, &numeric?, tol))
}

/// Every op of the catalog, by the name used in [`op_trial`].
pub const OPS: [&str; 26] = [
    "add",
    "subtract",
    "elementwise-multiply",
    "scalar-multiply",
    "add-scalar",
    "add-row",
    "matmul",
    "transpose",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "sum",
    "sum-rows",
    "sum-cols",
    "mean",
    "concat-rows",
    "concat-cols",
    "gather-rows",
    "group-mean-rows",
    "softmax-per-row",
    "log-softmax-per-row",
    "cosine-similarity-per-row-pair",
    "cross-entropy-with-logits",
    "clamp",
    "composite",
];

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=4))
}

fn input(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    uniform(rng, r, c, 2.0)
}

/// Values in `[-2, 2]` kept away from the clamp bounds so central
/// differences never straddle a kink.
fn clamp_input(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    let mut m = input(rng, r, c);
    for x in m.data_mut() {
        while (x.abs() - 1.0).abs() < 1e-3 {
            *x = rng.gen_range(-2.0..2.0);
        }
    }
    m
}

/// Weighted sum of `out`'s entries with fixed random weights, so the root
/// exercises every output entry differently.
fn reduce(g: &mut Graph, out: Var, weights: &Matrix) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// One random trial of `op`: inputs drawn from `[-2, 2]` (strictly positive
/// for `log`), root a random weighting of the output.
pub fn op_trial(op: &str, trial_seed: u64, tol: &Tolerance) -> Result<CheckReport> {
    let mut rng = seed::stream(trial_seed, &format!("gradcheck/{op}"));
    let (r, c) = dims(&mut rng);
    let (inputs, kind): (Vec<Matrix>, Option<OpKind>) = match op {
        "add" => (vec![input(&mut rng, r, c), input(&mut rng, r, c)], Some(OpKind::Add)),
        "subtract" => (vec![input(&mut rng, r, c), input(&mut rng, r, c)], Some(OpKind::Sub)),
        "elementwise-multiply" => (vec![input(&mut rng, r, c), input(&mut rng, r, c)], Some(OpKind::Mul)),
        "scalar-multiply" => (vec![input(&mut rng, r, c)], Some(OpKind::Scale(rng.gen_range(-2.0..2.0)))),
        "add-scalar" => (vec![input(&mut rng, r, c)], Some(OpKind::AddScalar(rng.gen_range(-2.0..2.0)))),
        "add-row" => (vec![input(&mut rng, r, c), input(&mut rng, 1, c)], Some(OpKind::AddRow)),
        "matmul" => {
            let k = rng.gen_range(1..=4);
            (vec![input(&mut rng, r, k), input(&mut rng, k, c)], Some(OpKind::MatMul))
        }
        "transpose" => (vec![input(&mut rng, r, c)], Some(OpKind::Transpose)),
        "exp" => (vec![input(&mut rng, r, c)], Some(OpKind::Exp)),
        "log" => (vec![input(&mut rng, r, c).map(|x| x.abs() + 0.1)], Some(OpKind::Log)),
        "tanh" => (vec![input(&mut rng, r, c)], Some(OpKind::Tanh)),
        "sigmoid" => (vec![input(&mut rng, r, c)], Some(OpKind::Sigmoid)),
        "sum" => (vec![input(&mut rng, r, c)], Some(OpKind::Sum(None))),
        "sum-rows" => (vec![input(&mut rng, r, c)], Some(OpKind::Sum(Some(Axis::Rows)))),
        "sum-cols" => (vec![input(&mut rng, r, c)], Some(OpKind::Sum(Some(Axis::Cols)))),
        "mean" => (vec![input(&mut rng, r, c)], Some(OpKind::Mean)),
        "concat-rows" => {
            let r2 = rng.gen_range(1..=3);
            (vec![input(&mut rng, r, c), input(&mut rng, r2, c)], Some(OpKind::ConcatRows))
        }
        "concat-cols" => {
            let c2 = rng.gen_range(1..=3);
            (vec![input(&mut rng, r, c), input(&mut rng, r, c2)], Some(OpKind::ConcatCols))
        }
        "gather-rows" => {
            let n = rng.gen_range(1..=6);
            let idx = (0..n).map(|_| rng.gen_range(0..r)).collect();
            (vec![input(&mut rng, r, c)], Some(OpKind::GatherRows(idx)))
        }
        "group-mean-rows" => {
            let n = rng.gen_range(1..=4);
            let groups = (0..n).map(|_| (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..r)).collect()).collect();
            (vec![input(&mut rng, r, c)], Some(OpKind::GroupMeanRows(groups)))
        }
        "softmax-per-row" => (vec![input(&mut rng, r, c)], Some(OpKind::SoftmaxRows)),
        "log-softmax-per-row" => (vec![input(&mut rng, r, c)], Some(OpKind::LogSoftmaxRows)),
        "cosine-similarity-per-row-pair" => {
            (vec![input(&mut rng, r, c), input(&mut rng, r, c)], Some(OpKind::CosineRows))
        }
        "cross-entropy-with-logits" => {
            let targets = (0..r).map(|_| rng.gen_range(0..c)).collect();
            (vec![input(&mut rng, r, c)], Some(OpKind::CrossEntropy(targets)))
        }
        "clamp" => (vec![clamp_input(&mut rng, r, c)], Some(OpKind::Clamp { lo: -1.0, hi: 1.0 })),
        "composite" => (vec![input(&mut rng, r, c), input(&mut rng, c, r)], None),
        other => return Err(crate::error::Error::Config(format!("unknown op {other:?}"))),
    };
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.constant(m.clone())).collect();
        let out = match &kind {
            Some(k) => g.apply(k.clone(), &vars)?,
            None => composite(&mut g, &vars)?,
        };
        g.value(out).shape()
    };
    let weights = input(&mut rng, out_shape.0, out_shape.1);
    check_fn(
        |g, vars| {
            let out = match &kind {
                Some(k) => g.apply(k.clone(), vars)?,
                None => composite(g, vars)?,
            };
            reduce(g, out, &weights)
        },
        &inputs,
        tol,
    )
}

/// A chain with fan-out: `softmax(tanh(A B) ⊙ exp(Bᵀ Aᵀ)ᵀ)` plus a cosine
/// of `A` with itself reversed.
fn composite(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let ab = g.matmul(v[0], v[1])?;
    let t = g.tanh(ab);
    let bt = g.transpose(v[1]);
    let at = g.transpose(v[0]);
    let ba = g.matmul(bt, at)?;
    let e = g.exp(ba);
    let et = g.transpose(e);
    let m = g.mul(t, et)?;
    let s = g.softmax_rows(m);
    let n = g.value(v[0]).rows();
    let rev = g.gather_rows(v[0], (0..n).rev().collect())?;
    let cos = g.cosine_rows(v[0], rev)?;
    let cs = g.sum(cos);
    let ss = g.sum(s);
    Ok(g.add(cs, ss)?)
}

/// Runs `trials` random trials of every op; the merged report per op.
pub fn op_catalog(trials: usize, tol: &Tolerance) -> Result<Vec<(&'static str, CheckReport)>> {
    let mut out = Vec::with_capacity(OPS.len());
    for op in OPS {
        let mut merged = CheckReport { worst: 0.0, max_abs_err: 0.0, entries: 0 };
        for t in 0..trials {
            merged.merge(&op_trial(op, t as u64, tol)?);
        }
        out.push((op, merged));
    }
    Ok(out)
}
