//! Central finite-difference check of every differentiable op.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng;

/// Worst relative error seen for one op across seeds.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
}

/// Numerical gradient of `f` at `x` with step `h`.
pub fn finite_difference_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Random entries bounded away from zero (keeps relu/elu off their kink).
fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..1.5);
            if positive || rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

struct Case {
    kind: OpKind,
    inputs: Vec<Vec<usize>>,
    positive: bool,
}

fn cases() -> Vec<Case> {
    let c = |kind, inputs: &[&[usize]], positive| Case {
        kind,
        inputs: inputs.iter().map(|s| s.to_vec()).collect(),
        positive,
    };
    vec![
        c(OpKind::MatMul, &[&[3, 4], &[4, 2]], false),
        c(OpKind::Add, &[&[3, 4], &[3, 4]], false),
        c(OpKind::Multiply, &[&[3, 4], &[3, 4]], false),
        c(OpKind::Subtract, &[&[3, 4], &[3, 4]], false),
        c(OpKind::Exp, &[&[3, 4]], false),
        c(OpKind::Ln, &[&[3, 4]], true),
        c(OpKind::Relu, &[&[3, 4]], false),
        c(OpKind::Elu { alpha: 1.0 }, &[&[3, 4]], false),
        c(OpKind::Tanh, &[&[3, 4]], false),
        c(OpKind::SoftmaxRows, &[&[3, 4]], false),
        c(OpKind::LogSumExpRows, &[&[3, 4]], false),
        c(OpKind::ReduceMean, &[&[3, 4]], false),
        c(OpKind::ReduceSum, &[&[3, 4]], false),
        c(OpKind::Slice { axis: 1, start: 1, end: 3 }, &[&[3, 4]], false),
        c(OpKind::Slice { axis: 0, start: 0, end: 2 }, &[&[3, 4]], false),
        c(OpKind::Concat { axis: 1 }, &[&[3, 2], &[3, 3]], false),
        c(OpKind::Concat { axis: 0 }, &[&[2, 4], &[1, 4]], false),
        c(OpKind::Broadcast { shape: vec![3, 4] }, &[&[1, 4]], false),
        c(OpKind::Broadcast { shape: vec![3, 4] }, &[&[3, 1]], false),
        c(OpKind::Broadcast { shape: vec![3, 4] }, &[&[1]], false),
        c(OpKind::Scale(-1.7), &[&[3, 4]], false),
        c(OpKind::Powf(-0.5), &[&[3, 4]], true),
        c(OpKind::Reshape { shape: vec![4, 3] }, &[&[3, 4]], false),
    ]
}

/// Root = Σ op(inputs) ⊙ W for a random weight W, so that every output
/// entry contributes a distinct sensitivity.
fn evaluate(kind: &OpKind, inputs: &[Tensor], weights: &Tensor) -> Result<(f64, Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = tape.forward_op(kind.clone(), &vars)?;
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    let root = tape.sum(p)?;
    Ok((tape.value(root).item(), tape, vars, root))
}

/// Checks `kind` over `seeds` random instances; returns the worst relative error.
pub fn check_op(kind: &OpKind, input_shapes: &[Vec<usize>], positive: bool, seeds: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = rng::stream(seed, 0x6772_6164);
        let inputs: Vec<Tensor> = input_shapes.iter().map(|s| random_tensor(&mut rng, s, positive)).collect();
        let out_shape = {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let o = t.forward_op(kind.clone(), &vs)?;
            t.value(o).shape().to_vec()
        };
        let weights = random_tensor(&mut rng, &out_shape, false);
        let (_, tape, vars, root) = evaluate(kind, &inputs, &weights)?;
        let grads = tape.backward(root)?;
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], x.shape());
            let numeric = finite_difference_gradient(x, 1e-5, |probe| {
                let mut shifted = inputs.clone();
                shifted[i] = probe.clone();
                evaluate(kind, &shifted, &weights).map(|r| r.0).unwrap_or(f64::NAN)
            });
            let e = rel_error(&analytic, &numeric);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
    }
    Ok(worst)
}

/// Runs [`check_op`] for every op kind.
pub fn check_all_ops(seeds: u64) -> Result<Vec<GradCheck>> {
    cases()
        .into_iter()
        .map(|c| {
            let name = match c.kind {
                OpKind::MatMul => "matmul",
                OpKind::Add => "add",
                OpKind::Multiply => "multiply",
                OpKind::Subtract => "subtract",
                OpKind::Exp => "exp",
                OpKind::Ln => "ln",
                OpKind::Relu => "relu",
                OpKind::Elu { .. } => "elu",
                OpKind::Tanh => "tanh",
                OpKind::SoftmaxRows => "softmax_rows",
                OpKind::LogSumExpRows => "log_sum_exp_rows",
                OpKind::ReduceMean => "reduce_mean",
                OpKind::ReduceSum => "reduce_sum",
                OpKind::Slice { axis: 0, .. } => "slice_rows",
                OpKind::Slice { .. } => "slice_cols",
                OpKind::Concat { axis: 0 } => "concat_rows",
                OpKind::Concat { .. } => "concat_cols",
                OpKind::Broadcast { .. } if c.inputs[0] == [1] => "broadcast_scalar",
                OpKind::Broadcast { .. } if c.inputs[0] == [3, 1] => "broadcast_col",
                OpKind::Broadcast { .. } => "broadcast_row",
                OpKind::Scale(_) => "scale",
                OpKind::Powf(_) => "powf",
                OpKind::Reshape { .. } => "reshape",
            };
            let max_rel_error = check_op(&c.kind, &c.inputs, c.positive, seeds)?;
            Ok(GradCheck { op: name, seeds: seeds as usize, max_rel_error })
        })
        .collect()
}
