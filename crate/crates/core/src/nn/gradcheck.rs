//! Central finite-difference verification of backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_element: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    /// Inputs whose error reaches the tolerance.
    pub fn failures(&self) -> Vec<&InputReport> {
        self.inputs
            .iter()
            .filter(|r| r.max_rel_err >= self.tolerance)
            .collect()
    }
}

/// Step for an input value, `1e-4 * max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Builds `f` on a fresh tape, projecting non-scalar outputs onto fixed
/// pseudo-random weights so any op can be checked.
fn evaluate<F>(f: &F, inputs: &[Tensor], trainable: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let mut out = f(&mut tape, &vars)?;
    let len = tape.value(out).len();
    if len != 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let w: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        out = tape.dot(out, &w)?;
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Per-element error is `|analytic - numeric| / max(|analytic|, |numeric|, s)`
/// where `s` is `1e-3` of the largest analytic entry of that input (floored
/// at `1e-8`), so entries far below the input's gradient scale do not report
/// pure round-off as relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, inputs, true)?;
    let grads = tape.backward(out)?;
    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-8);
        let mut report = InputReport {
            input: k,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_element: 0,
        };
        for i in 0..input.len() {
            let x = input.data()[i];
            let h = fd_step(x);
            probe[k].data_mut()[i] = x + h;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let plus = t.value(o).item();
            probe[k].data_mut()[i] = x - h;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let minus = t.value(o).item();
            probe[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let abs = (analytic[i] - numeric).abs();
            let rel = abs / analytic[i].abs().max(numeric.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_element = i;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tolerance,
    })
}

/// A differentiable op with randomized inputs, ready for [`grad_check`].
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, keeping kinked activations differentiable
/// under the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Normalized coordinates kept off grid nodes and inside `(-1, 1)`.
fn off_node_coords(rng: &mut ChaCha8Rng, n: usize, grid: usize) -> Tensor {
    let cell = 2.0 / (grid - 1) as f64;
    Tensor::from_fn(&[n, 3], |_| loop {
        let p: f64 = rng.random_range(-0.98..0.98);
        let t = (p + 1.0) / cell;
        let off = t - t.round();
        if off.abs() > 0.02 {
            break p;
        }
    })
}

/// Every differentiable op of the tape, with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    cases.push(OpCase {
        name: "conv3d",
        inputs: vec![
            uniform(&mut rng, &[2, 3, 4, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 3, 3, 3, 3], -0.5, 0.5),
            uniform(&mut rng, &[2], -0.5, 0.5),
        ],
        build: Box::new(|t, v| t.conv3d(v[0], v[1], Some(v[2]), 1, 1)),
    });
    cases.push(OpCase {
        name: "conv3d_strided",
        inputs: vec![
            uniform(&mut rng, &[1, 2, 5, 4, 6], -1.0, 1.0),
            uniform(&mut rng, &[3, 2, 3, 3, 3], -0.5, 0.5),
        ],
        build: Box::new(|t, v| t.conv3d(v[0], v[1], None, 2, 1)),
    });
    cases.push(OpCase {
        name: "linear",
        inputs: vec![
            uniform(&mut rng, &[6, 5], -1.0, 1.0),
            uniform(&mut rng, &[4, 5], -1.0, 1.0),
            uniform(&mut rng, &[4], -1.0, 1.0),
        ],
        build: Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
    });
    cases.push(OpCase {
        name: "relu",
        inputs: vec![away_from_zero(&mut rng, &[6, 4])],
        build: Box::new(|t, v| t.relu(v[0])),
    });
    cases.push(OpCase {
        name: "leaky_relu",
        inputs: vec![away_from_zero(&mut rng, &[6, 4])],
        build: Box::new(|t, v| t.leaky_relu(v[0], 0.01)),
    });
    cases.push(OpCase {
        name: "tanh",
        inputs: vec![uniform(&mut rng, &[6, 4], -2.0, 2.0)],
        build: Box::new(|t, v| t.tanh(v[0])),
    });
    cases.push(OpCase {
        name: "softmax",
        inputs: vec![uniform(&mut rng, &[6, 5], -3.0, 3.0)],
        build: Box::new(|t, v| t.softmax(v[0])),
    });
    cases.push(OpCase {
        name: "sample",
        inputs: vec![
            uniform(&mut rng, &[3, 4, 4, 4], -1.0, 1.0),
            off_node_coords(&mut rng, 10, 4),
        ],
        build: Box::new(|t, v| t.sample(v[0], v[1])),
    });
    let targets: Vec<u8> = (0..8).map(|_| rng.random_range(0..5u8)).collect();
    let ce_targets = targets.clone();
    cases.push(OpCase {
        name: "cross_entropy",
        inputs: vec![uniform(&mut rng, &[8, 5], -3.0, 3.0)],
        build: Box::new(move |t, v| t.cross_entropy(v[0], &ce_targets)),
    });
    let probs = {
        let raw = uniform(&mut rng, &[8, 5], 0.05, 1.0);
        let mut data = raw.into_data();
        for row in data.chunks_mut(5) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(&[8, 5], data).unwrap()
    };
    let dice_targets = targets.clone();
    cases.push(OpCase {
        name: "soft_dice",
        inputs: vec![probs],
        build: Box::new(move |t, v| t.soft_dice(v[0], &dice_targets)),
    });
    let task_targets = targets;
    cases.push(OpCase {
        name: "task_loss",
        inputs: vec![uniform(&mut rng, &[8, 5], -3.0, 3.0)],
        build: Box::new(move |t, v| {
            let ce = t.cross_entropy(v[0], &task_targets)?;
            let p = t.softmax(v[0])?;
            let dice = t.soft_dice(p, &task_targets)?;
            t.weighted_sum(&[(ce, 0.5), (dice, 1.0)])
        }),
    });
    cases.push(OpCase {
        name: "deformation_penalty",
        inputs: vec![away_from_zero(&mut rng, &[7, 3])],
        build: Box::new(|t, v| t.deformation_penalty(v[0])),
    });
    cases.push(OpCase {
        name: "upsample2x",
        inputs: vec![uniform(&mut rng, &[1, 2, 2, 3, 2], -1.0, 1.0)],
        build: Box::new(|t, v| t.upsample2x(v[0])),
    });
    cases.push(OpCase {
        name: "channels_last",
        inputs: vec![uniform(&mut rng, &[3, 2, 3, 2], -1.0, 1.0)],
        build: Box::new(|t, v| t.channels_last(v[0])),
    });
    cases.push(OpCase {
        name: "concat_add",
        inputs: vec![
            uniform(&mut rng, &[4, 2], -1.0, 1.0),
            uniform(&mut rng, &[4, 3], -1.0, 1.0),
            uniform(&mut rng, &[4, 5], -1.0, 1.0),
        ],
        build: Box::new(|t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            t.add(c, v[2])
        }),
    });
    cases
}
