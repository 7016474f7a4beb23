//! Central finite-difference verification for every differentiable
//! operation on the tape.
//!
//! Each check builds `loss = sum(op(inputs) * W)` with a random constant
//! `W`, reads the analytic gradients off one backward pass, and compares
//! them against `(f(x+h) - f(x-h)) / 2h` element by element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::Var;
use crate::{Tape, Tensor};

/// Step used by the central difference.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error gate for every operation.
pub const REL_TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct InputSpec {
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
    /// Keeps samples away from kinks (relu at 0, clamp bounds).
    adjust: Option<fn(f64) -> f64>,
}

impl InputSpec {
    fn plain(shape: &[usize]) -> Self {
        InputSpec { shape: shape.to_vec(), lo: -2.0, hi: 2.0, adjust: None }
    }

    fn range(shape: &[usize], lo: f64, hi: f64) -> Self {
        InputSpec { shape: shape.to_vec(), lo, hi, adjust: None }
    }

    fn adjusted(shape: &[usize], adjust: fn(f64) -> f64) -> Self {
        InputSpec { shape: shape.to_vec(), lo: -2.0, hi: 2.0, adjust: Some(adjust) }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(self.shape.clone(), |_| {
            let v = rng.random::<f64>() * (self.hi - self.lo) + self.lo;
            match self.adjust {
                Some(f) => f(v),
                None => v,
            }
        })
    }
}

struct OpSpec {
    name: &'static str,
    inputs: Vec<InputSpec>,
    build: Build,
}

/// Outcome of one operation's battery of random instances.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

fn run_loss(build: &Build, inputs: &[Tensor], weights: Option<&Tensor>, grads: bool) -> Result<(f64, Vec<Vec<f64>>, Vec<usize>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let loss = match weights {
        Some(w) => {
            let wv = tape.input(w.clone());
            let prod = tape.mul(out, wv)?;
            tape.sum_all(prod)?
        }
        None => tape.sum_all(out)?,
    };
    let value = tape.item(loss);
    let mut collected = Vec::new();
    if grads {
        tape.backward(loss)?;
        for &v in &vars {
            collected.push(tape.grad_or_zeros(v));
        }
    }
    Ok((value, collected, out_shape))
}

fn check_one(spec: &OpSpec, instances: usize, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut max_rel = 0.0f64;
    for _ in 0..instances {
        let inputs: Vec<Tensor> = spec.inputs.iter().map(|s| s.sample(rng)).collect();
        // Dry run for the output shape, then a random weighting.
        let (_, _, out_shape) = run_loss(&spec.build, &inputs, None, false)?;
        let weights = Tensor::from_fn(out_shape, |_| rng.random::<f64>() * 2.0 - 1.0);
        let (_, analytic, _) = run_loss(&spec.build, &inputs, Some(&weights), true)?;
        for (idx, input) in inputs.iter().enumerate() {
            for elem in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[idx].data_mut()[elem] += FD_STEP;
                let (fp, _, _) = run_loss(&spec.build, &plus, Some(&weights), false)?;
                let mut minus = inputs.clone();
                minus[idx].data_mut()[elem] -= FD_STEP;
                let (fm, _, _) = run_loss(&spec.build, &minus, Some(&weights), false)?;
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                let a = analytic[idx][elem];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(GradCheckReport { op: spec.name, instances, max_rel_err: max_rel })
}

fn away_from_zero(v: f64) -> f64 {
    if v.abs() < 0.05 {
        if v < 0.0 {
            v - 0.1
        } else {
            v + 0.1
        }
    } else {
        v
    }
}

fn away_from_clamp_bounds(v: f64) -> f64 {
    // Clamp bounds sit at +/-1.5; keep a margin wider than the step.
    if (v.abs() - 1.5).abs() < 0.05 {
        v * 0.9
    } else {
        v
    }
}

/// The full battery over every differentiable tape operation.
pub fn check_standard_ops(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let specs: Vec<OpSpec> = vec![
        OpSpec {
            name: "add",
            inputs: vec![InputSpec::plain(&[2, 3]), InputSpec::plain(&[2, 3])],
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        OpSpec {
            name: "add_broadcast",
            inputs: vec![InputSpec::plain(&[2, 1, 3]), InputSpec::plain(&[2, 1])],
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        OpSpec {
            name: "sub",
            inputs: vec![InputSpec::plain(&[3, 2]), InputSpec::plain(&[3, 2])],
            build: Box::new(|t, v| t.sub(v[0], v[1])),
        },
        OpSpec {
            name: "mul",
            inputs: vec![InputSpec::plain(&[2, 3]), InputSpec::plain(&[2, 3])],
            build: Box::new(|t, v| t.mul(v[0], v[1])),
        },
        OpSpec {
            name: "mul_broadcast",
            inputs: vec![InputSpec::plain(&[2, 2, 2]), InputSpec::plain(&[2])],
            build: Box::new(|t, v| t.mul(v[0], v[1])),
        },
        OpSpec {
            name: "div",
            inputs: vec![InputSpec::plain(&[2, 3]), InputSpec::range(&[2, 3], 0.5, 2.5)],
            build: Box::new(|t, v| t.div(v[0], v[1])),
        },
        OpSpec {
            name: "add_scalar",
            inputs: vec![InputSpec::plain(&[4])],
            build: Box::new(|t, v| t.add_scalar(v[0], 0.37)),
        },
        OpSpec {
            name: "mul_scalar",
            inputs: vec![InputSpec::plain(&[4])],
            build: Box::new(|t, v| t.mul_scalar(v[0], -1.25)),
        },
        OpSpec {
            name: "relu",
            inputs: vec![InputSpec::adjusted(&[3, 3], away_from_zero)],
            build: Box::new(|t, v| t.relu(v[0])),
        },
        OpSpec {
            name: "sigmoid",
            inputs: vec![InputSpec::plain(&[3, 3])],
            build: Box::new(|t, v| t.sigmoid(v[0])),
        },
        OpSpec {
            name: "exp",
            inputs: vec![InputSpec::plain(&[3, 3])],
            build: Box::new(|t, v| t.exp(v[0])),
        },
        OpSpec {
            name: "log",
            inputs: vec![InputSpec::range(&[3, 3], 0.2, 3.0)],
            build: Box::new(|t, v| t.log(v[0])),
        },
        OpSpec {
            name: "clamp",
            inputs: vec![InputSpec::adjusted(&[3, 3], away_from_clamp_bounds)],
            build: Box::new(|t, v| t.clamp(v[0], -1.5, 1.5)),
        },
        OpSpec {
            name: "matmul",
            inputs: vec![InputSpec::plain(&[3, 4]), InputSpec::plain(&[4, 2])],
            build: Box::new(|t, v| t.matmul(v[0], v[1])),
        },
        OpSpec {
            name: "transpose2d",
            inputs: vec![InputSpec::plain(&[3, 4])],
            build: Box::new(|t, v| t.transpose2d(v[0])),
        },
        OpSpec {
            name: "conv2d_s1p1",
            inputs: vec![InputSpec::plain(&[1, 2, 4, 4]), InputSpec::plain(&[2, 2, 3, 3])],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1)),
        },
        OpSpec {
            name: "conv2d_s2p1",
            inputs: vec![InputSpec::plain(&[1, 2, 5, 5]), InputSpec::plain(&[2, 2, 3, 3])],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1)),
        },
        OpSpec {
            name: "conv2d_1x1",
            inputs: vec![InputSpec::plain(&[2, 3, 2, 2]), InputSpec::plain(&[2, 3, 1, 1])],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], 1, 0)),
        },
        OpSpec {
            name: "avgpool2d",
            inputs: vec![InputSpec::plain(&[1, 2, 4, 4])],
            build: Box::new(|t, v| t.avgpool2d(v[0], (2, 2), 2)),
        },
        OpSpec {
            name: "avgpool2d_global",
            inputs: vec![InputSpec::plain(&[2, 2, 3, 3])],
            build: Box::new(|t, v| t.avgpool2d(v[0], (3, 3), 1)),
        },
        OpSpec {
            name: "sum_all",
            inputs: vec![InputSpec::plain(&[2, 3])],
            build: Box::new(|t, v| t.sum_all(v[0])),
        },
        OpSpec {
            name: "mean_all",
            inputs: vec![InputSpec::plain(&[2, 3])],
            build: Box::new(|t, v| t.mean_all(v[0])),
        },
        OpSpec {
            name: "sum_axis",
            inputs: vec![InputSpec::plain(&[2, 3, 2])],
            build: Box::new(|t, v| t.sum_axis(v[0], 1)),
        },
        OpSpec {
            name: "mean_axis",
            inputs: vec![InputSpec::plain(&[2, 3, 2])],
            build: Box::new(|t, v| t.mean_axis(v[0], 1)),
        },
        OpSpec {
            name: "logsumexp",
            inputs: vec![InputSpec::plain(&[3, 4])],
            build: Box::new(|t, v| t.logsumexp(v[0], 1)),
        },
        OpSpec {
            name: "softmax",
            inputs: vec![InputSpec::plain(&[3, 4])],
            build: Box::new(|t, v| t.softmax(v[0], 1)),
        },
        OpSpec {
            name: "log_softmax",
            inputs: vec![InputSpec::plain(&[3, 4])],
            build: Box::new(|t, v| t.log_softmax(v[0], 1)),
        },
        OpSpec {
            name: "reshape",
            inputs: vec![InputSpec::plain(&[2, 6])],
            build: Box::new(|t, v| t.reshape(v[0], vec![3, 4])),
        },
        OpSpec {
            name: "broadcast_to",
            inputs: vec![InputSpec::plain(&[1, 3])],
            build: Box::new(|t, v| t.broadcast_to(v[0], vec![4, 3])),
        },
        OpSpec {
            name: "slice_rows",
            inputs: vec![InputSpec::plain(&[5, 2])],
            build: Box::new(|t, v| t.slice_rows(v[0], 1, 4)),
        },
        OpSpec {
            name: "spatial_to_rows",
            inputs: vec![InputSpec::plain(&[2, 3, 2, 2])],
            build: Box::new(|t, v| t.spatial_to_rows(v[0])),
        },
        OpSpec {
            name: "composite_network",
            inputs: vec![
                InputSpec::plain(&[2, 2, 4, 4]),
                InputSpec::plain(&[3, 2, 3, 3]),
                InputSpec::plain(&[3, 3, 1, 1]),
            ],
            build: Box::new(|t, v| {
                // Two-layer network: conv, relu, 1x1 conv, pooled softmax.
                let c1 = t.conv2d(v[0], v[1], 2, 1)?;
                let r = t.relu(c1)?;
                let c2 = t.conv2d(r, v[2], 1, 0)?;
                let p = t.avgpool2d(c2, (2, 2), 1)?;
                let shape = t.shape(p).to_vec();
                let flat = t.reshape(p, vec![shape[0], shape[1]])?;
                t.log_softmax(flat, 1)
            }),
        },
    ];
    let mut reports = Vec::with_capacity(specs.len());
    for spec in &specs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(spec.name));
        reports.push(check_one(spec, instances, &mut rng)?);
    }
    Ok(reports)
}

fn fxhash(name: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
