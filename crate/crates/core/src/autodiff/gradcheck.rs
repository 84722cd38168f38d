//! Central finite-difference verification of every tape primitive.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::physics::{physics_loss, PhysicsTarget};
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_TRIALS: usize = 100;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One randomly drawn evaluation point for a primitive.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub op: OpFn,
}

impl Case {
    fn new(inputs: Vec<Tensor>, op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        Self { inputs, op: Box::new(op) }
    }
}

pub struct Primitive {
    pub name: &'static str,
    pub sample: fn(&mut ChaCha8Rng) -> Case,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3)]
}

fn unary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var) -> Var) -> Case {
    let d = dims(rng);
    Case::new(vec![uniform(rng, &d)], move |t, v| Ok(f(t, v[0])))
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Case {
    let d = dims(rng);
    Case::new(vec![uniform(rng, &d), uniform(rng, &d)], move |t, v| f(t, v[0], v[1]))
}

/// Every primitive the engine records, in table order.
pub fn registry() -> Vec<Primitive> {
    vec![
        Primitive {
            name: "conv2d",
            sample: |rng| {
                let [b, ci, h, w] = dims(rng);
                let co = rng.gen_range(1..=3);
                let k = rng.gen_range(1..=3);
                let inputs = vec![uniform(rng, &[b, ci, h, w]), uniform(rng, &[co, ci, k, k]), uniform(rng, &[co])];
                Case::new(inputs, |t, v| t.conv2d(v[0], v[1], v[2]))
            },
        },
        Primitive { name: "sigmoid", sample: |rng| unary(rng, |t, x| t.sigmoid(x)) },
        Primitive {
            name: "batch_norm_train",
            sample: |rng| {
                let [b, c, h, w] = dims(rng);
                let inputs = vec![uniform(rng, &[b, c, h, w]), uniform(rng, &[c]), uniform(rng, &[c])];
                Case::new(inputs, move |t, v| {
                    let mut mean = Tensor::zeros(&[c]);
                    let mut var = Tensor::full(&[c], 1.0);
                    t.batch_norm_train(v[0], v[1], v[2], &mut mean, &mut var)
                })
            },
        },
        Primitive {
            name: "batch_norm_eval",
            sample: |rng| {
                let [b, c, h, w] = dims(rng);
                let inputs = vec![uniform(rng, &[b, c, h, w]), uniform(rng, &[c]), uniform(rng, &[c])];
                let mean = uniform(rng, &[c]);
                let var = Tensor::uniform(&[c], 0.5, 2.0, rng);
                Case::new(inputs, move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var))
            },
        },
        Primitive {
            name: "max_pool2",
            sample: |rng| {
                // distinct values spaced well beyond the finite-difference step
                let d = dims(rng);
                let n: usize = d.iter().product();
                let mut order: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                let data = order.iter().map(|&k| k as f64 * 0.01 + rng.gen_range(0.0..0.001)).collect();
                Case::new(vec![Tensor::new(d.to_vec(), data).expect("shape")], |t, v| t.max_pool2(v[0]))
            },
        },
        Primitive {
            name: "upsample2",
            sample: |rng| {
                let d = dims(rng);
                Case::new(vec![uniform(rng, &d)], |t, v| t.upsample2(v[0]))
            },
        },
        Primitive {
            name: "concat",
            sample: |rng| {
                let [b, c, h, w] = dims(rng);
                let c2 = rng.gen_range(1..=3);
                Case::new(vec![uniform(rng, &[b, c, h, w]), uniform(rng, &[b, c2, h, w])], |t, v| t.concat(v[0], v[1]))
            },
        },
        Primitive {
            name: "slice_channels",
            sample: |rng| {
                let [b, _, h, w] = dims(rng);
                let c = rng.gen_range(2..=6);
                let start = rng.gen_range(0..c);
                let count = rng.gen_range(1..=c - start);
                Case::new(vec![uniform(rng, &[b, c, h, w])], move |t, v| t.slice_channels(v[0], start, count))
            },
        },
        Primitive { name: "add", sample: |rng| binary(rng, |t, a, b| t.add(a, b)) },
        Primitive { name: "sub", sample: |rng| binary(rng, |t, a, b| t.sub(a, b)) },
        Primitive { name: "mul", sample: |rng| binary(rng, |t, a, b| t.mul(a, b)) },
        Primitive {
            name: "scale",
            sample: |rng| {
                let d = dims(rng);
                let c = rng.gen_range(-3.0..3.0);
                Case::new(vec![uniform(rng, &d)], move |t, v| Ok(t.scale(v[0], c)))
            },
        },
        Primitive { name: "exp", sample: |rng| unary(rng, |t, x| t.exp(x)) },
        Primitive { name: "sin", sample: |rng| unary(rng, |t, x| t.sin(x)) },
        Primitive { name: "cos", sample: |rng| unary(rng, |t, x| t.cos(x)) },
        Primitive { name: "square", sample: |rng| unary(rng, |t, x| t.square(x)) },
        Primitive { name: "map", sample: |rng| unary(rng, |t, x| t.map(x, f64::tanh, |v| 1.0 - v.tanh().powi(2))) },
        Primitive { name: "sum", sample: |rng| unary(rng, |t, x| t.sum(x)) },
        Primitive { name: "mean", sample: |rng| unary(rng, |t, x| t.mean(x)) },
        Primitive { name: "mse_loss", sample: |rng| binary(rng, |t, a, b| t.mse_loss(a, b)) },
        Primitive {
            name: "physics_loss",
            sample: |rng| {
                let [b, _, h, w] = dims(rng);
                let echoes = rng.gen_range(3..=6);
                let spacing = 2.3e-3;
                let times: Vec<f64> = (1..=echoes).map(|j| j as f64 * spacing).collect();
                let target = PhysicsTarget {
                    relative_times: times.iter().map(|t| t / spacing).collect(),
                    fat_angles: times.iter().map(|t| 2.0 * std::f64::consts::PI * 217.2 * t).collect(),
                    real: (0..echoes).map(|_| uniform(rng, &[b, 1, h, w])).collect(),
                    imag: (0..echoes).map(|_| uniform(rng, &[b, 1, h, w])).collect(),
                    mask: Tensor::new(
                        vec![b, 1, h, w],
                        (0..b * h * w).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect(),
                    )
                    .expect("shape"),
                };
                let mut channels = uniform(rng, &[b, 6, h, w]);
                // keep the decay channel in a realistic range
                for n in 0..b {
                    for v in channels.data[(n * 6 + 5) * h * w..][..h * w].iter_mut() {
                        *v = 0.3 * (*v + 1.0);
                    }
                }
                Case::new(vec![channels], move |t, v| physics_loss(t, v[0], &target))
            },
        },
    ]
}

/// `Σ out ⊙ weights`, the scalar used to probe a primitive.
fn probe(case: &Case, inputs: &[Tensor], weights: Option<&Tensor>, with_grad: bool) -> Result<(f64, Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = with_grad;
            tape.leaf(t)
        })
        .collect();
    let out = (case.op)(&mut tape, &vars)?;
    let weights = match weights {
        Some(w) => w.clone(),
        None => Tensor::full(&tape.value(out).shape, 1.0),
    };
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss).item()?;
    Ok((value, tape, vars, loss))
}

/// Norm-wise relative error between reverse-mode and central-difference
/// gradients at one random point.
pub fn trial_error(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (case.op)(&mut tape, &vars)?;
        tape.value(out).shape.clone()
    };
    let weights = Tensor::uniform(&shape, -1.0, 1.0, rng);

    let (_, tape, vars, loss) = probe(case, &case.inputs, Some(&weights), true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&case.inputs)
        .flat_map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut inputs = case.inputs.clone();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let x = inputs[k].data[i];
            let h = 1e-5 * x.abs().max(1.0);
            inputs[k].data[i] = x + h;
            let plus = probe(case, &inputs, Some(&weights), false)?.0;
            inputs[k].data[i] = x - h;
            let minus = probe(case, &inputs, Some(&weights), false)?.0;
            inputs[k].data[i] = x;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(diff / na.max(nn).max(1e-12))
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRow {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn check_primitive(p: &Primitive, trials: usize, seed: u64, tolerance: f64) -> GradcheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..trials {
        let case = (p.sample)(&mut rng);
        match trial_error(&case, &mut rng) {
            Ok(e) if e.is_finite() => worst = worst.max(e),
            _ => {
                ok = false;
                worst = f64::INFINITY;
            }
        }
    }
    GradcheckRow { name: p.name.to_string(), trials, max_rel_error: worst, passed: ok && worst < tolerance }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>6} {:>12}  result", "primitive", "trials", "max rel err")?;
        for r in &self.rows {
            let verdict = if r.passed { "pass" } else { "FAIL" };
            writeln!(f, "{:<18} {:>6} {:>12.3e}  {verdict}", r.name, r.trials, r.max_rel_error)?;
        }
        Ok(())
    }
}

pub fn run_gradcheck(primitives: &[Primitive], trials: usize, seed: u64, tolerance: f64) -> GradcheckReport {
    let rows = primitives
        .iter()
        .enumerate()
        .map(|(i, p)| check_primitive(p, trials, seed.wrapping_add(i as u64), tolerance))
        .collect();
    GradcheckReport { tolerance, rows }
}
