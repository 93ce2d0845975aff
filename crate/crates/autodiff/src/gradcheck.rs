//! Central finite-difference gradient checking.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sample::{bilinear_taps, SamplePlanBuilder};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.input(x.clone())?;
    let out = f(&mut tape, v)?;
    tape.value(out)
        .item()
        .ok_or_else(|| Error::NotScalar(tape.shape(out).to_vec()))
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences on every coordinate and returns the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, eps, &all)
}

/// Like [`grad_check`] but only probes the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.input(x.clone())?;
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = eval(&f, &Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - eps;
        let minus = eval(&f, &Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Outcome of checking one primitive on one input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub shape: [usize; 2],
    pub max_rel_err: f64,
}

const SUITE_SHAPES: [[usize; 2]; 3] = [[2, 3], [4, 5], [3, 8]];

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn constant(t: &mut Tape, shape: &[usize], seed: u64) -> Result<Var> {
    t.constant(random(&mut ChaCha8Rng::seed_from_u64(seed), shape))
}

/// Projects a non-scalar output onto a fixed random direction so every input
/// coordinate carries an O(1) gradient.
fn project(t: &mut Tape, y: Var) -> Result<Var> {
    if t.shape(y).is_empty() {
        return Ok(y);
    }
    let shape = t.shape(y).to_vec();
    let w = constant(t, &shape, 99)?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

type Case = (&'static str, fn(&mut Tape, Var, [usize; 2]) -> Result<Var>);

fn cases() -> Vec<Case> {
    vec![
        ("add", |t, x, s| {
            let o = constant(t, &s, 1)?;
            t.add(x, o)
        }),
        ("add_broadcast", |t, x, s| {
            let o = constant(t, &s, 1)?;
            let bias = t.slice(x, 0, 0, 1)?;
            let bias = t.reshape(bias, &[s[1]])?;
            t.add(o, bias)
        }),
        ("sub", |t, x, s| {
            let o = constant(t, &s, 2)?;
            let a = t.sub(x, o)?;
            t.sub(o, a)
        }),
        ("mul", |t, x, s| {
            let o = constant(t, &s, 3)?;
            let a = t.mul(x, o)?;
            t.mul(a, x)
        }),
        ("scale", |t, x, _| t.scale(x, -2.5)),
        ("gelu", |t, x, _| {
            let y = t.scale(x, 3.0)?;
            t.gelu(y)
        }),
        ("matmul_left", |t, x, s| {
            let b = constant(t, &[s[1], 4], 4)?;
            t.matmul(x, b)
        }),
        ("matmul_right", |t, x, s| {
            let a = constant(t, &[3, s[0]], 5)?;
            t.matmul(a, x)
        }),
        ("transpose", |t, x, _| t.transpose(x)),
        ("reshape", |t, x, s| t.reshape(x, &[s[1], s[0]])),
        ("concat_rows", |t, x, s| {
            let o = constant(t, &[2, s[1]], 6)?;
            t.concat(&[o, x, x], 0)
        }),
        ("concat_cols", |t, x, s| {
            let o = constant(t, &[s[0], 3], 7)?;
            t.concat(&[x, o], 1)
        }),
        ("slice", |t, x, s| t.slice(x, 1, 1, s[1] - 1)),
        ("sum", |t, x, _| {
            let y = t.mul(x, x)?;
            t.sum(y)
        }),
        ("mean", |t, x, _| {
            let y = t.gelu(x)?;
            t.mean(y)
        }),
        ("softmax", |t, x, _| {
            let y = t.scale(x, 2.0)?;
            t.softmax(y)
        }),
        ("layer_norm_input", |t, x, s| {
            let g = constant(t, &[s[1]], 8)?;
            let b = constant(t, &[s[1]], 9)?;
            t.layer_norm(x, g, b)
        }),
        ("layer_norm_gamma", |t, x, s| {
            let inp = constant(t, &[5, s[1]], 10)?;
            let g = t.slice(x, 0, 0, 1)?;
            let g = t.reshape(g, &[s[1]])?;
            let b = constant(t, &[s[1]], 11)?;
            t.layer_norm(inp, g, b)
        }),
        ("layer_norm_beta", |t, x, s| {
            let inp = constant(t, &[5, s[1]], 12)?;
            let g = constant(t, &[s[1]], 13)?;
            let b = t.slice(x, 0, 0, 1)?;
            let b = t.reshape(b, &[s[1]])?;
            t.layer_norm(inp, g, b)
        }),
        ("gather_rows", |t, x, s| t.gather_rows(x, &[s[0] - 1, 0, s[0] - 1, 1])),
        ("gather", |t, x, s| {
            let n = s[0] * s[1];
            let idx: Vec<usize> = (0..n).rev().chain([0, 0, 1]).collect();
            t.gather(x, Arc::new(idx), &[n + 3])
        }),
        ("masked_cross_entropy", |t, x, s| {
            let targets: Vec<usize> = (0..s[0]).map(|r| (r * 2 + 1) % s[1]).collect();
            let mask: Vec<bool> = (0..s[0]).map(|r| r % 2 == 0 || r == 1).collect();
            let y = t.scale(x, 3.0)?;
            t.masked_cross_entropy(y, &targets, &mask)
        }),
        ("mse", |t, x, s| {
            let o = constant(t, &s, 14)?;
            t.mse(o, x)
        }),
        ("bilinear_sample", |t, x, s| {
            // Rows of `x` are the pixels of an `h × 1` grid; columns are channels.
            let (h, w) = (s[0], 1);
            let mut b = SamplePlanBuilder::new(h * w);
            for i in 0..5 {
                let y = i as f64 * 0.37 * (h - 1) as f64 / 1.5 - 0.2;
                for (idx, wt) in bilinear_taps(y, 0.0, h, w) {
                    b.tap(idx, wt * 0.5);
                }
                for (idx, wt) in bilinear_taps(y * 0.5, 0.0, h, w) {
                    b.tap(idx, wt * 0.5);
                }
                b.finish_row();
            }
            t.sample(x, Arc::new(b.build()))
        }),
    ]
}

/// Gradient-checks every differentiable primitive on three input shapes with
/// seeded random inputs in `[-1, 1)`.
pub fn primitive_suite(eps: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut out = Vec::new();
    for (i, (name, f)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000_003 * (i as u64 + 1));
        for shape in SUITE_SHAPES {
            let x = random(&mut rng, &shape);
            let max_rel_err = grad_check(
                |t, v| {
                    let y = f(t, v, shape)?;
                    project(t, y)
                },
                &x,
                eps,
            )?;
            out.push(PrimitiveCheck { name, shape, max_rel_err });
        }
    }
    Ok(out)
}
