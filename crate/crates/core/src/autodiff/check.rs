//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the reverse-mode implementation it verifies.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Result of comparing reverse-mode and finite-difference gradients for one
/// input tensor.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub input: usize,
    /// `||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2)`
    pub rel_error: f64,
    pub max_abs_error: f64,
}

/// Checks every input of `f` by central differences with step `h`.
///
/// `f` receives the inputs as parameters recorded on a fresh tape and must
/// return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let denom = norm(&analytic).max(norm(&numeric)).max(1e-12);
        report.push(GradCheck {
            input: i,
            rel_error: norm(&diff) / denom,
            max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        });
    }
    Ok(report)
}

/// Reduces a non-scalar output to a scalar through fixed random weights so
/// every output element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.mean(prod)
}

/// Worst relative error observed for one operator across its random cases.
#[derive(Debug, Clone)]
pub struct OpSuiteResult {
    pub op: &'static str,
    pub cases: usize,
    pub worst_rel_error: f64,
}

/// Runs the finite-difference check on every differentiable operator over
/// `cases` random small shapes each (64-bit, step `h`).
pub fn run_op_suite(seed: u64, cases: usize, h: f64) -> Result<Vec<OpSuiteResult>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let randn = |shape: &[usize], rng: &mut ChaCha8Rng| {
        Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
    };

    type Case = (
        Vec<Tensor<f64>>,
        Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
    );
    let mut results = Vec::new();
    let ops: &[&'static str] = &[
        "conv2d",
        "add",
        "add_channels",
        "mul",
        "scale",
        "silu",
        "group_norm",
        "linear",
        "upsample_nearest_2x",
        "concat_channels",
        "mean",
        "spatial_mean",
        "softmax_over_channels",
        "cross_entropy_per_pixel",
        "mse",
        "reshape",
    ];
    for &op in ops {
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let n = rng.random_range(1..=2usize);
            let c = rng.random_range(1..=3usize);
            let h_ = rng.random_range(2..=5usize);
            let w_ = rng.random_range(2..=5usize);
            let x4 = [n, c, h_, w_];
            let (inputs, f): Case = match op {
                "conv2d" => {
                    let k = [1usize, 3][rng.random_range(0..2)];
                    let stride = rng.random_range(1..=2usize);
                    let pad = rng.random_range(0..=1usize);
                    let h_ = h_.max(k);
                    let w_ = w_.max(k);
                    let cout = rng.random_range(1..=3usize);
                    let x = [n, c, h_, w_];
                    let out_shape = [
                        n,
                        cout,
                        (h_ + 2 * pad - k) / stride + 1,
                        (w_ + 2 * pad - k) / stride + 1,
                    ];
                    let wts = randn(&out_shape, &mut rng);
                    (
                        vec![
                            randn(&x, &mut rng),
                            randn(&[cout, c, k, k], &mut rng),
                            randn(&[cout], &mut rng),
                        ],
                        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                            weighted_sum(t, y, &wts)
                        }),
                    )
                }
                "add" | "mul" => {
                    let wts = randn(&x4, &mut rng);
                    let is_add = op == "add";
                    (
                        vec![randn(&x4, &mut rng), randn(&x4, &mut rng)],
                        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                            let y = if is_add {
                                t.add(v[0], v[1])?
                            } else {
                                t.mul(v[0], v[1])?
                            };
                            weighted_sum(t, y, &wts)
                        }),
                    )
                }
                "add_channels" => {
                    let wts = randn(&x4, &mut rng);
                    let per_sample = rng.random_bool(0.5);
                    let bshape = if per_sample { vec![n, c] } else { vec![c] };
                    (
                        vec![randn(&x4, &mut rng), randn(&bshape, &mut rng)],
                        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                            let y = t.add_channels(v[0], v[1])?;
                            weighted_sum(t, y, &wts)
                        }),
                    )
                }
                "scale"
                | "silu"
                | "upsample_nearest_2x"
                | "softmax_over_channels"
                | "spatial_mean"
                | "mean"
                | "reshape" => {
                    let out_shape: Vec<usize> = match op {
                        "upsample_nearest_2x" => vec![n, c, 2 * h_, 2 * w_],
                        "spatial_mean" => vec![n, c],
                        "mean" => vec![],
                        "reshape" => vec![n * c, h_ * w_],
                        _ => x4.to_vec(),
                    };
                    let wts = randn(&out_shape, &mut rng);
                    let factor: f64 = rng.random_range(-2.0..2.0);
                    (
                        vec![randn(&x4, &mut rng)],
                        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                            let y = match op {
                                "scale" => t.scale(v[0], factor)?,
                                "silu" => t.silu(v[0])?,
                                "upsample_nearest_2x" => t.upsample_nearest_2x(v[0])?,
                                "softmax_over_channels" => t.softmax_over_channels(v[0])?,
                                "spatial_mean" => t.spatial_mean(v[0])?,
                                "reshape" => t.reshape(v[0], &[n * c, h_ * w_])?,
                                _ => t.mean(v[0])?,
                            };
                            weighted_sum(t, y, &wts)
                        }),
                    )
                }
                "group_norm" => {
                    let groups = rng.random_range(1..=2usize);
                    let c = groups * rng.random_range(1..=2usize);
                    let x = [n, c, h_, w_];
                    let wts = randn(&x, &mut rng);
                    (
                        vec![
                            randn(&x, &mut rng),
                            randn(&[c], &mut rng),
                            randn(&[c], &mut rng),
                        ],
                        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                            let y = t.group_norm(v[0], v[1], v[2], groups)?;
                            weighted_sum(t, y, &wts)
                        }),
                    )
                }
                "linear" => {
                    let (fin, fout) = (rng.random_range(1..=5usize), rng.random_range(1..=4usize));
                    let wts = randn(&[n, fout], &mut rng);
                    (
                        vec![
                            randn(&[n, fin], &mut rng),
                            randn(&[fout, fin], &mut rng),
                            randn(&[fout], &mut rng),
                        ],
                        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                            let y = t.linear(v[0], v[1], Some(v[2]))?;
                            weighted_sum(t, y, &wts)
                        }),
                    )
                }
                "concat_channels" => {
                    let cb = rng.random_range(1..=3usize);
                    let wts = randn(&[n, c + cb, h_, w_], &mut rng);
                    (
                        vec![randn(&x4, &mut rng), randn(&[n, cb, h_, w_], &mut rng)],
                        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                            let y = t.concat_channels(v[0], v[1])?;
                            weighted_sum(t, y, &wts)
                        }),
                    )
                }
                "cross_entropy_per_pixel" => {
                    let c = c + 1;
                    let targets: Vec<usize> =
                        (0..n * h_ * w_).map(|_| rng.random_range(0..c)).collect();
                    (
                        vec![randn(&[n, c, h_, w_], &mut rng)],
                        Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                            t.cross_entropy_per_pixel(v[0], &targets)
                        }),
                    )
                }
                "mse" => (
                    vec![randn(&x4, &mut rng), randn(&x4, &mut rng)],
                    Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mse(v[0], v[1])),
                ),
                _ => unreachable!("unlisted operator {op}"),
            };
            for r in check_gradients(&inputs, h, f)? {
                worst = worst.max(r.rel_error);
            }
        }
        results.push(OpSuiteResult {
            op,
            cases,
            worst_rel_error: worst,
        });
    }
    Ok(results)
}
