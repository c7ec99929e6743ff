//! Central finite-difference verification of every tape primitive and of
//! the full bag-scoring and reconstruction composites.
//!
//! For each case the analytic gradient from one backward pass is compared
//! against `(f(p + eps) - f(p - eps)) / (2 eps)` per parameter component,
//! with `eps = 1e-5`. The reported error is `|a - n| / max(1, |a|, |n|)`:
//! relative for large gradients, absolute near zero where a pure ratio
//! would only amplify differencing noise.
//!
//! Finite differences are only valid where the loss is smooth, so the
//! composite cases (which contain relu) re-draw their seed whenever a
//! pre-activation lies within 1e-4 of the kink.

use crate::autodiff::{DenseArray, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{bag_loss, AttentionConfig, BoundModel, EncoderConfig, ModelBundle, ModelConfig};
use crate::rng::SeedRng;

pub const EPSILON: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-5;

/// Outcome of one named check across all its seeds.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

struct Outcome {
    loss: f64,
    grads: Option<Vec<Vec<f64>>>,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Runs one finite-difference comparison over every component of every
/// parameter; returns the worst error.
fn run_case<F>(params: &[DenseArray], eval: &F) -> Result<f64>
where
    F: Fn(&[DenseArray], bool) -> Result<Outcome>,
{
    let analytic = eval(params, true)?
        .grads
        .ok_or_else(|| Error::Numerical("eval returned no gradients".into()))?;
    let mut worst = 0.0f64;
    let mut work: Vec<DenseArray> = params.to_vec();
    for i in 0..params.len() {
        for j in 0..params[i].numel() {
            let base = params[i].data()[j];
            work[i].data_mut()[j] = base + EPSILON;
            let plus = eval(&work, false)?.loss;
            work[i].data_mut()[j] = base - EPSILON;
            let minus = eval(&work, false)?.loss;
            work[i].data_mut()[j] = base;
            let numeric = (plus - minus) / (2.0 * EPSILON);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}

fn harvest(tape: &Tape, vars: &[Var]) -> Result<Vec<Vec<f64>>> {
    vars.iter().map(|v| tape.grad(*v)).collect()
}

fn grad_param(shape: Vec<usize>, data: Vec<f64>) -> DenseArray {
    let mut array = DenseArray::new(shape, data).expect("consistent test shapes");
    array.enable_grad();
    array
}

fn random_data(rng: &mut SeedRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect()
}

/// Uniform data with every value nudged at least 1e-3 away from zero, so
/// the relu kink stays clear of the differencing interval.
fn random_data_no_kink(rng: &mut SeedRng, n: usize) -> Vec<f64> {
    random_data(rng, n)
        .into_iter()
        .map(|v| {
            if v.abs() < 1e-3 {
                if v >= 0.0 {
                    v + 1e-3
                } else {
                    v - 1e-3
                }
            } else {
                v
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Primitive checks
// ---------------------------------------------------------------------------

/// Worst finite-difference error for each primitive over `seed_count`
/// seeded repetitions. Output-shaped primitives are reduced to a scalar by
/// mse against a fixed random target, which gives every output component a
/// nondegenerate adjoint; mse itself is also checked in isolation.
pub fn run_primitive_checks(seed_count: u64) -> Result<Vec<GradCheckReport>> {
    let mut results: Vec<(&'static str, f64)> = Vec::new();
    let record = |results: &mut Vec<(&'static str, f64)>, name: &'static str, err: f64| {
        match results.iter_mut().find(|(n, _)| *n == name) {
            Some((_, worst)) => *worst = worst.max(err),
            None => results.push((name, err)),
        }
    };

    /// Builds an eval closure around a forward function that maps leaf
    /// vars to a scalar loss var.
    fn eval_with<F>(forward: F) -> impl Fn(&[DenseArray], bool) -> Result<Outcome>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        move |p: &[DenseArray], want: bool| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|x| tape.leaf(x)).collect();
            let loss = forward(&mut tape, &vars)?;
            let value = tape.scalar_value(loss)?;
            let grads = if want {
                tape.backward(loss)?;
                Some(harvest(&tape, &vars)?)
            } else {
                None
            };
            Ok(Outcome { loss: value, grads })
        }
    }

    for seed in 0..seed_count {
        let mut rng = SeedRng::new(SeedRng::derive(seed, "gradcheck-primitives"));

        // matmul
        {
            let a = grad_param(vec![3, 4], random_data(&mut rng, 12));
            let b = grad_param(vec![4, 2], random_data(&mut rng, 8));
            let target = random_data(&mut rng, 6);
            let eval = eval_with(move |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                let t = tape.constant(vec![3, 2], target.clone())?;
                tape.mse(y, t)
            });
            record(&mut results, "matmul", run_case(&[a, b], &eval)?);
        }

        // transpose
        {
            let a = grad_param(vec![3, 4], random_data(&mut rng, 12));
            let target = random_data(&mut rng, 12);
            let eval = eval_with(move |tape, vars| {
                let y = tape.transpose(vars[0])?;
                let t = tape.constant(vec![4, 3], target.clone())?;
                tape.mse(y, t)
            });
            record(&mut results, "transpose", run_case(&[a], &eval)?);
        }

        // add then scale
        {
            let a = grad_param(vec![2, 5], random_data(&mut rng, 10));
            let b = grad_param(vec![2, 5], random_data(&mut rng, 10));
            let target = random_data(&mut rng, 10);
            let eval = eval_with(move |tape, vars| {
                let s = tape.add(vars[0], vars[1])?;
                let y = tape.scale(s, -1.7);
                let t = tape.constant(vec![2, 5], target.clone())?;
                tape.mse(y, t)
            });
            record(&mut results, "add+scale", run_case(&[a, b], &eval)?);
        }

        // add_bias
        {
            let a = grad_param(vec![3, 4], random_data(&mut rng, 12));
            let b = grad_param(vec![4], random_data(&mut rng, 4));
            let target = random_data(&mut rng, 12);
            let eval = eval_with(move |tape, vars| {
                let y = tape.add_bias(vars[0], vars[1])?;
                let t = tape.constant(vec![3, 4], target.clone())?;
                tape.mse(y, t)
            });
            record(&mut results, "add_bias", run_case(&[a, b], &eval)?);
        }

        // elementwise: tanh, relu (kink-nudged), exp, log (positive)
        for name in ["tanh", "relu", "exp", "log"] {
            let data = match name {
                "relu" => random_data_no_kink(&mut rng, 12),
                "log" => (0..12).map(|_| rng.range_f64(0.2, 1.2)).collect(),
                _ => random_data(&mut rng, 12),
            };
            let a = grad_param(vec![3, 4], data);
            let target = random_data(&mut rng, 12);
            let eval = eval_with(move |tape, vars| {
                let y = match name {
                    "tanh" => tape.tanh(vars[0]),
                    "relu" => tape.relu(vars[0]),
                    "exp" => tape.exp(vars[0]),
                    _ => tape.log(vars[0])?,
                };
                let t = tape.constant(vec![3, 4], target.clone())?;
                tape.mse(y, t)
            });
            record(&mut results, name, run_case(&[a], &eval)?);
        }

        // softmax_rows
        {
            let a = grad_param(vec![3, 5], random_data(&mut rng, 15));
            let target = random_data(&mut rng, 15);
            let eval = eval_with(move |tape, vars| {
                let y = tape.softmax_rows(vars[0])?;
                let t = tape.constant(vec![3, 5], target.clone())?;
                tape.mse(y, t)
            });
            record(&mut results, "softmax_rows", run_case(&[a], &eval)?);
        }

        // mean / sum, reduced directly
        for name in ["mean", "sum"] {
            let a = grad_param(vec![2, 6], random_data(&mut rng, 12));
            let eval = eval_with(move |tape, vars| {
                Ok(if name == "mean" {
                    tape.mean(vars[0])
                } else {
                    tape.sum(vars[0])
                })
            });
            record(&mut results, name, run_case(&[a], &eval)?);
        }

        // conv2d, stride 1 and 2
        for stride in [1usize, 2] {
            let name = if stride == 1 { "conv2d_s1" } else { "conv2d_s2" };
            let x = grad_param(vec![2, 2, 6, 6], random_data(&mut rng, 144));
            let k = grad_param(vec![3, 2, 3, 3], random_data(&mut rng, 54));
            let b = grad_param(vec![3], random_data(&mut rng, 3));
            let side = (6 - 1) / stride + 1;
            let target = random_data(&mut rng, 2 * 3 * side * side);
            let eval = eval_with(move |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], stride)?;
                let t = tape.constant(vec![2, 3, side, side], target.clone())?;
                tape.mse(y, t)
            });
            record(&mut results, name, run_case(&[x, k, b], &eval)?);
        }

        // upsample2x_nearest
        {
            let x = grad_param(vec![1, 2, 3, 3], random_data(&mut rng, 18));
            let target = random_data(&mut rng, 72);
            let eval = eval_with(move |tape, vars| {
                let y = tape.upsample2x_nearest(vars[0])?;
                let t = tape.constant(vec![1, 2, 6, 6], target.clone())?;
                tape.mse(y, t)
            });
            record(&mut results, "upsample2x_nearest", run_case(&[x], &eval)?);
        }

        // global_avg_pool
        {
            let x = grad_param(vec![2, 3, 4, 4], random_data(&mut rng, 96));
            let target = random_data(&mut rng, 6);
            let eval = eval_with(move |tape, vars| {
                let y = tape.global_avg_pool(vars[0])?;
                let t = tape.constant(vec![2, 3], target.clone())?;
                tape.mse(y, t)
            });
            record(&mut results, "global_avg_pool", run_case(&[x], &eval)?);
        }

        // concat_channels through reshape
        {
            let a = grad_param(vec![1, 2, 3, 3], random_data(&mut rng, 18));
            let b = grad_param(vec![1, 1, 3, 3], random_data(&mut rng, 9));
            let target = random_data(&mut rng, 27);
            let eval = eval_with(move |tape, vars| {
                let y = tape.concat_channels(vars[0], vars[1])?;
                let flat = tape.reshape(y, vec![3, 9])?;
                let t = tape.constant(vec![3, 9], target.clone())?;
                tape.mse(flat, t)
            });
            record(&mut results, "concat+reshape", run_case(&[a, b], &eval)?);
        }

        // cross_entropy
        {
            let logits = grad_param(vec![3, 4], random_data(&mut rng, 12));
            let targets = vec![
                rng.range_usize(0, 3),
                rng.range_usize(0, 3),
                rng.range_usize(0, 3),
            ];
            let eval = eval_with(move |tape, vars| tape.cross_entropy(vars[0], &targets));
            record(&mut results, "cross_entropy", run_case(&[logits], &eval)?);
        }

        // mse with both sides differentiable
        {
            let a = grad_param(vec![2, 4], random_data(&mut rng, 8));
            let b = grad_param(vec![2, 4], random_data(&mut rng, 8));
            let eval = eval_with(move |tape, vars| tape.mse(vars[0], vars[1]));
            record(&mut results, "mse", run_case(&[a, b], &eval)?);
        }

        // nll_loss on positive probabilities
        {
            let probs = grad_param(
                vec![4],
                (0..4).map(|_| rng.range_f64(0.1, 1.0)).collect::<Vec<_>>(),
            );
            let class = rng.range_usize(0, 3);
            let eval = eval_with(move |tape, vars| tape.nll_loss(vars[0], class));
            record(&mut results, "nll_loss", run_case(&[probs], &eval)?);
        }
    }

    Ok(results
        .into_iter()
        .map(|(name, worst)| GradCheckReport {
            name,
            seeds: seed_count,
            max_rel_err: worst,
            tolerance: PRIMITIVE_TOLERANCE,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Composite checks
// ---------------------------------------------------------------------------

fn composite_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_side: 16,
            channels: vec![3, 6],
            feature_dim: 8,
        },
        attention: AttentionConfig { hidden: 8, rows: 2 },
        classifier_hidden: 8,
    }
}

/// Smallest |pre-activation| over all relu nodes on a tape.
fn min_relu_margin(tape: &Tape) -> f64 {
    let mut min = f64::INFINITY;
    for node in &tape.nodes {
        if let Op::Relu(parent) = node.op {
            for v in tape.data(parent) {
                min = min.min(v.abs());
            }
        }
    }
    min
}

fn bundle_params(bundle: &ModelBundle, names: &[String]) -> Vec<DenseArray> {
    names
        .iter()
        .map(|n| bundle.param(n).expect("known name").clone())
        .collect()
}

fn write_params(bundle: &mut ModelBundle, names: &[String], values: &[DenseArray]) -> Result<()> {
    for (name, value) in names.iter().zip(values) {
        bundle
            .param_mut(name)?
            .data_mut()
            .copy_from_slice(value.data());
    }
    Ok(())
}

fn harvest_named(
    bound: &BoundModel,
    tape: &Tape,
    reference: &ModelBundle,
    names: &[String],
) -> Result<Vec<Vec<f64>>> {
    let mut sink = reference.clone();
    sink.zero_grads();
    bound.harvest_grads(tape, &mut sink)?;
    names
        .iter()
        .map(|n| {
            sink.param(n)
                .map(|a| a.grad().expect("grads enabled").to_vec())
        })
        .collect()
}

/// End-to-end check of `bag_loss(classify(pool(attention(encode(X)))))`
/// with respect to every encoder, attention and classifier parameter, on a
/// 2-slice 16x16 bag.
pub fn run_bag_composite(seed_count: u64) -> Result<GradCheckReport> {
    let config = composite_config();
    let mut worst = 0.0f64;
    let mut accepted = 0u64;
    let mut candidate = 0u64;
    while accepted < seed_count {
        if candidate > seed_count * 4 + 64 {
            return Err(Error::Numerical(
                "could not find enough well-conditioned gradcheck seeds".into(),
            ));
        }
        let seed = SeedRng::derive(candidate, "gradcheck-bag");
        candidate += 1;

        let bundle = ModelBundle::init(&config, seed)?;
        let mut rng = SeedRng::new(seed ^ 0x5a5a);
        let input: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.uniform()).collect();
        let grade = rng.range_usize(0, 3);
        let names: Vec<String> = bundle
            .names()
            .filter(|n| !n.starts_with("decoder."))
            .map(String::from)
            .collect();

        // Conditioning probe: skip seeds with a relu input near the kink.
        {
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &bundle);
            let x = tape.constant(vec![2, 1, 16, 16], input.clone())?;
            let _ = bound.bag_forward(&mut tape, x)?;
            if min_relu_margin(&tape) < 1e-4 {
                continue;
            }
        }

        let eval = {
            let bundle = bundle.clone();
            let names = names.clone();
            let input = input.clone();
            move |p: &[DenseArray], want: bool| -> Result<Outcome> {
                let mut scratch = bundle.clone();
                write_params(&mut scratch, &names, p)?;
                let mut tape = Tape::new();
                let bound = BoundModel::bind(&mut tape, &scratch);
                let x = tape.constant(vec![2, 1, 16, 16], input.clone())?;
                let (probs, _) = bound.bag_forward(&mut tape, x)?;
                let loss = bag_loss(&mut tape, probs, grade)?;
                let value = tape.scalar_value(loss)?;
                let grads = if want {
                    tape.backward(loss)?;
                    Some(harvest_named(&bound, &tape, &scratch, &names)?)
                } else {
                    None
                };
                Ok(Outcome { loss: value, grads })
            }
        };

        let params = bundle_params(&bundle, &names);
        worst = worst.max(run_case(&params, &eval)?);
        accepted += 1;
    }
    Ok(GradCheckReport {
        name: "bag_forward composite",
        seeds: seed_count,
        max_rel_err: worst,
        tolerance: COMPOSITE_TOLERANCE,
    })
}

/// Reconstruction composite: `mse(decode(encode(x)), x)` with respect to
/// every encoder and decoder parameter.
pub fn run_reconstruction_composite(seed_count: u64) -> Result<GradCheckReport> {
    let config = composite_config();
    let mut worst = 0.0f64;
    let mut accepted = 0u64;
    let mut candidate = 0u64;
    while accepted < seed_count {
        if candidate > seed_count * 4 + 64 {
            return Err(Error::Numerical(
                "could not find enough well-conditioned gradcheck seeds".into(),
            ));
        }
        let seed = SeedRng::derive(candidate, "gradcheck-recon");
        candidate += 1;

        let bundle = ModelBundle::init(&config, seed)?;
        let mut rng = SeedRng::new(seed ^ 0x33cc);
        let input: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.uniform()).collect();
        let names: Vec<String> = bundle
            .names()
            .filter(|n| n.starts_with("encoder.") || n.starts_with("decoder."))
            .map(String::from)
            .collect();

        {
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &bundle);
            let x = tape.constant(vec![2, 1, 16, 16], input.clone())?;
            let (_, skips) = bound.encode(&mut tape, x)?;
            let _ = bound.decode(&mut tape, &skips)?;
            if min_relu_margin(&tape) < 1e-4 {
                continue;
            }
        }

        let eval = {
            let bundle = bundle.clone();
            let names = names.clone();
            let input = input.clone();
            move |p: &[DenseArray], want: bool| -> Result<Outcome> {
                let mut scratch = bundle.clone();
                write_params(&mut scratch, &names, p)?;
                let mut tape = Tape::new();
                let bound = BoundModel::bind(&mut tape, &scratch);
                let x = tape.constant(vec![2, 1, 16, 16], input.clone())?;
                let (_, skips) = bound.encode(&mut tape, x)?;
                let recon = bound.decode(&mut tape, &skips)?;
                let loss = tape.mse(recon, x)?;
                let value = tape.scalar_value(loss)?;
                let grads = if want {
                    tape.backward(loss)?;
                    Some(harvest_named(&bound, &tape, &scratch, &names)?)
                } else {
                    None
                };
                Ok(Outcome { loss: value, grads })
            }
        };

        let params = bundle_params(&bundle, &names);
        worst = worst.max(run_case(&params, &eval)?);
        accepted += 1;
    }
    Ok(GradCheckReport {
        name: "encode/decode reconstruction composite",
        seeds: seed_count,
        max_rel_err: worst,
        tolerance: COMPOSITE_TOLERANCE,
    })
}

/// Primitives plus both composites.
pub fn run_full_suite(primitive_seeds: u64, composite_seeds: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = run_primitive_checks(primitive_seeds)?;
    reports.push(run_bag_composite(composite_seeds)?);
    reports.push(run_reconstruction_composite(composite_seeds)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_on_a_few_seeds() {
        let reports = run_primitive_checks(3).unwrap();
        assert!(reports.len() >= 15);
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: {} >= {}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
    }

    #[test]
    fn bag_composite_passes_on_a_few_seeds() {
        let report = run_bag_composite(2).unwrap();
        assert!(
            report.passed(),
            "{} >= {}",
            report.max_rel_err,
            report.tolerance
        );
    }

    #[test]
    fn reconstruction_composite_passes_on_a_few_seeds() {
        let report = run_reconstruction_composite(2).unwrap();
        assert!(
            report.passed(),
            "{} >= {}",
            report.max_rel_err,
            report.tolerance
        );
    }
}
