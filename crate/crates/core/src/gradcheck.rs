//! Finite-difference verification of every autodiff op.
//!
//! Each case builds a scalar objective from randomized inputs, computes
//! analytic gradients with the tape, and compares every (optionally strided)
//! input coordinate against central differences `(f(x+h) - f(x-h)) / 2h`.
//! Checks run at 64-bit precision: the comparison tolerance is far below
//! what 32-bit arithmetic can resolve.
//!
//! Piecewise-linear ops (ReLU, max pooling) make finite differences lie near
//! their kinks, so instance generation enforces a margin: ReLU inputs and
//! pool-window runner-up gaps must clear [`KINK_MARGIN`], which a `±h`
//! perturbation cannot bridge. Instances violating the margin are resampled
//! deterministically.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{build_model, Architecture, InputMode, Model};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{GradMode, Tape, Tensor, ValueId};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum allowed relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Required distance from ReLU/pool kinks in generated instances.
const KINK_MARGIN: f64 = 1e-3;
/// Give up resampling an instance after this many attempts.
const MAX_RESAMPLE: usize = 200;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub op: String,
    pub instances: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

/// |a - f| relative to the larger magnitude, floored so that finite-difference
/// noise on a true zero gradient does not register as error.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_TOLERANCE)
}

type BuildFn<'a> = dyn Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId> + 'a;

struct Case<'a> {
    inputs: Vec<Tensor<f64>>,
    build: &'a BuildFn<'a>,
    /// Check every `stride`-th coordinate of each input (1 = all).
    stride: usize,
}

fn run_case(case: &Case) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let loss = (case.build)(&mut tape, &ids)?;
    let grads = tape.backward(loss, GradMode::Standard)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect::<Result<_>>()?;
        // Inputs are untracked here: this path only ever runs forward.
        let loss = (case.build)(&mut tape, &ids)?;
        tape.value(loss)?.item()
    };

    let mut max_err = 0.0f64;
    let mut coords = 0usize;
    let mut perturbed = case.inputs.clone();
    for (slot, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .ok_or_else(|| Error::Numerical("missing analytic gradient".into()))?
            .clone();
        let n = analytic.numel();
        let mut coord = 0;
        while coord < n {
            let original = perturbed[slot].data()[coord];
            perturbed[slot].data_mut()[coord] = original + FD_STEP;
            let plus = eval(&perturbed)?;
            perturbed[slot].data_mut()[coord] = original - FD_STEP;
            let minus = eval(&perturbed)?;
            perturbed[slot].data_mut()[coord] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic.data()[coord], numeric));
            coords += 1;
            coord += case.stride;
        }
    }
    Ok((max_err, coords))
}

/// Builds inputs with `gen`, rejecting draws whose recorded forward pass gets
/// too close to a ReLU or pool kink for finite differences to be valid.
fn sample_with_margin(
    rng: &mut ChaCha8Rng,
    gen: impl Fn(&mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>>,
    build: &BuildFn,
) -> Result<Vec<Tensor<f64>>> {
    for _ in 0..MAX_RESAMPLE {
        let inputs = gen(rng)?;
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect::<Result<_>>()?;
        build(&mut tape, &ids)?;
        let relu_ok = tape.min_relu_input_abs().map_or(true, |m| m > KINK_MARGIN);
        let pool_ok = tape.min_pool_gap().map_or(true, |m| m > KINK_MARGIN);
        if relu_ok && pool_ok {
            return Ok(inputs);
        }
    }
    Err(Error::Numerical(
        "could not sample a kink-free instance for gradient checking".into(),
    ))
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape/data constructed together")
}

fn coeffs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

struct Harness {
    seed: u64,
    instances: usize,
    reports: Vec<CheckReport>,
}

impl Harness {
    fn check(
        &mut self,
        op: &str,
        stride: usize,
        gen: impl Fn(&mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>>,
        build: impl Fn(&mut ChaCha8Rng, &mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
    ) -> Result<()> {
        let mut max_err = 0.0f64;
        let mut coords = 0usize;
        for instance in 0..self.instances {
            let mut rng = rng_from_seed(derive_seed(self.seed, fnv(op) ^ instance as u64));
            // The builder may draw (labels, strides, ...). It runs once per
            // objective evaluation, so it replays a fixed stream: every
            // evaluation of one instance must build the identical graph.
            let build_seed: u64 = rng.gen();
            let with_rng = |tape: &mut Tape<f64>, ids: &[ValueId]| -> Result<ValueId> {
                build(&mut rng_from_seed(build_seed), tape, ids)
            };
            let inputs = sample_with_margin(&mut rng, &gen, &with_rng)?;
            let case = Case { inputs, build: &with_rng, stride };
            let (err, n) = run_case(&case)?;
            max_err = max_err.max(err);
            coords += n;
        }
        self.reports.push(CheckReport {
            op: op.to_string(),
            instances: self.instances,
            coords_checked: coords,
            max_rel_err: max_err,
        });
        Ok(())
    }
}

/// Stable tag for per-op seed derivation.
fn fnv(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Runs the finite-difference suite over every op plus two composite cases
/// (a small conv net and the full classifier loss).
pub fn run_full_suite(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let mut h = Harness { seed, instances, reports: Vec::new() };

    h.check(
        "conv2d",
        1,
        |rng| {
            Ok(vec![
                uniform_tensor(rng, vec![1, 2, 5, 5], -1.0, 1.0),
                uniform_tensor(rng, vec![3, 2, 3, 3], -1.0, 1.0),
            ])
        },
        |rng, tape, ids| {
            let stride = rng.gen_range(1..=2usize);
            let padding = rng.gen_range(0..=1usize);
            let out = tape.conv2d(ids[0], ids[1], stride, padding)?;
            let n = tape.value(out)?.numel();
            let c = coeffs(rng, n);
            tape.dot_const(out, &c)
        },
    )?;

    h.check(
        "bias_add_channel",
        1,
        |rng| {
            Ok(vec![
                uniform_tensor(rng, vec![2, 3, 4, 4], -1.0, 1.0),
                uniform_tensor(rng, vec![3], -1.0, 1.0),
            ])
        },
        |rng, tape, ids| {
            let out = tape.bias_add_channel(ids[0], ids[1])?;
            let n = tape.value(out)?.numel();
            let c = coeffs(rng, n);
            tape.dot_const(out, &c)
        },
    )?;

    h.check(
        "relu",
        1,
        |rng| {
            // Sampled clear of zero so the margin check always passes.
            let data: Vec<f64> = (0..60)
                .map(|_| {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * rng.gen_range(0.05..1.0)
                })
                .collect();
            Ok(vec![Tensor::new(vec![60], data)?])
        },
        |rng, tape, ids| {
            let out = tape.relu(ids[0])?;
            let c = coeffs(rng, 60);
            tape.dot_const(out, &c)
        },
    )?;

    h.check(
        "maxpool2x2",
        1,
        |rng| Ok(vec![uniform_tensor(rng, vec![1, 2, 6, 6], -1.0, 1.0)]),
        |rng, tape, ids| {
            let out = tape.maxpool2x2(ids[0])?;
            let n = tape.value(out)?.numel();
            let c = coeffs(rng, n);
            tape.dot_const(out, &c)
        },
    )?;

    h.check(
        "global_avg_pool",
        1,
        |rng| Ok(vec![uniform_tensor(rng, vec![2, 3, 4, 5], -1.0, 1.0)]),
        |rng, tape, ids| {
            let out = tape.global_avg_pool(ids[0])?;
            let c = coeffs(rng, 6);
            tape.dot_const(out, &c)
        },
    )?;

    h.check(
        "dense",
        1,
        |rng| {
            Ok(vec![
                uniform_tensor(rng, vec![4, 7], -1.0, 1.0),
                uniform_tensor(rng, vec![3, 7], -1.0, 1.0),
                uniform_tensor(rng, vec![3], -1.0, 1.0),
            ])
        },
        |rng, tape, ids| {
            let out = tape.dense(ids[0], ids[1], ids[2])?;
            let c = coeffs(rng, 12);
            tape.dot_const(out, &c)
        },
    )?;

    h.check(
        "add",
        1,
        |rng| {
            Ok(vec![
                uniform_tensor(rng, vec![3, 5], -1.0, 1.0),
                uniform_tensor(rng, vec![3, 5], -1.0, 1.0),
            ])
        },
        |rng, tape, ids| {
            let out = tape.add(ids[0], ids[1])?;
            let c = coeffs(rng, 15);
            tape.dot_const(out, &c)
        },
    )?;

    h.check(
        "mul",
        1,
        |rng| {
            Ok(vec![
                uniform_tensor(rng, vec![3, 5], -1.0, 1.0),
                uniform_tensor(rng, vec![3, 5], -1.0, 1.0),
            ])
        },
        |rng, tape, ids| {
            let out = tape.mul(ids[0], ids[1])?;
            let c = coeffs(rng, 15);
            tape.dot_const(out, &c)
        },
    )?;

    h.check(
        "scale",
        1,
        |rng| Ok(vec![uniform_tensor(rng, vec![9], -1.0, 1.0)]),
        |rng, tape, ids| {
            let factor = rng.gen_range(-2.0..2.0);
            let out = tape.scale(ids[0], factor)?;
            let c = coeffs(rng, 9);
            tape.dot_const(out, &c)
        },
    )?;

    h.check(
        "sum",
        1,
        |rng| Ok(vec![uniform_tensor(rng, vec![11], -1.0, 1.0)]),
        |rng, tape, ids| {
            let s = tape.sum(ids[0])?;
            let factor = rng.gen_range(0.5..2.0);
            tape.scale(s, factor)
        },
    )?;

    h.check(
        "pick",
        1,
        |rng| Ok(vec![uniform_tensor(rng, vec![2, 6], -1.0, 1.0)]),
        |rng, tape, ids| {
            let index = rng.gen_range(0..12usize);
            tape.pick(ids[0], index)
        },
    )?;

    h.check(
        "dot_const",
        1,
        |rng| Ok(vec![uniform_tensor(rng, vec![13], -1.0, 1.0)]),
        |rng, tape, ids| {
            let c = coeffs(rng, 13);
            tape.dot_const(ids[0], &c)
        },
    )?;

    h.check(
        "class_logit_sum",
        1,
        |rng| Ok(vec![uniform_tensor(rng, vec![5, 3], -1.0, 1.0)]),
        |rng, tape, ids| {
            let class = rng.gen_range(0..3usize);
            tape.class_logit_sum(ids[0], class)
        },
    )?;

    h.check(
        "weighted_cross_entropy",
        1,
        |rng| Ok(vec![uniform_tensor(rng, vec![6, 3], -2.0, 2.0)]),
        |rng, tape, ids| {
            let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..2.0)).collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            tape.weighted_cross_entropy(ids[0], &labels, &weights)
        },
    )?;

    h.check(
        "two_layer_net",
        1,
        |rng| {
            Ok(vec![
                uniform_tensor(rng, vec![2, 1, 6, 6], -1.0, 1.0), // input
                uniform_tensor(rng, vec![3, 1, 3, 3], -0.7, 0.7), // conv weight
                uniform_tensor(rng, vec![3], -0.3, 0.3),          // conv bias
                uniform_tensor(rng, vec![3, 3], -0.7, 0.7),       // dense weight
                uniform_tensor(rng, vec![3], -0.3, 0.3),          // dense bias
            ])
        },
        |rng, tape, ids| {
            let conv = tape.conv2d(ids[0], ids[1], 1, 1)?;
            let conv = tape.bias_add_channel(conv, ids[2])?;
            let act = tape.relu(conv)?;
            let pooled = tape.global_avg_pool(act)?;
            let logits = tape.dense(pooled, ids[3], ids[4])?;
            let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
            tape.weighted_cross_entropy(logits, &labels, &[0.5, 0.3, 0.2])
        },
    )?;

    check_full_classifier(&mut h)?;

    Ok(h.reports)
}

/// The full classifier loss: build the real model, treat its parameters as
/// leaves, and finite-difference a strided subset of every parameter tensor.
fn check_full_classifier(h: &mut Harness) -> Result<()> {
    let arch = Architecture {
        input_size: 16,
        channels_base: 4,
        input_mode: InputMode::Patch,
    };
    let mut max_err = 0.0f64;
    let mut coords = 0usize;
    for instance in 0..h.instances {
        let mut rng = rng_from_seed(derive_seed(h.seed, fnv("full_classifier") ^ instance as u64));
        let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
        let weights = [0.5647, 0.2736, 0.1617];
        let build = |tape: &mut Tape<f64>, ids: &[ValueId]| -> Result<ValueId> {
            let logits = arch.record_forward(tape, ids[0], &ids[1..])?;
            tape.weighted_cross_entropy(logits, &labels, &weights)
        };
        let build_ref: &BuildFn = &build;
        let gen = |rng: &mut ChaCha8Rng| -> Result<Vec<Tensor<f64>>> {
            let model: Model<f64> = build_model(&arch, rng.gen::<u64>())?;
            let mut inputs = vec![uniform_tensor(rng, vec![2, 1, 16, 16], -1.0, 1.0)];
            inputs.extend(model.params().iter().map(|p| p.tensor.clone()));
            Ok(inputs)
        };
        let inputs = sample_with_margin(&mut rng, gen, build_ref)?;
        let case = Case { inputs, build: build_ref, stride: 23 };
        let (err, n) = run_case(&case)?;
        max_err = max_err.max(err);
        coords += n;
    }
    h.reports.push(CheckReport {
        op: "full_classifier_loss".to_string(),
        instances: h.instances,
        coords_checked: coords,
        max_rel_err: max_err,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floors_near_zero_gradients() {
        assert!(rel_err(0.0, 1e-10) < FD_TOLERANCE);
        assert!(rel_err(1.0, 1.2) > FD_TOLERANCE);
    }

    #[test]
    fn fnv_distinguishes_ops() {
        assert_ne!(fnv("conv2d"), fnv("dense"));
    }

    #[test]
    fn full_suite_passes_with_a_small_instance_count() {
        // Two instances per case keeps this a smoke test; the acceptance
        // suite runs the full 20+.
        let reports = run_full_suite(2024, 2).unwrap();
        assert!(reports.len() >= 14, "expected every op covered, got {}", reports.len());
        for r in &reports {
            assert!(
                r.passed(),
                "{}: max rel err {:.3e} across {} coordinates",
                r.op,
                r.max_rel_err,
                r.coords_checked
            );
        }
        assert!(reports.iter().any(|r| r.op == "full_classifier_loss"));
    }
}
