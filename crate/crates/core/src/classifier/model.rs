//! Compact residual CNN.
//!
//! Layout: a 3×3 stem convolution, 2×2 max pooling, three residual blocks
//! (the second and third halve resolution and double channels through a
//! strided 1×1 projection on the skip path), global average pooling, and a
//! dense 3-way head. There is no batch normalization: backward stays simple
//! and deterministic, and the skip connections plus Adam compensate. Skip
//! additions are kept because guided backpropagation through them is part of
//! what the saliency pipeline exercises.

use rand_distr::{Distribution, Normal};

use super::{InputMode, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{softmax_rows, GradMode, Scalar, Tape, Tensor, ValueId};

/// One named parameter tensor. Order within [`Model::params`] is the
/// canonical parameter order used by initialization, the optimizer, and
/// checkpoints.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Everything that determines the network's shape (not its weights).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Side length of the square single-channel input.
    pub input_size: usize,
    /// Channel count after the stem; later stages use 2× and 4× this.
    pub channels_base: usize,
    pub input_mode: InputMode,
}

/// (in_channels, out_channels multiplier pair, stride) per residual block.
const BLOCK_PLAN: [(usize, usize, usize); 3] = [(1, 1, 1), (1, 2, 2), (2, 4, 2)];

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 {
            return Err(Error::Config(format!(
                "input size {} too small; the stem pool plus two strided stages need at least 16",
                self.input_size
            )));
        }
        if self.input_size % 8 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be divisible by 8 (one 2x2 pool and two stride-2 stages)",
                self.input_size
            )));
        }
        if self.channels_base < 4 {
            return Err(Error::Config(format!(
                "channels_base {} too small (minimum 4)",
                self.channels_base
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels_base;
        let mut specs = vec![
            ("stem.weight".to_string(), vec![c, 1, 3, 3]),
            ("stem.bias".to_string(), vec![c]),
        ];
        for (i, (m_in, m_out, stride)) in BLOCK_PLAN.iter().enumerate() {
            let (c_in, c_out) = (c * m_in, c * m_out);
            let block = format!("block{}", i + 1);
            specs.push((format!("{block}.conv1.weight"), vec![c_out, c_in, 3, 3]));
            specs.push((format!("{block}.conv1.bias"), vec![c_out]));
            specs.push((format!("{block}.conv2.weight"), vec![c_out, c_out, 3, 3]));
            specs.push((format!("{block}.conv2.bias"), vec![c_out]));
            if *stride != 1 || c_in != c_out {
                specs.push((format!("{block}.proj.weight"), vec![c_out, c_in, 1, 1]));
                specs.push((format!("{block}.proj.bias"), vec![c_out]));
            }
        }
        specs.push(("head.weight".to_string(), vec![NUM_CLASSES, 4 * c]));
        specs.push(("head.bias".to_string(), vec![NUM_CLASSES]));
        specs
    }

    /// Human-readable layer lines for the checkpoint manifest.
    pub fn describe_layers(&self) -> Vec<String> {
        let c = self.channels_base;
        let mut lines = vec![
            format!("conv 3x3 1->{c} stride 1 pad 1 + bias, relu, maxpool 2x2"),
        ];
        for (i, (m_in, m_out, stride)) in BLOCK_PLAN.iter().enumerate() {
            let (c_in, c_out) = (c * m_in, c * m_out);
            let skip = if *stride != 1 || c_in != c_out {
                format!("proj conv 1x1 {c_in}->{c_out} stride {stride} + bias")
            } else {
                "identity".to_string()
            };
            lines.push(format!(
                "resblock{}: conv 3x3 {c_in}->{c_out} stride {stride} pad 1 + bias, relu, \
                 conv 3x3 {c_out}->{c_out} stride 1 pad 1 + bias; skip = {skip}; add, relu",
                i + 1
            ));
        }
        lines.push(format!("global avg pool, dense {}->{}", 4 * c, NUM_CLASSES));
        lines
    }

    /// Records the forward pass on `tape`. `params` must match
    /// [`Architecture::param_specs`] order; shapes are validated by the ops.
    /// Returns the `[N, 3]` logits value.
    pub fn record_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        input: ValueId,
        params: &[ValueId],
    ) -> Result<ValueId> {
        self.validate()?;
        let expected = self.param_specs().len();
        if params.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        let shape = tape.value(input)?.shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.input_size || shape[3] != self.input_size {
            return Err(Error::ShapeMismatch {
                op: "classifier_forward",
                details: format!(
                    "input must be [N, 1, {0}, {0}], got {shape:?}",
                    self.input_size
                ),
            });
        }

        let mut cursor = params.iter().copied();
        let mut next = || cursor.next().expect("length checked above");

        let (stem_w, stem_b) = (next(), next());
        let x = tape.conv2d(input, stem_w, 1, 1)?;
        let x = tape.bias_add_channel(x, stem_b)?;
        let x = tape.relu(x)?;
        let mut x = tape.maxpool2x2(x)?;

        for (m_in, m_out, stride) in BLOCK_PLAN {
            let (c_in, c_out) = (self.channels_base * m_in, self.channels_base * m_out);
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            let y = tape.conv2d(x, w1, stride, 1)?;
            let y = tape.bias_add_channel(y, b1)?;
            let y = tape.relu(y)?;
            let y = tape.conv2d(y, w2, 1, 1)?;
            let y = tape.bias_add_channel(y, b2)?;
            let skip = if stride != 1 || c_in != c_out {
                let (pw, pb) = (next(), next());
                let s = tape.conv2d(x, pw, stride, 0)?;
                tape.bias_add_channel(s, pb)?
            } else {
                x
            };
            let joined = tape.add(y, skip)?;
            x = tape.relu(joined)?;
        }

        let pooled = tape.global_avg_pool(x)?;
        let (head_w, head_b) = (next(), next());
        tape.dense(pooled, head_w, head_b)
    }
}

/// A residual classifier: architecture plus parameter values.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    arch: Architecture,
    params: Vec<Param<T>>,
}

/// Builds a model with He fan-in initialization (weights ~ N(0, √(2/fan_in)),
/// biases zero). Draws come from one seeded stream at 64-bit precision in
/// canonical parameter order, so the same seed gives the same weights at
/// every precision.
pub fn build_model<T: Scalar>(arch: &Architecture, seed: u64) -> Result<Model<T>> {
    arch.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut params = Vec::new();
    for (name, shape) in arch.param_specs() {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            // fan_in: incoming connections per output unit. For conv
            // [c_out, c_in, kh, kw] that is c_in*kh*kw; for the dense head
            // [out, in] it is the trailing product as well.
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std)
                .map_err(|e| Error::Numerical(format!("bad init distribution: {e}")))?;
            let data: Vec<T> = (0..shape.iter().product::<usize>())
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect();
            Tensor::new(shape, data)?
        };
        params.push(Param { name, tensor });
    }
    Ok(Model { arch: *arch, params })
}

impl<T: Scalar> Model<T> {
    /// Reassembles a model from stored parameters, validating names and
    /// shapes against the architecture.
    pub fn from_parts(arch: Architecture, params: Vec<Param<T>>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.param_specs();
        if params.len() != specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (param, (name, shape)) in params.iter().zip(&specs) {
            if &param.name != name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: expected {name}, got {}",
                    param.name
                )));
            }
            if param.tensor.shape() != &shape[..] {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    param.tensor.shape()
                )));
            }
        }
        Ok(Model { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Registers parameter leaves and records the forward pass; returns the
    /// logits id and the parameter leaf ids (canonical order).
    pub fn record_forward(
        &self,
        tape: &mut Tape<T>,
        input: ValueId,
        track_params: bool,
    ) -> Result<(ValueId, Vec<ValueId>)> {
        let param_ids: Vec<ValueId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), track_params))
            .collect::<Result<_>>()?;
        let logits = self.arch.record_forward(tape, input, &param_ids)?;
        Ok((logits, param_ids))
    }

    /// Forward pass on a `[N, 1, S, S]` batch; returns `[N, 3]` logits.
    pub fn forward_logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), false)?;
        let (logits, _) = self.record_forward(&mut tape, input, false)?;
        Ok(tape.value(logits)?.clone())
    }

    /// Softmax class probabilities per batch row, at 64-bit precision.
    pub fn predict_probs(&self, batch: &Tensor<T>) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let logits = self.forward_logits(batch)?;
        let n = logits.shape()[0];
        let rows: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
        let probs = softmax_rows(&rows, n, NUM_CLASSES);
        Ok(probs
            .chunks_exact(NUM_CLASSES)
            .map(|r| [r[0], r[1], r[2]])
            .collect())
    }

    /// Gradient of the summed pre-softmax logit of `class_index` with respect
    /// to the input pixels, under the requested ReLU backward rule.
    ///
    /// The per-sample rows of the result are independent — logits of one
    /// sample do not depend on another sample's pixels — so a batched call
    /// equals per-sample calls bitwise.
    pub fn input_gradient(
        &self,
        batch: &Tensor<T>,
        class_index: usize,
        mode: GradMode,
    ) -> Result<Tensor<T>> {
        if class_index >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "class index {class_index} out of range"
            )));
        }
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), true)?;
        let (logits, _) = self.record_forward(&mut tape, input, false)?;
        let objective = tape.class_logit_sum(logits, class_index)?;
        let mut grads = tape.backward(objective, mode)?;
        grads
            .take(input)
            .ok_or_else(|| Error::Numerical("input gradient missing after backward".into()))
    }

    /// Converts parameter precision (used by checkpointing, which stores
    /// 32-bit, and by the 64-bit gradient-check path).
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch,
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast::<U>() })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_arch() -> Architecture {
        Architecture { input_size: 64, channels_base: 8, input_mode: InputMode::Patch }
    }

    #[test]
    fn logits_shape_is_batch_by_three_for_any_batch() {
        let model: Model<f32> = build_model(&desk_arch(), 7).unwrap();
        for n in [1usize, 2, 5] {
            let batch = Tensor::zeros(vec![n, 1, 64, 64]);
            let logits = model.forward_logits(&batch).unwrap();
            assert_eq!(logits.shape(), &[n, 3]);
        }
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a: Model<f32> = build_model(&desk_arch(), 41).unwrap();
        let b: Model<f32> = build_model(&desk_arch(), 41).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
        let c: Model<f32> = build_model(&desk_arch(), 42).unwrap();
        assert_ne!(
            a.params()[0].tensor.data(),
            c.params()[0].tensor.data(),
            "different seeds must differ"
        );
    }

    #[test]
    fn parameter_count_matches_layer_by_layer_walkthrough() {
        // Independent arithmetic for input 64, base channels 8: each line
        // below is one layer of the printed architecture, counted by hand.
        let stem = 8 * 1 * 3 * 3 + 8;
        let block1 = (8 * 8 * 9 + 8) + (8 * 8 * 9 + 8);
        let block2 = (16 * 8 * 9 + 16) + (16 * 16 * 9 + 16) + (16 * 8 * 1 * 1 + 16);
        let block3 = (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32) + (32 * 16 * 1 * 1 + 32);
        let head = 3 * 32 + 3;
        let expected = stem + block1 + block2 + block3 + head;

        let model: Model<f32> = build_model(&desk_arch(), 1).unwrap();
        assert_eq!(model.param_count(), expected);
        assert_eq!(expected, 19_411);
    }

    #[test]
    fn biases_start_at_zero_and_weights_do_not() {
        let model: Model<f32> = build_model(&desk_arch(), 3).unwrap();
        for p in model.params() {
            if p.name.ends_with(".bias") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0), "{}", p.name);
            } else {
                assert!(p.tensor.data().iter().any(|&v| v != 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn zero_stem_weights_give_zero_saliency() {
        let mut model: Model<f32> = build_model(&desk_arch(), 5).unwrap();
        let stem = &mut model.params_mut()[0];
        assert_eq!(stem.name, "stem.weight");
        stem.tensor = Tensor::zeros(stem.tensor.shape().to_vec());

        let batch = Tensor::filled(vec![1, 1, 64, 64], 0.5f32);
        let grad = model.input_gradient(&batch, 0, GradMode::Guided).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guided_gradient_is_deterministic() {
        let model: Model<f32> = build_model(&desk_arch(), 11).unwrap();
        let data: Vec<f32> = (0..64 * 64).map(|i| (i % 97) as f32 / 97.0).collect();
        let batch = Tensor::new(vec![1, 1, 64, 64], data).unwrap();
        let a = model.input_gradient(&batch, 1, GradMode::Guided).unwrap();
        let b = model.input_gradient(&batch, 1, GradMode::Guided).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn batched_input_gradient_matches_per_sample_calls_bitwise() {
        let model: Model<f32> = build_model(&desk_arch(), 13).unwrap();
        let a: Vec<f32> = (0..64 * 64).map(|i| ((i * 31) % 101) as f32 / 101.0).collect();
        let b: Vec<f32> = (0..64 * 64).map(|i| ((i * 17) % 89) as f32 / 89.0).collect();
        let mut joint = a.clone();
        joint.extend_from_slice(&b);

        let batched = model
            .input_gradient(&Tensor::new(vec![2, 1, 64, 64], joint).unwrap(), 2, GradMode::Guided)
            .unwrap();
        let ga = model
            .input_gradient(&Tensor::new(vec![1, 1, 64, 64], a).unwrap(), 2, GradMode::Guided)
            .unwrap();
        let gb = model
            .input_gradient(&Tensor::new(vec![1, 1, 64, 64], b).unwrap(), 2, GradMode::Guided)
            .unwrap();

        assert_eq!(&batched.data()[..64 * 64], ga.data());
        assert_eq!(&batched.data()[64 * 64..], gb.data());
    }

    #[test]
    fn invalid_class_index_is_rejected() {
        let model: Model<f32> = build_model(&desk_arch(), 1).unwrap();
        let batch = Tensor::zeros(vec![1, 1, 64, 64]);
        assert!(model.input_gradient(&batch, 3, GradMode::Guided).is_err());
    }

    #[test]
    fn odd_input_sizes_are_rejected() {
        for bad in [15usize, 20, 12] {
            let arch = Architecture { input_size: bad, channels_base: 8, input_mode: InputMode::Patch };
            assert!(arch.validate().is_err(), "size {bad} should be rejected");
        }
    }

    #[test]
    fn guided_equals_standard_gradient_of_linear_map() {
        // A network with every ReLU bypassed is linear; guided and standard
        // backward must then agree bitwise, and for a pure dense layer the
        // input gradient is the selected weight row.
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.5, 0.9]).unwrap(), true)
            .unwrap();
        let w = tape
            .leaf(
                Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap(),
                false,
            )
            .unwrap();
        let b = tape.leaf(Tensor::zeros(vec![3]), false).unwrap();
        let logits = tape.dense(x, w, b).unwrap();
        let objective = tape.class_logit_sum(logits, 1).unwrap();
        let guided = tape.backward(objective, GradMode::Guided).unwrap();
        let g = guided.get(x).unwrap().data().to_vec();

        // Weight row 1 of w: entries 4..8 of the ramp.
        let expected: Vec<f64> = (4..8).map(|i| i as f64 * 0.1 - 0.5).collect();
        assert_eq!(g, expected);
    }
}
