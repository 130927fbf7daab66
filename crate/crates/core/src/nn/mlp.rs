//! Multilayer perceptron parameters, batched forward pass and reverse-mode
//! gradients.
//!
//! All parameters live in one flat buffer. Layer `k` occupies a contiguous
//! block holding its row-major weight matrix (`out × in`) followed by its bias
//! (`out`). Gradients (`MlpGrads`) use the identical layout, so optimizers can
//! treat both as plain slices.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix};
use super::NnError;
use crate::seeding::Rng;

pub const MLP_FORMAT: &str = "dimorl-mlp-v1";

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z * sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn len(&self) -> usize {
        self.output * self.input + self.output
    }
}

/// Parameters of a dense feed-forward network.
///
/// Every mutation assigns a fresh generation id; tapes remember the id they
/// were recorded under so stale tapes are rejected by `backward`.
#[derive(Clone, Debug)]
pub struct MlpParams {
    layers: Vec<LayerShape>,
    data: Vec<f64>,
    generation: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.data == other.data
    }
}

/// Gradient with respect to every entry of an `MlpParams`, same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub data: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self { data: vec![0.0; params.data.len()] }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Primal values recorded during one forward evaluation.
#[derive(Debug)]
pub struct GradTape {
    generation: u64,
    /// Input to each layer (post-activation of the previous layer).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
    consumed: bool,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Backward {
    pub grads: MlpGrads,
    pub input_adjoint: Matrix,
}

impl MlpParams {
    /// He-style uniform init on weights (`±sqrt(6 / fan_in)`), zero biases.
    /// Hidden layers use `hidden`, the output layer is linear.
    pub fn init(sizes: &[usize], hidden: Activation, rng: &mut Rng) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::InvalidShape(format!("layer sizes {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut data = Vec::new();
        for (k, w) in sizes.windows(2).enumerate() {
            let activation = if k + 2 == sizes.len() { Activation::Identity } else { hidden };
            let shape = LayerShape { input: w[0], output: w[1], activation };
            let bound = (6.0 / w[0] as f64).sqrt();
            data.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            data.extend(std::iter::repeat_n(0.0, w[1]));
            layers.push(shape);
        }
        Ok(Self { layers, data, generation: next_generation() })
    }

    /// Build from explicit `(shape, weight, bias)` triples.
    pub fn from_layers(parts: Vec<(LayerShape, Vec<f64>, Vec<f64>)>) -> Result<Self, NnError> {
        if parts.is_empty() {
            return Err(NnError::InvalidShape("no layers".into()));
        }
        let mut layers = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for (k, (shape, w, b)) in parts.into_iter().enumerate() {
            if let Some(prev) = layers.last() {
                let prev: &LayerShape = prev;
                if prev.output != shape.input {
                    return Err(NnError::InvalidShape(format!(
                        "layer {k} expects {} inputs but layer {} produces {}",
                        shape.input,
                        k - 1,
                        prev.output
                    )));
                }
            }
            if shape.input == 0 || shape.output == 0 {
                return Err(NnError::InvalidShape(format!("layer {k} has a zero dimension")));
            }
            if w.len() != shape.input * shape.output || b.len() != shape.output {
                return Err(NnError::InvalidShape(format!("layer {k} payload size mismatch")));
            }
            if w.iter().chain(&b).any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteParameter { layer: k });
            }
            data.extend(w);
            data.extend(b);
            layers.push(shape);
        }
        Ok(Self { layers, data, generation: next_generation() })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the flat parameter buffer. Invalidates outstanding tapes.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.data
    }

    /// Block end offsets, one per layer.
    pub fn block_ends(&self) -> Vec<usize> {
        let mut end = 0;
        self.layers
            .iter()
            .map(|l| {
                end += l.len();
                end
            })
            .collect()
    }

    fn offset(&self, layer: usize) -> usize {
        self.layers[..layer].iter().map(LayerShape::len).sum()
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let o = self.offset(layer);
        let l = &self.layers[layer];
        &self.data[o..o + l.input * l.output]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let l = &self.layers[layer];
        let o = self.offset(layer) + l.input * l.output;
        &self.data[o..o + l.output]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let o = self.offset(layer);
        let n = self.layers[layer].input * self.layers[layer].output;
        &mut self.as_mut_slice()[o..o + n]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layers[layer];
        let o = self.offset(layer) + l.input * l.output;
        &mut self.as_mut_slice()[o..o + l.output]
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_sq_sum(&self) -> f64 {
        (0..self.layers.len()).map(|k| self.weight(k).iter().map(|w| w * w).sum::<f64>()).sum()
    }

    /// Adds `coef · ∂(Σ w²)/∂w` into `grads` (biases untouched).
    pub fn add_weight_decay_grad(&self, grads: &mut MlpGrads, coef: f64) {
        let mut o = 0;
        for l in &self.layers {
            let n = l.input * l.output;
            for i in o..o + n {
                grads.data[i] += 2.0 * coef * self.data[i];
            }
            o += l.len();
        }
    }

    /// `self ← (1 − τ)·self + τ·source`.
    pub fn soft_update_from(&mut self, source: &MlpParams, tau: f64) {
        assert_eq!(self.layers, source.layers, "soft update between different architectures");
        let keep = 1.0 - tau;
        for (t, s) in self.as_mut_slice().iter_mut().zip(&source.data) {
            *t = keep * *t + tau * s;
        }
    }

    fn check_input(&self, input: &Matrix) -> Result<(), NnError> {
        if input.cols() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                what: "mlp input",
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        if !input.is_finite() {
            return Err(NnError::NonFiniteInput);
        }
        Ok(())
    }

    fn run(&self, input: &Matrix, mut record: Option<&mut GradTape>) -> Matrix {
        let n = input.rows();
        let mut x = input.clone();
        let mut o = 0;
        for l in &self.layers {
            let w = &self.data[o..o + l.input * l.output];
            let b = &self.data[o + l.input * l.output..o + l.len()];
            let mut z = Matrix::zeros(n, l.output);
            gemm::a_bt(n, l.input, l.output, x.as_slice(), w, z.as_mut_slice());
            for i in 0..n {
                for (zj, bj) in z.row_mut(i).iter_mut().zip(b) {
                    *zj += bj;
                }
            }
            let a = if l.activation == Activation::Identity {
                z.clone()
            } else {
                z.map(|v| l.activation.apply(v))
            };
            if let Some(t) = record.as_deref_mut() {
                t.inputs.push(std::mem::replace(&mut x, a));
                t.pre.push(z);
            } else {
                x = a;
            }
            o += l.len();
        }
        x
    }

    /// Batched forward pass; each row of `input` is one sample.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix, NnError> {
        self.check_input(input)?;
        let out = self.run(input, None);
        if !out.is_finite() {
            return Err(NnError::NonFiniteOutput);
        }
        Ok(out)
    }

    /// Forward pass that records a tape for a later `backward`.
    pub fn forward_with_tape(&self, input: &Matrix) -> Result<(Matrix, GradTape), NnError> {
        self.check_input(input)?;
        let mut tape = GradTape {
            generation: self.generation,
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            consumed: false,
        };
        let out = self.run(input, Some(&mut tape));
        if !out.is_finite() {
            return Err(NnError::NonFiniteOutput);
        }
        Ok((out, tape))
    }

    /// Single-sample forward pass.
    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(&Matrix::row_vector(input))?.into_vec())
    }

    fn check_tape(&self, tape: &GradTape, adjoint: &Matrix) -> Result<(), NnError> {
        if tape.consumed {
            return Err(NnError::TapeConsumed);
        }
        if tape.generation != self.generation {
            return Err(NnError::StaleTape);
        }
        let n = tape.inputs[0].rows();
        if adjoint.rows() != n || adjoint.cols() != self.output_dim() {
            return Err(NnError::DimensionMismatch {
                what: "output adjoint",
                expected: n * self.output_dim(),
                got: adjoint.rows() * adjoint.cols(),
            });
        }
        Ok(())
    }

    fn reverse(&self, tape: &GradTape, adjoint: &Matrix, mut grads: Option<&mut MlpGrads>) -> Matrix {
        let n = adjoint.rows();
        let ends = self.block_ends();
        let mut delta = adjoint.clone();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let start = ends[k] - l.len();
            if l.activation != Activation::Identity {
                for (d, &z) in delta.as_mut_slice().iter_mut().zip(tape.pre[k].as_slice()) {
                    *d *= l.activation.derivative(z);
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = g.data[start..ends[k]].split_at_mut(l.input * l.output);
                gemm::at_b(n, l.output, l.input, delta.as_slice(), tape.inputs[k].as_slice(), gw);
                gb.iter_mut().for_each(|b| *b = 0.0);
                for row in delta.iter_rows() {
                    for (b, d) in gb.iter_mut().zip(row) {
                        *b += d;
                    }
                }
            }
            let w = &self.data[start..start + l.input * l.output];
            let mut prev = Matrix::zeros(n, l.input);
            gemm::a_b(n, l.output, l.input, delta.as_slice(), w, prev.as_mut_slice());
            delta = prev;
        }
        delta
    }

    /// Gradient of `Σ adjoint ⊙ output` with respect to every parameter and to
    /// the input. Consumes the tape; a second call fails.
    pub fn backward(&self, tape: &mut GradTape, adjoint: &Matrix) -> Result<Backward, NnError> {
        self.check_tape(tape, adjoint)?;
        let mut grads = MlpGrads::zeros_like(self);
        let input_adjoint = self.reverse(tape, adjoint, Some(&mut grads));
        tape.consumed = true;
        Ok(Backward { grads, input_adjoint })
    }

    /// Input adjoint only (skips parameter gradients).
    pub fn input_gradient(&self, tape: &mut GradTape, adjoint: &Matrix) -> Result<Matrix, NnError> {
        self.check_tape(tape, adjoint)?;
        let out = self.reverse(tape, adjoint, None);
        tape.consumed = true;
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            format: MLP_FORMAT.to_string(),
            layers: (0..self.layers.len())
                .map(|k| LayerRecord {
                    input: self.layers[k].input,
                    output: self.layers[k].output,
                    activation: self.layers[k].activation,
                    weight: self.weight(k).to_vec(),
                    bias: self.bias(k).to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: MlpCheckpoint) -> Result<Self, NnError> {
        if ck.format != MLP_FORMAT {
            return Err(NnError::Checkpoint(format!(
                "expected format {MLP_FORMAT}, found {}",
                ck.format
            )));
        }
        Self::from_layers(
            ck.layers
                .into_iter()
                .map(|l| {
                    (
                        LayerShape { input: l.input, output: l.output, activation: l.activation },
                        l.weight,
                        l.bias,
                    )
                })
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let text = serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: MlpCheckpoint =
            serde_json::from_str(&text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ck)
    }
}

/// Serialized form of `MlpParams`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub format: String,
    pub layers: Vec<LayerRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}
