//! Fake-quantised MLP used for quantisation-aware training.
//!
//! Hidden layers compute `ReLU(Wq·x + b)` followed by an unsigned activation
//! quantiser; the output layer emits real logits. Weights are quantised
//! per-tensor with a signed symmetric quantiser whose scale tracks
//! `max|W| / qmax`. The final-layer bias lives on the accumulator grid
//! (scale `s_w·s_in`, 32-bit) so integer logits order exactly like real ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{input_quant, Label};
use crate::quant::QuantSpec;

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];
pub const DEFAULT_BITS: u32 = 4;
/// Width of the final-layer bias quantiser.
pub const BIAS_BITS: u32 = 32;

/// Which forward path to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Fake-quantised weights, inputs and activations (the deployed arithmetic).
    Quantized,
    /// Plain floating point; used for gradient checking.
    Float,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim` master weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| m.max(w.abs()))
    }
}

/// Trainable MLP with fake-quantisation in its forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuantMlp {
    dims: Vec<usize>,
    pub layers: Vec<Layer>,
    input_quant: QuantSpec,
    weight_bits: u32,
    activation_bits: u32,
    /// One per hidden layer; `None` until calibrated.
    activation_scales: Vec<Option<f64>>,
}

/// Hidden-layer requantiser on the integer accumulator: the reference that
/// threshold tables are derived from.
pub fn requantize(acc: i64, combined_scale: f64, bias: f64, act: &QuantSpec) -> i64 {
    let z = combined_scale * acc as f64 + bias;
    act.quantize(z.max(0.0))
}

/// Bias quantiser on the accumulator grid of a layer.
pub fn bias_quant(combined_scale: f64) -> QuantSpec {
    QuantSpec {
        bits: BIAS_BITS,
        signed: true,
        scale: combined_scale,
    }
}

/// Index of the larger logit; ties go to Normal.
pub fn argmax_label(logits: &[f64]) -> Label {
    if logits[1] > logits[0] {
        Label::Attack
    } else {
        Label::Normal
    }
}

impl FakeQuantMlp {
    /// All-zero model with the given layer dims.
    pub fn zeros(dims: &[usize], weight_bits: u32, activation_bits: u32) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least input and output dims".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "zero-width layer in {dims:?}"
            )));
        }
        if *dims.last().unwrap() != 2 {
            return Err(Error::InvalidConfig(format!(
                "output layer must have 2 logits, got {}",
                dims.last().unwrap()
            )));
        }
        QuantSpec::new(weight_bits, true, 1.0)?;
        QuantSpec::new(activation_bits, false, 1.0)?;
        let layers = dims.windows(2).map(|d| Layer::zeros(d[0], d[1])).collect();
        Ok(FakeQuantMlp {
            dims: dims.to_vec(),
            layers,
            input_quant: input_quant(),
            weight_bits,
            activation_bits,
            activation_scales: vec![None; dims.len() - 2],
        })
    }

    /// He-uniform initialisation, zero biases.
    pub fn new(dims: &[usize], weight_bits: u32, activation_bits: u32, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dims, weight_bits, activation_bits)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let bound = (6.0 / layer.in_dim as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn input_quant(&self) -> QuantSpec {
        self.input_quant
    }

    pub fn weight_bits(&self) -> u32 {
        self.weight_bits
    }

    pub fn activation_bits(&self) -> u32 {
        self.activation_bits
    }

    pub fn is_hidden(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len()
    }

    /// Weight quantiser of a layer, calibrated to the current master weights.
    pub fn weight_quant(&self, layer: usize) -> QuantSpec {
        QuantSpec::calibrated(self.weight_bits, true, self.layers[layer].max_abs_weight())
            .expect("weight bits validated at construction")
    }

    pub fn activation_scales(&self) -> &[Option<f64>] {
        &self.activation_scales
    }

    pub fn activation_quant(&self, layer: usize) -> Option<QuantSpec> {
        self.activation_scales[layer].map(|scale| QuantSpec {
            bits: self.activation_bits,
            signed: false,
            scale,
        })
    }

    pub fn set_activation_scale(&mut self, layer: usize, scale: f64) -> Result<()> {
        QuantSpec::new(self.activation_bits, false, scale)?;
        self.activation_scales[layer] = Some(scale);
        Ok(())
    }

    pub fn is_calibrated(&self) -> bool {
        self.activation_scales.iter().all(Option::is_some)
    }

    /// Integer weight codes of a layer, row-major.
    pub fn weight_codes(&self, layer: usize) -> Vec<i64> {
        let spec = self.weight_quant(layer);
        self.layers[layer]
            .weights
            .iter()
            .map(|&w| spec.quantize(w))
            .collect()
    }

    /// Scale of the codes feeding `layer`.
    pub fn input_scale_of(&self, layer: usize) -> Result<f64> {
        if layer == 0 {
            Ok(self.input_quant.scale)
        } else {
            self.activation_scales[layer - 1].ok_or(Error::NotCalibrated { layer: layer - 1 })
        }
    }

    /// Quantised forward pass with frozen scales.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_with(input, Precision::Quantized)
    }

    pub fn forward_with(&self, input: &[f64], precision: Precision) -> Result<Vec<f64>> {
        let batch = Batch::new(input.to_vec(), vec![Label::Normal], self.input_dim())?;
        let pass = self.forward_batch(&batch, precision, None)?;
        Ok(pass.logits)
    }

    pub fn predict(&self, input: &[f64]) -> Result<Label> {
        Ok(argmax_label(&self.forward(input)?))
    }

    /// Sets every activation scale to the largest ReLU output observed on
    /// `inputs` (row-major, one sample per row) divided by qmax.
    pub fn calibrate_scales(&mut self, inputs: &[f64]) -> Result<()> {
        let n = inputs.len() / self.input_dim().max(1);
        let batch = Batch::new(inputs.to_vec(), vec![Label::Normal; n], self.input_dim())?;
        let mut observer = ActivationObserver::replace(self.activation_scales.len());
        self.forward_batch(&batch, Precision::Quantized, Some(&mut observer))?;
        self.activation_scales = observer.scales(self.activation_bits);
        Ok(())
    }

    /// Runs a batch forward, recording what backward needs. With an observer,
    /// activation scales are updated layer by layer from the batch before
    /// that layer's activations are quantised.
    pub(crate) fn forward_batch(
        &self,
        batch: &Batch,
        precision: Precision,
        mut observer: Option<&mut ActivationObserver>,
    ) -> Result<ForwardPass> {
        let rows = batch.len();
        let quantized = precision == Precision::Quantized;
        let mut tapes = Vec::with_capacity(self.layers.len());

        // Current layer input: integer codes (quantised) or raw values (float).
        let mut x: Vec<f64> = if quantized {
            batch
                .inputs
                .iter()
                .map(|&v| self.input_quant.quantize(v) as f64)
                .collect()
        } else {
            batch.inputs.clone()
        };
        let mut in_scale = if quantized {
            self.input_quant.scale
        } else {
            1.0
        };

        for (l, layer) in self.layers.iter().enumerate() {
            let (w_used, w_scale, w_mask) = if quantized {
                let spec = self.weight_quant(l);
                let codes: Vec<f64> = layer
                    .weights
                    .iter()
                    .map(|&w| spec.quantize(w) as f64)
                    .collect();
                let mask = layer.weights.iter().map(|&w| spec.ste_grad(w)).collect();
                (codes, spec.scale, mask)
            } else {
                (layer.weights.clone(), 1.0, vec![1.0; layer.weights.len()])
            };
            let combined = w_scale * in_scale;
            let acc = matmul_rows(&x, &w_used, rows, layer.in_dim, layer.out_dim);

            let input_eff: Vec<f64> = x.iter().map(|&v| v * in_scale).collect();
            let w_eff: Vec<f64> = w_used.iter().map(|&w| w * w_scale).collect();

            if self.is_hidden(l) {
                let z: Vec<f64> = acc
                    .iter()
                    .enumerate()
                    .map(|(k, &a)| combined * a + layer.bias[k % layer.out_dim])
                    .collect();
                if quantized {
                    if let Some(obs) = observer.as_deref_mut() {
                        let batch_max = z.iter().fold(0.0f64, |m, &v| m.max(v));
                        obs.observe(l, batch_max);
                    }
                    let scale = match observer.as_deref() {
                        Some(obs) => obs.scale(l, self.activation_bits),
                        None => {
                            self.activation_scales[l].ok_or(Error::NotCalibrated { layer: l })?
                        }
                    };
                    let act = QuantSpec {
                        bits: self.activation_bits,
                        signed: false,
                        scale,
                    };
                    let mut grad_mask = Vec::with_capacity(z.len());
                    let mut next = Vec::with_capacity(z.len());
                    for (k, &zk) in z.iter().enumerate() {
                        let a = zk.max(0.0);
                        grad_mask.push(if zk > 0.0 { act.ste_grad(a) } else { 0.0 });
                        let code = requantize(
                            acc[k] as i64,
                            combined,
                            layer.bias[k % layer.out_dim],
                            &act,
                        );
                        next.push(code as f64);
                    }
                    x = next;
                    in_scale = scale;
                    tapes.push(LayerTape {
                        input_eff,
                        w_eff,
                        w_mask,
                        grad_mask,
                        bias_mask: vec![1.0; layer.out_dim],
                    });
                } else {
                    let grad_mask = z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                    x = z.iter().map(|&v| v.max(0.0)).collect();
                    tapes.push(LayerTape {
                        input_eff,
                        w_eff,
                        w_mask,
                        grad_mask,
                        bias_mask: vec![1.0; layer.out_dim],
                    });
                }
            } else {
                let logits: Vec<f64> = if quantized {
                    let bspec = bias_quant(combined);
                    let bq: Vec<f64> = layer
                        .bias
                        .iter()
                        .map(|&b| bspec.quantize(b) as f64)
                        .collect();
                    acc.iter()
                        .enumerate()
                        .map(|(k, &a)| combined * (a + bq[k % layer.out_dim]))
                        .collect()
                } else {
                    acc.iter()
                        .enumerate()
                        .map(|(k, &a)| a + layer.bias[k % layer.out_dim])
                        .collect()
                };
                let bias_mask = if quantized {
                    let bspec = bias_quant(combined);
                    layer.bias.iter().map(|&b| bspec.ste_grad(b)).collect()
                } else {
                    vec![1.0; layer.out_dim]
                };
                tapes.push(LayerTape {
                    input_eff,
                    w_eff,
                    w_mask,
                    grad_mask: Vec::new(),
                    bias_mask,
                });
                return Ok(ForwardPass { logits, tapes });
            }
        }
        unreachable!("model always has an output layer")
    }

    /// Class-weighted mean cross-entropy of a batch and its gradient with
    /// respect to every master weight and bias.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        class_weights: [f64; 2],
        precision: Precision,
    ) -> Result<(f64, Vec<LayerGrad>)> {
        let pass = self.forward_batch(batch, precision, None)?;
        Ok(self.backward(batch, &pass, class_weights))
    }

    pub fn loss(
        &self,
        batch: &Batch,
        class_weights: [f64; 2],
        precision: Precision,
    ) -> Result<f64> {
        let pass = self.forward_batch(batch, precision, None)?;
        Ok(cross_entropy(&pass.logits, &batch.labels, class_weights).0)
    }

    pub(crate) fn backward(
        &self,
        batch: &Batch,
        pass: &ForwardPass,
        class_weights: [f64; 2],
    ) -> (f64, Vec<LayerGrad>) {
        let rows = batch.len();
        let (loss, mut delta) = cross_entropy(&pass.logits, &batch.labels, class_weights);
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let tape = &pass.tapes[l];
            let (n_in, n_out) = (layer.in_dim, layer.out_dim);
            let mut gw = vec![0.0; n_in * n_out];
            let mut gb = vec![0.0; n_out];
            for r in 0..rows {
                let d_row = &delta[r * n_out..(r + 1) * n_out];
                let x_row = &tape.input_eff[r * n_in..(r + 1) * n_in];
                for (i, &d) in d_row.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[i] += d;
                    let g_row = &mut gw[i * n_in..(i + 1) * n_in];
                    for (g, &xv) in g_row.iter_mut().zip(x_row) {
                        *g += d * xv;
                    }
                }
            }
            for (g, m) in gw.iter_mut().zip(&tape.w_mask) {
                *g *= m;
            }
            for (g, m) in gb.iter_mut().zip(&tape.bias_mask) {
                *g *= m;
            }
            grads.push(LayerGrad {
                weights: gw,
                bias: gb,
            });

            if l > 0 {
                let prev_mask = &pass.tapes[l - 1].grad_mask;
                let mut next = vec![0.0; rows * n_in];
                for r in 0..rows {
                    let d_row = &delta[r * n_out..(r + 1) * n_out];
                    let out = &mut next[r * n_in..(r + 1) * n_in];
                    for (i, &d) in d_row.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let w_row = &tape.w_eff[i * n_in..(i + 1) * n_in];
                        for (o, &w) in out.iter_mut().zip(w_row) {
                            *o += d * w;
                        }
                    }
                }
                for (v, m) in next.iter_mut().zip(prev_mask) {
                    *v *= m;
                }
                delta = next;
            }
        }
        grads.reverse();
        (loss, grads)
    }

    pub(crate) fn from_parts(
        dims: Vec<usize>,
        layers: Vec<Layer>,
        weight_bits: u32,
        activation_bits: u32,
        activation_scales: Vec<Option<f64>>,
    ) -> Result<Self> {
        let mut model = Self::zeros(&dims, weight_bits, activation_bits)?;
        if layers.len() != model.layers.len()
            || activation_scales.len() != model.activation_scales.len()
        {
            return Err(Error::InvalidModel(
                "layer count does not match dims".into(),
            ));
        }
        for (l, (have, want)) in layers.iter().zip(&model.layers).enumerate() {
            if have.in_dim != want.in_dim
                || have.out_dim != want.out_dim
                || have.weights.len() != want.weights.len()
                || have.bias.len() != want.bias.len()
            {
                return Err(Error::InvalidModel(format!(
                    "layer {l} shape does not match dims"
                )));
            }
            if have
                .weights
                .iter()
                .chain(&have.bias)
                .any(|v| !v.is_finite())
            {
                return Err(Error::InvalidModel(format!(
                    "layer {l} has non-finite parameters"
                )));
            }
        }
        model.layers = layers;
        for (l, s) in activation_scales.into_iter().enumerate() {
            if let Some(s) = s {
                model
                    .set_activation_scale(l, s)
                    .map_err(|e| Error::InvalidModel(format!("activation scale {l}: {e}")))?;
            }
        }
        Ok(model)
    }
}

/// Row-major `rows × in` times transposed `out × in` weights.
fn matmul_rows(x: &[f64], w: &[f64], rows: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let x_row = &x[r * n_in..(r + 1) * n_in];
        for i in 0..n_out {
            let w_row = &w[i * n_in..(i + 1) * n_in];
            out[r * n_out + i] = x_row.iter().zip(w_row).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Weighted mean cross-entropy over softmax(logits) and its logit gradient.
fn cross_entropy(logits: &[f64], labels: &[Label], class_weights: [f64; 2]) -> (f64, Vec<f64>) {
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (r, label) in labels.iter().enumerate() {
        let z = &logits[r * 2..r * 2 + 2];
        let m = z[0].max(z[1]);
        let e0 = (z[0] - m).exp();
        let e1 = (z[1] - m).exp();
        let log_sum = m + (e0 + e1).ln();
        let y = label.index();
        let w = class_weights[y];
        loss += w * (log_sum - z[y]);
        let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
        for c in 0..2 {
            let target = if c == y { 1.0 } else { 0.0 };
            grad[r * 2 + c] = w * (p[c] - target) / n;
        }
    }
    (loss / n, grad)
}

/// Running maximum of each hidden layer's ReLU output.
#[derive(Debug, Clone)]
pub(crate) struct ActivationObserver {
    running: Vec<Option<f64>>,
    /// `None` replaces the running value; `Some(d)` blends as `d·old + (1−d)·new`.
    decay: Option<f64>,
}

impl ActivationObserver {
    pub(crate) fn replace(layers: usize) -> Self {
        ActivationObserver {
            running: vec![None; layers],
            decay: None,
        }
    }

    pub(crate) fn ema(initial: Vec<Option<f64>>, decay: f64) -> Self {
        ActivationObserver {
            running: initial,
            decay: Some(decay),
        }
    }

    fn observe(&mut self, layer: usize, batch_max: f64) {
        let slot = &mut self.running[layer];
        *slot = Some(match (*slot, self.decay) {
            (Some(old), Some(d)) => d * old + (1.0 - d) * batch_max,
            (Some(old), None) => old.max(batch_max),
            (None, _) => batch_max,
        });
    }

    fn scale(&self, layer: usize, bits: u32) -> f64 {
        QuantSpec::calibrated(bits, false, self.running[layer].unwrap_or(0.0))
            .expect("activation bits validated at construction")
            .scale
    }

    pub(crate) fn scales(&self, bits: u32) -> Vec<Option<f64>> {
        (0..self.running.len())
            .map(|l| Some(self.scale(l, bits)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTape {
    input_eff: Vec<f64>,
    w_eff: Vec<f64>,
    w_mask: Vec<f64>,
    /// d(layer output)/d(pre-activation); empty for the output layer.
    grad_mask: Vec<f64>,
    bias_mask: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardPass {
    pub(crate) logits: Vec<f64>,
    tapes: Vec<LayerTape>,
}

/// Row-major mini-batch of feature rows and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<Label>,
    pub dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<Label>, dim: usize) -> Result<Self> {
        if inputs.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: inputs.len(),
            });
        }
        Ok(Batch {
            inputs,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file

pub const CHECKPOINT_FORMAT: &str = "canids-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<crate::ingest::AttackKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointLayer {
    in_dim: usize,
    out_dim: usize,
    weight_quant: QuantSpec,
    #[serde(default)]
    activation_quant: Option<QuantSpec>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    layer_dims: Vec<usize>,
    input_quant: QuantSpec,
    weight_bits: u32,
    activation_bits: u32,
    layers: Vec<CheckpointLayer>,
    metadata: TrainingMetadata,
}

impl FakeQuantMlp {
    /// Serialises the model as a versioned, pretty-printed JSON checkpoint.
    pub fn to_checkpoint_json(&self, metadata: &TrainingMetadata) -> Result<String> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| CheckpointLayer {
                in_dim: layer.in_dim,
                out_dim: layer.out_dim,
                weight_quant: self.weight_quant(l),
                activation_quant: if self.is_hidden(l) {
                    self.activation_quant(l)
                } else {
                    None
                },
                weights: layer.weights.clone(),
                bias: layer.bias.clone(),
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_dims: self.dims.clone(),
            input_quant: self.input_quant,
            weight_bits: self.weight_bits,
            activation_bits: self.activation_bits,
            layers,
            metadata: metadata.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        Ok(text)
    }

    /// Parses and validates a checkpoint.
    pub fn from_checkpoint_json(text: &str) -> Result<(Self, TrainingMetadata)> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidModel(format!(
                "unexpected format {:?}",
                file.format
            )));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported version {}",
                file.version
            )));
        }
        if file.input_quant != input_quant() {
            return Err(Error::InvalidModel(
                "input quantiser must be 8-bit unsigned, scale 1/255".into(),
            ));
        }
        let hidden = file.layer_dims.len().saturating_sub(2);
        let mut scales = Vec::with_capacity(hidden);
        let mut layers = Vec::with_capacity(file.layers.len());
        for (l, cl) in file.layers.iter().enumerate() {
            if l < hidden {
                scales.push(cl.activation_quant.map(|q| q.scale));
            }
            layers.push(Layer {
                in_dim: cl.in_dim,
                out_dim: cl.out_dim,
                weights: cl.weights.clone(),
                bias: cl.bias.clone(),
            });
        }
        let model = Self::from_parts(
            file.layer_dims,
            layers,
            file.weight_bits,
            file.activation_bits,
            scales,
        )?;
        for (l, cl) in file.layers.iter().enumerate() {
            if cl.weight_quant != model.weight_quant(l) {
                return Err(Error::InvalidModel(format!(
                    "layer {l} weight quantiser does not match its weights"
                )));
            }
            if let Some(aq) = cl.activation_quant {
                if aq.bits != model.activation_bits || aq.signed {
                    return Err(Error::InvalidModel(format!(
                        "layer {l} activation quantiser is inconsistent"
                    )));
                }
            }
        }
        Ok((model, file.metadata))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model() -> FakeQuantMlp {
        let mut m = FakeQuantMlp::zeros(&[2, 2], 4, 4).unwrap();
        m.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        m
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = FakeQuantMlp::zeros(&[40, 64, 32, 2], 4, 4).unwrap();
        let mut m = m;
        m.calibrate_scales(&vec![0.3; 40]).unwrap();
        assert_eq!(m.forward(&vec![0.7; 40]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(m.predict(&vec![0.7; 40]).unwrap(), Label::Normal);
    }

    #[test]
    fn identity_layer_returns_quantised_input() {
        let m = identity_model();
        let x = [0.3, 0.9];
        let spec = input_quant();
        let logits = m.forward(&x).unwrap();
        assert!((logits[0] - spec.fake_quant(0.3)).abs() < 1e-12);
        assert!((logits[1] - spec.fake_quant(0.9)).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let m = identity_model();
        assert!(matches!(
            m.forward(&[0.1, 0.2, 0.3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn uncalibrated_hidden_layer_errors() {
        let m = FakeQuantMlp::new(&[4, 3, 2], 4, 4, 1).unwrap();
        assert!(matches!(
            m.forward(&[0.0; 4]),
            Err(Error::NotCalibrated { layer: 0 })
        ));
    }

    #[test]
    fn weight_scale_from_max_abs() {
        let mut m = FakeQuantMlp::zeros(&[2, 2], 4, 4).unwrap();
        m.layers[0].weights = vec![1.0, -1.0, -1.0, 1.0];
        assert!((m.weight_quant(0).scale - 1.0 / 7.0).abs() < 1e-15);
        let z = FakeQuantMlp::zeros(&[2, 2], 4, 4).unwrap();
        assert_eq!(z.weight_quant(0).scale, crate::quant::SCALE_FLOOR);
    }

    #[test]
    fn constant_activations_calibrate_to_constant_over_qmax() {
        // Single hidden unit that passes feature 0 straight through.
        let mut m = FakeQuantMlp::zeros(&[1, 1, 2], 4, 4).unwrap();
        m.layers[0].weights = vec![1.0];
        m.calibrate_scales(&[0.6, 0.6, 0.6]).unwrap();
        // the activation is the fake-quantised input, 153/255
        let expected = (153.0 / 255.0) / 15.0;
        assert!((m.activation_scales()[0].unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(FakeQuantMlp::zeros(&[4], 4, 4).is_err());
        assert!(FakeQuantMlp::zeros(&[4, 0, 2], 4, 4).is_err());
        assert!(FakeQuantMlp::zeros(&[4, 3], 4, 4).is_err());
        assert!(FakeQuantMlp::zeros(&[4, 2], 1, 4).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = FakeQuantMlp::new(&[6, 5, 4, 2], 4, 4, 9).unwrap();
        m.layers[1].bias[2] = 0.123456789;
        m.calibrate_scales(&[0.5; 12]).unwrap();
        let meta = TrainingMetadata {
            seed: 9,
            epochs: 3,
            window: 1,
            ..Default::default()
        };
        let text = m.to_checkpoint_json(&meta).unwrap();
        let (back, meta_back) = FakeQuantMlp::from_checkpoint_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);
        assert_eq!(back.to_checkpoint_json(&meta).unwrap(), text);
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let mut m = FakeQuantMlp::new(&[3, 2, 2], 4, 4, 2).unwrap();
        m.calibrate_scales(&[0.5; 3]).unwrap();
        let text = m.to_checkpoint_json(&TrainingMetadata::default()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["layers"][0]["weights"].as_array_mut().unwrap().pop();
        assert!(FakeQuantMlp::from_checkpoint_json(&v.to_string()).is_err());

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["layers"][0]["weights"][0] = serde_json::json!(100.0);
        assert!(FakeQuantMlp::from_checkpoint_json(&v.to_string()).is_err());

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["layers"][0]["activation_quant"]["scale"] = serde_json::json!(-1.0);
        assert!(FakeQuantMlp::from_checkpoint_json(&v.to_string()).is_err());

        assert!(FakeQuantMlp::from_checkpoint_json("{}").is_err());
    }

    #[test]
    fn float_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        let mut checked = 0;
        for seed in 0..10 {
            let m = FakeQuantMlp::new(&[5, 7, 4, 2], 4, 4, seed).unwrap();
            let inputs: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let batch =
                Batch::new(inputs, vec![Label::Attack, Label::Normal, Label::Attack], 5).unwrap();
            let weights = [0.7, 1.9];
            let (loss, grads) = m.loss_and_grad(&batch, weights, Precision::Float).unwrap();
            for (l, grad) in grads.iter().enumerate() {
                for i in 0..m.layers[l].weights.len() {
                    let at = |d: f64| {
                        let mut p = m.clone();
                        p.layers[l].weights[i] += d;
                        p.loss(&batch, weights, Precision::Float).unwrap()
                    };
                    let (up, down) = (at(h), at(-h));
                    // One-sided slopes disagree across a ReLU kink.
                    if ((up - loss) - (loss - down)).abs() > 1e-9 {
                        continue;
                    }
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = grad.weights[i];
                    let rel =
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel <= 1e-4, "layer {l} weight {i}: {analytic} vs {numeric}");
                    checked += 1;
                }
                for o in 0..m.layers[l].bias.len() {
                    let mut p = m.clone();
                    p.layers[l].bias[o] += h;
                    let up = p.loss(&batch, weights, Precision::Float).unwrap();
                    p.layers[l].bias[o] -= 2.0 * h;
                    let down = p.loss(&batch, weights, Precision::Float).unwrap();
                    if ((up - loss) - (loss - down)).abs() > 1e-9 {
                        continue;
                    }
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = grad.bias[o];
                    assert!(
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
                            <= 1e-4
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 500);
    }
}
