//! Integer-only model: integer weights with per-neuron threshold tables on
//! hidden layers and integer logits on the output layer.
//!
//! Lowering folds each hidden neuron's bias, scales and activation quantiser
//! into a sorted list of accumulator thresholds. At run time a hidden neuron's
//! output code is the number of thresholds at or below its accumulator, so
//! no floating-point work happens anywhere on the inference path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{AttackKind, Label};
use crate::model::{argmax_label, bias_quant, requantize, FakeQuantMlp};
use crate::quant::QuantSpec;

/// Widest activation quantiser we lower (threshold tables grow as 2^bits).
pub const MAX_LOWERED_ACT_BITS: u32 = 8;
/// Accumulator width used by [`IntMlp::infer`].
pub const ACCUMULATOR_BITS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerOp {
    Hidden {
        /// `out_dim` tables of `2^act_bits − 1` non-decreasing thresholds.
        thresholds: Vec<Vec<i64>>,
    },
    Output {
        bias: Vec<i64>,
        /// Real value of one logit unit.
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major weight codes.
    pub weights: Vec<i32>,
    #[serde(flatten)]
    pub op: LayerOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntMlp {
    pub dims: Vec<usize>,
    pub weight_bits: u32,
    pub activation_bits: u32,
    /// Bit width of the unsigned input codes.
    pub input_bits: u32,
    pub layers: Vec<IntLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub label: Label,
    pub logits: [i64; 2],
}

/// Inclusive accumulator range of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulatorBound {
    pub min: i64,
    pub max: i64,
}

impl AccumulatorBound {
    /// Bits of a signed integer that holds every value in the range.
    pub fn bits_required(&self) -> u32 {
        let need = |v: i64| {
            if v < 0 {
                65 - (!v).leading_zeros()
            } else {
                65 - v.leading_zeros()
            }
        };
        need(self.min).max(need(self.max))
    }
}

/// Range of `Σ w·x (+ bias)` for inputs in `[lo, hi]`.
pub fn row_bounds(weights: &[i32], lo: i64, hi: i64, bias: i64) -> (i128, i128) {
    let mut min = bias as i128;
    let mut max = bias as i128;
    for &w in weights {
        let a = w as i128 * lo as i128;
        let b = w as i128 * hi as i128;
        min += a.min(b);
        max += a.max(b);
    }
    (min, max)
}

/// Smallest accumulator in `[lo, hi]` whose code reaches `level`, or `hi + 1`.
/// `code` must be non-decreasing.
fn first_reaching(lo: i64, hi: i64, level: i64, code: impl Fn(i64) -> i64) -> i64 {
    let (mut a, mut b) = (lo, hi + 1);
    while a < b {
        let mid = a + (b - a) / 2;
        if code(mid) >= level {
            b = mid;
        } else {
            a = mid + 1;
        }
    }
    a
}

/// Lowers a trained, calibrated fake-quant model.
pub fn lower(model: &FakeQuantMlp) -> Result<IntMlp> {
    for (l, s) in model.activation_scales().iter().enumerate() {
        if s.is_none() {
            return Err(Error::NotCalibrated { layer: l });
        }
    }
    if model.activation_bits() > MAX_LOWERED_ACT_BITS {
        return Err(Error::InvalidConfig(format!(
            "cannot lower {}-bit activations (max {MAX_LOWERED_ACT_BITS})",
            model.activation_bits()
        )));
    }

    let input_quant = model.input_quant();
    let mut in_range = (input_quant.qmin(), input_quant.qmax());
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let weights: Vec<i32> = model
            .weight_codes(l)
            .into_iter()
            .map(|c| c as i32)
            .collect();
        let combined = model.weight_quant(l).scale * model.input_scale_of(l)?;
        if !(combined > 0.0 && combined.is_finite()) {
            return Err(Error::NonMonotone {
                layer: l,
                neuron: 0,
            });
        }

        let op = if model.is_hidden(l) {
            let act = model
                .activation_quant(l)
                .ok_or(Error::NotCalibrated { layer: l })?;
            let levels = act.levels();
            let mut thresholds = Vec::with_capacity(layer.out_dim);
            for i in 0..layer.out_dim {
                let row = &weights[i * layer.in_dim..(i + 1) * layer.in_dim];
                let (lo, hi) = row_bounds(row, in_range.0, in_range.1, 0);
                let (lo, hi) = (lo as i64, hi as i64);
                let bias = layer.bias[i];
                let code = |acc: i64| requantize(acc, combined, bias, &act);
                if code(lo) > code(hi) {
                    return Err(Error::NonMonotone {
                        layer: l,
                        neuron: i,
                    });
                }
                thresholds.push(
                    (1..levels)
                        .map(|k| first_reaching(lo, hi, k, code))
                        .collect(),
                );
            }
            in_range = (act.qmin(), act.qmax());
            LayerOp::Hidden { thresholds }
        } else {
            let bspec = bias_quant(combined);
            LayerOp::Output {
                bias: layer.bias.iter().map(|&b| bspec.quantize(b)).collect(),
                scale: combined,
            }
        };
        layers.push(IntLayer {
            in_dim: layer.in_dim,
            out_dim: layer.out_dim,
            weights,
            op,
        });
    }

    Ok(IntMlp {
        dims: model.dims().to_vec(),
        weight_bits: model.weight_bits(),
        activation_bits: model.activation_bits(),
        input_bits: input_quant.bits,
        layers,
    })
}

impl IntMlp {
    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Integer forward pass. Ties between the two logits resolve to Normal.
    pub fn infer(&self, input: &[u8]) -> Result<Verdict> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let mut x: Vec<i64> = input.iter().map(|&c| c as i64).collect();
        for layer in &self.layers {
            let acc = layer
                .weights
                .chunks_exact(layer.in_dim)
                .map(|row| row.iter().zip(&x).map(|(&w, &v)| w as i64 * v).sum::<i64>());
            match &layer.op {
                LayerOp::Hidden { thresholds } => {
                    x = acc
                        .zip(thresholds)
                        .map(|(a, t)| t.partition_point(|&th| th <= a) as i64)
                        .collect();
                }
                LayerOp::Output { bias, .. } => {
                    let logits: Vec<i64> = acc.zip(bias).map(|(a, b)| a + b).collect();
                    let label = if logits[1] > logits[0] {
                        Label::Attack
                    } else {
                        Label::Normal
                    };
                    return Ok(Verdict {
                        label,
                        logits: [logits[0], logits[1]],
                    });
                }
            }
        }
        unreachable!("validated models end in an output layer")
    }

    pub fn output_scale(&self) -> f64 {
        match &self.layers.last().expect("non-empty").op {
            LayerOp::Output { scale, .. } => *scale,
            LayerOp::Hidden { .. } => unreachable!("validated models end in an output layer"),
        }
    }

    /// Accumulator range of each layer over every reachable input.
    pub fn accumulator_bounds(&self) -> Vec<AccumulatorBound> {
        let mut in_range = (0i64, (1i64 << self.input_bits) - 1);
        let act_max = (1i64 << self.activation_bits) - 1;
        self.layers
            .iter()
            .map(|layer| {
                let mut min = i128::MAX;
                let mut max = i128::MIN;
                for (i, row) in layer.weights.chunks_exact(layer.in_dim).enumerate() {
                    let bias = match &layer.op {
                        LayerOp::Output { bias, .. } => bias[i],
                        LayerOp::Hidden { .. } => 0,
                    };
                    let (lo, hi) = row_bounds(row, in_range.0, in_range.1, bias);
                    min = min.min(lo);
                    max = max.max(hi);
                }
                in_range = (0, act_max);
                AccumulatorBound {
                    min: min.clamp(i64::MIN as i128, i64::MAX as i128) as i64,
                    max: max.clamp(i64::MIN as i128, i64::MAX as i128) as i64,
                }
            })
            .collect()
    }

    /// Structural checks applied to every model loaded from disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if self.dims.len() < 2 || self.layers.len() != self.dims.len() - 1 {
            return bad("layer count does not match dims".into());
        }
        if *self.dims.last().unwrap() != 2 {
            return bad("output layer must have 2 logits".into());
        }
        if !(2..=MAX_LOWERED_ACT_BITS).contains(&self.activation_bits) || self.input_bits != 8 {
            return bad("unsupported activation or input width".into());
        }
        let wspec = QuantSpec::new(self.weight_bits, true, 1.0)
            .map_err(|e| Error::InvalidModel(e.to_string()))?;
        let levels = 1usize << self.activation_bits;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.in_dim != self.dims[l] || layer.out_dim != self.dims[l + 1] {
                return bad(format!("layer {l} shape does not match dims"));
            }
            if layer.weights.len() != layer.in_dim * layer.out_dim {
                return bad(format!("layer {l} has {} weights", layer.weights.len()));
            }
            if layer
                .weights
                .iter()
                .any(|&w| (w as i64) < wspec.qmin() || (w as i64) > wspec.qmax())
            {
                return bad(format!(
                    "layer {l} has weights outside the {}-bit range",
                    self.weight_bits
                ));
            }
            let last = l + 1 == self.layers.len();
            match (&layer.op, last) {
                (LayerOp::Hidden { thresholds }, false) => {
                    if thresholds.len() != layer.out_dim {
                        return bad(format!(
                            "layer {l} has {} threshold tables",
                            thresholds.len()
                        ));
                    }
                    for (i, t) in thresholds.iter().enumerate() {
                        if t.len() != levels - 1 {
                            return bad(format!("layer {l} neuron {i} has {} thresholds", t.len()));
                        }
                        if t.windows(2).any(|p| p[0] > p[1]) {
                            return bad(format!("layer {l} neuron {i} thresholds are not sorted"));
                        }
                    }
                }
                (LayerOp::Output { bias, scale }, true) => {
                    if bias.len() != layer.out_dim {
                        return bad(format!("output bias has {} entries", bias.len()));
                    }
                    if !(scale.is_finite() && *scale > 0.0) {
                        return bad("output scale must be positive".into());
                    }
                }
                _ => return bad(format!("layer {l} has the wrong kind")),
            }
        }
        Ok(())
    }
}

/// Input on which the two paths disagree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub input: Vec<u8>,
    pub integer: Label,
    pub reference: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub mismatches: usize,
    pub witness: Option<Witness>,
    /// Largest |reference logit − integer logit × scale|.
    pub max_logit_discrepancy: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Compares integer inference with the fake-quant forward on `samples`
/// uniformly random 8-bit input vectors.
pub fn verify_equivalence(
    model: &FakeQuantMlp,
    int_model: &IntMlp,
    samples: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = int_model.output_scale();
    let in_scale = model.input_quant().scale;
    let mut report = EquivalenceReport {
        samples,
        mismatches: 0,
        witness: None,
        max_logit_discrepancy: 0.0,
    };
    let mut codes = vec![0u8; int_model.input_dim()];
    for _ in 0..samples {
        rng.fill(codes.as_mut_slice());
        let x: Vec<f64> = codes.iter().map(|&c| c as f64 * in_scale).collect();
        let reference = model.forward(&x)?;
        let verdict = int_model.infer(&codes)?;
        for (r, i) in reference.iter().zip(verdict.logits) {
            report.max_logit_discrepancy = report
                .max_logit_discrepancy
                .max((r - i as f64 * scale).abs());
        }
        let expected = argmax_label(&reference);
        if expected != verdict.label {
            report.mismatches += 1;
            if report.witness.is_none() {
                report.witness = Some(Witness {
                    input: codes.clone(),
                    integer: verdict.label,
                    reference: expected,
                });
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Lowered-model file

pub const LOWERED_FORMAT: &str = "canids-lowered";
pub const LOWERED_VERSION: u32 = 1;

/// A lowered model plus the provenance stored with it on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoweredModel {
    pub format: String,
    pub version: u32,
    pub window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackKind>,
    pub source_checkpoint_sha256: String,
    pub model: IntMlp,
}

impl LoweredModel {
    pub fn new(
        model: IntMlp,
        window: usize,
        attack: Option<AttackKind>,
        checkpoint_text: &str,
    ) -> Self {
        LoweredModel {
            format: LOWERED_FORMAT.into(),
            version: LOWERED_VERSION,
            window,
            attack,
            source_checkpoint_sha256: sha256_hex(checkpoint_text.as_bytes()),
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lowered: LoweredModel = serde_json::from_str(text)?;
        if lowered.format != LOWERED_FORMAT {
            return Err(Error::InvalidModel(format!(
                "unexpected format {:?}",
                lowered.format
            )));
        }
        if lowered.version != LOWERED_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported version {}",
                lowered.version
            )));
        }
        if lowered.window * crate::ingest::FEATURES_PER_FRAME != lowered.model.input_dim() {
            return Err(Error::InvalidModel(format!(
                "window {} does not match input width {}",
                lowered.window,
                lowered.model.input_dim()
            )));
        }
        lowered.model.validate()?;
        Ok(lowered)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
