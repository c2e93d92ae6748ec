//! Quantisation-aware training with Adam and the bit-width sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{confusion, metrics, ConfusionMatrix, Metrics};
use crate::ingest::{featurize, windows, CanFrame, Label};
use crate::model::{argmax_label, ActivationObserver, Batch, FakeQuantMlp, LayerGrad, Precision};

/// Labelled feature rows, one per window.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub dim: usize,
    /// Row-major `len × dim` normalised features.
    pub inputs: Vec<f64>,
    pub labels: Vec<Label>,
}

impl Samples {
    pub fn new(dim: usize) -> Self {
        Samples {
            dim,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Windows the stream and featurises every window.
    pub fn from_frames(frames: &[CanFrame], window: usize) -> Result<Self> {
        let mut out = Samples::new(window * crate::ingest::FEATURES_PER_FRAME);
        for w in windows(frames, window)? {
            out.inputs.extend(featurize(&w).values);
            out.labels.push(w.label());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64], label: Label) {
        assert_eq!(row.len(), self.dim);
        self.inputs.extend_from_slice(row);
        self.labels.push(label);
    }

    /// Chronological split: the first `fraction` of rows, then the rest.
    pub fn split(&self, fraction: f64) -> (Samples, Samples) {
        let cut = ((self.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        let head = Samples {
            dim: self.dim,
            inputs: self.inputs[..cut * self.dim].to_vec(),
            labels: self.labels[..cut].to_vec(),
        };
        let tail = Samples {
            dim: self.dim,
            inputs: self.inputs[cut * self.dim..].to_vec(),
            labels: self.labels[cut..].to_vec(),
        };
        (head, tail)
    }

    fn gather(&self, idx: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs,
            labels,
            dim: self.dim,
        }
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let attack = self.labels.iter().filter(|l| l.is_attack()).count();
        [self.len() - attack, attack]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Weight each class by its inverse frequency in the training set.
    pub class_weighting: bool,
    /// Activation observers run (EMA of batch maxima) for this many epochs,
    /// then the scales are frozen.
    pub observer_epochs: usize,
    pub observer_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            class_weighting: true,
            observer_epochs: 1,
            observer_decay: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("Adam epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.observer_decay) {
            return bad("observer decay must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Class-weighted loss over the training set, evaluated after the epoch.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FakeQuantMlp,
    pub trace: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn loss_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|e| e.loss).collect()
    }
}

fn class_weights(samples: &Samples, enabled: bool) -> [f64; 2] {
    if !enabled {
        return [1.0, 1.0];
    }
    let counts = samples.class_counts();
    let n = samples.len() as f64;
    let mut w = [1.0; 2];
    for c in 0..2 {
        if counts[c] > 0 {
            w[c] = n / (2.0 * counts[c] as f64);
        }
    }
    w
}

struct Adam {
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
    step: i32,
}

impl Adam {
    fn new(model: &FakeQuantMlp) -> Self {
        let zeros: Vec<LayerGrad> = model
            .layers
            .iter()
            .map(|l| LayerGrad {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut FakeQuantMlp, grads: &[LayerGrad], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        };
        for (l, layer) in model.layers.iter_mut().enumerate() {
            update(
                &mut layer.weights,
                &grads[l].weights,
                &mut self.m[l].weights,
                &mut self.v[l].weights,
            );
            update(
                &mut layer.bias,
                &grads[l].bias,
                &mut self.m[l].bias,
                &mut self.v[l].bias,
            );
        }
    }
}

/// Loss and accuracy of the frozen quantised model over `samples`.
pub fn evaluate_loss(
    model: &FakeQuantMlp,
    samples: &Samples,
    class_weights: [f64; 2],
) -> Result<(f64, f64)> {
    const CHUNK: usize = 1024;
    let mut weighted = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = samples.gather(chunk);
        let pass = model.forward_batch(&batch, Precision::Quantized, None)?;
        let (loss, _) = model.backward(&batch, &pass, class_weights);
        weighted += loss * chunk.len() as f64;
        for (r, label) in batch.labels.iter().enumerate() {
            if argmax_label(&pass.logits[r * 2..r * 2 + 2]) == *label {
                correct += 1;
            }
        }
    }
    let n = samples.len().max(1) as f64;
    Ok((weighted / n, correct as f64 / n))
}

/// Mini-batch QAT. Returns the trained model and a per-epoch trace.
pub fn train(
    mut model: FakeQuantMlp,
    samples: &Samples,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if samples.dim != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: samples.dim,
        });
    }

    let weights = class_weights(samples, config.class_weighting);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model);
    let mut observer = ActivationObserver::ema(
        model
            .activation_scales()
            .iter()
            .map(|s| s.map(|s| s * act_qmax(&model)))
            .collect(),
        config.observer_decay,
    );
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let observing = epoch <= config.observer_epochs;
        for chunk in order.chunks(config.batch_size) {
            let batch = samples.gather(chunk);
            let pass = if observing {
                let pass =
                    model.forward_batch(&batch, Precision::Quantized, Some(&mut observer))?;
                for (l, s) in observer
                    .scales(model.activation_bits())
                    .into_iter()
                    .enumerate()
                {
                    model.set_activation_scale(l, s.expect("observer covers every layer"))?;
                }
                pass
            } else {
                model.forward_batch(&batch, Precision::Quantized, None)?
            };
            let (loss, grads) = model.backward(&batch, &pass, weights);
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { epoch });
            }
            adam.apply(&mut model, &grads, config);
        }
        if !model.layers.iter().all(|l| l.is_finite()) {
            return Err(Error::DivergenceDetected { epoch });
        }

        let (loss, accuracy) = evaluate_loss(&model, samples, weights)?;
        if !loss.is_finite() {
            return Err(Error::DivergenceDetected { epoch });
        }
        trace.push(EpochStats {
            epoch,
            loss,
            accuracy,
        });
    }

    Ok(TrainOutcome { model, trace })
}

fn act_qmax(model: &FakeQuantMlp) -> f64 {
    ((1u64 << model.activation_bits()) - 1) as f64
}

/// Predictions of the fake-quant model over every row.
pub fn predict_all(model: &FakeQuantMlp, samples: &Samples) -> Result<Vec<Label>> {
    (0..samples.len())
        .map(|i| model.predict(samples.row(i)))
        .collect()
}

/// Holdout confusion matrix and metrics of a fake-quant model.
pub fn holdout_metrics(
    model: &FakeQuantMlp,
    holdout: &Samples,
) -> Result<(ConfusionMatrix, Metrics)> {
    let preds = predict_all(model, holdout)?;
    let cm = confusion(&preds, &holdout.labels)?;
    Ok((cm, metrics(&cm)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseRow {
    pub bits: u32,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub final_loss: f64,
}

/// Trains one model per bit width (weights and activations share the
/// width; inputs stay 8-bit) and scores each on the holdout set.
/// Rows come back sorted by bit width.
pub fn dse_sweep(
    bit_widths: &[u32],
    dims: &[usize],
    train_set: &Samples,
    holdout: &Samples,
    config: &TrainConfig,
) -> Result<Vec<DseRow>> {
    if bit_widths.is_empty() {
        return Err(Error::InvalidConfig(
            "bit-width sweep needs at least one width".into(),
        ));
    }
    let mut bits: Vec<u32> = bit_widths.to_vec();
    bits.sort_unstable();
    bits.dedup();
    bits.into_iter()
        .map(|b| {
            let model = FakeQuantMlp::new(dims, b, b, config.seed)?;
            let outcome = train(model, train_set, config)?;
            let (cm, m) = holdout_metrics(&outcome.model, holdout)?;
            Ok(DseRow {
                bits: b,
                confusion: cm,
                metrics: m,
                final_loss: outcome.trace.last().map_or(f64::NAN, |e| e.loss),
            })
        })
        .collect()
}
