//! Detection metrics, the end-to-end evaluation run and the latency benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{featurize, CanFrame, Label, WindowBuffer};
use crate::int_model::IntMlp;
use crate::reference::{self, AccuracyRow, LatencyRow};

/// Binary confusion matrix with Attack as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Attack, Label::Attack) => self.tp += 1,
            (Label::Attack, Label::Normal) => self.fp += 1,
            (Label::Normal, Label::Normal) => self.tn += 1,
            (Label::Normal, Label::Attack) => self.fn_ += 1,
        }
    }
}

pub fn confusion(predictions: &[Label], truths: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        cm.record(p, t);
    }
    Ok(cm)
}

/// Which metrics had an empty denominator (and were reported as 0).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedFlags {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub fnr: bool,
}

impl UndefinedFlags {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1 || self.fnr
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fnr: f64,
    pub undefined: UndefinedFlags,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let (precision, p_undef) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, r_undef) = ratio(cm.tp, cm.tp + cm.fn_);
    let (fnr, fnr_undef) = ratio(cm.fn_, cm.fn_ + cm.tp);
    let (f1, f1_undef) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    Metrics {
        precision,
        recall,
        f1,
        fnr,
        undefined: UndefinedFlags {
            precision: p_undef,
            recall: r_undef,
            f1: f1_undef,
            fnr: fnr_undef,
        },
    }
}

/// Runs the window → featurize → integer inference path over a stream and
/// returns one verdict per emitted window.
pub fn classify_stream(
    model: &IntMlp,
    frames: &[CanFrame],
    window: usize,
) -> Result<Vec<(Label, Label)>> {
    let mut buffer = WindowBuffer::new(window)?;
    let mut out = Vec::with_capacity(frames.len().saturating_sub(window - 1));
    for frame in frames {
        if let Some(w) = buffer.push(*frame) {
            let fv = featurize(&w);
            let verdict = model.infer(&fv.codes)?;
            out.push((verdict.label, w.label()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attack: Option<crate::ingest::AttackKind>,
    pub window: usize,
    pub frames: usize,
    pub predictions: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Evaluates the lowered model over the windows of `frames`. With
/// `holdout_fraction` < 1 only the chronologically last fraction of the
/// windows is scored.
pub fn evaluate(
    model: &IntMlp,
    frames: &[CanFrame],
    window: usize,
    holdout_fraction: f64,
    attack: Option<crate::ingest::AttackKind>,
) -> Result<EvalReport> {
    if !(holdout_fraction > 0.0 && holdout_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction {holdout_fraction} must lie in (0, 1]"
        )));
    }
    let verdicts = classify_stream(model, frames, window)?;
    let skip = ((verdicts.len() as f64) * (1.0 - holdout_fraction)).round() as usize;
    let (preds, truths): (Vec<Label>, Vec<Label>) = verdicts[skip..].iter().copied().unzip();
    let cm = confusion(&preds, &truths)?;
    Ok(EvalReport {
        attack,
        window,
        frames: frames.len(),
        predictions: preds.len(),
        confusion: cm,
        metrics: metrics(&cm),
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl EvalReport {
    /// Human-readable table: our row first, then the published reference rows.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let attack_name = self.attack.map_or("-", |a| a.name());
        out.push_str(&format!(
            "Accuracy metrics (%), window={} frames={} predictions={}\n",
            self.window, self.frames, self.predictions
        ));
        out.push_str(&format!(
            "{:<8} {:<28} {:>9} {:>9} {:>9} {:>9}\n",
            "Attack", "Model", "Precision", "Recall", "F1", "FNR"
        ));
        let m = &self.metrics;
        let flag = |v: f64, undef: bool| if undef { "undef".to_string() } else { pct(v) };
        out.push_str(&format!(
            "{:<8} {:<28} {:>9} {:>9} {:>9} {:>9}\n",
            attack_name,
            "this run (integer model)",
            flag(m.precision, m.undefined.precision),
            flag(m.recall, m.undefined.recall),
            flag(m.f1, m.undefined.f1),
            flag(m.fnr, m.undefined.fnr),
        ));
        let c = &self.confusion;
        out.push_str(&format!(
            "{:<8} {:<28} tp={} fp={} tn={} fn={}\n",
            "", "confusion", c.tp, c.fp, c.tn, c.fn_
        ));
        for row in reference::accuracy_rows() {
            if self.attack.is_some_and(|a| a != row.attack) {
                continue;
            }
            out.push_str(&render_reference_row(row));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = serde_json::json!({
            "schema": "canids-eval/1",
            "result": self,
            "reference": reference::accuracy_rows()
                .iter()
                .filter(|r| self.attack.is_none_or(|a| a == r.attack))
                .collect::<Vec<_>>(),
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,attack,model,precision,recall,f1,fnr,source\n");
        let m = &self.metrics;
        out.push_str(&format!(
            "result,{},integer model,{},{},{},{},this run\n",
            self.attack.map_or("", |a| a.name()),
            pct(m.precision),
            pct(m.recall),
            pct(m.f1),
            pct(m.fnr)
        ));
        for r in reference::accuracy_rows() {
            if self.attack.is_some_and(|a| a != r.attack) {
                continue;
            }
            out.push_str(&format!(
                "reference,{},{},{},{},{},{},{}\n",
                r.attack.name(),
                r.model,
                r.precision,
                r.recall,
                r.f1,
                r.fnr.map_or(String::new(), |v| v.to_string()),
                r.source
            ));
        }
        out
    }
}

fn render_reference_row(row: &AccuracyRow) -> String {
    format!(
        "{:<8} {:<28} {:>9} {:>9} {:>9} {:>9}\n",
        row.attack.name(),
        format!("[reference] {}", row.model),
        row.precision,
        row.recall,
        row.f1,
        row.fnr.map_or("-".to_string(), |v| v.to_string()),
    )
}

/// Per-message latency summary in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    pub fn from_nanos(samples: &mut [u64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        samples.sort_unstable();
        let n = samples.len();
        let at = |q: f64| samples[((n as f64 * q).ceil() as usize).clamp(1, n) - 1] as f64 / 1e3;
        LatencyStats {
            mean_us: samples.iter().map(|&v| v as f64).sum::<f64>() / n as f64 / 1e3,
            median_us: at(0.5),
            p99_us: at(0.99),
            max_us: samples[n - 1] as f64 / 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub messages: usize,
    pub windows: usize,
    pub wall_seconds: f64,
    /// Messages per second over the whole run.
    pub throughput: f64,
    /// Arrival to verdict, per message.
    pub latency: LatencyStats,
    /// Window update + featurisation share of the per-message time.
    pub featurize_mean_us: f64,
    pub inference_mean_us: f64,
    pub attack_verdicts: usize,
    /// Set when the run used several contexts (throughput mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

/// Single-context benchmark over the full software path: window update,
/// featurisation and integer inference, timed per message.
pub fn bench(model: &IntMlp, frames: &[CanFrame], window: usize) -> Result<BenchResult> {
    let mut buffer = WindowBuffer::new(window)?;
    let mut latencies = Vec::with_capacity(frames.len());
    let mut featurize_ns = 0u64;
    let mut infer_ns = 0u64;
    let mut windows = 0usize;
    let mut attacks = 0usize;

    let start = Instant::now();
    for frame in frames {
        let t0 = Instant::now();
        let fv = buffer.push(*frame).map(|w| featurize(&w));
        let t1 = Instant::now();
        if let Some(fv) = fv {
            let verdict = model.infer(&fv.codes)?;
            windows += 1;
            attacks += verdict.label.is_attack() as usize;
        }
        let t2 = Instant::now();
        featurize_ns += (t1 - t0).as_nanos() as u64;
        infer_ns += (t2 - t1).as_nanos() as u64;
        latencies.push((t2 - t0).as_nanos() as u64);
    }
    let wall = start.elapsed().as_secs_f64();

    let n = frames.len().max(1) as f64;
    Ok(BenchResult {
        messages: frames.len(),
        windows,
        wall_seconds: wall,
        throughput: if wall > 0.0 {
            frames.len() as f64 / wall
        } else {
            0.0
        },
        latency: LatencyStats::from_nanos(&mut latencies),
        featurize_mean_us: featurize_ns as f64 / n / 1e3,
        inference_mean_us: infer_ns as f64 / n / 1e3,
        attack_verdicts: attacks,
        threads: None,
    })
}

/// Throughput mode: the stream is cut into `threads` contiguous shards, each
/// run by its own context with its own window buffer. Latency figures are
/// merged across shards.
pub fn bench_parallel(
    model: &IntMlp,
    frames: &[CanFrame],
    window: usize,
    threads: usize,
) -> Result<BenchResult> {
    let threads = threads.max(1);
    let shard = frames.len().div_ceil(threads).max(1);
    let start = Instant::now();
    let results: Vec<Result<BenchResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = frames
            .chunks(shard)
            .map(|chunk| scope.spawn(move || bench(model, chunk, window)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench shard panicked"))
            .collect()
    });
    let wall = start.elapsed().as_secs_f64();
    let results: Vec<BenchResult> = results.into_iter().collect::<Result<_>>()?;

    let n = frames.len().max(1) as f64;
    let weighted = |f: fn(&BenchResult) -> f64| {
        results
            .iter()
            .map(|r| f(r) * r.messages as f64)
            .sum::<f64>()
            / n
    };
    Ok(BenchResult {
        messages: frames.len(),
        windows: results.iter().map(|r| r.windows).sum(),
        wall_seconds: wall,
        throughput: if wall > 0.0 {
            frames.len() as f64 / wall
        } else {
            0.0
        },
        latency: LatencyStats {
            mean_us: weighted(|r| r.latency.mean_us),
            median_us: weighted(|r| r.latency.median_us),
            p99_us: results.iter().map(|r| r.latency.p99_us).fold(0.0, f64::max),
            max_us: results.iter().map(|r| r.latency.max_us).fold(0.0, f64::max),
        },
        featurize_mean_us: weighted(|r| r.featurize_mean_us),
        inference_mean_us: weighted(|r| r.inference_mean_us),
        attack_verdicts: results.iter().map(|r| r.attack_verdicts).sum(),
        threads: Some(threads),
    })
}

impl BenchResult {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        match self.threads {
            Some(t) => out.push_str(&format!("Throughput mode ({t} contexts)\n")),
            None => out.push_str("Per-message latency (single context, arrival to verdict)\n"),
        }
        out.push_str(&format!(
            "messages={} windows={} wall={:.3}s throughput={:.0} msg/s\n",
            self.messages, self.windows, self.wall_seconds, self.throughput
        ));
        out.push_str(&format!(
            "latency mean={:.3}us median={:.3}us p99={:.3}us max={:.3}us (featurize {:.3}us, inference {:.3}us)\n",
            self.latency.mean_us,
            self.latency.median_us,
            self.latency.p99_us,
            self.latency.max_us,
            self.featurize_mean_us,
            self.inference_mean_us
        ));
        out.push_str(&format!(
            "{:<28} {:>12} {:<18} {}\n",
            "Model", "Latency", "Frames", "Platform"
        ));
        out.push_str(&format!(
            "{:<28} {:>12} {:<18} {}\n",
            "this run (software)",
            format!("{:.4} ms", self.latency.mean_us / 1e3),
            "per CAN frame",
            "host CPU"
        ));
        for row in reference::latency_rows() {
            out.push_str(&render_latency_row(row));
        }
        out.push_str(&format!(
            "[reference] FPGA QMLP vs MTH-IDS speed-up: {:.1}x; FPGA line-rate claim: > {} msg/s (different platform, not a target of equal meaning)\n",
            reference::fpga_speedup_over_mth_ids(),
            reference::FPGA_LINE_RATE_MSGS
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = serde_json::json!({
            "schema": "canids-bench/1",
            "result": self,
            "reference": {
                "latency": reference::latency_rows(),
                "fpga_line_rate_msgs_per_s": reference::FPGA_LINE_RATE_MSGS,
                "fpga_speedup_over_mth_ids": reference::fpga_speedup_over_mth_ids(),
            },
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,model,latency_ms,frames,platform\n");
        out.push_str(&format!(
            "result,software integer model,{},per CAN frame,host CPU\n",
            self.latency.mean_us / 1e3
        ));
        for r in reference::latency_rows() {
            out.push_str(&format!(
                "reference,{},{},{},{}\n",
                r.model, r.latency_ms, r.frames, r.platform
            ));
        }
        out
    }
}

fn render_latency_row(row: &LatencyRow) -> String {
    format!(
        "{:<28} {:>12} {:<18} {}\n",
        format!("[reference] {}", row.model),
        format!("{} ms", row.latency_ms),
        row.frames,
        row.platform
    )
}
