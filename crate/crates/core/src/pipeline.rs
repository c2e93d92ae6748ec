//! Two-stage streaming replay: an ingestion context feeds frames through a
//! bounded FIFO to an inference context that emits one verdict per frame.

use std::io::Write;
use std::sync::mpsc::{sync_channel, TrySendError};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{featurize, CanFrame, Label, WindowBuffer};
use crate::int_model::IntMlp;

pub const DEFAULT_QUEUE_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    /// Playback speed relative to the capture; 0 replays as fast as possible.
    pub speed: f64,
    pub queue_depth: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            speed: 0.0,
            queue_depth: DEFAULT_QUEUE_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerdictRecord {
    pub index: usize,
    pub timestamp: f64,
    pub can_id: u16,
    /// Label of this frame.
    pub truth: Label,
    /// Label of the window ending at this frame (Attack if any member is).
    pub window_truth: Option<Label>,
    /// `None` while the window is still filling.
    pub verdict: Option<Label>,
    /// Enqueue to verdict, microseconds.
    pub latency_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub records: Vec<VerdictRecord>,
    /// Times the producer found the queue full and had to block.
    pub stalls: u64,
}

impl ReplayReport {
    /// Verdicts of every complete window, in order.
    pub fn verdicts(&self) -> Vec<Label> {
        self.records.iter().filter_map(|r| r.verdict).collect()
    }

    pub fn mean_latency_us(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.latency_us).sum::<f64>() / self.records.len() as f64
    }

    /// Index of the first frame that produced an Attack verdict.
    pub fn first_alarm(&self) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.verdict == Some(Label::Attack))
            .map(|r| r.index)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(
            out,
            "index,timestamp,can_id,truth,window_truth,verdict,latency_us"
        )?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:04X},{},{},{},{:.3}",
                r.index,
                r.timestamp,
                r.can_id,
                r.truth,
                r.window_truth.map_or("-".to_string(), |v| v.to_string()),
                r.verdict.map_or("-".to_string(), |v| v.to_string()),
                r.latency_us
            )?;
        }
        Ok(())
    }
}

struct Arrival {
    index: usize,
    frame: CanFrame,
    at: Instant,
}

pub fn replay(
    model: &IntMlp,
    frames: &[CanFrame],
    window: usize,
    config: &ReplayConfig,
) -> Result<ReplayReport> {
    if !(config.speed.is_finite() && config.speed >= 0.0) {
        return Err(Error::InvalidConfig(
            "replay speed must be finite and non-negative".into(),
        ));
    }
    if config.queue_depth == 0 {
        return Err(Error::InvalidConfig("queue depth must be positive".into()));
    }
    let mut buffer = WindowBuffer::new(window)?;
    let (tx, rx) = sync_channel::<Arrival>(config.queue_depth);

    thread::scope(|scope| {
        let producer = scope.spawn(move || {
            let mut stalls = 0u64;
            let origin = Instant::now();
            let t0 = frames.first().map_or(0.0, |f| f.timestamp);
            for (index, frame) in frames.iter().enumerate() {
                if config.speed > 0.0 {
                    let due = origin
                        + Duration::from_secs_f64(((frame.timestamp - t0) / config.speed).max(0.0));
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        thread::sleep(wait);
                    }
                }
                let item = Arrival {
                    index,
                    frame: *frame,
                    at: Instant::now(),
                };
                match tx.try_send(item) {
                    Ok(()) => {}
                    Err(TrySendError::Full(item)) => {
                        stalls += 1;
                        if tx.send(item).is_err() {
                            break;
                        }
                    }
                    Err(TrySendError::Disconnected(_)) => break,
                }
            }
            stalls
        });

        let mut records = Vec::with_capacity(frames.len());
        for arrival in rx {
            let (window_truth, verdict) = match buffer.push(arrival.frame) {
                Some(w) => (
                    Some(w.label()),
                    Some(model.infer(&featurize(&w).codes)?.label),
                ),
                None => (None, None),
            };
            records.push(VerdictRecord {
                index: arrival.index,
                timestamp: arrival.frame.timestamp,
                can_id: arrival.frame.can_id,
                truth: arrival.frame.label,
                window_truth,
                verdict,
                latency_us: arrival.at.elapsed().as_secs_f64() * 1e6,
            });
        }
        let stalls = producer.join().expect("replay producer panicked");
        Ok(ReplayReport { records, stalls })
    })
}
