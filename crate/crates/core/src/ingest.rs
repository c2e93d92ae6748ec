//! CAN log ingestion: record parsing, the FIFO window buffer and the
//! feature encoding fed to the models.
//!
//! Logs use the Car Hacking dataset CSV layout:
//!
//! ```text
//! timestamp,CAN-ID(hex),DLC,byte0,...,byte{DLC-1},flag
//! 1478198376.389427,0316,8,05,21,68,09,21,21,00,6F,R
//! ```
//!
//! where the flag is `R` for regular traffic and `T` for injected frames.

use std::collections::VecDeque;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantSpec;

/// Largest standard (11-bit) CAN identifier.
pub const MAX_CAN_ID: u16 = 0x7FF;
/// Features emitted per frame: id, dlc and eight payload bytes.
pub const FEATURES_PER_FRAME: usize = 10;
/// Default FIFO window length.
pub const DEFAULT_WINDOW: usize = 4;

/// Ground-truth label of a frame or window. `Attack` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Attack,
}

impl Label {
    pub fn is_attack(self) -> bool {
        self == Label::Attack
    }

    /// Dataset flag character.
    pub fn flag(self) -> char {
        match self {
            Label::Normal => 'R',
            Label::Attack => 'T',
        }
    }

    /// Class index used by the two-logit models (0 = Normal, 1 = Attack).
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Attack => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "Normal",
            Label::Attack => "Attack",
        })
    }
}

/// One timestamped CAN 2.0A frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanFrame {
    /// Seconds; non-decreasing within a log.
    pub timestamp: f64,
    pub can_id: u16,
    pub dlc: u8,
    /// Payload, zero past `dlc`.
    pub data: [u8; 8],
    pub label: Label,
}

impl CanFrame {
    /// Builds a frame, checking the 11-bit id and DLC limits and zeroing the
    /// unused payload tail.
    pub fn new(timestamp: f64, can_id: u16, payload: &[u8], label: Label) -> Result<Self> {
        if can_id > MAX_CAN_ID {
            return Err(malformed(0, format!("CAN id {can_id:#x} exceeds 0x7FF")));
        }
        if payload.len() > 8 {
            return Err(malformed(0, format!("DLC {} exceeds 8", payload.len())));
        }
        let mut data = [0u8; 8];
        data[..payload.len()].copy_from_slice(payload);
        Ok(CanFrame {
            timestamp,
            can_id,
            dlc: payload.len() as u8,
            data,
            label,
        })
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..self.dlc as usize]
    }

    /// Renders the frame as one log line (no trailing newline).
    pub fn to_log_record(&self) -> String {
        let mut line = format!("{},{:04X},{}", self.timestamp, self.can_id, self.dlc);
        for b in self.payload() {
            line.push_str(&format!(",{b:02X}"));
        }
        line.push(',');
        line.push(self.label.flag());
        line
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedRecord {
        line,
        reason: reason.into(),
    }
}

/// Parses one log record. Errors carry line number 0; see [`read_log`] for
/// numbered errors.
pub fn parse_log_record(line: &str) -> Result<CanFrame> {
    parse_numbered(line, 0)
}

fn parse_numbered(line: &str, line_no: usize) -> Result<CanFrame> {
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() < 4 {
        return Err(malformed(
            line_no,
            format!("expected at least 4 fields, got {}", fields.len()),
        ));
    }

    let timestamp: f64 = fields[0]
        .parse()
        .map_err(|_| malformed(line_no, format!("bad timestamp {:?}", fields[0])))?;
    if !timestamp.is_finite() {
        return Err(malformed(line_no, "timestamp is not finite"));
    }

    let can_id = u32::from_str_radix(fields[1], 16)
        .map_err(|_| malformed(line_no, format!("non-hex CAN id {:?}", fields[1])))?;
    if can_id > MAX_CAN_ID as u32 {
        return Err(malformed(
            line_no,
            format!("CAN id {can_id:#x} exceeds 0x7FF"),
        ));
    }

    let dlc: usize = fields[2]
        .parse()
        .map_err(|_| malformed(line_no, format!("bad DLC {:?}", fields[2])))?;
    if dlc > 8 {
        return Err(malformed(line_no, format!("DLC {dlc} exceeds 8")));
    }
    if fields.len() != dlc + 4 {
        return Err(malformed(
            line_no,
            format!("DLC {dlc} needs {} fields, got {}", dlc + 4, fields.len()),
        ));
    }

    let mut data = [0u8; 8];
    for (slot, text) in data.iter_mut().zip(&fields[3..3 + dlc]) {
        if text.is_empty() || text.len() > 2 {
            return Err(malformed(line_no, format!("bad data byte {text:?}")));
        }
        *slot = u8::from_str_radix(text, 16)
            .map_err(|_| malformed(line_no, format!("non-hex data byte {text:?}")))?;
    }

    let label = match fields[dlc + 3] {
        "R" | "r" => Label::Normal,
        "T" | "t" => Label::Attack,
        other => return Err(malformed(line_no, format!("unknown flag {other:?}"))),
    };

    Ok(CanFrame {
        timestamp,
        can_id: can_id as u16,
        dlc: dlc as u8,
        data,
        label,
    })
}

/// Which attack a log carries. Both logs share one layout; the kind names
/// the model trained on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Dos,
    Fuzzy,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Dos => "DoS",
            AttackKind::Fuzzy => "Fuzzy",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A malformed record that was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRecord {
    pub line: usize,
    pub reason: String,
}

/// Frames read from one log, with label counts.
#[derive(Debug, Clone, Default)]
pub struct LogContents {
    pub frames: Vec<CanFrame>,
    pub normal: usize,
    pub attack: usize,
    pub skipped: Vec<SkippedRecord>,
}

impl LogContents {
    fn push(&mut self, frame: CanFrame) {
        match frame.label {
            Label::Normal => self.normal += 1,
            Label::Attack => self.attack += 1,
        }
        self.frames.push(frame);
    }
}

/// Reads a whole log. Blank lines are ignored. In strict mode the first
/// malformed record aborts; otherwise it is recorded and skipped.
pub fn read_log(path: &Path, strict: bool) -> Result<LogContents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_log_from(BufReader::new(file), strict).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Reader-based variant of [`read_log`].
pub fn read_log_from<R: BufRead>(reader: R, strict: bool) -> Result<LogContents> {
    let mut out = LogContents::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_numbered(&line, idx + 1) {
            Ok(frame) => out.push(frame),
            Err(Error::MalformedRecord { line, reason }) if !strict => {
                out.skipped.push(SkippedRecord { line, reason })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// `W` consecutive frames in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    frames: Vec<CanFrame>,
}

impl FrameWindow {
    pub fn frames(&self) -> &[CanFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Attack iff any member frame is an attack frame.
    pub fn label(&self) -> Label {
        if self.frames.iter().any(|f| f.label.is_attack()) {
            Label::Attack
        } else {
            Label::Normal
        }
    }

    /// The most recent frame, i.e. the one whose arrival produced this window.
    pub fn newest(&self) -> &CanFrame {
        self.frames.last().expect("windows are never empty")
    }
}

/// FIFO buffer emitting one window per arriving frame once `W` frames
/// have been seen.
#[derive(Debug, Clone)]
pub struct WindowBuffer {
    capacity: usize,
    frames: VecDeque<CanFrame>,
}

impl WindowBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig(
                "window length must be at least 1".into(),
            ));
        }
        Ok(WindowBuffer {
            capacity,
            frames: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, frame: CanFrame) -> Option<FrameWindow> {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        (self.frames.len() == self.capacity).then(|| FrameWindow {
            frames: self.frames.iter().copied().collect(),
        })
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }
}

/// All windows of a stream, in order.
pub fn windows(frames: &[CanFrame], window: usize) -> Result<Vec<FrameWindow>> {
    let mut buffer = WindowBuffer::new(window)?;
    Ok(frames.iter().filter_map(|f| buffer.push(*f)).collect())
}

/// Model input for one window: normalised floats plus their 8-bit codes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub codes: Vec<u8>,
}

/// Quantiser applied to the normalised features: 8-bit unsigned, scale 1/255.
pub fn input_quant() -> QuantSpec {
    QuantSpec::new(8, false, 1.0 / 255.0).expect("constant spec is valid")
}

/// Normalised features of a single frame: id/2047, dlc/8, bytes/255.
pub fn frame_features(frame: &CanFrame) -> [f64; FEATURES_PER_FRAME] {
    let mut out = [0.0; FEATURES_PER_FRAME];
    out[0] = frame.can_id as f64 / MAX_CAN_ID as f64;
    out[1] = frame.dlc as f64 / 8.0;
    for (slot, b) in out[2..].iter_mut().zip(frame.data) {
        *slot = b as f64 / 255.0;
    }
    out
}

pub fn featurize(window: &FrameWindow) -> FeatureVector {
    let spec = input_quant();
    let mut values = Vec::with_capacity(window.len() * FEATURES_PER_FRAME);
    for frame in window.frames() {
        values.extend_from_slice(&frame_features(frame));
    }
    let codes = values.iter().map(|&v| spec.quantize(v) as u8).collect();
    FeatureVector { values, codes }
}
