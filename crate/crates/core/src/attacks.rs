//! Synthetic CAN traffic with injected DoS and fuzzing attacks.
//!
//! Time is handled in whole microseconds internally so that every generated
//! timestamp survives a write/read cycle through the log format unchanged.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AttackKind, CanFrame, Label, MAX_CAN_ID};

const MICROS: f64 = 1e6;

fn to_seconds(us: u64) -> f64 {
    us as f64 / MICROS
}

fn to_micros(seconds: f64) -> u64 {
    (seconds * MICROS).round() as u64
}

/// How a periodic message's payload evolves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Constant {
        bytes: Vec<u8>,
    },
    /// Constant bytes with a rolling counter in `byte`.
    Counter {
        bytes: Vec<u8>,
        byte: usize,
    },
    /// Constant bytes with `byte` perturbed uniformly by up to ±`amplitude`.
    Noise {
        bytes: Vec<u8>,
        byte: usize,
        amplitude: u8,
    },
}

impl Payload {
    fn base(&self) -> &[u8] {
        match self {
            Payload::Constant { bytes }
            | Payload::Counter { bytes, .. }
            | Payload::Noise { bytes, .. } => bytes,
        }
    }

    fn render(&self, seq: u64, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut out = self.base().to_vec();
        match *self {
            Payload::Constant { .. } => {}
            Payload::Counter { byte, .. } => {
                if let Some(b) = out.get_mut(byte) {
                    *b = b.wrapping_add(seq as u8);
                }
            }
            Payload::Noise {
                byte, amplitude, ..
            } => {
                if let Some(b) = out.get_mut(byte) {
                    let delta = rng.gen_range(-(amplitude as i16)..=amplitude as i16);
                    *b = (*b as i16 + delta).clamp(0, 255) as u8;
                }
            }
        }
        out
    }
}

/// One periodically transmitted identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicMessage {
    pub can_id: u16,
    pub period_ms: f64,
    #[serde(default)]
    pub offset_ms: f64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficProfile {
    pub messages: Vec<PeriodicMessage>,
    pub duration_s: f64,
    /// Each transmission is delayed by up to this fraction of its period.
    pub jitter: f64,
}

impl TrafficProfile {
    /// Ten identifiers totalling 500 frames per second.
    pub fn vehicle(duration_s: f64) -> Self {
        let m = |can_id: u16, period_ms: f64, offset_ms: f64, payload: Payload| PeriodicMessage {
            can_id,
            period_ms,
            offset_ms,
            payload,
        };
        let constant = |b: &[u8]| Payload::Constant { bytes: b.to_vec() };
        TrafficProfile {
            messages: vec![
                m(
                    0x316,
                    10.0,
                    0.0,
                    Payload::Counter {
                        bytes: vec![0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6F],
                        byte: 6,
                    },
                ),
                m(
                    0x18F,
                    10.0,
                    2.5,
                    Payload::Noise {
                        bytes: vec![0xFE, 0x5B, 0x00, 0x00, 0x00, 0x3C, 0x00, 0x00],
                        byte: 1,
                        amplitude: 4,
                    },
                ),
                m(
                    0x260,
                    10.0,
                    5.0,
                    constant(&[0x05, 0x20, 0x84, 0x30, 0x00, 0x00, 0x00, 0x00]),
                ),
                m(
                    0x2A0,
                    10.0,
                    7.5,
                    Payload::Counter {
                        bytes: vec![0x64, 0x00, 0x9A, 0x1D, 0x97, 0x02, 0xBD, 0x00],
                        byte: 7,
                    },
                ),
                m(
                    0x329,
                    50.0,
                    1.0,
                    Payload::Noise {
                        bytes: vec![0x40, 0xBB, 0x7F, 0x14, 0x11, 0x20, 0x00, 0x14],
                        byte: 2,
                        amplitude: 2,
                    },
                ),
                m(
                    0x545,
                    50.0,
                    11.0,
                    constant(&[0xD8, 0x00, 0x00, 0x8A, 0x00, 0x00, 0x00, 0x00]),
                ),
                m(
                    0x43F,
                    50.0,
                    23.0,
                    constant(&[0x01, 0x45, 0x60, 0xFF, 0x6B, 0x00, 0x00, 0x00]),
                ),
                m(
                    0x370,
                    50.0,
                    37.0,
                    constant(&[0x00, 0x20, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00]),
                ),
                m(
                    0x4F0,
                    100.0,
                    13.0,
                    Payload::Counter {
                        bytes: vec![0x00, 0x00, 0x00, 0x80, 0x00, 0x00],
                        byte: 0,
                    },
                ),
                m(0x5F0, 100.0, 61.0, constant(&[0x00, 0x00])),
            ],
            duration_s,
            jitter: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::InvalidConfig("duration must be positive".into()));
        }
        if !(0.0..=0.01).contains(&self.jitter) {
            return Err(Error::InvalidConfig(
                "jitter must lie in [0, 0.01] of the period".into(),
            ));
        }
        for m in &self.messages {
            if m.can_id > MAX_CAN_ID {
                return Err(Error::InvalidConfig(format!(
                    "CAN id {:#x} exceeds 0x7FF",
                    m.can_id
                )));
            }
            if !(m.period_ms.is_finite() && m.period_ms > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "period of {:#x} must be positive",
                    m.can_id
                )));
            }
            if m.offset_ms.is_nan() || m.offset_ms < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "offset of {:#x} must be non-negative",
                    m.can_id
                )));
            }
            if m.payload.base().len() > 8 {
                return Err(Error::InvalidConfig(format!(
                    "payload of {:#x} exceeds 8 bytes",
                    m.can_id
                )));
            }
        }
        Ok(())
    }
}

/// A frame stream together with the interval it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct Traffic {
    pub frames: Vec<CanFrame>,
    pub duration_s: f64,
}

fn sort_frames(frames: &mut [(u64, usize, CanFrame)]) {
    frames.sort_by_key(|(t, order, _)| (*t, *order));
}

/// Periodic background traffic, all labelled Normal.
pub fn generate_normal(profile: &TrafficProfile, seed: u64) -> Result<Traffic> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let end = to_micros(profile.duration_s);
    let mut stamped = Vec::new();
    for (order, msg) in profile.messages.iter().enumerate() {
        let period = msg.period_ms * 1e3;
        let max_jitter = period * profile.jitter;
        let mut seq = 0u64;
        loop {
            let nominal = msg.offset_ms * 1e3 + seq as f64 * period;
            if nominal >= end as f64 {
                break;
            }
            let jitter = if max_jitter > 0.0 {
                rng.gen_range(0.0..max_jitter)
            } else {
                0.0
            };
            let t = (nominal + jitter).floor() as u64;
            if t < end {
                let payload = msg.payload.render(seq, &mut rng);
                let frame = CanFrame::new(to_seconds(t), msg.can_id, &payload, Label::Normal)?;
                stamped.push((t, order, frame));
            }
            seq += 1;
        }
    }
    sort_frames(&mut stamped);
    Ok(Traffic {
        frames: stamped.into_iter().map(|(_, _, f)| f).collect(),
        duration_s: profile.duration_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Injected frames per second.
    pub rate: f64,
    pub start_s: f64,
    pub stop_s: f64,
}

impl AttackSpec {
    /// Attack active over the middle 80% of the capture.
    pub fn default_for(kind: AttackKind, duration_s: f64) -> Self {
        AttackSpec {
            kind,
            rate: match kind {
                AttackKind::Dos => 2000.0,
                AttackKind::Fuzzy => 250.0,
            },
            start_s: 0.1 * duration_s,
            stop_s: 0.9 * duration_s,
        }
    }
}

/// Merges attack frames into `traffic`. Injections fall at
/// `start + k/rate` for k = 1, 2, … while before `stop`.
pub fn inject(traffic: &Traffic, spec: &AttackSpec, seed: u64) -> Result<Traffic> {
    if !(spec.rate.is_finite() && spec.rate > 0.0) {
        return Err(Error::InvalidConfig(
            "injection rate must be positive".into(),
        ));
    }
    if !(spec.start_s >= 0.0 && spec.start_s < spec.stop_s && spec.stop_s <= traffic.duration_s) {
        return Err(Error::WindowOutOfRange {
            start: spec.start_s,
            stop: spec.stop_s,
            duration: traffic.duration_s,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (start, stop) = (to_micros(spec.start_s), to_micros(spec.stop_s));
    let period = MICROS / spec.rate;

    let mut injected = Vec::new();
    for k in 1u64.. {
        let t = start + (k as f64 * period).round() as u64;
        if t >= stop {
            break;
        }
        let frame = match spec.kind {
            AttackKind::Dos => CanFrame::new(to_seconds(t), 0x000, &[0; 8], Label::Attack)?,
            AttackKind::Fuzzy => {
                let id = rng.gen_range(0..=MAX_CAN_ID);
                let payload: [u8; 8] = rng.gen();
                CanFrame::new(to_seconds(t), id, &payload, Label::Attack)?
            }
        };
        injected.push(frame);
    }

    // stable merge: on equal timestamps background traffic goes first
    let mut out = Vec::with_capacity(traffic.frames.len() + injected.len());
    let (mut a, mut b) = (
        traffic.frames.iter().peekable(),
        injected.into_iter().peekable(),
    );
    loop {
        match (a.peek(), b.peek()) {
            (Some(x), Some(y)) if x.timestamp <= y.timestamp => out.push(*a.next().unwrap()),
            (_, Some(_)) => out.push(b.next().unwrap()),
            (Some(_), None) => out.push(*a.next().unwrap()),
            (None, None) => break,
        }
    }
    Ok(Traffic {
        frames: out,
        duration_s: traffic.duration_s,
    })
}

/// Writes frames in the dataset CSV layout.
pub fn write_log(frames: &[CanFrame], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_log_to(frames, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_log_to<W: Write>(frames: &[CanFrame], out: &mut W) -> std::io::Result<()> {
    for f in frames {
        writeln!(out, "{}", f.to_log_record())?;
    }
    Ok(())
}

/// Background traffic with one attack burst; the common synthetic fixture.
pub fn synthesize(profile: &TrafficProfile, attack: &AttackSpec, seed: u64) -> Result<Traffic> {
    let normal = generate_normal(profile, seed)?;
    inject(&normal, attack, seed.wrapping_add(0x9E37_79B9_7F4A_7C15))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::read_log_from;

    fn single(period_ms: f64, duration_s: f64) -> TrafficProfile {
        TrafficProfile {
            messages: vec![PeriodicMessage {
                can_id: 0x100,
                period_ms,
                offset_ms: 0.0,
                payload: Payload::Constant {
                    bytes: vec![1, 2, 3],
                },
            }],
            duration_s,
            jitter: 0.01,
        }
    }

    #[test]
    fn one_id_hundred_frames() {
        let t = generate_normal(&single(10.0, 1.0), 1).unwrap();
        assert_eq!(t.frames.len(), 100);
        for (k, f) in t.frames.iter().enumerate() {
            let nominal = k as f64 * 0.010;
            assert!(f.timestamp >= nominal && f.timestamp - nominal <= 0.0001 + 1e-12);
            assert_eq!(f.label, Label::Normal);
        }
    }

    #[test]
    fn merged_streams_are_sorted() {
        let t = generate_normal(&TrafficProfile::vehicle(2.0), 3).unwrap();
        assert_eq!(t.frames.len(), 1000);
        assert!(t
            .frames
            .windows(2)
            .all(|p| p[0].timestamp <= p[1].timestamp));
        let ids: std::collections::BTreeSet<u16> = t.frames.iter().map(|f| f.can_id).collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let p = TrafficProfile::vehicle(1.0);
        assert_eq!(
            generate_normal(&p, 9).unwrap(),
            generate_normal(&p, 9).unwrap()
        );
        assert_ne!(
            generate_normal(&p, 9).unwrap(),
            generate_normal(&p, 10).unwrap()
        );
    }

    #[test]
    fn dos_injection_counts() {
        let normal = generate_normal(&TrafficProfile::vehicle(1.0), 1).unwrap();
        assert_eq!(normal.frames.len(), 500);
        let spec = AttackSpec {
            kind: AttackKind::Dos,
            rate: 2000.0,
            start_s: 0.0,
            stop_s: 1.0,
        };
        let mixed = inject(&normal, &spec, 2).unwrap();
        let attacks: Vec<_> = mixed
            .frames
            .iter()
            .filter(|f| f.label.is_attack())
            .collect();
        assert_eq!(attacks.len(), 1999);
        assert!(attacks
            .iter()
            .all(|f| f.can_id == 0 && f.data == [0; 8] && f.dlc == 8));
        let fraction = attacks.len() as f64 / mixed.frames.len() as f64;
        assert!((fraction - 0.8).abs() < 0.01, "{fraction}");
        assert!(mixed
            .frames
            .windows(2)
            .all(|p| p[0].timestamp <= p[1].timestamp));
    }

    #[test]
    fn no_room_for_injections_leaves_stream_alone() {
        let normal = generate_normal(&TrafficProfile::vehicle(1.0), 1).unwrap();
        let spec = AttackSpec {
            kind: AttackKind::Fuzzy,
            rate: 0.5,
            start_s: 0.2,
            stop_s: 1.0,
        };
        assert_eq!(inject(&normal, &spec, 2).unwrap(), normal);
    }

    #[test]
    fn attack_window_must_fit() {
        let normal = generate_normal(&TrafficProfile::vehicle(1.0), 1).unwrap();
        for (start, stop) in [(0.5, 0.5), (0.6, 0.4), (0.0, 1.5), (-0.1, 0.5)] {
            let spec = AttackSpec {
                kind: AttackKind::Dos,
                rate: 100.0,
                start_s: start,
                stop_s: stop,
            };
            assert!(matches!(
                inject(&normal, &spec, 0),
                Err(Error::WindowOutOfRange { .. })
            ));
        }
    }

    #[test]
    fn fuzzy_ids_are_uniform() {
        let empty = Traffic {
            frames: vec![],
            duration_s: 10.0,
        };
        let spec = AttackSpec {
            kind: AttackKind::Fuzzy,
            rate: 2000.0,
            start_s: 0.0,
            stop_s: 10.0,
        };
        let frames = inject(&empty, &spec, 77).unwrap().frames;
        const BINS: usize = 16;
        let mut counts = [0f64; BINS];
        for f in &frames {
            counts[f.can_id as usize * BINS / 2048] += 1.0;
        }
        let expected = frames.len() as f64 / BINS as f64;
        let chi2: f64 = counts
            .iter()
            .map(|c| (c - expected).powi(2) / expected)
            .sum();
        // 95% critical value, 15 degrees of freedom
        assert!(chi2 < 24.996, "chi-square {chi2}");
    }

    #[test]
    fn log_round_trip() {
        let p = TrafficProfile::vehicle(2.0);
        let spec = AttackSpec::default_for(AttackKind::Fuzzy, 2.0);
        let t = synthesize(&p, &spec, 5).unwrap();
        let mut buf = Vec::new();
        write_log_to(&t.frames, &mut buf).unwrap();
        let back = read_log_from(buf.as_slice(), true).unwrap();
        assert_eq!(back.frames, t.frames);
        assert!(back.skipped.is_empty());

        let mut empty = Vec::new();
        write_log_to(&[], &mut empty).unwrap();
        assert!(empty.is_empty());
    }
}
