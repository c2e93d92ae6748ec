//! Published figures printed next to our own results. These are reference
//! data only and never feed into computed metrics.

use serde::Serialize;

use crate::ingest::AttackKind;

/// Source tag attached to every reference row.
pub const SOURCE: &str = "published figure (reference only)";

/// Per-frame latency of the FPGA QMLP, milliseconds.
pub const FPGA_LATENCY_MS: f64 = 0.12;
/// Per-frame latency of MTH-IDS on a Raspberry Pi 3, milliseconds.
pub const MTH_IDS_LATENCY_MS: f64 = 0.574;
/// Line-rate throughput quoted for the FPGA-coupled ECU, messages per second.
pub const FPGA_LINE_RATE_MSGS: f64 = 8300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub attack: AttackKind,
    pub model: &'static str,
    /// Percentages.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fnr: Option<f64>,
    pub source: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyRow {
    pub model: &'static str,
    pub latency_ms: f64,
    pub frames: &'static str,
    pub platform: &'static str,
    pub source: &'static str,
}

const fn acc(
    attack: AttackKind,
    model: &'static str,
    p: f64,
    r: f64,
    f1: f64,
    fnr: Option<f64>,
) -> AccuracyRow {
    AccuracyRow {
        attack,
        model,
        precision: p,
        recall: r,
        f1,
        fnr,
        source: SOURCE,
    }
}

static ACCURACY: [AccuracyRow; 12] = [
    acc(AttackKind::Dos, "DCNN", 100.0, 99.89, 99.95, Some(0.13)),
    acc(AttackKind::Dos, "MLIDS", 99.9, 100.0, 99.9, None),
    acc(AttackKind::Dos, "NovelADS", 99.97, 99.91, 99.94, None),
    acc(AttackKind::Dos, "TCAN-IDS", 100.0, 99.97, 99.98, None),
    acc(AttackKind::Dos, "GRU", 99.93, 99.91, 99.92, None),
    acc(
        AttackKind::Dos,
        "4-bit-QMLP",
        99.99,
        99.99,
        99.99,
        Some(0.01),
    ),
    acc(AttackKind::Fuzzy, "DCNN", 99.95, 99.65, 99.80, Some(0.5)),
    acc(AttackKind::Fuzzy, "MLIDS", 99.9, 99.9, 99.9, None),
    acc(AttackKind::Fuzzy, "NovelADS", 99.99, 100.0, 100.0, None),
    acc(AttackKind::Fuzzy, "TCAN-IDS", 99.96, 99.89, 99.22, None),
    acc(AttackKind::Fuzzy, "GRU", 99.32, 99.13, 99.22, None),
    acc(
        AttackKind::Fuzzy,
        "4-bit-QMLP",
        99.68,
        99.93,
        99.80,
        Some(0.07),
    ),
];

const fn lat(
    model: &'static str,
    latency_ms: f64,
    frames: &'static str,
    platform: &'static str,
) -> LatencyRow {
    LatencyRow {
        model,
        latency_ms,
        frames,
        platform,
        source: SOURCE,
    }
}

static LATENCY: [LatencyRow; 7] = [
    lat("GRU", 890.0, "5000 CAN frames", "Jetson Xavier NX"),
    lat("MLIDS", 275.0, "per CAN frame", "GTX Titan X"),
    lat("NovelADS", 128.7, "100 CAN frames", "Jetson Nano"),
    lat("DCNN", 5.0, "29 CAN frames", "Tesla K80"),
    lat("TCAN-IDS", 3.4, "64 CAN frames", "Jetson AGX"),
    lat(
        "MTH-IDS",
        MTH_IDS_LATENCY_MS,
        "per CAN frame",
        "Raspberry Pi 3",
    ),
    lat(
        "4-bit-QMLP (FPGA)",
        FPGA_LATENCY_MS,
        "per CAN frame",
        "Zynq Ultrascale+",
    ),
];

pub fn accuracy_rows() -> &'static [AccuracyRow] {
    &ACCURACY
}

pub fn latency_rows() -> &'static [LatencyRow] {
    &LATENCY
}

/// The published 4-bit QMLP row for an attack.
pub fn qmlp_row(attack: AttackKind) -> AccuracyRow {
    *ACCURACY
        .iter()
        .find(|r| r.attack == attack && r.model == "4-bit-QMLP")
        .expect("QMLP rows exist for both attacks")
}

pub fn fpga_speedup_over_mth_ids() -> f64 {
    MTH_IDS_LATENCY_MS / FPGA_LATENCY_MS
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qmlp_rows() {
        let dos = qmlp_row(AttackKind::Dos);
        assert_eq!(
            (dos.precision, dos.recall, dos.f1, dos.fnr),
            (99.99, 99.99, 99.99, Some(0.01))
        );
        let fuzzy = qmlp_row(AttackKind::Fuzzy);
        assert_eq!(
            (fuzzy.precision, fuzzy.recall, fuzzy.f1, fuzzy.fnr),
            (99.68, 99.93, 99.80, Some(0.07))
        );
    }

    #[test]
    fn speedup_rounds_to_4_8() {
        assert_eq!(format!("{:.1}", fpga_speedup_over_mth_ids()), "4.8");
    }
}
