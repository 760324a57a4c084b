//! Per-cell metrics and the results table.

use std::fs;
use std::io;
use std::path::Path;

use crate::engine::{PacketCounters, Payment, RunReport};

pub const CSV_HEADER: [&str; 16] = [
    "scenario",
    "size",
    "protocol",
    "seed",
    "memory_bytes_mean",
    "memory_entries_mean",
    "success_ratio",
    "avg_hop_count",
    "avg_fee",
    "avg_channel_count",
    "node_pkt_count",
    "node_pkt_bytes",
    "router_pkt_count",
    "router_pkt_bytes",
    "node_pkt_bytes_mean",
    "router_pkt_bytes_mean",
];

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no records to write")]
    Empty,
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One results row. Undefined values (no attempted or no succeeded payments) are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub scenario: String,
    pub size: String,
    pub protocol: String,
    pub seed: u64,
    pub memory_bytes_mean: f64,
    pub memory_entries_mean: f64,
    pub success_ratio: Option<f64>,
    pub avg_hop_count: Option<f64>,
    pub avg_fee: Option<f64>,
    pub avg_channel_count: Option<f64>,
    pub node_pkt_count: u64,
    pub node_pkt_bytes: u64,
    pub router_pkt_count: u64,
    pub router_pkt_bytes: u64,
    pub node_pkt_bytes_mean: f64,
    pub router_pkt_bytes_mean: f64,
}

/// Ratio and averages over succeeded payments.
pub fn payment_stats(payments: &[Payment]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let ok: Vec<&Payment> = payments.iter().filter(|p| p.succeeded()).collect();
    let ratio = (!payments.is_empty()).then(|| ok.len() as f64 / payments.len() as f64);
    if ok.is_empty() {
        return (ratio, None, None);
    }
    let k = ok.len() as f64;
    let hops = ok.iter().map(|p| p.hops as f64).sum::<f64>() / k;
    let fee = ok.iter().map(|p| p.fee_paid as f64).sum::<f64>() / k;
    (ratio, Some(hops), Some(fee))
}

pub fn finalize(scenario: &str, size: &str, protocol: &str, seed: u64, report: &RunReport) -> MetricsRecord {
    let (success_ratio, avg_hop_count, avg_fee) = payment_stats(&report.payments);
    let samples = &report.channel_samples;
    let avg_channel_count = (!samples.is_empty()).then(|| samples.iter().sum::<f64>() / samples.len() as f64);
    let PacketCounters {
        node_count,
        node_bytes,
        router_count,
        router_bytes,
        ..
    } = report.counters;
    let n = report.node_count.max(1) as f64;
    MetricsRecord {
        scenario: scenario.to_string(),
        size: size.to_string(),
        protocol: protocol.to_string(),
        seed,
        memory_bytes_mean: report.memory.bytes_mean,
        memory_entries_mean: report.memory.entries_mean,
        success_ratio,
        avg_hop_count,
        avg_fee,
        avg_channel_count,
        node_pkt_count: node_count,
        node_pkt_bytes: node_bytes,
        router_pkt_count: router_count,
        router_pkt_bytes: router_bytes,
        node_pkt_bytes_mean: node_bytes as f64 / n,
        router_pkt_bytes_mean: router_bytes as f64 / n,
    }
}

fn float(x: f64) -> String {
    format!("{x:.6}")
}

fn opt(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

impl MetricsRecord {
    pub fn fields(&self) -> [String; 16] {
        [
            self.scenario.clone(),
            self.size.clone(),
            self.protocol.clone(),
            self.seed.to_string(),
            float(self.memory_bytes_mean),
            float(self.memory_entries_mean),
            opt(self.success_ratio),
            opt(self.avg_hop_count),
            opt(self.avg_fee),
            opt(self.avg_channel_count),
            self.node_pkt_count.to_string(),
            self.node_pkt_bytes.to_string(),
            self.router_pkt_count.to_string(),
            self.router_pkt_bytes.to_string(),
            float(self.node_pkt_bytes_mean),
            float(self.router_pkt_bytes_mean),
        ]
    }
}

/// Header plus one row per record, in the given order.
pub fn to_csv(records: &[MetricsRecord]) -> Result<Vec<u8>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(r.fields())?;
    }
    w.into_inner().map_err(|e| MetricsError::Io {
        path: "<memory>".into(),
        source: e.into_error(),
    })
}

pub fn write_csv(records: &[MetricsRecord], path: &Path) -> Result<(), MetricsError> {
    let bytes = to_csv(records)?;
    fs::write(path, bytes).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}
