//! Per-run measurements and the derived latency and byte statistics.

use serde::{Deserialize, Serialize};

use super::SchemeId;
use crate::error::{Error, Result};
use crate::stats;

/// Bumped whenever the serialized layout changes.
pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxMetrics {
    pub id: u32,
    pub origin: u32,
    pub t0_ms: f64,
    /// Time until the last honest node first received the transaction;
    /// `None` if some honest node never did.
    pub coverage_ms: Option<f64>,
    pub missing_honest: usize,
    pub max_depth: u16,
}

/// Bytes sent during the measured period, split into disjoint buckets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ByteCounters {
    /// Transfers that produced a node's first copy.
    pub data: u64,
    /// Heartbeats, deltas, tables and probes.
    pub control: u64,
    /// Everything else on the data plane: redundant digests and redundant
    /// transfers.
    pub duplicate: u64,
}

impl ByteCounters {
    pub fn total(&self) -> u64 {
        self.data + self.control + self.duplicate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub version: u32,
    pub scheme: SchemeId,
    pub seed: u64,
    pub n: usize,
    pub honest: usize,
    pub tx_bytes: u64,
    pub txs: Vec<TxMetrics>,
    pub bytes: ByteCounters,
    /// Data-plane bytes put on the wire; equals `data + duplicate` once every
    /// transfer has landed.
    pub data_plane_sent: u64,
    /// Honest non-origin first deliveries over all measured transactions.
    pub honest_deliveries: u64,
    pub windows: u64,
    pub discarded_windows: u64,
    pub blacklisted: Vec<u32>,
    /// `fanout_hist[k]` counts relay actions that sent to `k` peers.
    pub fanout_hist: Vec<u64>,
    /// `depth_hist[d]` counts honest first receipts at tree depth `d`.
    pub depth_hist: Vec<u64>,
    pub partial: bool,
    pub undelivered: usize,
    pub end_ms: f64,
    /// Per transaction, per node first-receipt time in ms; kept only on
    /// request.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub first_receipt_ms: Option<Vec<Vec<Option<f64>>>>,
}

impl RunMetrics {
    pub fn coverage_times(&self) -> Vec<f64> {
        self.txs.iter().filter_map(|t| t.coverage_ms).collect()
    }

    pub fn percentile_ms(&self, p: f64) -> Option<f64> {
        stats::percentile(&self.coverage_times(), p).ok()
    }

    pub fn median_ms(&self) -> Option<f64> {
        self.percentile_ms(50.0)
    }

    /// All bytes sent during the measured period per measured transaction.
    pub fn bytes_per_tx(&self) -> f64 {
        if self.txs.is_empty() {
            return 0.0;
        }
        self.bytes.total() as f64 / self.txs.len() as f64
    }

    /// Control-plane bytes relative to data-plane bytes.
    pub fn control_frac(&self) -> f64 {
        let dp = self.bytes.data + self.bytes.duplicate;
        if dp == 0 {
            return 0.0;
        }
        self.bytes.control as f64 / dp as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Coverage time of one transaction in ms.
pub fn coverage_time(metrics: &RunMetrics, tx: u32) -> Result<f64> {
    let t = metrics.txs.iter().find(|t| t.id == tx).ok_or(Error::UnknownTx(tx))?;
    t.coverage_ms.ok_or(Error::Undelivered {
        tx,
        missing: t.missing_honest,
    })
}

/// Relative byte overhead beyond one transfer per honest delivery:
/// `(dissemination bytes - D |T|) / (D |T|)` with `D` the honest deliveries.
/// Returns infinity when nothing was delivered.
pub fn bandwidth_factor(metrics: &RunMetrics) -> f64 {
    let need = metrics.honest_deliveries as f64 * metrics.tx_bytes as f64;
    if need == 0.0 {
        return f64::INFINITY;
    }
    let sent = (metrics.bytes.data + metrics.bytes.duplicate + metrics.bytes.control) as f64;
    (sent - need) / need
}
