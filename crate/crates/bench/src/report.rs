use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pbft_core::crypto::CryptoMode;

use crate::BenchError;

pub const SUMMARY_HEADER: &str = "mode,n,value_size,batch_size,clients,outstanding,window_s,completed,throughput_ops,goodput_gbps,lat_mean_us,lat_p50_us,lat_p95_us,lat_p99_us,p99_over_p50,failed,rejected,view_changes,pre_prepares,committed_requests,pool_exhausted";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencySummary {
    pub mean_us: f64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
}

impl LatencySummary {
    /// `sorted` must be ascending.
    pub fn from_sorted(sorted: &[u64]) -> Self {
        if sorted.is_empty() {
            return Self::default();
        }
        LatencySummary {
            mean_us: sorted.iter().sum::<u64>() as f64 / sorted.len() as f64,
            p50_us: percentile(sorted, 50.0),
            p95_us: percentile(sorted, 95.0),
            p99_us: percentile(sorted, 99.0),
        }
    }

    pub fn tail_ratio(&self) -> f64 {
        if self.p50_us == 0 {
            0.0
        } else {
            self.p99_us as f64 / self.p50_us as f64
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// One `(latency, fraction of samples <= latency)` point per distinct value.
pub fn cdf(sorted: &[u64]) -> Vec<(u64, f64)> {
    let n = sorted.len() as f64;
    let mut out: Vec<(u64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    out
}

pub fn goodput_gbps(throughput: f64, value_size: usize) -> f64 {
    throughput * value_size as f64 * 8.0 / 1e9
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub mode: CryptoMode,
    pub n: u16,
    pub value_size: usize,
    pub batch_size: usize,
    pub clients: usize,
    pub outstanding: usize,
    pub window_s: f64,
    pub completed: u64,
    pub throughput: f64,
    pub goodput_gbps: f64,
    pub latency: LatencySummary,
    pub latencies_us: Vec<u64>,
    pub failed: u64,
    /// Messages rejected by verification, summed over replicas.
    pub rejected: u64,
    pub view_changes: u64,
    /// PRE_PREPAREs sent by the view-0 leader.
    pub pre_prepares: u64,
    /// Requests executed by the view-0 leader, warmup included.
    pub committed_requests: u64,
    pub pool_exhausted: bool,
    /// Leader stage table as CSV.
    pub stages_csv: String,
}

impl RunReport {
    pub fn summary_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{},{:.1},{:.6},{:.1},{},{},{},{:.2},{},{},{},{},{},{}",
            self.mode,
            self.n,
            self.value_size,
            self.batch_size,
            self.clients,
            self.outstanding,
            self.window_s,
            self.completed,
            self.throughput,
            self.goodput_gbps,
            self.latency.mean_us,
            self.latency.p50_us,
            self.latency.p95_us,
            self.latency.p99_us,
            self.latency.tail_ratio(),
            self.failed,
            self.rejected,
            self.view_changes,
            self.pre_prepares,
            self.committed_requests,
            self.pool_exhausted
        )
    }

    pub fn summary_csv(&self) -> String {
        format!("{SUMMARY_HEADER}\n{}\n", self.summary_row())
    }

    pub fn cdf_csv(&self) -> String {
        let mut out = String::from("latency_us,cumulative_fraction\n");
        for (v, f) in cdf(&self.latencies_us) {
            let _ = writeln!(out, "{v},{f:.6}");
        }
        out
    }

    /// Writes `summary.csv`, `latency_cdf.csv` and `stages.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), BenchError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("latency_cdf.csv"), self.cdf_csv())?;
        fs::write(dir.join("stages.csv"), &self.stages_csv)?;
        Ok(())
    }
}
