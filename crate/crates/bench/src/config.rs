use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use pbft_core::crypto::{CryptoMode, SignatureAlgorithm};
use pbft_core::replica::ReplicaConfig;
use pbft_core::wire::NodeId;
use pbft_runtime::loadgen::LoadConfig;
use pbft_runtime::PipelineConfig;

use crate::BenchError;

/// Benchmark settings. Every field has a default, so an empty file is valid.
///
/// `duration_s` is the whole run; the first `warmup_s` seconds are not
/// measured.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub mode: CryptoMode,
    pub signature: SignatureAlgorithm,
    pub n: u16,
    /// Defaults to the largest f with n >= 3f + 1.
    pub f: Option<u16>,
    pub value_size: usize,
    pub clients: usize,
    pub outstanding: usize,
    pub batch_size: usize,
    pub batch_timeout_us: u64,
    pub checkpoint_interval: u64,
    pub log_capacity: u64,
    pub view_change_timeout_ms: u64,
    pub duration_s: f64,
    pub warmup_s: f64,
    /// Requests presigned before the run, split across clients.
    pub pool: usize,
    pub request_timeout_ms: u64,
    pub verify_parallelism: Option<usize>,
    pub sign_parallelism: Option<usize>,
    pub hash_tx_parallelism: Option<usize>,
    pub instrument: bool,
    pub key_seed: u64,
    pub output: PathBuf,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: CryptoMode::DomainOptimized,
            signature: SignatureAlgorithm::Rsa2048,
            n: 4,
            f: None,
            value_size: 512,
            clients: 4,
            outstanding: 4,
            batch_size: 1,
            batch_timeout_us: 2_000,
            checkpoint_interval: 500,
            log_capacity: 10_000,
            view_change_timeout_ms: 2_000,
            duration_s: 40.0,
            warmup_s: 10.0,
            pool: 20_000,
            request_timeout_ms: 2_000,
            verify_parallelism: None,
            sign_parallelism: None,
            hash_tx_parallelism: None,
            instrument: true,
            key_seed: 1,
            output: PathBuf::from("bench-out"),
        }
    }
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let c: BenchConfig = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.into()));
        if self.value_size == 0 {
            return bad("value_size must be at least 1");
        }
        if self.duration_s.partial_cmp(&self.warmup_s) != Some(std::cmp::Ordering::Greater)
            || self.warmup_s < 0.0
        {
            return bad("duration_s must exceed warmup_s");
        }
        if self.clients == 0 || self.outstanding == 0 || self.pool < self.clients {
            return bad("clients, outstanding and pool must be positive, with pool >= clients");
        }
        self.replica(0)
            .validate()
            .map_err(|e| BenchError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn f(&self) -> u16 {
        self.f.unwrap_or(self.n.saturating_sub(1) / 3)
    }

    pub fn replica(&self, id: NodeId) -> ReplicaConfig {
        let mut r = ReplicaConfig::new(self.n, id, self.mode);
        r.f = self.f();
        r.batch_size = self.batch_size;
        r.batch_timeout = Duration::from_micros(self.batch_timeout_us);
        r.checkpoint_interval = self.checkpoint_interval;
        r.log_capacity = self.log_capacity;
        r.view_change_timeout = Duration::from_millis(self.view_change_timeout_ms);
        r
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = PipelineConfig::for_mode(self.mode);
        if let Some(v) = self.verify_parallelism {
            p.verify_parallelism = v;
        }
        if let Some(v) = self.sign_parallelism {
            p.sign_parallelism = v;
        }
        if let Some(v) = self.hash_tx_parallelism {
            p.hash_tx_parallelism = v;
        }
        p.instrument = self.instrument;
        p
    }

    pub fn load_config(&self) -> LoadConfig {
        let mut l = LoadConfig::new(self.mode);
        l.outstanding = self.outstanding;
        l.value_size = self.value_size;
        l.warmup = Duration::from_secs_f64(self.warmup_s);
        l.duration = Duration::from_secs_f64(self.duration_s - self.warmup_s);
        l.pool = self.pool / self.clients;
        l.request_timeout = Duration::from_millis(self.request_timeout_ms);
        l
    }

    pub fn client_ids(&self) -> Vec<NodeId> {
        (0..self.clients).map(pbft_core::sim::client_id).collect()
    }
}
