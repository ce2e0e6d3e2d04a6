use std::fmt::Write as _;

use pbft_core::crypto::CryptoMode;

use crate::config::BenchConfig;
use crate::harness::run_local;
use crate::report::RunReport;
use crate::BenchError;

/// Published throughput at 15 nodes, kops/s, in the order of [`ORDER`].
pub const PAPER_512B: [f64; 3] = [16.155, 2.733, 0.784];
pub const PAPER_4096B: [f64; 3] = [12.164, 2.648, 0.773];

pub const ORDER: [CryptoMode; 3] = [
    CryptoMode::DomainOptimized,
    CryptoMode::MacInterNode,
    CryptoMode::PkOnly,
];

#[derive(Clone, Debug)]
pub struct Comparison {
    /// Reports in the order of [`ORDER`].
    pub runs: Vec<RunReport>,
}

impl Comparison {
    /// DOMAIN/MAC and MAC/PK throughput ratios.
    pub fn ratios(&self) -> (f64, f64) {
        let t: Vec<f64> = self.runs.iter().map(|r| r.throughput).collect();
        (ratio(t[0], t[1]), ratio(t[1], t[2]))
    }

    pub fn strictly_ordered(&self) -> bool {
        self.runs
            .windows(2)
            .all(|w| w[0].throughput > w[1].throughput)
    }

    /// Strict ordering and both ratios at least `min`.
    pub fn passes(&self, min: f64) -> bool {
        let (a, b) = self.ratios();
        self.strictly_ordered() && a >= min && b >= min
    }

    pub fn paper_ratios(value_size: usize) -> (f64, f64) {
        let p = if value_size >= 4096 {
            PAPER_4096B
        } else {
            PAPER_512B
        };
        (p[0] / p[1], p[1] / p[2])
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("mode,throughput_ops,ratio_to_next,paper_kops_512b,paper_ratio_to_next\n");
        let (a, b) = self.ratios();
        let (pa, pb) = Self::paper_ratios(512);
        let measured = [Some(a), Some(b), None];
        let paper = [Some(pa), Some(pb), None];
        for (i, r) in self.runs.iter().enumerate() {
            let fmt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.2}"));
            let _ = writeln!(
                out,
                "{},{:.1},{},{},{}",
                r.mode,
                r.throughput,
                fmt(measured[i]),
                PAPER_512B[i],
                fmt(paper[i])
            );
        }
        out
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        f64::INFINITY
    } else {
        a / b
    }
}

/// Runs the same workload under each mode, fastest expected first.
pub fn compare_modes(base: &BenchConfig) -> Result<Comparison, BenchError> {
    let runs = ORDER
        .iter()
        .map(|&mode| {
            let cfg = BenchConfig {
                mode,
                ..base.clone()
            };
            log::info!("compare-modes: running {mode}");
            run_local(&cfg)
        })
        .collect::<Result<_, _>>()?;
    Ok(Comparison { runs })
}
