use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};

use pbft_bench::compare::{compare_modes, Comparison};
use pbft_bench::harness::{report, LocalCluster};
use pbft_bench::keygen::keygen;
use pbft_bench::scenarios;
use pbft_bench::BenchConfig;
use pbft_core::crypto::{CryptoMode, KeyStore, Keyring, SignatureAlgorithm};
use pbft_core::sim::Scenario;
use pbft_core::wire::NodeId;
use pbft_runtime::loadgen::run_load;
use pbft_runtime::{Counters, Deployment, Node, NodeConfig, TcpConfig};

#[derive(Parser, Debug)]
#[command(
    name = "pbftstar",
    version,
    about = "PBFT* replicas, load generator and fault simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate signing keys and pairwise MAC secrets.
    Keygen {
        #[arg(long)]
        n: u16,
        #[arg(long, default_value_t = 1)]
        clients: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "rsa2048")]
        algorithm: SignatureAlgorithm,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run one replica until SIGINT or SIGTERM.
    Node {
        #[arg(long)]
        id: NodeId,
        #[arg(long)]
        deployment: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Drive a running group with closed-loop clients and write CSV reports.
    Loadgen {
        #[arg(long)]
        deployment: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        /// Also start every replica of the deployment in this process.
        #[arg(long)]
        local: bool,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Run a scenario in the deterministic simulator.
    Simulate {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        /// Write the full NDJSON trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the same in-process workload under all three modes.
    CompareModes {
        #[command(flatten)]
        bench: BenchArgs,
    },
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Benchmark config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<CryptoMode>,
    #[arg(long)]
    n: Option<u16>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    outstanding: Option<usize>,
    #[arg(long)]
    value_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Whole run in seconds, warmup included.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl BenchArgs {
    fn resolve(&self) -> Result<BenchConfig> {
        let mut c = match &self.config {
            Some(p) => BenchConfig::load(p)?,
            None => BenchConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $g:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$g = v; } )* };
        }
        set!(mode => mode, n => n, clients => clients, outstanding => outstanding, value_size => value_size,
             batch_size => batch_size, duration => duration_s, warmup => warmup_s, pool => pool, out => output);
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PBFTSTAR_LOG", "info"))
        .init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Keygen {
            n,
            clients,
            out,
            algorithm,
            seed,
            force,
        } => {
            let s = keygen(n, clients, &out, algorithm, seed, force)?;
            println!(
                "wrote {} keypairs and {} pairwise secrets to {}",
                s.keypairs,
                s.pairwise,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Node {
            id,
            deployment,
            keys,
            bench,
        } => {
            let Some(d) = load_deployment(&deployment) else {
                return Ok(ExitCode::from(2));
            };
            let mut cfg = bench.resolve()?;
            cfg.n = d.n();
            cfg.validate()?;
            run_node(&cfg, d, &keys, id)
        }
        Cmd::Loadgen {
            deployment,
            keys,
            local,
            bench,
        } => {
            let Some(d) = load_deployment(&deployment) else {
                return Ok(ExitCode::from(2));
            };
            let mut cfg = bench.resolve()?;
            cfg.n = d.n();
            cfg.validate()?;
            run_loadgen(&cfg, d, &keys, local)
        }
        Cmd::Simulate { scenario, trace } => simulate(&scenario, trace.as_deref()),
        Cmd::CompareModes { bench } => {
            let cfg = bench.resolve()?;
            let cmp = compare_modes(&cfg)?;
            std::fs::create_dir_all(&cfg.output)?;
            for r in &cmp.runs {
                r.write(&cfg.output.join(r.mode.as_str()))?;
            }
            std::fs::write(cfg.output.join("compare.csv"), cmp.to_csv())?;
            print!("{}", cmp.to_csv());
            let (a, b) = cmp.ratios();
            let (pa, pb) = Comparison::paper_ratios(cfg.value_size);
            println!("measured ratios {a:.2}x {b:.2}x, published {pa:.2}x {pb:.2}x");
            Ok(if cmp.strictly_ordered() {
                ExitCode::SUCCESS
            } else {
                println!("ordering violated");
                ExitCode::FAILURE
            })
        }
    }
}

fn load_deployment(path: &Path) -> Option<Deployment> {
    match Deployment::load(path) {
        Ok(d) => Some(d),
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            None
        }
    }
}

fn run_node(cfg: &BenchConfig, d: Deployment, keys: &Path, id: NodeId) -> Result<ExitCode> {
    let ks = KeyStore::load(keys, id).with_context(|| format!("keys for node {id}"))?;
    let nc = NodeConfig {
        replica: cfg.replica(id),
        pipeline: cfg.pipeline(),
        tcp: TcpConfig::default(),
    };
    let node = Node::start(nc, d, ks)?;
    info!("node {id} running, leader of view 0 is node 0");
    let stop = Arc::new(AtomicBool::new(false));
    signal_hook::flag::register(signal_hook::consts::SIGTERM, stop.clone())?;
    signal_hook::flag::register(signal_hook::consts::SIGINT, stop.clone())?;
    while !stop.load(Ordering::Relaxed) {
        std::thread::sleep(Duration::from_millis(100));
    }
    let dir = &cfg.output;
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join(format!("node-{id}-stages.csv")),
        node.metrics().to_csv(),
    )?;
    let st = node.status();
    let c = node.counters();
    std::fs::write(
        dir.join(format!("node-{id}.csv")),
        format!(
            "id,view,last_executed,committed_requests,pre_prepares,rejected\n{id},{},{},{},{},{}\n",
            st.view,
            st.last_executed,
            Counters::load(&c.committed_requests),
            Counters::load(&c.pre_prepares),
            Counters::load(&c.rejected)
        ),
    )?;
    info!(
        "node {id} stopped at view {} after executing seq {}",
        st.view, st.last_executed
    );
    node.shutdown();
    Ok(ExitCode::SUCCESS)
}

fn run_loadgen(cfg: &BenchConfig, d: Deployment, keys: &Path, local: bool) -> Result<ExitCode> {
    let ring = Keyring::read_dir(keys).with_context(|| format!("reading {}", keys.display()))?;
    let ids = cfg.client_ids();
    let clients = ids
        .iter()
        .map(|&c| ring.keystore(c))
        .collect::<Result<Vec<_>, _>>()
        .context("the keys directory needs one client key per --clients")?;
    let cluster = if local {
        Some(LocalCluster::start(cfg, &ring, d.clone())?)
    } else {
        None
    };
    let load = run_load(&cfg.load_config(), &d, clients)?;
    let r = match &cluster {
        Some(c) => {
            c.settle(Duration::from_millis(200), Duration::from_secs(5));
            report(cfg, &load, c)
        }
        None => {
            // Remote replicas keep their own stage tables.
            let empty = LocalCluster {
                nodes: Vec::new(),
                deployment: d,
            };
            remote_report(cfg, &load, empty)
        }
    };
    if let Some(c) = cluster {
        c.shutdown();
    }
    r.write(&cfg.output)?;
    print!("{}", r.summary_csv());
    Ok(ExitCode::SUCCESS)
}

fn remote_report(
    cfg: &BenchConfig,
    load: &pbft_runtime::LoadReport,
    _: LocalCluster,
) -> pbft_bench::RunReport {
    let lat = load.latencies_us();
    let throughput = load.throughput();
    pbft_bench::RunReport {
        mode: cfg.mode,
        n: cfg.n,
        value_size: cfg.value_size,
        batch_size: cfg.batch_size,
        clients: cfg.clients,
        outstanding: cfg.outstanding,
        window_s: load.window().as_secs_f64(),
        completed: load.completed(),
        throughput,
        goodput_gbps: pbft_bench::report::goodput_gbps(throughput, cfg.value_size),
        latency: pbft_bench::report::LatencySummary::from_sorted(&lat),
        latencies_us: lat,
        failed: load.failed(),
        rejected: 0,
        view_changes: 0,
        pre_prepares: 0,
        committed_requests: 0,
        pool_exhausted: load.pool_exhausted(),
        stages_csv: pbft_runtime::metrics::StageMetrics::new(false).to_csv(),
    }
}

fn simulate(name: &str, trace_out: Option<&Path>) -> Result<ExitCode> {
    let path = Path::new(name);
    let scenario = if path.exists() {
        Scenario::load(path)?
    } else {
        let text = scenarios::bundled(name)
            .with_context(|| format!("no scenario file or bundled scenario named {name}"))?;
        Scenario::parse(text)?
    };
    let (report, failures) = scenario.run()?;
    if let Some(p) = trace_out {
        std::fs::write(p, report.trace_ndjson())?;
    }
    let completed = report.stats.completed;
    let views: Vec<String> = report.replicas.iter().map(|r| r.view.to_string()).collect();
    if failures.is_empty() {
        println!(
            "PASS {}: {completed} requests completed, final views [{}], {} events",
            scenario.name,
            views.join(","),
            report.stats.events
        );
        return Ok(ExitCode::SUCCESS);
    }
    println!(
        "FAIL {}: {completed} requests completed, final views [{}]",
        scenario.name,
        views.join(",")
    );
    for f in &failures {
        println!("  {f}");
    }
    let nd = report.trace_ndjson();
    let all: Vec<&str> = nd.lines().collect();
    // around the first violation, or the tail when there is none
    let at = all
        .iter()
        .position(|l| l.contains("\"violation\""))
        .unwrap_or(all.len().saturating_sub(1));
    let from = at.saturating_sub(30);
    println!(
        "trace lines {}..{} of {}:",
        from,
        (at + 10).min(all.len()),
        all.len()
    );
    for l in &all[from..(at + 10).min(all.len())] {
        println!("{l}");
    }
    Ok(ExitCode::FAILURE)
}
