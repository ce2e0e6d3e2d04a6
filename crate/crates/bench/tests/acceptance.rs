//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion.
//!
//! Criteria 6-9 measure throughput on whatever machine runs the suite; their
//! lines are reported but do not fail the run. Every other criterion does.
//!
//! `cargo test -p pbft-bench --test acceptance -- 3 10` runs a subset.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pbft_bench::harness::run_local;
use pbft_bench::report::{cdf, goodput_gbps, LatencySummary};
use pbft_bench::scenarios::bundled;
use pbft_bench::BenchConfig;
use pbft_core::client::{ClientAction, ClientConfig, ClientSession};
use pbft_core::crypto::{
    digest, required_auth, seal, AuthScheme, CryptoMode, Keyring, MessageClass, SignatureAlgorithm,
};
use pbft_core::message::{
    Body, Message, PrePrepareBody, ReplyBody, Request, SignedRequest, VoteBody,
};
use pbft_core::replica::{primary, Event, Inbound, Replica, ReplicaConfig, Status};
use pbft_core::sim::{Fault, Scenario, SimConfig, Simulation, Until, Violation};
use pbft_core::wire::{
    decode, encode, parse_hex_dump, AuthEntry, MessageKind, NodeId, WireEnvelope,
};
use pbft_runtime::Stage;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (u8, &'static str, bool, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "safety under byzantine faults", true, c1_safety),
    (2, "liveness across view changes", true, c2_liveness),
    (3, "quorum arithmetic", true, c3_quorums),
    (4, "crypto policy matrix", true, c4_policy),
    (5, "codec bit-exactness", true, c5_codec),
    (6, "mode throughput ordering", false, c6_modes),
    (7, "cost breakdown shape", false, c7_costs),
    (8, "batching effect", false, c8_batching),
    (9, "scaling trend", false, c9_scaling),
    (10, "checkpoints and log bound", true, c10_checkpoints),
    (11, "latency distribution", true, c11_latency),
];

fn main() {
    let only: Vec<u8> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut hard_failures = 0;
    for (n, name, hard, run) in CRITERIA {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let soft = if hard || o.pass {
            ""
        } else {
            " (reported, not enforced)"
        };
        println!(
            "criterion {n}: {verdict} {name}{soft}: {} [{:.1}s]",
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if hard && !o.pass {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}

// 1

fn c1_safety() -> Outcome {
    let mut violations: Vec<String> = Vec::new();
    let mut stalled = 0;
    let runs = 1_000u64;
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = if seed % 2 == 0 { 4 } else { 7 };
        let mut c = SimConfig::new(n, CryptoMode::ALL[(seed % 3) as usize], seed);
        c.latency_min_us = rng.gen_range(50..500);
        c.latency_max_us = c.latency_min_us + rng.gen_range(0..5_000);
        c.drop_probability = rng.gen_range(0.0..0.05);
        c.clients = 2;
        c.requests_per_client = 5;
        c.max_events = 500_000;
        let node: NodeId = if rng.gen_bool(0.5) {
            0
        } else {
            rng.gen_range(1..n)
        };
        let fault = match seed % 3 {
            0 => Fault::CrashAt(rng.gen_range(0..20_000)),
            1 => Fault::Mute,
            _ => Fault::Equivocate,
        };
        c.faults.insert(node, fault);
        let r = Simulation::new(c)
            .expect("valid config")
            .run(Until::Quiescent);
        for v in &r.violations {
            if matches!(v, Violation::Agreement { .. } | Violation::Validity { .. }) {
                violations.push(format!("seed {seed}: {v}"));
            }
        }
        if r.stats.completed < 10 {
            stalled += 1;
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "{runs} runs, {} agreement/validity violations{}, {stalled} runs left requests unfinished",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

// 2

fn c2_liveness() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for name in ["leader_crash", "two_failures"] {
        let sc = Scenario::parse(bundled(name).unwrap()).unwrap();
        let (r, failures) = sc.run().unwrap();
        let views: Vec<_> = r.installed_views.iter().collect();
        notes.push(format!(
            "{name}: {} completed, views {views:?}",
            r.stats.completed
        ));
        if !failures.is_empty() {
            pass = false;
            notes.push(failures.join("; "));
        }
    }
    outcome(pass, notes.join(", "))
}

// 3

fn deliver(m: Message) -> Event {
    Event::Deliver(Inbound {
        message: m,
        auths: Vec::new(),
    })
}

fn vote(commit: bool, seq: u64, sender: NodeId, d: pbft_core::crypto::Digest) -> Message {
    let v = VoteBody {
        digest: d,
        batch: None,
    };
    Message::new(
        0,
        seq,
        sender,
        if commit {
            Body::Commit(v)
        } else {
            Body::Prepare(v)
        },
    )
}

/// Returns a description of the first threshold that is off.
fn replica_thresholds(n: u16) -> Result<(), String> {
    let f = (n - 1) / 3;
    let q = 2 * f as usize + 1;
    let me: NodeId = 1;
    let mut r = Replica::new(ReplicaConfig::new(n, me, CryptoMode::MacInterNode))
        .map_err(|e| e.to_string())?;
    let batch = vec![SignedRequest {
        request: Request::new(1000, 1, b"x".to_vec()),
        signature: vec![1],
    }];
    let pp = PrePrepareBody::new(batch);
    let d = pp.batch_digest;
    r.handle(deliver(Message::new(
        0,
        1,
        primary(0, n),
        Body::PrePrepare(pp),
    )));
    // the PRE_PREPARE and our own PREPARE are two votes
    let others: Vec<NodeId> = (2..n).collect();
    let mut votes = 2;
    for &s in &others[..q - 3] {
        r.handle(deliver(vote(false, 1, s, d)));
        votes += 1;
    }
    if votes != 2 * f as usize || r.status(1) != Some(Status::PrePrepared) {
        return Err(format!("n={n}: prepared with {votes} votes"));
    }
    r.handle(deliver(vote(false, 1, others[q - 3], d)));
    if r.status(1) != Some(Status::Prepared) {
        return Err(format!("n={n}: not prepared at {q} votes"));
    }
    // our own COMMIT is one vote
    for &s in &others[..q - 2] {
        r.handle(deliver(vote(true, 1, s, d)));
    }
    if r.status(1) != Some(Status::Prepared) {
        return Err(format!("n={n}: committed at {} votes", q - 1));
    }
    let out = r.handle(deliver(vote(true, 1, others[q - 2], d)));
    if r.status(1) != Some(Status::Committed) || out.commits.len() != 1 {
        return Err(format!("n={n}: not committed at {q} votes"));
    }
    Ok(())
}

fn client_threshold(n: u16) -> Result<(), String> {
    let f = (n - 1) / 3;
    let mode = CryptoMode::DomainOptimized;
    let client: NodeId = 1000;
    let ring = Keyring::generate(SignatureAlgorithm::Ed25519, n, &[client], 3)
        .map_err(|e| e.to_string())?;
    let mut s = ClientSession::new(ClientConfig::new(n, mode), ring.keystore(client).unwrap());
    let (id, _) = s
        .submit(b"x".to_vec(), Duration::ZERO)
        .map_err(|e| e.to_string())?;
    let result = digest(b"result");
    for from in 0..=f {
        let m = Message::new(
            0,
            1,
            from,
            Body::Reply(ReplyBody {
                client_id: client,
                request_id: id,
                batch_seq: 1,
                result,
            }),
        );
        let env = seal(&m, &[client], mode, &ring.keystore(from).unwrap()).unwrap();
        let done = s
            .on_reply(&env, Duration::from_millis(1))
            .iter()
            .any(|a| matches!(a, ClientAction::Complete(_)));
        let replies = from + 1;
        if done != (replies == f + 1) {
            return Err(format!("n={n}: completion={done} after {replies} replies"));
        }
    }
    Ok(())
}

fn c3_quorums() -> Outcome {
    let ns = [4u16, 7, 10, 13, 15];
    let errors: Vec<String> = ns
        .iter()
        .flat_map(|&n| [replica_thresholds(n), client_threshold(n)])
        .filter_map(Result::err)
        .collect();
    outcome(
        errors.is_empty(),
        if errors.is_empty() {
            format!("n in {ns:?}: prepared/committed at exactly 2f+1, client done at exactly f+1")
        } else {
            errors.join("; ")
        },
    )
}

// 4

fn c4_policy() -> Outcome {
    use AuthScheme::*;
    use CryptoMode::*;
    use MessageClass::*;
    let table: [(CryptoMode, MessageClass, AuthScheme); 15] = [
        (PkOnly, ClientRequest, Signature),
        (PkOnly, InterNode, Signature),
        (PkOnly, ClientReply, Signature),
        (PkOnly, ViewChange, Signature),
        (PkOnly, CheckpointBlockSig, Absent),
        (MacInterNode, ClientRequest, Signature),
        (MacInterNode, InterNode, Mac),
        (MacInterNode, ClientReply, Signature),
        (MacInterNode, ViewChange, Signature),
        (MacInterNode, CheckpointBlockSig, Absent),
        (DomainOptimized, ClientRequest, Signature),
        (DomainOptimized, InterNode, Mac),
        (DomainOptimized, ClientReply, Mac),
        (DomainOptimized, ViewChange, Signature),
        (DomainOptimized, CheckpointBlockSig, Signature),
    ];
    let wrong: Vec<String> = table
        .iter()
        .filter(|(m, c, want)| required_auth(*m, *c) != *want)
        .map(|(m, c, want)| format!("{m}/{c:?} is {:?}, want {want:?}", required_auth(*m, *c)))
        .collect();
    let covered = CryptoMode::ALL.len() * MessageClass::ALL.len();
    outcome(
        wrong.is_empty() && covered == 15,
        if wrong.is_empty() {
            "15/15 entries match".to_string()
        } else {
            wrong.join("; ")
        },
    )
}

// 5

fn fixture(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/testdata")
        .join(name);
    parse_hex_dump(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn envelope() -> impl Strategy<Value = WireEnvelope> {
    (
        0u8..8,
        any::<u64>(),
        any::<u64>(),
        any::<u16>(),
        prop::collection::vec(any::<u8>(), 0..256),
        prop::collection::vec(
            (any::<u16>(), prop::collection::vec(any::<u8>(), 0..64)),
            0..6,
        ),
    )
        .prop_map(|(k, view, seq, sender, payload, auths)| {
            let mut e = WireEnvelope::new(
                MessageKind::from_byte(k).unwrap(),
                view,
                seq,
                sender,
                payload,
            );
            e.auths = auths
                .into_iter()
                .map(|(recipient, bytes)| AuthEntry { recipient, bytes })
                .collect();
            e
        })
}

fn c5_codec() -> Outcome {
    let mut request = 1u16.to_le_bytes().to_vec();
    request.extend_from_slice(&0u64.to_le_bytes());
    let golden_request = encode(&WireEnvelope::new(MessageKind::Request, 0, 0, 1, request))
        .unwrap()
        == fixture("request_empty.hex");
    let mut prepare = WireEnvelope::new(MessageKind::Prepare, 3, 7, 2, vec![0xAB; 32]);
    prepare.auths.push(AuthEntry {
        recipient: 1,
        bytes: vec![0xDE, 0xAD, 0xBE, 0xEF],
    });
    let golden_prepare = encode(&prepare).unwrap() == fixture("prepare_one_auth.hex")
        && decode(&fixture("prepare_one_auth.hex")).unwrap() == prepare;

    let cfg = PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    };
    let round_trip = TestRunner::new(cfg.clone())
        .run(&envelope(), |e| {
            prop_assert_eq!(decode(&encode(&e).unwrap()).unwrap(), e);
            Ok(())
        })
        .is_ok();
    // the runner reports a panic inside the closure as a failure
    let fuzz = TestRunner::new(cfg)
        .run(&prop::collection::vec(any::<u8>(), 0..128), |b| {
            let _ = decode(&b);
            Ok(())
        })
        .is_ok();
    outcome(
        golden_request && golden_prepare && round_trip && fuzz,
        format!(
            "golden frames {}/{}, 10^4 round trips {}, 10^4 fuzz inputs {}",
            golden_request as u8 + golden_prepare as u8,
            2,
            if round_trip { "ok" } else { "failed" },
            if fuzz { "without panics" } else { "panicked" }
        ),
    )
}

// 6-9, 11: in-process groups over loopback TCP, RSA-2048 signatures.

fn perf_config(mode: CryptoMode) -> BenchConfig {
    BenchConfig {
        mode,
        signature: SignatureAlgorithm::Rsa2048,
        instrument: true,
        output: std::env::temp_dir().join("pbftstar-acceptance"),
        ..BenchConfig::default()
    }
}

static MODE_RUNS: std::sync::OnceLock<Vec<pbft_bench::RunReport>> = std::sync::OnceLock::new();

/// Criterion 6 runs, shared with criterion 11.
fn mode_runs() -> &'static [pbft_bench::RunReport] {
    MODE_RUNS.get_or_init(|| {
        pbft_bench::compare::ORDER
            .iter()
            .map(|&mode| {
                let cfg = BenchConfig {
                    warmup_s: 5.0,
                    duration_s: 35.0,
                    pool: 30_000,
                    ..perf_config(mode)
                };
                run_local(&cfg).expect("local run")
            })
            .collect()
    })
}

fn c6_modes() -> Outcome {
    let cmp = pbft_bench::compare::Comparison {
        runs: mode_runs().to_vec(),
    };
    let (a, b) = cmp.ratios();
    let (pa, pb) = pbft_bench::compare::Comparison::paper_ratios(512);
    let t: Vec<String> = cmp
        .runs
        .iter()
        .map(|r| format!("{} {:.0} ops/s", r.mode, r.throughput))
        .collect();
    outcome(
        cmp.passes(2.0),
        format!(
            "{}; DOMAIN/MAC {a:.2}x, MAC/PK {b:.2}x (published {pa:.2}x, {pb:.2}x)",
            t.join(", ")
        ),
    )
}

fn c7_costs() -> Outcome {
    let cfg = BenchConfig {
        value_size: 4096,
        warmup_s: 2.0,
        duration_s: 12.0,
        pool: 12_000,
        ..perf_config(CryptoMode::DomainOptimized)
    };
    let r = run_local(&cfg).expect("local run");
    // stage table as (stage, kind) -> (count, total_ns)
    let rows: Vec<(String, String, u64, u64)> = r
        .stages_csv
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Some((
                f[0].to_string(),
                f[1].to_string(),
                f[2].parse().ok()?,
                f[3].parse().ok()?,
            ))
        })
        .collect();
    let mean = |stage: Stage, kinds: &[&str]| {
        let (c, t) = rows
            .iter()
            .filter(|(s, k, _, _)| s == stage.as_str() && kinds.contains(&k.as_str()))
            .fold((0, 0), |(c, t), (_, _, n, ns)| (c + n, t + ns));
        if c == 0 {
            0.0
        } else {
            t as f64 / c as f64
        }
    };
    let total = |stages: &[Stage]| -> u64 {
        rows.iter()
            .filter(|(s, _, _, _)| stages.iter().any(|st| st.as_str() == s))
            .map(|r| r.3)
            .sum()
    };
    let votes = ["PREPARE", "COMMIT"];
    let (verify, hash) = (mean(Stage::Verify, &votes), mean(Stage::HashRx, &votes));
    let ratio = if verify > 0.0 { hash / verify } else { 0.0 };
    let heavy = total(&[
        Stage::Unmarshal,
        Stage::Marshal,
        Stage::HashRx,
        Stage::HashTx,
    ]);
    let sign = total(&[Stage::SignMac]);
    outcome(
        ratio >= 10.0 && heavy > sign,
        format!(
            "leader PREPARE/COMMIT: Hash(RX) {hash:.0} ns vs Verify {verify:.0} ns = {ratio:.1}x (need 10x); \
             (un)marshal+hash {:.1} ms vs sign/MAC {:.1} ms",
            heavy as f64 / 1e6,
            sign as f64 / 1e6
        ),
    )
}

fn c8_batching() -> Outcome {
    let base = BenchConfig {
        outstanding: 8,
        warmup_s: 2.0,
        duration_s: 12.0,
        pool: 30_000,
        ..perf_config(CryptoMode::DomainOptimized)
    };
    let one = run_local(&base).expect("local run");
    let eight = run_local(&BenchConfig {
        batch_size: 8,
        batch_timeout_us: 100_000,
        ..base.clone()
    })
    .expect("local run");
    let speedup = eight.throughput / one.throughput.max(1e-9);
    let expected_pp = eight.committed_requests.div_ceil(8);
    let pp_ok = eight.pre_prepares.abs_diff(expected_pp) <= 1;
    let goodput_ok = [&one, &eight]
        .iter()
        .all(|r| (r.goodput_gbps - goodput_gbps(r.throughput, r.value_size)).abs() < 1e-12);
    outcome(
        speedup >= 1.5 && pp_ok && goodput_ok,
        format!(
            "batch 1 {:.0} ops/s, batch 8 {:.0} ops/s ({speedup:.2}x); {} PRE_PREPAREs for {} requests (ceil/8 = {expected_pp}); goodput {}",
            one.throughput,
            eight.throughput,
            eight.pre_prepares,
            eight.committed_requests,
            if goodput_ok { "consistent" } else { "inconsistent" }
        ),
    )
}

fn c9_scaling() -> Outcome {
    let runs: Vec<(u16, f64)> = [4u16, 7, 10]
        .iter()
        .map(|&n| {
            let cfg = BenchConfig {
                n,
                warmup_s: 2.0,
                duration_s: 12.0,
                pool: 20_000,
                ..perf_config(CryptoMode::DomainOptimized)
            };
            (n, run_local(&cfg).expect("local run").throughput)
        })
        .collect();
    let monotone = runs.windows(2).all(|w| w[1].1 <= w[0].1);
    let t: Vec<String> = runs
        .iter()
        .map(|(n, t)| format!("n={n} {t:.0} ops/s"))
        .collect();
    outcome(monotone, t.join(", "))
}

// 10

fn c10_checkpoints() -> Outcome {
    let mut c = SimConfig::new(4, CryptoMode::MacInterNode, 10);
    c.checkpoint_interval = 500;
    c.log_capacity = 10_000;
    c.clients = 10;
    c.outstanding = 4;
    c.requests_per_client = 5_000;
    c.value_size = 16;
    c.max_events = 50_000_000;
    let r = Simulation::new(c.clone()).unwrap().run(Until::Quiescent);
    let max_log = r.replicas.iter().map(|x| x.max_log_len).max().unwrap_or(0);
    let advances = r
        .replicas
        .iter()
        .map(|x| x.watermark_advances)
        .min()
        .unwrap_or(0);
    let all_done = r.live().all(|x| x.executed.len() == 50_000);
    let bounded = r.is_safe() && max_log <= 10_000 && advances >= 99 && all_done;

    // crash the leader once a checkpoint is stable everywhere and later
    // batches have committed on top of it
    c.requests_per_client = 300;
    let total = c.requests_per_client as usize * c.clients;
    let probe = Duration::from_millis(100);
    let before = Simulation::new(c.clone()).unwrap().run(Until::Time(probe));
    let checkpointed = before
        .replicas
        .iter()
        .map(|x| x.low_watermark)
        .min()
        .unwrap_or(0);
    let above = before
        .replicas
        .iter()
        .map(|x| x.last_executed)
        .min()
        .unwrap_or(0);
    c.faults.insert(0, Fault::CrashAt(probe.as_micros() as u64));
    let after = Simulation::new(c).unwrap().run(Until::Quiescent);
    let all_after = after.live().all(|x| x.executed.len() == total);
    let vc_ok = checkpointed >= 500
        && above > checkpointed
        && after.is_safe()
        && !after.installed_views.is_empty()
        && all_after;
    outcome(
        bounded && vc_ok,
        format!(
            "50k requests: max log {max_log}, min watermark advances {advances}, all executed {all_done}, safe {}; \
             leader crash at stable checkpoint {checkpointed} with seq {above} committed: views {:?}, violations {}, \
             all {total} executed {all_after}",
            r.is_safe(),
            after.installed_views,
            after.violations.len(),
        ),
    )
}

// 11

fn c11_latency() -> Outcome {
    // the DOMAIN run of criterion 6 is the saturated one
    let r = &mode_runs()[0];
    let points = cdf(&r.latencies_us);
    let monotone = points
        .windows(2)
        .all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1);
    let complete = points.last().is_some_and(|p| p.1 == 1.0) && !r.latencies_us.is_empty();
    let s = LatencySummary::from_sorted(&r.latencies_us);
    let ordered = s.p99_us >= s.p95_us && s.p95_us >= s.p50_us;
    outcome(
        monotone && complete && ordered && s == r.latency,
        format!(
            "{} samples, p50 {} us, p95 {} us, p99 {} us, p99/p50 {:.2}",
            r.latencies_us.len(),
            s.p50_us,
            s.p95_us,
            s.p99_us,
            s.tail_ratio()
        ),
    )
}
