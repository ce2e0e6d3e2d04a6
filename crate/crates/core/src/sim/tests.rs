use super::*;

fn cfg(n: u16, seed: u64) -> SimConfig {
    let mut c = SimConfig::new(n, CryptoMode::MacInterNode, seed);
    c.trace = true;
    c
}

fn all_live_executed(r: &SimReport, want: usize) {
    for rep in r.live() {
        assert_eq!(rep.executed.len(), want, "replica {}", rep.id);
    }
}

#[test]
fn one_request_commits_everywhere() {
    let mut c = cfg(4, 1);
    c.requests_per_client = 1;
    let r = simulate(c).unwrap();
    assert_eq!(r.outcome, Outcome::Quiescent);
    assert!(r.is_safe(), "{:?}", r.violations);
    assert_eq!(r.stats.completed, 1);
    for rep in &r.replicas {
        assert_eq!(rep.last_executed, 1);
    }
    assert_eq!(r.view_changes(), 0);
}

#[test]
fn every_mode_runs_failure_free() {
    for mode in CryptoMode::ALL {
        let mut c = cfg(4, 2);
        c.mode = mode;
        c.clients = 2;
        c.outstanding = 2;
        let r = simulate(c).unwrap();
        assert!(r.is_safe());
        assert_eq!(r.stats.completed, 20, "{mode}");
        assert_eq!(r.stats.rejected, 0, "{mode}");
        all_live_executed(&r, 20);
    }
}

#[test]
fn broadcast_fans_out_per_recipient() {
    let mut sim = Simulation::new(cfg(15, 3)).unwrap();
    let m = Message::new(
        0,
        1,
        0,
        Body::Checkpoint(crate::message::CheckpointBody {
            state_digest: crate::crypto::digest(b"s"),
        }),
    );
    let to: Vec<NodeId> = (1..15).collect();
    let env = seal(&m, &to, CryptoMode::MacInterNode, &sim.nodes[0].keys).unwrap();
    let before = sim.queue.len();
    sim.transmit(0, &to, &env);
    assert_eq!(sim.queue.len() - before, 14);
    assert_eq!(sim.in_flight, 14);
}

#[test]
fn total_loss_delivers_nothing() {
    let mut c = cfg(4, 4);
    c.drop_probability = 1.0;
    c.max_retransmits = 2;
    c.client_timeout_us = 1_000;
    let r = simulate(c).unwrap();
    assert_eq!(r.stats.frames_sent, 0);
    assert!(r
        .trace
        .iter()
        .all(|l| !matches!(l.event, TraceEvent::Deliver { .. })));
    assert_eq!(r.stats.failed, 10);
}

#[test]
fn same_seed_same_trace() {
    let mut c = cfg(4, 5);
    c.drop_probability = 0.05;
    c.faults.insert(0, Fault::CrashAt(3_000));
    let a = simulate(c.clone()).unwrap().trace_ndjson();
    let b = simulate(c.clone()).unwrap().trace_ndjson();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    c.seed = 6;
    assert_ne!(a, simulate(c).unwrap().trace_ndjson());
}

#[test]
fn trace_is_ndjson() {
    let mut c = cfg(4, 7);
    c.requests_per_client = 1;
    let r = simulate(c).unwrap();
    for line in r.trace_ndjson().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("event").is_some() && v.get("t_us").is_some());
    }
}

#[test]
fn leader_crash_before_proposing_moves_to_view_one() {
    let mut c = cfg(4, 8);
    c.requests_per_client = 5;
    c.faults.insert(0, Fault::CrashAt(0));
    let r = simulate(c).unwrap();
    assert!(r.is_safe());
    assert_eq!(r.stats.completed, 5);
    assert_eq!(r.installed_views, BTreeSet::from([1]));
    all_live_executed(&r, 5);
    for rep in r.live() {
        assert_eq!(rep.view, 1);
    }
}

#[test]
fn equivocating_leader_cannot_split_agreement() {
    for seed in 0..10 {
        let mut c = cfg(4, seed);
        c.faults.insert(0, Fault::Equivocate);
        c.requests_per_client = 3;
        let r = simulate(c).unwrap();
        assert!(r.stats.equivocations > 0);
        assert!(r.is_safe(), "seed {seed}: {:?}", r.violations);
        assert_eq!(r.stats.completed, 3);
        assert!(r.view_changes() >= 1);
    }
}

#[test]
fn mute_backup_does_not_block_progress() {
    let mut c = cfg(7, 9);
    c.faults.insert(3, Fault::Mute);
    c.faults.insert(5, Fault::Mute);
    let r = simulate(c).unwrap();
    assert!(r.is_safe());
    assert_eq!(r.stats.completed, 10);
    assert_eq!(r.view_changes(), 0);
    assert!(r.stats.muted > 0);
}

#[test]
fn mute_leader_is_replaced() {
    let mut c = cfg(4, 10);
    c.faults.insert(0, Fault::Mute);
    let r = simulate(c).unwrap();
    assert!(r.is_safe());
    assert_eq!(r.stats.completed, 10);
    assert!(r.view_changes() >= 1);
}

#[test]
fn healed_partition_catches_up() {
    let mut c = cfg(4, 11);
    c.requests_per_client = 20;
    c.partitions.push(Partition {
        from_us: 0,
        until_us: 20_000,
        nodes: BTreeSet::from([3]),
    });
    let r = simulate(c).unwrap();
    assert!(r.is_safe());
    assert_eq!(r.stats.completed, 20);
    assert!(r.stats.dropped > 0);
}

#[test]
fn checkpoints_truncate_the_log() {
    let mut c = cfg(4, 12);
    c.checkpoint_interval = 10;
    c.log_capacity = 40;
    c.requests_per_client = 100;
    c.outstanding = 4;
    let r = simulate(c).unwrap();
    assert!(r.is_safe());
    for rep in &r.replicas {
        assert!(rep.max_log_len <= 40);
        assert!(rep.watermark_advances >= 9, "{}", rep.watermark_advances);
    }
}

#[test]
fn lossy_network_stays_safe() {
    for seed in 0..5 {
        let mut c = cfg(4, 100 + seed);
        c.drop_probability = 0.1;
        c.latency_max_us = 5_000;
        let r = simulate(c).unwrap();
        assert!(r.is_safe(), "{:?}", r.violations);
        assert_eq!(r.stats.completed + r.stats.failed, 10);
    }
}

#[test]
fn event_budget_reports_non_quiescence() {
    let mut c = cfg(4, 13);
    c.max_events = 50;
    let mut sim = Simulation::new(c).unwrap();
    assert!(matches!(
        sim.run_quiescent(),
        Err(SimError::NonQuiescent { events: 50 })
    ));
}

#[test]
fn deadline_stops_the_clock() {
    let mut sim = Simulation::new(cfg(4, 14)).unwrap();
    let r = sim.run(Until::Time(Duration::from_micros(500)));
    assert_eq!(r.outcome, Outcome::Deadline);
    assert_eq!(r.end_us, 500);
}

#[test]
fn config_validation() {
    let mut c = cfg(4, 0);
    c.latency_min_us = 10;
    c.latency_max_us = 5;
    assert!(Simulation::new(c).is_err());
    let mut c = cfg(4, 0);
    c.faults.insert(9, Fault::Mute);
    assert!(Simulation::new(c).is_err());
    let mut c = cfg(4, 0);
    c.faults.insert(1, Fault::Mute);
    c.faults.insert(2, Fault::Mute);
    assert!(!c.within_fault_bound());
}

const SCENARIO: &str = r#"
name = "t"
seed = 3
n = 4

[network]
latency_min_us = 100
latency_max_us = 800

[workload]
requests = 12

[[fault]]
node = 0
kind = "crash"
at_ms = 0

[expect]
committed_requests = 12
completed = 12
view_changes = 1
max_view = 1
identical_logs = true
"#;

#[test]
fn scenario_round_trip() {
    let s = Scenario::parse(SCENARIO).unwrap();
    let c = s.config().unwrap();
    assert_eq!(c.faults[&0], Fault::CrashAt(0));
    let (r, failed) = s.run().unwrap();
    assert!(failed.is_empty(), "{failed:?}");
    assert!(!r.trace.is_empty());
}

#[test]
fn scenario_expectations_can_fail() {
    let text = SCENARIO.replace("view_changes = 1", "view_changes = 0");
    let (_, failed) = Scenario::parse(&text).unwrap().run().unwrap();
    assert_eq!(failed.len(), 1, "{failed:?}");
}

#[test]
fn scenario_errors() {
    assert!(Scenario::parse("n = 4\nbogus = 1").is_err());
    assert!(Scenario::parse("n = 0").is_err());
    assert!(Scenario::parse("n = 4\n[network]\ndrop = 2.0").is_err());
    let dup = "n = 4\n[[fault]]\nnode = 1\nkind = \"mute\"\n[[fault]]\nnode = 1\nkind = \"mute\"";
    assert!(matches!(
        Scenario::parse(dup),
        Err(ScenarioError::Invalid(_))
    ));
}
