use std::sync::OnceLock;

use crossbeam_channel::unbounded;
use proptest::prelude::*;

use super::*;
use pbft_core::crypto::{digest, seal, Keyring, SignatureAlgorithm};
use pbft_core::message::{batch_digest, Batch, CheckpointBody, Request, VoteBody};
use pbft_core::replica::ReplicaConfig;
use pbft_core::wire::{decode, encode};

const CLIENT: NodeId = 100;

#[derive(Default)]
struct Sink(Mutex<Vec<(NodeId, Vec<u8>)>>);

impl Egress for Sink {
    fn send(&self, to: NodeId, frame: Vec<u8>) {
        self.0.lock().unwrap().push((to, frame));
    }
}

impl Sink {
    fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }
}

fn ring(n: u16) -> &'static Keyring {
    static RINGS: OnceLock<Mutex<HashMap<u16, &'static Keyring>>> = OnceLock::new();
    let mut m = RINGS.get_or_init(Default::default).lock().unwrap();
    m.entry(n).or_insert_with(|| {
        Box::leak(Box::new(
            Keyring::generate(SignatureAlgorithm::Ed25519, n, &[CLIENT], 7).unwrap(),
        ))
    })
}

fn cfg(mode: CryptoMode, verify: usize) -> PipelineConfig {
    let mut c = PipelineConfig::for_mode(mode);
    c.verify_parallelism = verify;
    c.sign_parallelism = 2;
    c.instrument = true;
    c
}

fn start(
    n: u16,
    id: NodeId,
    mode: CryptoMode,
    pc: PipelineConfig,
    io: PipelineIo,
) -> (Pipeline, Arc<Sink>) {
    let replica = Replica::new(ReplicaConfig::new(n, id, mode)).unwrap();
    let sink = Arc::new(Sink::default());
    let p = Pipeline::start(pc, replica, ring(n).keystore(id).unwrap(), sink.clone(), io).unwrap();
    (p, sink)
}

fn wait_until(f: impl Fn() -> bool) -> bool {
    let end = Instant::now() + Duration::from_secs(20);
    while Instant::now() < end {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(5));
    }
    false
}

fn signed(id: u64, size: usize) -> SignedRequest {
    let request = Request::new(CLIENT, id, vec![id as u8; size]);
    let signature = ring(4)
        .keystore(CLIENT)
        .unwrap()
        .sign(&request.auth_digest())
        .unwrap();
    SignedRequest { request, signature }
}

fn frame(n: u16, from: NodeId, msg: &Message, mode: CryptoMode) -> Vec<u8> {
    let to: Vec<NodeId> = (0..n).filter(|&r| r != from).collect();
    encode(&seal(msg, &to, mode, &ring(n).keystore(from).unwrap()).unwrap()).unwrap()
}

fn checkpoint(from: NodeId, seq: u64) -> Message {
    Message::new(
        0,
        seq,
        from,
        Body::Checkpoint(CheckpointBody {
            state_digest: digest(&seq.to_le_bytes()),
        }),
    )
}

/// A PREPARE whose attached batch makes hashing and verification cost
/// proportional to `k`.
fn heavy_prepare(from: NodeId, seq: u64, k: usize) -> Message {
    let batch: Batch = (0..k as u64).map(|i| signed(seq * 100 + i, 256)).collect();
    Message::new(
        0,
        seq,
        from,
        Body::Prepare(VoteBody {
            digest: batch_digest(&batch),
            batch: Some(batch),
        }),
    )
}

fn arrivals(rx: &Receiver<(NodeId, u64)>) -> HashMap<NodeId, Vec<u64>> {
    let mut m: HashMap<NodeId, Vec<u64>> = HashMap::new();
    for (o, s) in rx.try_iter() {
        m.entry(o).or_default().push(s);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn per_origin_order_survives_parallel_verify(
        loads in proptest::collection::vec(proptest::collection::vec(0usize..6, 8..20), 3)
    ) {
        let mode = CryptoMode::MacInterNode;
        let (tx, rx) = unbounded();
        let io = PipelineIo { arrivals: Some(tx), ..Default::default() };
        let (p, _) = start(4, 1, mode, cfg(mode, 4), io);
        let origins = [0u16, 2, 3];
        let expected: usize = loads.iter().map(Vec::len).sum();
        let handles: Vec<_> = origins
            .iter()
            .zip(loads.clone())
            .map(|(&o, load)| {
                let frames: Vec<Vec<u8>> = load
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        let m = if k == 0 { checkpoint(o, i as u64 + 1) } else { heavy_prepare(o, i as u64 + 1, k) };
                        frame(4, o, &m, mode)
                    })
                    .collect();
                let ingress = p.ingress();
                thread::spawn(move || {
                    for f in frames {
                        assert!(ingress.push(o, &f));
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let c = p.counters();
        prop_assert!(wait_until(|| Counters::load(&c.decided) == expected as u64));
        let got = arrivals(&rx);
        for (&o, load) in origins.iter().zip(&loads) {
            prop_assert_eq!(&got[&o], &(0..load.len() as u64).collect::<Vec<_>>());
        }
    }
}

#[test]
fn rejected_and_malformed_frames_are_accounted() {
    let mode = CryptoMode::MacInterNode;
    let (tx, rx) = unbounded();
    let io = PipelineIo {
        arrivals: Some(tx),
        ..Default::default()
    };
    let (p, _) = start(4, 1, mode, cfg(mode, 3), io);
    let ing = p.ingress();
    let mut forged = 0;
    for i in 0..30u64 {
        let mut f = frame(4, 2, &checkpoint(2, i + 1), mode);
        if i % 3 == 0 {
            // first payload byte, right after the 27-byte header
            f[27] ^= 1;
            forged += 1;
        }
        assert!(ing.push(2, &f));
    }
    assert!(!ing.push(2, b"\x05\x00\x00\x00garbage"));
    let c = p.counters();
    assert!(wait_until(|| Counters::load(&c.verify_in) == 30
        && Counters::load(&c.rejected) + Counters::load(&c.decided)
            == 30));
    assert_eq!(Counters::load(&c.rejected), forged);
    assert_eq!(Counters::load(&c.malformed), 1);
    let got = arrivals(&rx);
    assert_eq!(got[&2].len(), 20);
    assert!(got[&2].iter().all(|s| s % 3 != 0));
}

#[test]
fn proposal_is_hashed_once_and_cloned_per_peer() {
    let mode = CryptoMode::DomainOptimized;
    let (p, sink) = start(15, 0, mode, cfg(mode, 2), PipelineIo::default());
    p.inject(Event::Request(signed(1, 512)));
    assert!(wait_until(|| sink.len() == 14));
    let c = p.counters();
    assert_eq!(Counters::load(&c.destinations), 14);
    assert_eq!(Counters::load(&c.cloned), 14);
    assert_eq!(Counters::load(&c.macs), 14);
    assert_eq!(Counters::load(&c.signatures), 0);
    assert_eq!(
        p.metrics()
            .get(Stage::HashTx, MessageKind::PrePrepare)
            .count,
        1
    );
    assert_eq!(
        p.metrics()
            .get(Stage::SignMac, MessageKind::PrePrepare)
            .count,
        14
    );
    let mut to: Vec<NodeId> = sink.0.lock().unwrap().iter().map(|(t, _)| *t).collect();
    to.sort();
    assert_eq!(to, (1..15).collect::<Vec<_>>());
    for (_, f) in sink.0.lock().unwrap().iter() {
        let env = decode(f).unwrap();
        assert_eq!(env.kind, MessageKind::PrePrepare);
        assert_eq!(env.auths.len(), 14);
    }
}

#[test]
fn signing_merges_into_hashing_under_pk_only() {
    let mode = CryptoMode::PkOnly;
    let pc = cfg(mode, 2);
    assert!(pc.merge_hash_sign);
    let (p, sink) = start(4, 0, mode, pc, PipelineIo::default());
    p.inject(Event::Request(signed(1, 64)));
    assert!(wait_until(|| sink.len() == 3));
    let c = p.counters();
    assert_eq!(Counters::load(&c.signatures), 1);
    assert_eq!(Counters::load(&c.macs), 0);
    assert_eq!(Counters::load(&c.cloned), 3);
    for (_, f) in sink.0.lock().unwrap().iter() {
        let env = decode(f).unwrap();
        assert_eq!(env.auths.len(), 1);
        assert_eq!(env.auths[0].recipient, SIGNATURE_SLOT);
    }
}

#[test]
fn idle_pipeline_records_nothing() {
    let mode = CryptoMode::DomainOptimized;
    let (p, sink) = start(4, 1, mode, cfg(mode, 2), PipelineIo::default());
    thread::sleep(Duration::from_millis(100));
    assert!(p.metrics().snapshot().is_empty());
    assert_eq!(p.metrics().to_csv().lines().count(), 1);
    assert_eq!(sink.len(), 0);
    assert_eq!(Counters::load(&p.counters().verify_in), 0);
}

#[test]
fn every_prepare_is_counted_per_stage() {
    let mode = CryptoMode::DomainOptimized;
    let (p, _) = start(4, 1, mode, cfg(mode, 2), PipelineIo::default());
    let ing = p.ingress();
    for seq in 1..=1000u64 {
        let m = Message::new(
            0,
            seq,
            2,
            Body::Prepare(VoteBody {
                digest: digest(&seq.to_le_bytes()),
                batch: None,
            }),
        );
        ing.push(2, &frame(4, 2, &m, mode));
    }
    let c = p.counters();
    assert!(wait_until(|| Counters::load(&c.decided) == 1000));
    let m = p.metrics();
    for stage in [
        Stage::Unmarshal,
        Stage::HashRx,
        Stage::Verify,
        Stage::Decide,
    ] {
        assert_eq!(m.get(stage, MessageKind::Prepare).count, 1000, "{stage:?}");
    }
    let csv = m.to_csv();
    assert!(
        csv.lines().any(|l| l.starts_with("verify,PREPARE,1000,")),
        "{csv}"
    );
}

#[test]
fn zero_parallelism_is_rejected() {
    let mut pc = PipelineConfig::for_mode(CryptoMode::MacInterNode);
    pc.sign_parallelism = 0;
    assert!(pc.validate().is_err());
    let replica = Replica::new(ReplicaConfig::new(4, 0, CryptoMode::MacInterNode)).unwrap();
    let r = Pipeline::start(
        pc,
        replica,
        ring(4).keystore(0).unwrap(),
        Arc::new(Sink::default()),
        PipelineIo::default(),
    );
    assert!(matches!(r, Err(PipelineError::Config(_))));
}

/// Frames between in-process pipelines go straight into the peer's ingress.
struct Router {
    from: NodeId,
    peers: Arc<OnceLock<Vec<Ingress>>>,
    replies: Sender<Vec<u8>>,
}

impl Egress for Router {
    fn send(&self, to: NodeId, frame: Vec<u8>) {
        match self.peers.get().and_then(|p| p.get(to as usize)) {
            Some(i) => {
                i.push(self.from, &frame);
            }
            None => {
                let _ = self.replies.send(frame);
            }
        }
    }
}

#[test]
fn four_pipelines_commit_and_reply() {
    for mode in CryptoMode::ALL {
        let peers = Arc::new(OnceLock::new());
        let (reply_tx, reply_rx) = unbounded();
        let (commit_tx, commit_rx) = unbounded();
        let pipes: Vec<Pipeline> = (0..4u16)
            .map(|id| {
                let egress = Arc::new(Router {
                    from: id,
                    peers: peers.clone(),
                    replies: reply_tx.clone(),
                });
                let replica = Replica::new(ReplicaConfig::new(4, id, mode)).unwrap();
                let io = PipelineIo {
                    commits: Some(commit_tx.clone()),
                    ..Default::default()
                };
                Pipeline::start(
                    cfg(mode, 2),
                    replica,
                    ring(4).keystore(id).unwrap(),
                    egress,
                    io,
                )
                .unwrap()
            })
            .collect();
        let _ = peers.set(pipes.iter().map(Pipeline::ingress).collect());
        let ks = ring(4).keystore(CLIENT).unwrap();
        for id in 1..=5u64 {
            let sr = signed(id, 128);
            let mut env =
                Message::new(0, 0, CLIENT, Body::Request(sr.request.clone())).to_envelope();
            env.auths = vec![AuthEntry {
                recipient: SIGNATURE_SLOT,
                bytes: ks.sign(&sr.request.auth_digest()).unwrap(),
            }];
            pipes[0].ingress().push(CLIENT, &encode(&env).unwrap());
        }
        assert!(
            wait_until(|| pipes.iter().all(|p| p.status().last_executed == 5)),
            "{mode}"
        );
        let commits: Vec<Committed> = commit_rx.try_iter().collect();
        assert_eq!(commits.len(), 20, "{mode}");
        assert!(wait_until(|| reply_rx.len() >= 20), "{mode}");
        for p in &pipes {
            assert_eq!(Counters::load(&p.counters().rejected), 0, "{mode}");
        }
    }
}
