use std::path::PathBuf;

use pbft_core::wire::{
    decode, encode, parse_hex_dump, AuthEntry, FrameDecoder, MessageKind, WireEnvelope, WireError,
};
use proptest::prelude::*;

fn fixture(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("testdata")
        .join(name);
    parse_hex_dump(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn empty_request_matches_golden_bytes() {
    let env = WireEnvelope::new(MessageKind::Request, 0, 0, 1, {
        let mut p = 1u16.to_le_bytes().to_vec();
        p.extend_from_slice(&0u64.to_le_bytes());
        p
    });
    let golden = fixture("request_empty.hex");
    assert_eq!(golden.len(), 39);
    assert_eq!(encode(&env).unwrap(), golden);
    assert_eq!(decode(&golden).unwrap(), env);
}

#[test]
fn prepare_with_auth_matches_golden_bytes() {
    let mut env = WireEnvelope::new(MessageKind::Prepare, 3, 7, 2, vec![0xAB; 32]);
    env.auths.push(AuthEntry {
        recipient: 1,
        bytes: vec![0xDE, 0xAD, 0xBE, 0xEF],
    });
    let golden = fixture("prepare_one_auth.hex");
    assert_eq!(encode(&env).unwrap(), golden);
    assert_eq!(decode(&golden).unwrap(), env);
}

fn kind() -> impl Strategy<Value = MessageKind> {
    (0u8..8).prop_map(|b| MessageKind::from_byte(b).unwrap())
}

prop_compose! {
    fn envelope()(
        kind in kind(),
        view in any::<u64>(),
        seq in any::<u64>(),
        sender in any::<u16>(),
        payload in prop::collection::vec(any::<u8>(), 0..256),
        auths in prop::collection::vec(
            (any::<u16>(), prop::collection::vec(any::<u8>(), 0..300)),
            0..6,
        ),
    ) -> WireEnvelope {
        let mut e = WireEnvelope::new(kind, view, seq, sender, payload);
        e.auths = auths.into_iter().map(|(recipient, bytes)| AuthEntry { recipient, bytes }).collect();
        e
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn round_trip(e in envelope()) {
        let bytes = encode(&e).unwrap();
        prop_assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        prop_assert_eq!(decode(&bytes).unwrap(), e);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 64)) {
        let _ = decode(&bytes);
        let mut fd = FrameDecoder::default();
        let _ = fd.feed(&bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn no_frame_is_a_prefix_of_another(a in envelope(), b in envelope()) {
        let (x, y) = (encode(&a).unwrap(), encode(&b).unwrap());
        if x != y {
            prop_assert!(!y.starts_with(&x) && !x.starts_with(&y));
        }
    }

    #[test]
    fn arbitrary_chunking_yields_the_same_frames(
        es in prop::collection::vec(envelope(), 1..5),
        cuts in prop::collection::vec(1usize..50, 1..20),
    ) {
        let stream: Vec<u8> = es.iter().flat_map(|e| encode(e).unwrap()).collect();
        let mut fd = FrameDecoder::default();
        let mut out = Vec::new();
        let mut pos = 0;
        for c in cuts.iter().cycle() {
            if pos >= stream.len() {
                break;
            }
            let end = (pos + c).min(stream.len());
            out.extend(fd.feed(&stream[pos..end]).unwrap());
            pos = end;
        }
        let decoded: Vec<WireEnvelope> = out.iter().map(|f| decode(f).unwrap()).collect();
        prop_assert_eq!(decoded, es);
    }
}

#[test]
fn oversize_declared_frame_is_refused() {
    let mut fd = FrameDecoder::default();
    assert!(matches!(
        fd.feed(&[0xFF; 8]),
        Err(WireError::FrameTooLarge { .. })
    ));
}
