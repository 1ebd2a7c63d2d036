use focusgate::trace_io::{
    decode, encode, read_trace, write_trace, AttentionTrace, DecoderTrace, FeatureDump, Storage,
    TraceFile, TraceHeader,
};
use proptest::prelude::*;

fn payload(len: usize, seed: u64) -> Vec<f32> {
    // rows need not be distributions for the byte round trip; lenient decode warns only
    (0..len)
        .map(|i| (((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32) / 1000.0)
        .collect()
}

fn check(file: TraceFile) {
    let bytes = encode(&file).unwrap();
    let loaded = decode(&bytes, false).unwrap();
    assert_eq!(encode(&loaded.trace).unwrap(), bytes);
    assert_eq!(loaded.trace.data(), file.data());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.pats");
    write_trace(&path, &file).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let again = read_trace(&path, false).unwrap();
    assert_eq!(encode(&again.trace).unwrap(), bytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn vision_round_trip(l in 1usize..5, h in 1usize..4, n in 2usize..12, cls in any::<bool>(), reduced in any::<bool>(), seed in any::<u64>()) {
        let storage = if reduced && cls { Storage::ClsReduced } else { Storage::Full };
        let header = TraceHeader::vision("m", (3..3 + l).collect(), h, n, cls, storage);
        let len = match storage { Storage::Full => l * h * n * n, Storage::ClsReduced => l * h * n };
        check(AttentionTrace::new(header, payload(len, seed)).unwrap().into());
    }

    #[test]
    fn feature_round_trip(n in 2usize..40, c in 1usize..16, layer in 0usize..30, seed in any::<u64>()) {
        let header = TraceHeader::features("m", layer, n, true, c);
        check(FeatureDump::new(header, payload((n - 1) * c, seed)).unwrap().into());
    }

    #[test]
    fn decoder_round_trip(t in 1usize..5, l in 1usize..4, h in 1usize..3, n in 2usize..20, seed in any::<u64>()) {
        let header = TraceHeader::decoder("m", (0..l).collect(), h, n, [0, n / 2 + 1], t);
        check(DecoderTrace::new(header, payload(t * l * h * n, seed)).unwrap().into());
    }
}

#[test]
fn full_size_vision_round_trip() {
    let (l, h, n) = (24, 16, 577);
    let header = TraceHeader::vision("llava-1.5", (0..l).collect(), h, n, true, Storage::ClsReduced);
    check(AttentionTrace::new(header, payload(l * h * n, 9)).unwrap().into());
    let header = TraceHeader::vision("llava-1.5", vec![7, 8], h, n, true, Storage::Full);
    check(AttentionTrace::new(header, payload(2 * h * n * n, 9)).unwrap().into());
}
