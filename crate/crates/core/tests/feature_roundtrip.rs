use groundprobe::feature_store::{
    decode_features, encode_features, join_views, read_feature_file, write_feature_file, FeatureRecord, HashId,
    Label, Split, View, HEADER_LEN,
};
use groundprobe::Error;
use proptest::prelude::*;

fn record(d_h: usize) -> impl Strategy<Value = FeatureRecord> {
    (
        any::<[u8; 16]>(),
        prop_oneof![Just(View::Base), Just(View::Blank)],
        prop_oneof![Just(Split::Train), Just(Split::Val), Just(Split::Test)],
        prop_oneof![Just(Label::Incorrect), Just(Label::Correct), Just(Label::Unlabeled)],
        proptest::collection::vec(-1e6f32..1e6, d_h),
    )
        .prop_map(|(id, view, split, label, vector)| FeatureRecord {
            hash_id: HashId(id),
            view,
            split,
            label,
            vector,
        })
}

fn file() -> impl Strategy<Value = (usize, Vec<FeatureRecord>)> {
    (1usize..12).prop_flat_map(|d| (Just(d), proptest::collection::vec(record(d), 0..20)))
}

proptest! {
    #[test]
    fn encode_decode_round_trip((d_h, records) in file()) {
        let bytes = encode_features(d_h, &records).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + records.len() * (20 + 4 * d_h));
        let decoded = decode_features(&bytes).unwrap();
        prop_assert_eq!(decoded.d_h, d_h);
        prop_assert_eq!(&decoded.records, &records);
        prop_assert_eq!(encode_features(d_h, &decoded.records).unwrap(), bytes);
    }

    #[test]
    fn any_truncation_is_rejected((d_h, records) in file(), cut in 1usize..64) {
        prop_assume!(!records.is_empty());
        let bytes = encode_features(d_h, &records).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_features(&bytes[..keep]).is_err());
    }
}

#[test]
fn file_round_trip_and_join() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |i: u8, view, label| FeatureRecord {
        hash_id: HashId([i; 16]),
        view,
        split: Split::Train,
        label,
        vector: vec![i as f32, -(i as f32)],
    };
    let base = vec![mk(1, View::Base, Label::Correct), mk(2, View::Base, Label::Incorrect)];
    let blank = vec![mk(2, View::Blank, Label::Unlabeled), mk(1, View::Blank, Label::Correct)];
    let path = dir.path().join("base.feat");
    write_feature_file(&path, 2, &base).unwrap();
    let back = read_feature_file(&path).unwrap();
    assert_eq!(back.records, base);
    let joined = join_views(&back.records, &blank).unwrap();
    assert_eq!(joined.pairs.len(), 2);
    assert!(joined.unmatched_base.is_empty() && joined.unmatched_blank.is_empty());
    assert!(joined.pairs[0].y && !joined.pairs[1].y);
    assert_eq!(joined.pairs[1].h_blank, vec![2.0, -2.0]);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = read_feature_file("/nonexistent/features.bin").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 3);
}
