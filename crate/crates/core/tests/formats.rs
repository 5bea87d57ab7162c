use std::fs;
use std::path::Path;

use amnesic::dataset::{load_repr_dataset, save_repr_dataset, DatasetPaths};
use amnesic::eval::lm_accuracy;
use amnesic::inlp::{load_projection, random_projection, save_projection};
use amnesic::{repd, Decoder, Projection, ProjectionKind};
use ndarray::{arr2, Array2};
use proptest::prelude::*;

fn write_extractor_files(dir: &Path) {
    repd::write(dir.join("layer3.repd"), &arr2(&[[2.0f32, 1.0], [1.0, 3.0], [3.0, -1.0]])).unwrap();
    fs::write(
        dir.join("layer3.tsv"),
        "token\tposition\tsentence_id\ttask_label\tpos\n\
         the\t0\t0\t0\tDET\n\
         cat\t1\t0\t1\tNOUN\n\
         sat\t0\t1\t1\tVERB\n",
    )
    .unwrap();
    fs::write(
        dir.join("layer3.json"),
        r#"{"model":"bert-base-uncased","layer":3,"masked":false,
            "properties":{"pos":["DET","NOUN","VERB"]},"vocab_size":2,
            "decoder_file":"decoder.repd","vocab_file":"vocab.txt"}"#,
    )
    .unwrap();
    repd::write(dir.join("decoder.repd"), &arr2(&[[1.0f32, 0.0], [0.0, 1.0]])).unwrap();
    fs::write(dir.join("vocab.txt"), "the\ncat\n").unwrap();
}

#[test]
fn repd_bytes_are_fixed() {
    let bytes = repd::encode(&arr2(&[[1.0f32, -2.0]]));
    assert_eq!(
        hex(&bytes),
        "52455044010000000100000002000000\
         0000803f000000c0"
    );
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn loads_extractor_output_and_its_decoder() {
    let dir = tempfile::tempdir().unwrap();
    write_extractor_files(dir.path());
    let ds = load_repr_dataset(dir.path().join("layer3.repd")).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.property("pos").unwrap(), ["DET", "NOUN", "VERB"]);
    assert_eq!(ds.sentence_ids, [0, 0, 1]);
    let paths = DatasetPaths::from_reps(dir.path().join("layer3.repd"));
    let dec = Decoder::from_meta(&ds.meta, &paths).unwrap();
    assert_eq!(dec.vocab, ["the", "cat"]);

    assert!((lm_accuracy(&ds, &dec, None).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let drop_first = Projection::from_rows(arr2(&[[1.0, 0.0]]).view(), ProjectionKind::Amnesic, 1e-10);
    assert!((lm_accuracy(&ds, &dec, Some(&drop_first)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    write_extractor_files(dir.path());
    let ds = load_repr_dataset(dir.path().join("layer3.repd")).unwrap();
    let copy = dir.path().join("copy.repd");
    save_repr_dataset(&ds, &copy).unwrap();
    let back = load_repr_dataset(&copy).unwrap();
    assert_eq!(back.reps, ds.reps);
    assert_eq!(back.tokens, ds.tokens);
    assert_eq!(back.properties, ds.properties);
    assert_eq!(back.meta, ds.meta);
}

#[test]
fn row_count_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_extractor_files(dir.path());
    repd::write(dir.path().join("layer3.repd"), &Array2::zeros((2, 2))).unwrap();
    let err = load_repr_dataset(dir.path().join("layer3.repd")).unwrap_err();
    assert_eq!(err.kind(), "ConsistencyError");
}

#[test]
fn bad_tsv_header_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_extractor_files(dir.path());
    let tsv = dir.path().join("layer3.tsv");
    fs::write(&tsv, "word\tposition\tsentence_id\ttask_label\nthe\t0\t0\t0\n").unwrap();
    let err = load_repr_dataset(dir.path().join("layer3.repd")).unwrap_err();
    assert_eq!(err.kind(), "FormatError");
    assert_eq!(err.path(), Some(tsv.as_path()));
}

#[test]
fn missing_matrix_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.repd");
    let err = load_repr_dataset(&missing).unwrap_err();
    assert_eq!(err.kind(), "IoError");
    assert_eq!(err.path(), Some(missing.as_path()));
}

#[test]
fn projection_round_trips_with_kind_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rand.repd");
    let p = random_projection(12, 4, 7).unwrap();
    save_projection(&p, None, &path).unwrap();
    let (back, log) = load_projection(&path).unwrap();
    assert!(log.is_none());
    assert_eq!(back.kind, ProjectionKind::Random);
    assert_eq!(back.seed, Some(7));
    assert_eq!(back.removed(), 4);
    let diff = &back.matrix() - &p.matrix();
    assert!(diff.iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn identity_projection_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("id.repd");
    save_projection(&Projection::identity(5), None, &path).unwrap();
    let (back, _) = load_projection(&path).unwrap();
    assert!(back.is_identity());
    assert_eq!(back.dim(), 5);
}

proptest! {
    #[test]
    fn repd_round_trips(rows in 0usize..6, cols in 0usize..6, seed in any::<u32>()) {
        let m = Array2::from_shape_fn((rows, cols), |(i, j)| {
            (seed as f32).mul_add(1e-3, (i * 7 + j) as f32) - 3.5
        });
        let back = repd::decode(&repd::encode(&m), Path::new("mem")).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn truncated_repd_is_rejected(cut in 1usize..8) {
        let bytes = repd::encode(&arr2(&[[1.0f32, 2.0], [3.0, 4.0]]));
        let err = repd::decode(&bytes[..bytes.len() - cut], Path::new("mem")).unwrap_err();
        prop_assert_eq!(err.kind(), "FormatError");
    }
}
