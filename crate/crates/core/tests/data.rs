use std::fs;

use ltkd::data::{decay_counts, imbalance_factor, make_blobs, BlobsConfig, DataBundle, Dataset, Split};
use ltkd::grouping::{build_partition, GroupPolicy};
use ltkd::pipeline::{evaluate, train_teacher, LrSchedule, TeacherConfig};
use ltkd::Error;

fn small_bundle(seed: u64) -> DataBundle {
    DataBundle::generate(&BlobsConfig {
        num_classes: 6,
        base_count: 40,
        gamma: 10.0,
        dim: 4,
        separation: 3.0,
        seed,
        test_per_class: 5,
    })
    .unwrap()
}

#[test]
fn csv_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = small_bundle(7);
    bundle.write_dir(dir.path()).unwrap();
    let back = DataBundle::read_dir(dir.path()).unwrap();
    assert_eq!(back, bundle);
    let bits = |d: &Dataset| d.features.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.train), bits(&bundle.train));
    assert_eq!(bits(&back.test), bits(&bundle.test));
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_bundle(3).write_dir(a.path()).unwrap();
    small_bundle(3).write_dir(b.path()).unwrap();
    for name in ["train.csv", "test.csv", "spec.json"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let c = tempfile::tempdir().unwrap();
    small_bundle(4).write_dir(c.path()).unwrap();
    assert_ne!(fs::read(a.path().join("train.csv")).unwrap(), fs::read(c.path().join("train.csv")).unwrap());
}

#[test]
fn truncated_file_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    small_bundle(1).train.save_csv(&path).unwrap();
    let text = fs::read_to_string(&path).unwrap();

    // cut in the middle of the third data row
    let third = text.match_indices('\n').nth(2).unwrap().0;
    fs::write(&path, &text[..third + 20]).unwrap();
    match Dataset::load_csv(&path, Split::Train, None) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected parse error, got {other:?}"),
    }

    // cut inside an exponent
    let cut = text.find("e-").or_else(|| text.find("e+")).unwrap();
    fs::write(&path, &text[..cut + 1]).unwrap();
    assert!(matches!(Dataset::load_csv(&path, Split::Train, None), Err(Error::Parse { .. })));
}

#[test]
fn header_only_file_is_empty_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    fs::write(&path, "label,f0,f1\n").unwrap();
    assert!(matches!(Dataset::load_csv(&path, Split::Test, None), Err(Error::EmptyDataset(_))));
}

#[test]
fn malformed_rows_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    for body in [
        "label,f0,f1\n0,1.0,abc\n",
        "label,f0,f1\n-1,1.0,2.0\n",
        "label,f0,f1\n0,1.0\n",
        "lbl,f0,f1\n0,1.0,2.0\n",
        "label,f0,f1\n0,1.0,NaN\n",
    ] {
        fs::write(&path, body).unwrap();
        let r = Dataset::load_csv(&path, Split::Train, None);
        assert!(matches!(r, Err(Error::Parse { .. })), "{body:?} gave {r:?}");
    }
    fs::write(&path, "label,f0,f1\n5,1.0,2.0\n").unwrap();
    assert!(Dataset::load_csv(&path, Split::Train, Some(3)).is_err());
}

#[test]
fn missing_file_is_io_error() {
    let r = Dataset::load_csv("/nonexistent/ltkd/train.csv", Split::Train, None);
    assert!(matches!(r, Err(Error::Io { .. })));
}

#[test]
fn reference_decay_profile() {
    let counts = decay_counts(100, 500, 100.0).unwrap();
    assert_eq!(counts[0], 500);
    // 500 · 100^(−0.99) = 5.2356…
    assert_eq!(counts[99], 5);
    assert_eq!(*counts.iter().min().unwrap(), 5);
    assert!((imbalance_factor(&counts).unwrap() - 100.0).abs() <= 5.0);
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(decay_counts(10, 37, 1.0).unwrap(), vec![37; 10]);
}

#[test]
fn train_split_realizes_counts_and_test_is_balanced() {
    let b = small_bundle(0);
    assert_eq!(b.train.class_counts(), b.spec.long_tail.counts);
    assert_eq!(b.test.class_counts(), vec![5; 6]);
}

fn teacher_accuracy(separation: f64, classes: usize, test_per_class: usize, seed: u64) -> f64 {
    let data = DataBundle::generate(&BlobsConfig {
        num_classes: classes,
        base_count: 200,
        gamma: 1.0,
        dim: 8,
        separation,
        seed,
        test_per_class,
    })
    .unwrap();
    let part = build_partition(&data.train.class_counts(), GroupPolicy::RankThirds).unwrap();
    let cfg = TeacherConfig {
        hidden: vec![32],
        epochs: 10,
        schedule: LrSchedule::default(),
        seed,
        ..TeacherConfig::default()
    };
    let t = train_teacher(&data.train, &data.test, &part, &cfg).unwrap();
    assert_eq!(evaluate(&t.model, &data.test, &part).unwrap(), t.report);
    t.report.all
}

#[test]
fn zero_separation_leaves_only_chance() {
    // 10 classes × 100 test points; chance is 10%
    let acc = teacher_accuracy(0.0, 10, 100, 2);
    assert!((acc - 10.0).abs() <= 5.0, "accuracy {acc}");
}

#[test]
fn wide_separation_is_nearly_separable() {
    let acc = teacher_accuracy(8.0, 6, 100, 2);
    assert!(acc > 95.0, "accuracy {acc}");
}

#[test]
fn blobs_reject_bad_arguments() {
    assert!(make_blobs(3, 1, &[1, 1, 1], 0, 1.0, Split::Train).is_err());
    assert!(make_blobs(3, 4, &[1, 1], 0, 1.0, Split::Train).is_err());
    assert!(make_blobs(3, 4, &[1, 1, 1], 0, -1.0, Split::Train).is_err());
}
