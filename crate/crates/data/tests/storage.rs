//! Round-trip and corruption behavior of the on-disk dataset format.

use std::fs;

use saccade_data::{
    generate_sequence, read_manifest, recompute_channel_stats, write_dataset, DataConfig,
    DiskDataset, Split,
};

fn tiny_cfg() -> DataConfig {
    DataConfig {
        height: 16,
        width: 16,
        frames: 8,
        entities: 2,
        train: 10,
        val: 4,
        test: 4,
    }
}

#[test]
fn round_trip_preserves_every_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let manifest = write_dataset(dir.path(), &cfg, 77).unwrap();
    assert_eq!(manifest.config, cfg);

    for split in Split::ALL {
        let ds = DiskDataset::open(dir.path(), split).unwrap();
        assert_eq!(ds.len(), manifest.split_len(split));
        for idx in 0..ds.len() {
            let loaded = ds.load(idx).unwrap();
            let (class, seed) = manifest.item_identity(split, idx);
            let expected = generate_sequence(class, seed, &cfg).unwrap();
            assert_eq!(loaded, expected, "{} item {}", split.dir_name(), idx);
        }
    }
}

#[test]
fn splits_are_balanced_and_seed_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let manifest = write_dataset(dir.path(), &cfg, 100).unwrap();
    let mut seen_seeds = std::collections::HashSet::new();
    for split in Split::ALL {
        let mut label_counts = vec![0usize; manifest.classes.len()];
        let ds = DiskDataset::open(dir.path(), split).unwrap();
        for idx in 0..ds.len() {
            let seq = ds.load(idx).unwrap();
            label_counts[seq.label] += 1;
            assert!(seen_seeds.insert(seq.seed), "seed {} reused", seq.seed);
        }
        let max = label_counts.iter().max().unwrap();
        let min = label_counts.iter().min().unwrap();
        assert!(max - min <= 1, "unbalanced {}: {:?}", split.dir_name(), label_counts);
    }
}

#[test]
fn manifest_statistics_match_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &tiny_cfg(), 5).unwrap();
    let (mean, std) = recompute_channel_stats(dir.path(), Split::Train).unwrap();
    for ch in 0..3 {
        assert!((mean[ch] - manifest.mean[ch]).abs() < 1e-10);
        assert!((std[ch] - manifest.std[ch]).abs() < 1e-10);
        assert!(manifest.std[ch] > 0.0, "flat channel {}", ch);
    }
}

#[test]
fn version_mismatch_is_an_explicit_error() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &tiny_cfg(), 1).unwrap();
    let path = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replace("version=1", "version=99")).unwrap();
    let err = read_manifest(dir.path()).unwrap_err().to_string();
    assert!(err.contains("version"), "{}", err);
}

#[test]
fn truncated_video_names_the_offending_file() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &tiny_cfg(), 2).unwrap();
    let victim = dir.path().join("train").join("seq_00003.vid");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let ds = DiskDataset::open(dir.path(), Split::Train).unwrap();
    let err = ds.load(3).unwrap_err().to_string();
    assert!(err.contains("seq_00003.vid"), "{}", err);
    assert!(ds.load(2).is_ok());
}

#[test]
fn tampered_sidecar_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &tiny_cfg(), 3).unwrap();
    let victim = dir.path().join("val").join("seq_00001.meta");
    let text = fs::read_to_string(&victim).unwrap();
    fs::write(&victim, text.replace("label=", "flavor=")).unwrap();
    let ds = DiskDataset::open(dir.path(), Split::Val).unwrap();
    let err = ds.load(1).unwrap_err().to_string();
    assert!(err.contains("seq_00001.meta"), "{}", err);
}

#[test]
fn keypoint_text_round_trip_is_exact() {
    // Text formatting of f64 must reproduce the exact bits on parse.
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    write_dataset(dir.path(), &cfg, 9).unwrap();
    let ds = DiskDataset::open(dir.path(), Split::Test).unwrap();
    for idx in 0..ds.len() {
        let loaded = ds.load(idx).unwrap();
        let (class, seed) = ds.manifest().item_identity(Split::Test, idx);
        let expected = generate_sequence(class, seed, &cfg).unwrap();
        let same_bits = loaded
            .keypoints
            .iter()
            .zip(&expected.keypoints)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits, "keypoint bits drifted in item {}", idx);
    }
}
