//! The record-file path: ingest -> split -> preprocess over containers on
//! disk, the way externally converted recordings would flow in.

use std::path::PathBuf;

use rhythmlab::commands::{run_command, CommandSpec};
use rhythmlab::config::Config;
use rhythmlab::dataset::read_dataset;

fn cfg(seed: u64) -> Config {
    let mut c = Config::default();
    c.set("seed", &seed.to_string()).unwrap();
    c.set("synth_profile", "balanced").unwrap();
    c.set("synth_windows", "4").unwrap();
    c
}

#[test]
fn ingest_split_preprocess_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root: PathBuf = dir.path().to_path_buf();
    let config = cfg(21);

    // synthetic records stand in for converted recordings
    let data = root.join("data");
    run_command(&CommandSpec::Synth { out: data.clone() }, &config).unwrap();

    // rebuild the manifest from the containers alone
    let ingested = root.join("ingested");
    run_command(&CommandSpec::Ingest { input: data.clone(), out: ingested.clone() }, &config).unwrap();
    let manifest_text = std::fs::read_to_string(ingested.join("segments.txt")).unwrap();
    // 6 classes x 3 splits, one record each, one segment per record
    assert_eq!(manifest_text.lines().filter(|l| !l.starts_with('#')).count(), 18);

    // fresh stratified assignment over the ingested manifest
    let split = root.join("split");
    run_command(
        &CommandSpec::Split { manifest: ingested.join("segments.txt"), out: split.clone() },
        &config,
    )
    .unwrap();
    let summary = std::fs::read_to_string(split.join("split_summary.txt")).unwrap();
    assert!(summary.contains("train"), "{summary}");

    // windows from the fresh assignment
    let ds = root.join("ds");
    run_command(
        &CommandSpec::Preprocess { input: data, windows: split.join("windows.txt"), out: ds.clone() },
        &config,
    )
    .unwrap();
    let train = read_dataset(&ds.join("train.ds")).unwrap();
    let val = read_dataset(&ds.join("val.ds")).unwrap();
    let test = read_dataset(&ds.join("test.ds")).unwrap();
    let total = train.samples.len() + val.samples.len() + test.samples.len();
    // 6 classes x (4 + 1 + 2) windows per class flow through synth
    assert_eq!(total, 42, "every window must land in exactly one split");
    assert!(train.samples.iter().all(|s| s.len() == 977));
    // stratification keeps every class in train
    let counts = train.class_counts();
    assert!(counts.iter().all(|&c| c > 0), "train counts {counts:?}");
}

#[test]
fn augment_command_balances_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let root: PathBuf = dir.path().to_path_buf();
    let mut config = cfg(5);
    config.set("synth_windows", "2").unwrap();
    config.set("target", "4").unwrap();

    let data = root.join("data");
    run_command(&CommandSpec::Synth { out: data.clone() }, &config).unwrap();
    let ds = root.join("ds");
    run_command(
        &CommandSpec::Preprocess { input: data.clone(), windows: data.join("windows.txt"), out: ds.clone() },
        &config,
    )
    .unwrap();
    let before = read_dataset(&ds.join("train.ds")).unwrap();
    assert_eq!(before.samples.len(), 12);

    let aug = root.join("aug");
    run_command(&CommandSpec::Augment { data: ds.join("train.ds"), out: aug.clone() }, &config).unwrap();
    let after = read_dataset(&aug.join("train_balanced.ds")).unwrap();
    assert_eq!(after.samples.len(), 24, "every class reaches the target of 4");
    assert_eq!(after.class_counts(), [4, 4, 4, 4, 4, 4]);
    // the pre-augmentation frequencies ride along for the class weights
    assert_eq!(after.raw_class_counts, before.raw_class_counts);
}
