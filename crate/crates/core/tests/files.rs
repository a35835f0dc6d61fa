use std::fs;

use chai_core::attention::AttentionTrace;
use chai_core::engine::{generate, CalibrationProfile, GenerateOptions, Mode};
use chai_core::model::{init_random, load_weights, save_weights, ModelConfig};
use chai_core::plan::ClusterPlan;
use chai_core::ChaiError;
use tempfile::TempDir;

fn config() -> ModelConfig {
    ModelConfig::new(2, 4, 32, 48, 40, 64).unwrap()
}

#[test]
fn weights_survive_disk() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("w.bin");
    let w = init_random(&config(), 12).unwrap();
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert!(back.bit_identical(&w));
    assert_eq!(fs::read(&path).unwrap()[..8], *b"CHAIWGT1");
}

#[test]
fn missing_weight_file_names_its_path() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("absent.bin");
    match load_weights(&path) {
        Err(ChaiError::Io { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected an i/o error, got {other:?}"),
    }
}

#[test]
fn truncated_weight_file_is_rejected() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("w.bin");
    let bytes = init_random(&config(), 1).unwrap().to_bytes();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_weights(&path).is_err());
}

#[test]
fn profile_survives_disk() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("profile.json");
    let c = config();
    let profile = CalibrationProfile::from_plan(&c, ClusterPlan::contiguous(&c, &[1, 3]).unwrap(), 5).unwrap();
    profile.save(&path).unwrap();
    let back = CalibrationProfile::load(&path).unwrap();
    assert_eq!(back, profile);
    back.check_model(&c).unwrap();
}

#[test]
fn trace_csv_survives_disk() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("trace.csv");
    let w = init_random(&config(), 4).unwrap();
    let mut opts = GenerateOptions::new(Mode::Mha, 5);
    opts.record_trace = true;
    let trace = generate(&w, &[1, 2, 3], &opts, None).unwrap().trace.unwrap();
    trace.write_csv(fs::File::create(&path).unwrap()).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("layer,head,step,position,probability\n"));
    assert_eq!(AttentionTrace::read_csv(text.as_bytes()).unwrap(), trace);
}
