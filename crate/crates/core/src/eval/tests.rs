use super::*;
use crate::model::{ArchConfig, Generator, GeneratorCheckpoint, NoiseGateConfig};
use crate::rng::derive_seed;
use crate::Error;

fn ckpt(gates: &str) -> GeneratorCheckpoint {
    let arch = ArchConfig {
        latent_dim: 16,
        channel_base: 128,
        channel_max: 8,
        noise_strength_init: 0.5,
        ..ArchConfig::toy(16)
    };
    let g = Generator::new(&arch, 11).unwrap();
    let gates = NoiseGateConfig::parse(gates, &arch).unwrap();
    GeneratorCheckpoint::new(g, gates).unwrap()
}

#[test]
fn sensitivity_is_exactly_zero_with_all_gates_off() {
    let c = ckpt("off:4-16");
    let ex = RandomProjection::new(16, 3);
    assert_eq!(noise_sensitivity(&c, 8, 1, 2, &ex).unwrap(), 0.0);
}

#[test]
fn sensitivity_positive_with_noise_on() {
    let c = ckpt("on:4-16");
    let ex = RandomProjection::new(16, 3);
    let s = noise_sensitivity(&c, 8, 1, 2, &ex).unwrap();
    assert!(s > 0.0 && s.is_finite());
}

#[test]
fn sensitivity_rejects_tiny_sets() {
    let c = ckpt("off:4-16");
    let ex = Identity;
    assert!(matches!(noise_sensitivity(&c, 1, 1, 2, &ex), Err(Error::InvalidArgument(_))));
}

#[test]
fn generated_stats_are_deterministic() {
    let c = ckpt("on:4-16");
    let ex = RandomProjection::new(8, 5);
    let a = generated_stats(&c, 5, 1, 2, NoiseMode::RandomPerLatent, &ex).unwrap();
    let b = generated_stats(&c, 5, 1, 2, NoiseMode::RandomPerLatent, &ex).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n, 5);
    assert_eq!(a.extractor.as_deref(), Some("randproj"));
}

fn spec(rows: &[(&str, &str, NoiseMode, usize)]) -> AblationSpec {
    AblationSpec {
        rows: rows
            .iter()
            .map(|(l, c, m, n)| AblationRow {
                label: l.to_string(),
                gates: c.to_string(),
                checkpoint: c.to_string(),
                noise_mode: *m,
                n_samples: *n,
            })
            .collect(),
        seed: 0,
    }
}

#[test]
fn ablation_table_round_trip() {
    let ex = RandomProjection::new(8, 5);
    let reference = generated_stats(&ckpt("on:4-16"), 6, 9, 9, NoiseMode::RandomPerLatent, &ex).unwrap();
    let s = spec(&[
        ("all noise", "on:4-16", NoiseMode::RandomPerLatent, 4),
        ("gated", "off:4-8", NoiseMode::ConstantPerRun, 4),
    ]);
    let table = run_ablation(&s, |c| Ok(ckpt(c)), &reference, &ex).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert!(table.rows.iter().all(|r| r.fid >= 0.0 && r.fid.is_finite()));
    let back: AblationTable = serde_json::from_str(&table.to_json()).unwrap();
    assert_eq!(back, table);
    let text = table.to_text();
    assert!(text.starts_with("Configuration"));
    assert!(text.contains("gated") && text.contains("constant"));
}

#[test]
fn ablation_spec_validation() {
    let ex = Identity;
    let reference = image_stats(
        &[
            crate::model::ImageTensor::new(4, vec![0.0; 48]).unwrap(),
            crate::model::ImageTensor::new(4, vec![0.5; 48]).unwrap(),
        ],
        &ex,
    );
    assert!(reference.is_ok());
    let dup = spec(&[("a", "x", NoiseMode::ConstantPerRun, 4), ("a", "y", NoiseMode::ConstantPerRun, 4)]);
    assert!(matches!(dup.validate(), Err(Error::Config(_))));
    let small = spec(&[("a", "x", NoiseMode::ConstantPerRun, 1)]);
    assert!(matches!(small.validate(), Err(Error::Config(_))));
}

#[test]
fn missing_checkpoint_is_config_error() {
    let ex = RandomProjection::new(8, 5);
    let reference = generated_stats(&ckpt("on:4-16"), 4, 9, 9, NoiseMode::RandomPerLatent, &ex).unwrap();
    let mut s = spec(&[("gone", "on", NoiseMode::RandomPerLatent, 4)]);
    s.rows[0].checkpoint = "/nonexistent/model.ckpt".into();
    let r = run_ablation(&s, |p| GeneratorCheckpoint::load(std::path::Path::new(p)), &reference, &ex);
    assert!(matches!(r, Err(Error::Config(_))), "{r:?}");
}

#[test]
fn extractor_mismatch_rejected() {
    let c = ckpt("on:4-16");
    let a = RandomProjection::new(8, 5);
    let mut reference = generated_stats(&c, 4, 9, 9, NoiseMode::RandomPerLatent, &a).unwrap();
    reference.extractor = Some("identity".into());
    assert!(matches!(fid(&c, &reference, 4, 1, &a), Err(Error::Config(_))));
}

#[test]
fn ablation_rejects_gate_mismatch() {
    let ex = RandomProjection::new(8, 5);
    let reference = generated_stats(&ckpt("on:4-16"), 4, 9, 9, NoiseMode::RandomPerLatent, &ex).unwrap();
    let mut s = spec(&[("row", "coarse-off", NoiseMode::RandomPerLatent, 4)]);
    s.rows[0].checkpoint = "on".into();
    assert!(matches!(run_ablation(&s, |c| Ok(ckpt(c)), &reference, &ex), Err(Error::Config(_))));
}

#[test]
fn self_reference_gives_near_zero() {
    let c = ckpt("on:4-16");
    let ex = RandomProjection::new(4, 5);
    let reference = generated_stats(&c, 64, derive_seed(0, 0xa11), derive_seed(0, 0), NoiseMode::RandomPerLatent, &ex).unwrap();
    let s = spec(&[("self", "on:4-16", NoiseMode::RandomPerLatent, 64)]);
    let table = run_ablation(&s, |g| Ok(ckpt(g)), &reference, &ex).unwrap();
    assert!(table.rows[0].fid < 1e-6, "{}", table.rows[0].fid);
}
