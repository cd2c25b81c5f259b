//! End-to-end runs of the training loop at toy scale: artifact layout,
//! budget accounting, divergence handling, and interrupted-resume
//! equivalence against an uninterrupted run.

use std::fs;
use std::path::Path;

use msggan::checkpoint::Checkpoint;
use msggan::config::ExperimentConfig;
use msggan::training;

fn toy_config(out: &Path, budget: u64) -> ExperimentConfig {
    ExperimentConfig {
        final_resolution: 8,
        latent_dim: 16,
        max_channels: 16,
        dataset_size: 32,
        batch_size: 8,
        eval_samples: 8,
        budget,
        seed: 42,
        metrics_every_steps: 4,
        checkpoint_every_steps: 4,
        out_dir: out.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn zero_budget_writes_initial_checkpoint_and_header_only_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let outcome = training::train(&toy_config(&out, 0), None).unwrap();
    assert_eq!(outcome.steps_run, 0);
    assert_eq!(outcome.real_images_shown, 0);
    assert!(outcome.diverged.is_none());
    assert!(outcome.final_metrics.is_none());
    assert!(outcome.stability.is_none(), "one snapshot cannot form a curve");

    assert!(out.join("config.json").is_file());
    assert!(out.join("checkpoints/step_00000000.ckpt").is_file());
    assert!(out.join("checkpoints/latest.ckpt").is_file());
    assert!(out.join("checkpoints/epoch_000000.snap").is_file());
    assert!(out.join("grids/epoch_000000_scales.png").is_file());
    assert!(out.join("grids/epoch_000000_top.png").is_file());
    assert!(!out.join("stability.csv").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics, "step,real_images_shown,gen_loss,disc_loss,penalty,fid_proxy\n");
    assert_eq!(outcome.final_checkpoint, out.join("checkpoints/step_00000000.ckpt"));
}

#[test]
fn refuses_to_reuse_a_nonempty_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    training::train(&toy_config(&out, 0), None).unwrap();
    let err = training::train(&toy_config(&out, 0), None).unwrap_err();
    assert!(err.to_string().contains("not empty"), "{}", err);
}

#[test]
fn toy_run_emits_metrics_snapshots_and_stability() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    // 32 images / batch 8 = 4 steps per epoch; budget 96 = 12 steps = 3 epochs
    let outcome = training::train(&toy_config(&out, 96), None).unwrap();
    assert_eq!(outcome.steps_run, 12);
    assert_eq!(outcome.real_images_shown, 96);
    assert!(outcome.diverged.is_none());

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,real_images_shown,gen_loss,disc_loss,penalty,fid_proxy");
    assert_eq!(lines.len(), 4, "rows at steps 4, 8, 12:\n{}", metrics);
    assert!(lines[1].starts_with("4,32,"));
    assert!(lines[3].starts_with("12,96,"));
    let last = outcome.final_metrics.unwrap();
    assert_eq!(last.step, 12);
    assert!(last.fid_proxy.is_finite() && last.fid_proxy >= 0.0);

    // snapshots at initialization plus each epoch boundary
    for e in 0..4 {
        assert!(out.join(format!("checkpoints/epoch_{:06}.snap", e)).is_file());
        assert!(out.join(format!("grids/epoch_{:06}_scales.png", e)).is_file());
    }
    let stability = fs::read_to_string(out.join("stability.csv")).unwrap();
    let curve = outcome.stability.unwrap();
    // 3 consecutive pairs x 2 scales (4, 8)
    assert_eq!(curve.rows.len(), 6);
    assert_eq!(stability.lines().count(), 7);
    assert!(stability.starts_with("epoch,scale,mse\n"));
    assert!(curve.rows.iter().all(|r| r.mse.is_finite() && r.mse >= 0.0));
}

#[test]
fn interrupted_run_resumes_to_the_identical_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let straight_out = dir.path().join("straight");
    let resumed_out = dir.path().join("resumed");

    let straight = training::train(&toy_config(&straight_out, 96), None).unwrap();

    // same seed, interrupted at half budget, then resumed to the full budget
    training::train(&toy_config(&resumed_out, 48), None).unwrap();
    let mid = Checkpoint::load(&resumed_out.join("checkpoints/latest.ckpt")).unwrap();
    assert_eq!(mid.step, 6);
    let resumed = training::train(&toy_config(&resumed_out, 96), Some(&mid)).unwrap();
    assert_eq!(resumed.steps_run, 12);

    let a = Checkpoint::load(&straight.final_checkpoint).unwrap();
    let b = Checkpoint::load(&resumed.final_checkpoint).unwrap();
    assert_eq!(a.step, b.step);
    assert_eq!(a.real_images_shown, b.real_images_shown);
    assert_eq!(a.epoch, b.epoch);
    assert_eq!(a.batch_in_epoch, b.batch_in_epoch);
    let keys: Vec<&String> = a.blocks.keys().collect();
    assert_eq!(keys, b.blocks.keys().collect::<Vec<_>>());
    for (name, block) in &a.blocks {
        assert_eq!(block.data(), b.blocks[name].data(), "block {} differs", name);
    }

    // the stability archives agree wherever both runs snapshotted
    let sa = fs::read_to_string(straight_out.join("stability.csv")).unwrap();
    let sb = fs::read_to_string(resumed_out.join("stability.csv")).unwrap();
    assert_eq!(sa, sb);
}

#[test]
fn divergence_is_caught_checkpointed_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = ExperimentConfig { lr: 1e8, ..toy_config(&out, 10_000) };
    let outcome = training::train(&cfg, None).unwrap();
    let step = outcome.diverged.expect("lr 1e8 must diverge");
    assert!(step < 10_000 / 8);
    assert!(outcome.final_checkpoint.is_file());
    let ckpt = Checkpoint::load(&outcome.final_checkpoint).unwrap();
    assert_eq!(ckpt.step, outcome.steps_run);
}
