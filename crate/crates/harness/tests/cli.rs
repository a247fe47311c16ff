use std::path::Path;
use std::process::{Command, Output};

use ddt_core::Tensor;
use ddt_harness::data::{read_image, write_image};
use ddt_harness::synth::procedural_image;

fn ddt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddt"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DDT_SEED")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
[network]
base_channels = 8
encoder_blocks = [1, 1, 1]
bottleneck_blocks = 1
decoder_blocks = [1, 1, 1]
refinement_blocks = 1
heads = [1, 1, 2, 2]
p_loc = 4
p_glob = 4

[train]
iterations = 4
batch_size = 1
patch_schedule = [{ start = 0, side = 32 }]
log_every = 2

[data]
procedural_images = 2
procedural_size = 40
"#;

#[test]
fn train_eval_denoise_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("tiny.toml"), TINY).unwrap();

    let out = ddt(&["train", "--config", "tiny.toml", "--out", "run"], root);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(root.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(metrics.starts_with("iter,loss,psnr,ssim,lr,wall_time_s"));

    let out = ddt(
        &[
            "eval",
            "--ckpt",
            "run/final.ddt",
            "--sigma",
            "15,25",
            "--csv",
        ],
        root,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);

    // 40×36 is not a multiple of the network's size requirement
    let img: Tensor<f32> = procedural_image(40, 36, 3);
    write_image(&root.join("noisy.ppm"), &img).unwrap();
    let out = ddt(
        &[
            "denoise",
            "--ckpt",
            "run/final.ddt",
            "--in",
            "noisy.ppm",
            "--out",
            "clean.png",
        ],
        root,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let restored: Tensor<f32> = read_image(&root.join("clean.png")).unwrap();
    assert_eq!(restored.shape(), &[3, 40, 36]);

    // resuming a finished run is a no-op that still writes a final checkpoint
    let out = ddt(
        &[
            "train",
            "--config",
            "tiny.toml",
            "--out",
            "again",
            "--resume",
            "run/final.ddt",
        ],
        root,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn flops_report_matches_table_scale() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddt(&["flops", "--csv"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("component,flops,params"));
    let total = text.lines().last().unwrap();
    assert_eq!(total, "total,86420480000,17120907");
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("typo.toml"), "[train]\niteratons = 3\n").unwrap();
    let out = ddt(&["train", "--config", "typo.toml", "--out", "x"], root);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let bad_patch = TINY.replace("side = 32", "side = 30");
    std::fs::write(root.join("patch.toml"), bad_patch).unwrap();
    let out = ddt(&["train", "--config", "patch.toml", "--out", "x"], root);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiple"));

    let out = ddt(&["eval", "--ckpt", "missing.ddt"], root);
    assert_eq!(out.status.code(), Some(1));
}
