//! End-to-end plumbing checks at miniature scale: CLI exit codes, dataset
//! reruns, checkpoint prerequisites, and the stage-freezing contracts.

use std::path::Path;
use std::process::Command;

use lcad::config::RunConfig;
use lcad::train::{train_latent, train_pixel};
use lcad_grad::store::load_checkpoint;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lcad")
}

fn write_cfg(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.txt");
    let text = format!(
        "data_dir={}\nrun_dir={}\ntrain_scenes=24\neval_scenes=6\n\
         pixel_pretrain_epochs=1\npixel_finetune_epochs=1\n\
         latent_pretrain_epochs=1\nlatent_finetune_epochs=1\n\
         sample_steps=5\nseed=11\n{extra}",
        dir.join("data").display(),
        dir.join("run").display(),
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn tiny_config(dir: &Path) -> RunConfig {
    RunConfig::from_file(&write_cfg(dir, "")).unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // usage error: zero scene count
    let cfg = write_cfg(dir.path(), "train_scenes=0\n");
    let out = Command::new(bin())
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // unknown subcommand / bad flags come from clap with status 2
    let out = Command::new(bin()).args(["definitely-not-a-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // runtime error: training without a dataset
    let cfg = write_cfg(dir.path(), "");
    let out = Command::new(bin())
        .args(["train-pixel", "--config", cfg.to_str().unwrap(), "--quiet"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "");
    let run = || {
        let out = Command::new(bin())
            .args(["gen-data", "--config", cfg.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.path().join("data/train/manifest.json")).unwrap()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second, "same seed must produce identical manifests");
}

#[test]
fn latent_requires_pixel_checkpoint_and_freezes_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    lcad::cli::cmd_gen_data(&cfg).unwrap();

    // prerequisite ordering
    let err = train_latent(&cfg, true).unwrap_err().to_string();
    assert!(err.contains("train-pixel"), "error should name the missing stage: {err}");

    train_pixel(&cfg, true).unwrap();
    let pixel_bytes_before = std::fs::read(cfg.pixel_ckpt()).unwrap();
    train_latent(&cfg, true).unwrap();
    let pixel_bytes_after = std::fs::read(cfg.pixel_ckpt()).unwrap();
    assert_eq!(
        pixel_bytes_before, pixel_bytes_after,
        "latent training must leave the pixel checkpoint untouched"
    );

    // frozen-base audit: every den.base.* tensor is identical between the
    // base checkpoint and the final one; trained groups moved.
    let base = load_checkpoint(&cfg.latent_base_ckpt()).unwrap();
    let fin = load_checkpoint(&cfg.latent_ckpt()).unwrap();
    let mut frozen_checked = 0;
    let mut trained_moved = 0;
    for (name, tensor, _) in &fin.tensors {
        let base_tensor = base.tensor(name).expect("tensor sets must match");
        if name.starts_with("den.base.") {
            assert_eq!(
                base_tensor.data(),
                tensor.data(),
                "frozen tensor {name} changed during stage-2 fine-tune"
            );
            frozen_checked += 1;
        } else if base_tensor.data() != tensor.data() {
            trained_moved += 1;
        }
    }
    assert!(frozen_checked > 10, "expected many frozen tensors, saw {frozen_checked}");
    assert!(trained_moved > 0, "fine-tune should move trainable parameters");

    // extension kernels exist, zero at base, and belong to the trainable set
    let wext = base.tensor("den.ext.down0.conv1.w_ext").unwrap();
    assert!(wext.data().iter().all(|&v| v == 0.0), "w_ext must be zero-initialized");
}

#[test]
fn evaluate_scores_ground_truth_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    lcad::cli::cmd_gen_data(&cfg).unwrap();
    let dataset = lcad::synthdata::read_manifest(&cfg.eval_data_dir()).unwrap();
    // use the ground-truth images as "results"
    let results = dir.path().join("results");
    std::fs::create_dir_all(&results).unwrap();
    for (scene, id) in dataset.samples.iter().zip(dataset.ids.iter()) {
        lcad::imaging::save_image(&scene.image, &results.join(format!("{id}.png"))).unwrap();
    }
    let report = lcad::cli::score_results(&dataset, &results, lcad::synthdata::Level::Complete).unwrap();
    assert_eq!(report.count, 6);
    // PNG decode quantizes, so self-PSNR is capped only when bytes match
    assert!(report.psnr >= 99.0 - 1e-9, "psnr {}", report.psnr);
    assert!(report.ssim > 0.9999, "ssim {}", report.ssim);
    assert_eq!(report.instance_color_accuracy, 1.0);
    assert!(report.delta_colorfulness.abs() < 1e-9);
    // report JSON carries every metric key
    let parsed: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    for key in ["psnr", "ssim", "colorfulness", "delta_colorfulness", "instance_color_accuracy"] {
        assert!(parsed.get(key).is_some(), "missing {key}");
    }

    // missing ids are listed
    std::fs::remove_file(results.join("scene_00003.png")).unwrap();
    let err = lcad::cli::score_results(&dataset, &results, lcad::synthdata::Level::Complete)
        .unwrap_err()
        .to_string();
    assert!(err.contains("scene_00003"), "{err}");
}

#[test]
fn colorize_cli_with_external_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(dir.path(), "den_widths=16,24,24\nn_ext=8\nd_text=32\nt_emb_dim=32\npixel_widths=8,12,16\n");
    let cfg = RunConfig::from_file(&cfg_path).unwrap();
    lcad::cli::cmd_gen_data(&cfg).unwrap();
    train_pixel(&cfg, true).unwrap();
    train_latent(&cfg, true).unwrap();

    // grayscale input rendered from an eval scene, plus its mask as a file
    let dataset = lcad::synthdata::read_manifest(&cfg.eval_data_dir()).unwrap();
    let scene = &dataset.samples[0];
    let gray_png = dir.path().join("gray.png");
    lcad::imaging::save_image(&scene.gray.to_rgb(), &gray_png).unwrap();
    let masks_dir = dir.path().join("masks");
    std::fs::create_dir_all(&masks_dir).unwrap();
    lcad::imaging::save_image(&scene.instances[0].mask.to_rgb(), &masks_dir.join("m0.png")).unwrap();
    let bindings = dir.path().join("bindings.json");
    let color = &scene.instances[0].color_name;
    std::fs::write(&bindings, format!("{{\"m0.png\": {{\"color\": \"{color}\"}}}}")).unwrap();
    let out_png = dir.path().join("out.png");

    let run = |extra: &[&str]| {
        let mut args = vec![
            "colorize".to_string(),
            "--config".into(),
            cfg_path.display().to_string(),
            "--gray".into(),
            gray_png.display().to_string(),
            "--description".into(),
            format!("a {color} {}", scene.instances[0].noun),
            "--out".into(),
            out_png.display().to_string(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        Command::new(bin()).args(&args).output().unwrap()
    };

    // instance-aware mode with mask + bindings
    let out = run(&[
        "--masks",
        masks_dir.to_str().unwrap(),
        "--bindings",
        bindings.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_png.exists());
    assert!(out_png.with_extension("run.json").exists(), "run metadata beside the output");
    let first = std::fs::read(&out_png).unwrap();

    // same seed and inputs: identical PNG bytes
    let out = run(&["--masks", masks_dir.to_str().unwrap(), "--bindings", bindings.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(first, std::fs::read(&out_png).unwrap());

    // color words without masks: warning + plain-sampling fallback
    let out = run(&[]);
    assert!(out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("falling back to plain sampling"),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    // masks without bindings: usage error
    let out = run(&["--masks", masks_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
