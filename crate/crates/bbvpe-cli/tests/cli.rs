//! Drives the compiled `bbvpe` binary end to end against a synthetic corpus.

use std::path::Path;
use std::process::{Command, Output};

use bbvpe_core::raster::{save_image, Color, ImageRaster};

fn bbvpe(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbvpe"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Synthetic corpus mirroring the library pipeline fixture: distinct images,
/// three objects each from an eight-category universe, and a mock profile
/// with one clearly best prompt.
fn write_fixture(dir: &Path, n: usize) -> std::path::PathBuf {
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir).unwrap();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for i in 0..n {
        let (w, h) = (40u32, 32u32);
        let mut img = ImageRaster::new(w, h, Color::new((i * 53 % 256) as u8, 120, 90)).unwrap();
        for y in 0..h {
            for x in 0..w {
                if (3 * x + 2 * y + i as u32) % 11 == 0 {
                    img.set(x, y, Color::new(20, 240, (x * 7 % 256) as u8));
                }
            }
        }
        let file_name = format!("img{i:03}.png");
        save_image(&img, &image_dir.join(&file_name)).unwrap();
        images.push(serde_json::json!({"id": i, "file_name": file_name, "width": w, "height": h}));
        for (slot, offset) in [0usize, 2, 5].into_iter().enumerate() {
            annotations.push(serde_json::json!({
                "image_id": i,
                "category_id": (i + offset) % 8 + 1,
                "bbox": [3.0 + 12.0 * slot as f64, 4.0, 10.0, 11.0]
            }));
        }
    }
    let categories: Vec<_> = ["cat", "dog", "bird", "car", "tree", "chair", "horse", "boat"]
        .iter()
        .enumerate()
        .map(|(id, name)| serde_json::json!({"id": id + 1, "name": name}))
        .collect();
    let coco = serde_json::json!({"images": images, "annotations": annotations, "categories": categories});
    std::fs::write(dir.join("ann.json"), serde_json::to_string(&coco).unwrap()).unwrap();

    let config = dir.join("run.toml");
    std::fs::write(
        &config,
        "seed = 5\n\n\
         [paths]\nannotations = \"ann.json\"\nimage_dir = \"images\"\n\
         cache = \"cache/responses.vpc\"\noutput_dir = \"out\"\n\n\
         [questions]\nn_pos = 3\nn_neg = 3\n\n\
         [train]\nepochs = 3\nhidden_dim = 16\nbatch_size = 8\nvalidation_fraction = 0.25\n\n\
         [mock]\ndefault_accuracy = 0.3\n\n\
         [mock.per_prompt]\nreverse_blur = 0.95\n",
    )
    .unwrap();
    config
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path(), 6);
    let out_dir = dir.path().join("out");

    let stdout = assert_ok(&bbvpe(&config, &["render"]));
    assert!(stdout.contains("rendered 48 file(s)"), "{stdout}");

    let stdout = assert_ok(&bbvpe(&config, &["collect"]));
    assert!(stdout.contains("6 complete"), "{stdout}");
    assert!(out_dir.join("collect/scores.jsonl").is_file());

    let stdout = assert_ok(&bbvpe(&config, &["build-dataset"]));
    assert!(stdout.contains("kept"), "{stdout}");

    let stdout = assert_ok(&bbvpe(&config, &["train"]));
    assert!(stdout.contains("trained on"), "{stdout}");
    assert!(out_dir.join("train/router.vpr").is_file());

    let stdout = assert_ok(&bbvpe(&config, &["route"]));
    assert!(stdout.contains("routed 6 image(s)"), "{stdout}");

    let stdout = assert_ok(&bbvpe(&config, &["eval"]));
    assert!(stdout.contains("oracle") && stdout.contains("bbvpe"), "{stdout}");
    assert!(out_dir.join("eval/comparison.csv").is_file());

    let stdout = assert_ok(&bbvpe(&config, &["report"]));
    assert!(stdout.contains("stages recorded"), "{stdout}");
    assert_eq!(stdout, std::fs::read_to_string(out_dir.join("report.txt")).unwrap());

    // A rerun of a cached stage does not hit the provider again.
    let stdout = assert_ok(&bbvpe(&config, &["collect"]));
    assert!(stdout.contains("0 provider call(s)"), "{stdout}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[paths]\nannotations = \"missing.json\"\nimage_dir = \".\"\ncache = \"c\"\noutput_dir = \"o\"\n").unwrap();
    let out = bbvpe(&config, &["render"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn stale_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path(), 2);
    assert_ok(&bbvpe(&config, &["collect"]));

    let scores = dir.path().join("out/collect/scores.jsonl");
    let mut text = std::fs::read_to_string(&scores).unwrap();
    text.push('\n');
    std::fs::write(&scores, text).unwrap();

    let out = bbvpe(&config, &["build-dataset"]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rerun `collect`"));
}

#[test]
fn overrides_change_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path(), 2);
    assert_ok(&bbvpe(&config, &["collect"]));

    // A different seed is a different run: downstream stages refuse the old
    // artifacts instead of silently mixing them.
    let out = bbvpe(&config, &["--seed", "99", "build-dataset"]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // Redirecting the output keeps the original run untouched.
    let alt = dir.path().join("alt");
    let alt_str = alt.to_str().unwrap().to_string();
    assert_ok(&bbvpe(&config, &["--output-dir", &alt_str, "collect"]));
    assert!(alt.join("collect/scores.jsonl").is_file());
}

#[test]
fn help_lists_every_stage() {
    let out = Command::new(env!("CARGO_BIN_EXE_bbvpe")).arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for stage in ["render", "collect", "build-dataset", "train", "route", "eval", "report"] {
        assert!(text.contains(stage), "help is missing {stage}");
    }
}
