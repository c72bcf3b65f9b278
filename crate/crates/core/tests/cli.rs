use std::path::Path;
use std::process::{Command, Output};

use busip::imageio::read_dump;

fn busip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_busip")).args(args).env("RUST_LOG", "off").output().unwrap()
}

/// Last stderr line parsed as the machine-readable error record.
fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    let v: serde_json::Value = serde_json::from_str(line).expect("JSON error line");
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_are_one_json_line() {
    assert_eq!(error_kind(&busip(&["train"])), "usage");
    assert_eq!(error_kind(&busip(&["no-such-verb"])), "usage");
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let args = ["gen-synthetic", "--classes", "2", "--per-class", "2", "--size", "32", "--out", s(&out)];
    assert!(busip(&args).status.success());
    assert_eq!(error_kind(&busip(&args)), "output_exists");
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(busip(&forced).status.success());
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.json");
    assert_eq!(error_kind(&busip(&["train", "--config", s(&missing)])), "config");
    assert_eq!(error_kind(&busip(&["eval", "--ckpt", s(tmp.path()), "--data", s(tmp.path())])), "checkpoint");
    std::fs::write(tmp.path().join("bad.png"), b"not a png").unwrap();
    let bank = tmp.path().join("bank");
    assert!(busip(&["export-bank", "--out", s(&bank), "--scales", "2"]).status.success());
    let out = busip(&[
        "extract-scattering",
        "--image",
        s(&tmp.path().join("bad.png")),
        "--bank",
        s(&bank.join("manifest.json")),
        "--out",
        s(&tmp.path().join("x.dump")),
    ]);
    assert_eq!(error_kind(&out), "image");
}

#[test]
fn extract_scattering_dumps_all_channels() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(busip(&["gen-synthetic", "--classes", "2", "--per-class", "1", "--size", "32", "--out", s(&data)])
        .status
        .success());
    let bank = tmp.path().join("bank");
    assert!(busip(&["export-bank", "--out", s(&bank), "--scales", "2", "--orientations", "3"]).status.success());
    let dump = tmp.path().join("s.dump");
    let image = data.join("class_0").join("00000.png");
    let out = busip(&[
        "extract-scattering",
        "--image",
        s(&image),
        "--bank",
        s(&bank.join("manifest.json")),
        "--out",
        s(&dump),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, values) = read_dump(&dump).unwrap();
    // 1 + J L + C(J, 2) L^2
    assert_eq!(header.shape, vec![1 + 6 + 9, 32, 32]);
    assert_eq!(values.len(), 16 * 32 * 32);
    assert!(values.iter().all(|v| v.is_finite()));
    let order1 = tmp.path().join("s1.dump");
    let out = busip(&[
        "extract-scattering",
        "--image",
        s(&image),
        "--bank",
        s(&bank.join("manifest.json")),
        "--out",
        s(&order1),
        "--order",
        "1",
    ]);
    assert!(out.status.success());
    let (h1, v1) = read_dump(&order1).unwrap();
    assert_eq!(h1.shape, vec![7, 32, 32]);
    let diff = values.iter().zip(&v1).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(diff <= 1e-6, "order-1 prefix differs by {diff}");
}
