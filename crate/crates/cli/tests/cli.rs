use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("wg runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn probe_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = wg(dir.path(), &["probe"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.lines().filter(|l| l.starts_with("PASS ")).count() >= 10);
    assert!(!stdout.contains("FAIL "));
}

#[test]
fn config_errors_exit_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nlr_ful = 0.1\n").unwrap();
    let out = wg(dir.path(), &["--config", "bad.toml", "probe"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr_ful"));

    let out = wg(dir.path(), &["--set", "generation.guidance.scale=oops", "synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_fixture_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = wg(dir.path(), &["--set", "fixtures.count=2", "--set", "fixtures.spec.frames=16", "--out", "fx", "synth"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["video.wgv", "audio.wga", "series.jsonl", "meta.json"] {
        assert!(dir.path().join("fx/fixtures/0001").join(f).is_file(), "{f}");
    }
    assert!(dir.path().join("fx/config.toml").is_file());
}

/// Train briefly, then check the artifacts that later commands depend on:
/// checkpoint digest, deterministic generation, and checksum failures.
#[test]
fn train_generate_dub_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = wg(d, &["--out", "tr", "train", "--steps", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&d.join("tr/summary.json"));
    assert_eq!(summary["steps"], 2);
    let echoed = fs::read_to_string(d.join("tr/config.sha256")).unwrap();
    assert!(d.join("tr/metrics.jsonl").is_file());

    let gen = |name: &str| {
        let out = wg(
            d,
            &["--seed", "7", "--out", name, "generate", "--checkpoint", "tr/model.wgn", "--windows", "2", "--steps", "3"],
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(d.join(name).join("video.wgv")).unwrap()
    };
    assert_eq!(gen("g1"), gen("g2"));
    let gs = json(&d.join("g1/summary.json"));
    assert_eq!(gs["checkpoint_config_sha256"].as_str().unwrap(), echoed.trim());
    assert_eq!(gs["windows"], 2);
    assert_eq!(fs::read_to_string(d.join("g1/windows.jsonl")).unwrap().lines().count(), 2);

    let out = wg(
        d,
        &["--out", "dub", "dub", "--input", "g1/video.wgv", "--audio", "nope.wga", "--checkpoint", "tr/model.wgn"],
    );
    assert_eq!(out.status.code(), Some(1), "missing audio is an I/O error");

    let synth = wg(d, &["--set", "fixtures.count=1", "--set", "fixtures.spec.frames=32", "--out", "fx", "synth"]);
    assert_eq!(synth.status.code(), Some(0));
    let dub = |name: &str| {
        let out = wg(
            d,
            &[
                "--seed", "3", "--out", name, "dub", "--input", "fx/fixtures/0000/video.wgv", "--audio",
                "fx/fixtures/0000/audio.wga", "--checkpoint", "tr/model.wgn", "--steps", "3",
            ],
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(d.join(name).join("video.wgv")).unwrap()
    };
    assert_eq!(dub("d1"), dub("d2"));

    let mut bytes = fs::read(d.join("tr/model.wgn")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(d.join("broken.wgn"), bytes).unwrap();
    let out = wg(d, &["--out", "g3", "generate", "--checkpoint", "broken.wgn", "--steps", "1", "--windows", "1"]);
    assert_eq!(out.status.code(), Some(3));
}
