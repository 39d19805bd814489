use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

fn convsplat(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_convsplat"))
        .args(args)
        .output()
        .unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let o = convsplat(&[flag]);
        assert_eq!(o.status.code(), Some(0), "{flag}");
    }
    assert!(String::from_utf8_lossy(&convsplat(&["--help"]).stdout).contains("synth"));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(convsplat(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(convsplat(&["synth", "--objects", "two"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = convsplat(&["--out", s(dir.path()), "--set", "no.such.key=1", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    let o = convsplat(&["--out", s(dir.path()), "synth", "--res", "50"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_input_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = convsplat(&["--out", s(dir.path()), "eval", "--ckpt", s(&dir.path().join("missing.cstf"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic_across_output_dirs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["synth", "--objects", "2", "--per-object", "40", "--cameras", "2", "--res", "56", "--seed", "7"];
    for d in [a.path(), b.path()] {
        let mut full = vec!["--out", s(d)];
        full.extend(args);
        assert_eq!(convsplat(&full).status.code(), Some(0));
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    for f in ["scene.cstf", "scene.ply", "teacher.cstf", "labels/cam0.png", "manifest.json"] {
        assert!(ta.contains_key(f), "{f} missing");
    }
    assert_eq!(ta, tb);
    let m: serde_json::Value = serde_json::from_slice(&ta["manifest.json"]).unwrap();
    assert_eq!(m["seed"], 7);
    assert_eq!(m["command"], "synth");
    assert!(m["args"].as_array().unwrap().iter().any(|a| a == "<out>"));
}

#[test]
fn language_stage_needs_a_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("s");
    let o = convsplat(&["--out", s(&synth), "synth", "--per-object", "20", "--cameras", "2", "--res", "28", "--teacher", "none"]);
    assert_eq!(o.status.code(), Some(0));
    let o = convsplat(&["--out", s(&dir.path().join("t")), "train", "--scene", s(&synth.join("scene.cstf")), "--stage", "language"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--teacher"));
}

#[test]
fn train_render_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (sd, td, rd, ed) = (dir.path().join("s"), dir.path().join("t"), dir.path().join("r"), dir.path().join("e"));
    let o = convsplat(&["--out", s(&sd), "synth", "--per-object", "30", "--cameras", "2", "--res", "56"]);
    assert_eq!(o.status.code(), Some(0));
    let o = convsplat(&[
        "--out", s(&td), "--set", "identity.iterations=6", "--set", "language.iterations=4",
        "--set", "checkpoint_every=2", "train", "--scene", s(&sd.join("scene.cstf")),
        "--teacher", s(&sd.join("teacher.cstf")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let t = tree(&td);
    assert!(t.contains_key("checkpoints/language_000004.cstf"));
    let csv = String::from_utf8_lossy(&t["loss.csv"]).into_owned();
    assert_eq!(csv.lines().count(), 1 + 10);

    let ckpt = td.join("checkpoint.cstf");
    let o = convsplat(&["--out", s(&rd), "render", "--ckpt", s(&ckpt), "--cam", "1", "--channel", "rgb"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(rd.join("render/cam1_rgb.png").exists());
    let o = convsplat(&["--out", s(&ed), "export", "--ckpt", s(&ckpt), "--codebook", "--caption", "a mug"]);
    assert_eq!(o.status.code(), Some(0));
    let captions = std::fs::read_to_string(ed.join("codebook.json")).unwrap();
    assert!(captions.contains("a mug"));

    let o = convsplat(&["--out", s(&td), "--set", "encoder.mid_dim=8", "train", "--resume", s(&ckpt), "--stage", "identity"]);
    assert_eq!(o.status.code(), Some(1));
    let o = convsplat(&["--out", s(&dir.path().join("t2")), "--set", "identity.iterations=2", "train", "--resume", s(&ckpt), "--stage", "identity"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bench_writes_one_row_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = convsplat(&[
        "--out", s(dir.path()), "bench", "--sizes", "1e2,3e2", "--res", "32,64", "--reps", "3", "--impl", "tiled",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let o = convsplat(&["--out", s(dir.path()), "bench", "--impl", "magic"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn import_teacher_checks_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let sd = dir.path().join("s");
    assert_eq!(convsplat(&["--out", s(&sd), "synth", "--per-object", "20", "--cameras", "2", "--res", "56"]).status.code(), Some(0));
    let teacher = sd.join("teacher.cstf");
    let o = convsplat(&["--out", s(&dir.path().join("i")), "import-teacher", "--cstf", s(&teacher), "--tokens", "16", "--dim", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("i/teacher_stats.json").exists());
    let o = convsplat(&["--out", s(&dir.path().join("j")), "import-teacher", "--cstf", s(&teacher), "--dim", "8"]);
    assert_eq!(o.status.code(), Some(1));
}
