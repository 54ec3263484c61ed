use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_advtransfer"));
    c.env("RUST_LOG", "warn").env_remove("ADVT_DATA_DIR").env_remove("ADVT_PORT");
    c
}

fn run(args: &[&str], dir: &Path) -> String {
    let out = bin().args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().unwrap();
    assert!(!out.status.success(), "{args:?} should fail");
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TINY_ARCH: &str = r#"{
  "name": "tiny",
  "input": {"height": 16, "width": 16, "channels": 3},
  "num_classes": 14,
  "layers": [
    {"type": "conv", "out_channels": 4, "kernel": 3, "stride": 2, "padding": 1},
    {"type": "relu"}
  ]
}"#;

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(req: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Value {
    let mut text = String::new();
    req.unwrap().body_mut().as_reader().read_to_string(&mut text).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn pipeline_from_synthetic_data_to_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("arch.json"), TINY_ARCH).unwrap();

    let out = run(&["synth", "--out", "data", "--per-label", "6", "--size", "16", "--seed", "1"], d);
    assert!(out.contains("84 images"), "{out}");
    for (ckpt, seed) in [("models/train/a.ckpt", "0"), ("models/train/b.ckpt", "1"), ("models/test/h.ckpt", "2")] {
        run(
            &["train", "--arch", "arch.json", "--data", "data", "--out", ckpt, "--epochs", "1", "--seed", seed],
            d,
        );
        assert!(d.join(ckpt).is_file());
    }

    for cond in ["adv", "false"] {
        run(
            &[
                "attack", "--ensemble", "models/train", "--partition", "data/partition.json", "--group", "peaks",
                "--condition", cond, "--eps", "32", "--data", "data", "--out", "stimuli",
            ],
            d,
        );
    }
    let mut conditions = std::collections::BTreeSet::new();
    for entry in std::fs::read_dir(d.join("stimuli")).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "json") && p.file_name().unwrap() != "partition.json" {
            let r = read_json(&p);
            conditions.insert(r["condition"].as_str().unwrap().to_owned());
            assert!(d.join("stimuli").join(r["file"].as_str().unwrap()).is_file());
        }
    }
    assert_eq!(conditions.into_iter().collect::<Vec<_>>(), ["adv", "false", "flip", "image"]);

    run(&["assemble", "--pool", "stimuli", "--group", "peaks", "--n", "2", "--seed", "7"], d);
    let manifest = read_json(&d.join("sessions/peaks-7.json"));
    assert_eq!(manifest["trials"].as_array().unwrap().len(), 8);
    // Same seed, same session.
    run(
        &["assemble", "--pool", "stimuli", "--group", "peaks", "--n", "2", "--seed", "7", "--out", "again"],
        d,
    );
    assert_eq!(read_json(&d.join("again/peaks-7.json")), manifest);
    fails(&["assemble", "--pool", "stimuli", "--group", "peaks", "--n", "3", "--seed", "7"], d);

    run(&["eval", "--models", "models", "--stimuli", "stimuli", "--out", "report.json"], d);
    let report = read_json(&d.join("report.json"));
    let roles: std::collections::BTreeSet<&str> =
        report["rows"].as_array().unwrap().iter().map(|r| r["role"].as_str().unwrap()).collect();
    assert_eq!(roles.into_iter().collect::<Vec<_>>(), ["test", "train"]);
    assert!(!report["flip_comparisons"].as_array().unwrap().is_empty());

    // Serve from the data directory given through the environment.
    std::fs::create_dir(d.join("site")).unwrap();
    std::fs::rename(d.join("stimuli"), d.join("site/stimuli")).unwrap();
    std::fs::rename(d.join("sessions"), d.join("site/sessions")).unwrap();
    let mut child = bin()
        .args(["serve", "--port", "0"])
        .env("ADVT_DATA_DIR", d.join("site"))
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let server = Killed(child);
    let base = format!("http://{}", line.trim().strip_prefix("listening on ").unwrap());

    let session = http(ureq::get(&format!("{base}/session/peaks-7")).call());
    let trials = session["trials"].as_array().unwrap();
    assert_eq!(trials.len(), 8);
    let token = trials[0]["stimulus"].as_str().unwrap();
    assert!(!token.contains("adv") && !token.contains("image") && !token.contains("false"));
    let mut png = Vec::new();
    ureq::get(&format!("{base}/stimulus/{token}.png"))
        .call()
        .unwrap()
        .body_mut()
        .as_reader()
        .read_to_end(&mut png)
        .unwrap();
    assert_eq!(&png[1..4], b"PNG");

    let buttons = session["buttons"].as_array().unwrap();
    for i in 0..trials.len() {
        let ack = http(
            ureq::post(&format!("{base}/response"))
                .header("content-type", "application/json")
                .send(
                    json!({"session_id": "peaks-7", "subject_id": "s1", "trial_index": i,
                           "chosen": buttons[i % 2], "rt_ms": 500.0})
                    .to_string(),
                ),
        );
        assert_eq!(ack["counted"], true, "{ack}");
    }
    drop(server);

    let out = run(&["analyze", "--responses", "site/sessions/responses", "--out", "analysis"], d);
    assert!(out.contains("8 responses, 8 counted"), "{out}");
    assert_eq!(read_json(&d.join("analysis/analysis.json"))["counted"], 8);
}

#[test]
fn retina_demo_writes_cropped_image() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    run(&["synth", "--out", "data", "--per-label", "1", "--size", "32", "--seed", "3"], d);
    std::fs::write(
        d.join("geom.json"),
        r#"{"viewer_distance_m": 0.61, "image_size_m": 0.1524, "image_pixels": 32}"#,
    )
    .unwrap();
    let out = run(&["retina-demo", "--in", "data/img00000.png", "--out", "blur.png", "--geom", "geom.json"], d);
    assert!(out.contains("14.24 deg"), "{out}");
    let bytes = std::fs::read(d.join("blur.png")).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    // IHDR width and height, big-endian, are smaller than the input.
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    assert_eq!((w, h), (w, w));
    assert!(w < 32 && w > 16, "{w}");

    std::fs::write(d.join("bad.json"), r#"{"viewer_distance_m": -1, "image_size_m": 0.1, "image_pixels": 32}"#)
        .unwrap();
    fails(&["retina-demo", "--in", "data/img00000.png", "--out", "x.png", "--geom", "bad.json"], d);
}

#[test]
fn serve_requires_a_data_location() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fails(&["serve", "--port", "0"], tmp.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("data directory"));
}

#[test]
fn attack_rejects_unknown_group() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("arch.json"), TINY_ARCH).unwrap();
    run(&["synth", "--out", "data", "--per-label", "2", "--size", "16"], d);
    run(&["train", "--arch", "arch.json", "--data", "data", "--out", "m/a.ckpt", "--epochs", "1"], d);
    fails(
        &[
            "attack", "--ensemble", "m", "--partition", "data/partition.json", "--group", "nope", "--condition",
            "adv", "--data", "data", "--out", "s",
        ],
        d,
    );
}
