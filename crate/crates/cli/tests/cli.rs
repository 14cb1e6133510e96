use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowvos::dataio::{load_sequence, read_png_text};
use serde_json::Value;
use tempfile::TempDir;

fn flowvos(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowvos"))
        .args(args)
        .arg("--out-dir")
        .arg(out_dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const ONE_SHAPE: &str = r#"{
    "name": "one", "height": 32, "width": 48, "frames": 4, "seed": 3,
    "shapes": [{"kind": "rect", "size": [10, 10], "center": [12, 14], "motion": {"translation": [2, 1]}}]
}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_dataset_layout() {
    let tmp = TempDir::new().unwrap();
    let spec = write(tmp.path(), "spec.json", ONE_SHAPE);
    let data = tmp.path().join("data");
    let o = flowvos(&["synth", spec.to_str().unwrap(), data.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for d in ["JPEGImages/one", "Annotations/one", "flow/one"] {
        assert!(data.join(d).is_dir(), "{d}");
    }
    assert!(data.join("flow/one/00002_inv.flo").is_file());
    assert!(data.join("synth/one.json").is_file());
    let seq = load_sequence(&data, None).unwrap();
    assert_eq!(seq.len(), 4);
    assert_eq!(seq.flows.as_ref().unwrap().len(), 3);
    let text = read_png_text(data.join("Annotations/one/00000.png")).unwrap();
    let run: Value = serde_json::from_str(&text.iter().find(|(k, _)| k == "run_config").unwrap().1).unwrap();
    assert_eq!(run["command"], "synth");
}

#[test]
fn synth_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let spec = write(tmp.path(), "spec.json", ONE_SHAPE);
    // the run config records the target path, so both runs use the same one
    let data = tmp.path().join("data");
    let run = |extra: &[&str]| {
        let _ = fs::remove_dir_all(&data);
        let mut args = vec!["synth", spec.to_str().unwrap(), data.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert_eq!(code(&flowvos(&args, tmp.path())), 0);
        tree(&data)
    };
    let first = run(&[]);
    assert_eq!(first, run(&[]));
    assert_eq!(first, run(&["--seed", "0"]));
    let spec_free = write(tmp.path(), "noseed.json", &ONE_SHAPE.replace(r#""seed": 3,"#, ""));
    let seeded = |seed: &str| {
        let _ = fs::remove_dir_all(&data);
        assert_eq!(
            code(&flowvos(
                &["synth", spec_free.to_str().unwrap(), data.to_str().unwrap(), "--seed", seed],
                tmp.path()
            )),
            0
        );
        fs::read(data.join("JPEGImages/one/00000.png")).unwrap()
    };
    assert_ne!(seeded("1"), seeded("2"));
}

#[test]
fn synth_rejects_bad_specs() {
    let tmp = TempDir::new().unwrap();
    let shapes: Vec<String> = (0..16)
        .map(|i| format!(r#"{{"kind": "rect", "size": [2, 2], "center": [{}, 4]}}"#, 2 + 2 * i))
        .collect();
    let sixteen = format!(r#"{{"height": 16, "width": 40, "frames": 2, "shapes": [{}]}}"#, shapes.join(","));
    for (name, text) in [
        ("sixteen.json", sixteen.as_str()),
        ("broken.json", "{\"height\": 16,"),
        (
            "unknown.json",
            r#"{"height": 16, "width": 16, "frames": 2, "shapes": [], "colour": 1}"#,
        ),
        ("zero.json", r#"{"height": 0, "width": 16, "frames": 2, "shapes": []}"#),
    ] {
        let spec = write(tmp.path(), name, text);
        let o = flowvos(
            &["synth", spec.to_str().unwrap(), tmp.path().join("d").to_str().unwrap()],
            tmp.path(),
        );
        assert_eq!(code(&o), 2, "{name}");
        assert!(stderr(&o).contains("error"), "{name}");
    }
    let o = flowvos(&["synth", "missing.json", "d"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let o = flowvos(&["propagate", "--no-such-flag"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&flowvos(&["frobnicate"], tmp.path())), 2);
    assert_eq!(code(&flowvos(&["bench", "--config", "huge"], tmp.path())), 2);
}

#[test]
fn propagate_missing_checkpoint_exits_2() {
    let tmp = TempDir::new().unwrap();
    let spec = write(tmp.path(), "spec.json", ONE_SHAPE);
    let data = tmp.path().join("data");
    flowvos(&["synth", spec.to_str().unwrap(), data.to_str().unwrap()], tmp.path());
    let o = flowvos(&["propagate", "nope.ckpt", data.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn train_propagate_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let spec = write(tmp.path(), "spec.json", ONE_SHAPE);
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    assert_eq!(code(&flowvos(&["synth", spec.to_str().unwrap(), data.to_str().unwrap()], &out)), 0);

    let o = flowvos(
        &[
            "train",
            data.to_str().unwrap(),
            "--config",
            "micro",
            "--steps",
            "3",
            "--flow",
            "oracle",
            "--seed",
            "4",
        ],
        &out,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.is_file());
    let train: Value = serde_json::from_str(&fs::read_to_string(out.join("train.json")).unwrap()).unwrap();
    assert_eq!(train["losses"].as_array().unwrap().len(), 3);
    assert_eq!(train["run_config"]["seed"], 4);

    let mut reports = Vec::new();
    for flow in ["files", "oracle", "noisy:1"] {
        let o = flowvos(
            &[
                "propagate",
                ckpt.to_str().unwrap(),
                data.to_str().unwrap(),
                "--flow",
                flow,
                "--disable",
                "long-term",
            ],
            &out,
        );
        assert_eq!(code(&o), 0, "{flow}: {}", stderr(&o));
        let report: Value = serde_json::from_str(&fs::read_to_string(out.join("one/report.json")).unwrap()).unwrap();
        assert_eq!(report["bank_sizes"].as_array().unwrap().len(), 3);
        assert_eq!(report["options"]["gates"]["long_term"], false);
        assert_eq!(report["run_config"]["args"]["flow"], flow);
        assert!(report["eval"]["jf"].is_number());
        reports.push(report);
    }
    // Stored flow files hold the oracle flow.
    assert_eq!(reports[0]["eval"], reports[1]["eval"]);
    let text = read_png_text(out.join("one/00002.png")).unwrap();
    assert!(text.iter().any(|(k, v)| k == "run_config" && v.contains("propagate")));

    let ok = flowvos(&["eval", out.to_str().unwrap(), data.to_str().unwrap(), "--min-jf", "0"], &out);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(stdout(&ok).contains("J&F"));
    let eval: Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["passed"], true);
    let fail = flowvos(&["eval", out.to_str().unwrap(), data.to_str().unwrap(), "--min-jf", "1.5"], &out);
    assert_eq!(code(&fail), 1);

    let bad = flowvos(
        &["propagate", ckpt.to_str().unwrap(), data.to_str().unwrap(), "--flow", "gma"],
        &out,
    );
    assert_eq!(code(&bad), 2);
    let bad = flowvos(
        &[
            "propagate",
            ckpt.to_str().unwrap(),
            data.to_str().unwrap(),
            "--disable",
            "everything",
        ],
        &out,
    );
    assert_eq!(code(&bad), 2);
    let bad = flowvos(
        &["propagate", ckpt.to_str().unwrap(), data.to_str().unwrap(), "--mem-cap", "0"],
        &out,
    );
    assert_eq!(code(&bad), 2);
}

#[test]
fn gradcheck_passes_and_lists_groups_once() {
    let tmp = TempDir::new().unwrap();
    let o = flowvos(&["gradcheck", "--probes", "2"], tmp.path());
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("gradcheck.json")).unwrap()).unwrap();
    let groups: Vec<&str> = report["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["group"].as_str().unwrap())
        .collect();
    let mut unique = groups.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), groups.len());
    for g in &groups {
        assert_eq!(
            stdout(&o).lines().filter(|l| l.split_whitespace().next() == Some(g)).count(),
            1,
            "{g}"
        );
    }
}

#[test]
fn gradcheck_detects_broken_backward() {
    let tmp = TempDir::new().unwrap();
    let o = flowvos(&["gradcheck", "--probes", "2", "--inject-fault"], tmp.path());
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn bench_reports_rows_and_exponents() {
    let tmp = TempDir::new().unwrap();
    let o = flowvos(&["bench", "--config", "micro", "--repeats", "2", "--warmup", "0"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("bench.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    for method in ["adva", "dense"] {
        let sizes: Vec<u64> = rows
            .iter()
            .filter(|r| r["method"] == method)
            .map(|r| r["size"].as_u64().unwrap())
            .collect();
        assert_eq!(sizes, [64, 128, 256]);
    }
    assert!(rows
        .iter()
        .all(|r| r["median_s"].as_f64().unwrap() > 0.0 && r["variance_s2"].is_number()));
    assert!(report["adva_exponent"].is_number() && report["dense_exponent"].is_number());
    assert!(stdout(&o).contains("exponent adva"));
}
