mod common;

use std::path::Path;
use std::process::{Command, Output};

use revealtoy_cli::commands::MetricsLine;
use revealtoy_core::codec::{read_png, write_png};
use revealtoy_core::synth::{dataset_read, occlusion_filter};

fn revealtoy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revealtoy"))
        .args(args)
        .env("REVEALTOY_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = revealtoy(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible_and_reports_filters() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let args = |d: &Path| {
        vec![
            "gen-data".to_string(),
            "--out".into(),
            p(d).into(),
            "--count".into(),
            "12".into(),
            "--size".into(),
            "16".into(),
            "--layers".into(),
            "1..3".into(),
            "--seed".into(),
            "5".into(),
        ]
    };
    let sa: Vec<String> = args(&a);
    let out = ok(&sa.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.contains("occlusion filter"), "{out}");
    assert!(out.contains("consistency filter: 12 pass, 0 fail"), "{out}");
    let sb: Vec<String> = args(&b);
    ok(&sb.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn gen_data_empty_and_invalid() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("empty");
    ok(&["gen-data", "--out", p(&d), "--count", "0"]);
    let (m, recs) = dataset_read(&d).unwrap();
    assert_eq!((m.count, recs.len()), (0, 0));
    let bad = revealtoy(&["gen-data", "--out", p(&d), "--count", "1", "--layers", "3..2"]);
    assert!(!bad.status.success());
}

#[test]
fn thousand_scenes_all_occluded() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("occ");
    let out = ok(&[
        "gen-data", "--out", p(&d), "--count", "1000", "--size", "16", "--occluded-fraction", "1.0",
    ]);
    assert!(out.contains("1000 pass, 0 fail"), "{out}");
    let (_, recs) = dataset_read(&d).unwrap();
    assert!(recs.iter().all(|r| occlusion_filter(&r.scene, 0.1)));
}

fn read_metrics(path: &Path) -> Vec<MetricsLine> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_resume_decompose_eval() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--count", "6", "--size", "16"]);
    let cfg = t.path().join("run.json");
    std::fs::write(&cfg, serde_json::to_string(&common::small_run()).unwrap()).unwrap();
    let out = t.path().join("run");
    let train = |steps: &str, resume: Option<&Path>| {
        let mut a = vec![
            "train", "--data", p(&data), "--config", p(&cfg), "--out", p(&out), "--steps", steps,
            "--seed", "3",
        ];
        if let Some(r) = resume {
            a.extend(["--resume", p(r)]);
        }
        ok(&a)
    };
    train("1", None);
    let m = read_metrics(&out.join("metrics.jsonl"));
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].step, 1);
    let first = out.join("step_000001.rvlt");
    assert!(first.exists());

    train("4", Some(&first));
    let m = read_metrics(&out.join("metrics.jsonl"));
    assert_eq!(m.iter().map(|l| l.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    for l in &m {
        // default weights are 1; training runs in f32
        let sum = l.loss_fm + l.loss_alpha + l.loss_orth;
        assert!((l.loss_total - sum).abs() <= 4.0 * f32::EPSILON as f64 * sum.abs());
    }
    assert!(out.join("step_000002.rvlt").exists() && out.join("step_000004.rvlt").exists());

    // an uninterrupted run reaches the same parameters
    let straight = t.path().join("straight");
    ok(&[
        "train", "--data", p(&data), "--config", p(&cfg), "--out", p(&straight), "--steps", "4",
        "--seed", "3",
    ]);
    assert_eq!(
        std::fs::read(out.join("step_000004.rvlt")).unwrap(),
        std::fs::read(straight.join("step_000004.rvlt")).unwrap()
    );

    // decompose a dataset composite
    let ckpt = out.join("step_000004.rvlt");
    let (_, recs) = dataset_read(&data).unwrap();
    let img = t.path().join("in.png");
    write_png(&img, &recs[0].scene.composite).unwrap();
    let boxes = t.path().join("boxes.json");
    std::fs::write(&boxes, serde_json::to_string(&recs[0].scene.boxes).unwrap()).unwrap();
    let run_dec = |dir: &Path, extra: &[&str]| {
        let mut a = vec![
            "decompose", "--ckpt", p(&ckpt), "--image", p(&img), "--boxes", p(&boxes), "--out", p(dir),
            "--steps", "2", "--seed", "4",
        ];
        a.extend_from_slice(extra);
        ok(&a)
    };
    let (d1, d2) = (t.path().join("d1"), t.path().join("d2"));
    run_dec(&d1, &[]);
    run_dec(&d2, &[]);
    assert_eq!(tree_bytes(&d1), tree_bytes(&d2));
    let bg = read_png(&d1.join("background.png")).unwrap();
    assert_eq!((bg.width(), bg.height()), (16, 16));
    for (j, b) in recs[0].scene.boxes.iter().enumerate() {
        let f = read_png(&d1.join(format!("fg_{j:02}.png"))).unwrap();
        assert_eq!((f.width(), f.height()), (b.w, b.h));
    }
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d1.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["seed"], 4);
    assert_eq!(result["steps"], 2);

    std::fs::write(&boxes, r#"[{"x":0,"y":0,"w":4,"h":4},{"x":10,"y":10,"w":9,"h":2}]"#).unwrap();
    let bad = revealtoy(&[
        "decompose", "--ckpt", p(&ckpt), "--image", p(&img), "--boxes", p(&boxes), "--out",
        p(&t.path().join("d3")),
    ]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("boxes[1]"));

    // eval with a model and with ground truth as the prediction
    let report = t.path().join("eval/report.json");
    ok(&[
        "eval", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&report), "--steps", "2",
        "--limit", "2",
    ]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["per_scene"].as_array().unwrap().len(), 2);
    assert!(report.with_extension("md").exists());
    let oracle = t.path().join("oracle.json");
    ok(&["eval", "--oracle", "--data", p(&data), "--report", p(&oracle)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&oracle).unwrap()).unwrap();
    assert_eq!(v["aggregate"]["bg_psnr"], 99.0);
    assert_eq!(v["aggregate"]["fg_soft_iou"], 1.0);
}

#[test]
fn train_rejects_mismatched_dataset() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--count", "2", "--size", "32"]);
    let cfg = t.path().join("run.json");
    std::fs::write(&cfg, serde_json::to_string(&common::small_run()).unwrap()).unwrap();
    let out = revealtoy(&[
        "train", "--data", p(&data), "--config", p(&cfg), "--out", p(&t.path().join("o")), "--steps", "1",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("the model expects 16px"));
}

#[test]
fn gradcheck_command_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("all passed"), "{out}");
    assert!(out.contains("total_loss"));
}
