use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sbcit_core::data::{read_image, write_pgm, GrayImage};

const SMALL: &[&str] = &[
    "--set",
    "input_size=32",
    "--set",
    "stem_channels=8",
    "--set",
    "stage_dims=[8,8,16,16]",
    "--set",
    "stage_heads=[1,1,2,2]",
    "--set",
    "stage_depths=[1,1,1,1]",
    "--set",
    "window=2",
    "--set",
    "residual_channels=[8,8,16,16]",
    "--set",
    "spatial_channels=[4,4,8,8,16]",
    "--set",
    "attention_channels=8",
    "--set",
    "synthetic_per_class=12",
    "--set",
    "batch_size=8",
    "--set",
    "epochs=2",
];

fn sbcit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbcit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_commands_and_defaults() {
    let out = sbcit(&["--help"]);
    assert!(out.status.success());
    let help = text(&out.stdout);
    for cmd in ["train", "eval", "describe", "gradcheck", "augment", "project"] {
        assert!(help.contains(cmd), "{help}");
    }
    let out = sbcit(&["augment", "--help"]);
    assert!(text(&out.stdout).contains("[default: 8]"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(sbcit(&[]).status.code(), Some(1));
    assert_eq!(sbcit(&["train"]).status.code(), Some(1), "data source is required");
    assert_eq!(sbcit(&["train", "--synthetic", "--data", "x"]).status.code(), Some(1));
    assert_eq!(sbcit(&["describe", "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(sbcit(&["describe", "--set", "input_size=48"]).status.code(), Some(1));
    assert_eq!(sbcit(&["gradcheck", "--module", "nope"]).status.code(), Some(1));
}

#[test]
fn missing_files_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(sbcit(&["describe", "--config", p(&missing)]).status.code(), Some(3));
    let out = sbcit(&["eval", "--ckpt", p(&missing), "--synthetic", "--report", p(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
}

#[test]
fn describe_reports_counts() {
    let out = sbcit(&["describe"]);
    assert!(out.status.success());
    let table = text(&out.stdout);
    assert!(table.contains("fused channels 384"), "{table}");
    assert!(table.lines().any(|l| l.starts_with("total")));

    let json = sbcit(&["describe", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["modules"].as_array().unwrap().len(), 9);
    assert_eq!(json.stdout, sbcit(&["describe", "--json"]).stdout);
}

#[test]
fn describe_reads_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"preset": "full", "input_size": 64}"#).unwrap();
    let out = sbcit(&["describe", "--config", p(&cfg)]);
    assert!(text(&out.stdout).contains("fused channels 768"), "{}", text(&out.stderr));
}

#[test]
fn gradcheck_single_modules() {
    let out = sbcit(&["gradcheck", "--module", "lpu"]);
    assert!(out.status.success(), "{}", text(&out.stdout));
    assert!(text(&out.stdout).contains("PASS"));

    let out = sbcit(&["gradcheck", "--module", "broken_fixture"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stdout).contains("FAIL"));
}

#[test]
fn augment_writes_variants_and_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.pgm");
    let img = GrayImage {
        width: 24,
        height: 16,
        pixels: (0..24 * 16).map(|i| (i % 7) as f32 / 6.0).collect(),
    };
    write_pgm(&input, &img).unwrap();
    let out_dir = dir.path().join("aug");
    let run = |seed: &str| sbcit(&["augment", "--in", p(&input), "--out", p(&out_dir), "--count", "3", "--seed", seed]);
    assert!(run("4").status.success());
    let params = fs::read_to_string(out_dir.join("params.csv")).unwrap();
    assert_eq!(params.lines().count(), 4);
    let first = read_image(&out_dir.join("aug_0000.pgm")).unwrap();
    assert_eq!((first.width, first.height), (24, 16));
    assert!(run("4").status.success());
    assert_eq!(params, fs::read_to_string(out_dir.join("params.csv")).unwrap());
    assert!(run("5").status.success());
    assert_ne!(params, fs::read_to_string(out_dir.join("params.csv")).unwrap());
}

#[test]
fn train_eval_and_project_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let manifest = dir.path().join("split.csv");
    let out = sbcit(&with_small(&["train", "--synthetic", "--out", p(&ckpt), "--manifest", p(&manifest)]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let log = text(&out.stdout);
    assert!(log.starts_with("epoch,lr,train_loss,val_loss,val_acc\n"), "{log}");
    assert_eq!(log.lines().count(), 3);
    let split = fs::read_to_string(&manifest).unwrap();
    assert_eq!(split.lines().filter(|l| l.ends_with(",test")).count(), 4 * 3);

    let report = dir.path().join("report.json");
    let curves = dir.path().join("curves.csv");
    let out = sbcit(&with_small(&[
        "eval", "--ckpt", p(&ckpt), "--synthetic", "--report", p(&report), "--curves", p(&curves),
    ]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["samples"], 12);
    assert!(fs::read_to_string(&curves).unwrap().starts_with("kind,class,threshold,x,y"));

    let out = sbcit(&with_small(&[
        "eval", "--ckpt", p(&ckpt), "--synthetic", "--report", p(&report), "--min-accuracy", "1.01",
    ]));
    assert_eq!(out.status.code(), Some(2));

    let csv = dir.path().join("pca.csv");
    let out = sbcit(&with_small(&["project", "--ckpt", p(&ckpt), "--synthetic", "--out", p(&csv)]));
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 13);

    let out = sbcit(&["eval", "--ckpt", p(&ckpt), "--synthetic", "--report", p(&report)]);
    assert_eq!(out.status.code(), Some(3), "a checkpoint of another shape is rejected");
}

#[test]
fn training_logs_repeat_byte_for_byte() {
    let a = sbcit(&with_small(&["train", "--synthetic", "--seed", "3"]));
    let b = sbcit(&with_small(&["train", "--synthetic", "--seed", "3"]));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let c = sbcit(&with_small(&["train", "--synthetic", "--seed", "4"]));
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn directory_with_wrong_class_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for class in ["a", "b"] {
        fs::create_dir(dir.path().join(class)).unwrap();
        for i in 0..6 {
            let img = GrayImage {
                width: 8,
                height: 8,
                pixels: vec![0.5; 64],
            };
            write_pgm(&dir.path().join(class).join(format!("{i}.pgm")), &img).unwrap();
        }
    }
    let out = sbcit(&with_small(&["train", "--data", p(dir.path())]));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("2 classes"));
    let mut args = with_small(&["train", "--data", p(dir.path())]);
    args.extend(["--set", "num_classes=2"]);
    assert!(sbcit(&args).status.success());
}
