use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imfuse::downstream::parse_reports_tsv;
use imfuse::modality::ModalitySet;
use imfuse_cli::manifest::{manifest_file, RunManifest};

const TINY: &[&str] = &[
    "--set", "data.samples=24",
    "--set", "data.size=16",
    "--set", "data.ratios=[0.5,0.25,0.25]",
    "--set", "model.dim=16",
    "--set", "model.layers=1",
    "--set", "model.heads=2",
    "--set", "model.dec_dim=8",
    "--set", "model.dec_layers=1",
    "--set", "model.proj_dim=8",
    "--set", "model.class_embed=4",
    "--set", "pretrain.epochs=3",
    "--set", "pretrain.batch=4",
    "--set", "downstream.epochs=2",
    "--set", "downstream.batch=4",
];

fn imfuse(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imfuse"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(TINY)
        .env_remove("IMFUSE_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = imfuse(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_prints_default_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_imfuse"))
        .args(["synth", "--set", "data.size=16"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("samples 640"), "{text}");
    assert!(text.contains("train 512 val 64 test 64"), "{text}");
}

#[test]
fn synth_is_bit_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    let first: Vec<(PathBuf, Vec<u8>)> = files(&dir.path().join("dataset")).into_iter().map(|p| { let b = fs::read(&p).unwrap(); (p, b) }).collect();
    ok(dir.path(), &["synth"]);
    let second: Vec<(PathBuf, Vec<u8>)> = files(&dir.path().join("dataset")).into_iter().map(|p| { let b = fs::read(&p).unwrap(); (p, b) }).collect();
    assert!(!first.is_empty());
    assert_eq!(first, second);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_imfuse")).args(["synth", "--set", "data.ratios=[0.5,0.5,0.5]"]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ratios"));
    assert_eq!(code(&imfuse(dir.path(), &["synth", "--set", "model.depth=2"])), 1);
    ok(dir.path(), &["synth"]);
    let o = imfuse(dir.path(), &["pretrain", "--alpha", "0"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
    assert_eq!(code(&imfuse(dir.path(), &["train", "--mode", "sideways"])), 1);
    assert_eq!(code(&imfuse(dir.path(), &["ablate", "--variants", "full,nonsense"])), 1);
    assert_eq!(code(&imfuse(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&imfuse(dir.path(), &["--help"])), 0);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = imfuse(dir.path(), &["pretrain"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));
    ok(dir.path(), &["synth"]);
    let o = imfuse(dir.path(), &["eval", "--name", "nowhere"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
    let o = imfuse(dir.path(), &["train", "--mode", "full-finetune"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
    let absent = dir.path().join("absent.tsv");
    let o = imfuse(dir.path(), &["plot", absent.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(absent.to_str().unwrap()));
}

#[test]
fn pretrain_writes_curves_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    let out = ok(dir.path(), &["pretrain", "--lambda2", "0"]);
    assert!(!out.contains("contrastive"), "{out}");
    let run = dir.path().join("pretrain");
    let curve = fs::read_to_string(run.join("loss_curve.tsv")).unwrap();
    assert!(curve.starts_with("epoch\tterm\tvalue\n"));
    assert!(!curve.contains("contrastive"));
    assert!(fs::metadata(run.join("loss_curve.svg")).unwrap().len() > 0);
    let m = RunManifest::load(&run.join(manifest_file("pretrain"))).unwrap();
    assert_eq!(m.config.pretrain.lambda2, 0.0);
    assert_eq!(m.code_hash.len(), 64);
    assert!(m.artifacts.iter().all(|a| run.join(a).exists()));
}

#[test]
fn resumed_pretraining_continues_the_curve() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    ok(dir.path(), &["pretrain", "--name", "straight"]);
    ok(dir.path(), &["pretrain", "--name", "split", "--stop-after", "2"]);
    let partial = fs::read_to_string(dir.path().join("split/loss_curve.tsv")).unwrap();
    assert!(!partial.lines().any(|l| l.starts_with("3\t")));
    ok(dir.path(), &["pretrain", "--name", "split", "--resume"]);
    let a = fs::read_to_string(dir.path().join("straight/loss_curve.tsv")).unwrap();
    let b = fs::read_to_string(dir.path().join("split/loss_curve.tsv")).unwrap();
    let total = |s: &str, epoch: &str| -> f64 {
        s.lines().find(|l| l.starts_with(&format!("{epoch}\ttotal\t"))).unwrap().rsplit('\t').next().unwrap().parse().unwrap()
    };
    let (x, y) = (total(&a, "3"), total(&b, "3"));
    assert!((x - y).abs() <= 0.05 * x.abs(), "{x} vs {y}");
    assert_eq!(a, b);
}

#[test]
fn eval_lists_every_subset_full_set_first() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    ok(dir.path(), &["pretrain"]);
    ok(dir.path(), &["train", "--mode", "partial-finetune"]);
    ok(dir.path(), &["eval", "--split", "val"]);
    let text = fs::read_to_string(dir.path().join("train/eval_val.tsv")).unwrap();
    let rows = parse_reports_tsv(&text).unwrap();
    let expected: Vec<String> = ModalitySet::FULL.nonempty_subsets().iter().map(|s| s.to_string()).collect();
    assert_eq!(rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>(), expected);
    assert_eq!(rows[0].0, "optical+sar+dem+map");
    let sizes: Vec<usize> = rows.iter().map(|r| r.0.split('+').count()).collect();
    assert_eq!(sizes, vec![4, 3, 3, 3, 3, 2, 2, 2, 2, 2, 2, 1, 1, 1, 1]);
    let c = imfuse::container::Container::open(dir.path().join("train/confusion_val")).unwrap();
    let (shape, _) = c.read("optical").unwrap();
    assert_eq!(shape, vec![5, 5]);
    let m = RunManifest::load(&dir.path().join("train").join(manifest_file("train"))).unwrap();
    assert_eq!(m.config.downstream.mode, imfuse::config::TrainMode::PartialFinetune);
}

#[test]
fn ablation_table_has_six_columns_and_a_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    let out = ok(dir.path(), &["ablate"]);
    let header = out.lines().next().unwrap();
    assert_eq!(header, "subset\tfull\tno-lstm\tno-random\tno-mask\tpartial-finetune\tfull-finetune");
    let table = fs::read_to_string(dir.path().join("ablate/ablation.tsv")).unwrap();
    assert_eq!(table.lines().count(), 16);
    let svg = fs::read_to_string(dir.path().join("ablate/ablation.svg")).unwrap();
    // Background plus a fill and an outline per cell.
    assert_eq!(svg.matches("<rect").count(), 1 + 2 * 15 * 6);
    let m = RunManifest::load(&dir.path().join("ablate").join(manifest_file("ablate"))).unwrap();
    assert!(m.artifacts.iter().all(|a| dir.path().join("ablate").join(a).exists()));
}

#[test]
fn output_root_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_imfuse"))
        .args(["synth", "--set", "data.samples=4"])
        .env("IMFUSE_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("dataset/dataset.json").is_file());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 4, "data": {"samples": 9}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_imfuse"))
        .args(["synth", "--samples", "6", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&o.stdout).contains("samples 6"));
    let info = fs::read_to_string(dir.path().join("dataset/dataset.json")).unwrap();
    assert!(info.contains("\"seed\": 4"));
}
