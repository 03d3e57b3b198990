use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use noisymim_core::checkpoint::{load_checkpoint, save_checkpoint};

const TINY: [&str; 12] = [
    "encoder.image_size=8",
    "encoder.patch_size=4",
    "encoder.embed_dim=8",
    "encoder.depth=2",
    "encoder.heads=2",
    "encoder.noise_block=1",
    "train.batch_size=4",
    "train.steps=2",
    "data.classes=2",
    "data.samples_per_class=6",
    "data.eval_per_class=3",
    "train.log_every=1",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisymim"))
        .args(args)
        .env("NOISYMIM_THREADS", "1")
        .output()
        .expect("spawn noisymim")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pretrain_tiny(out: &Path) {
    let mut args = vec!["pretrain", "--out", out.to_str().unwrap(), "--override"];
    args.extend(TINY);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn make_data(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "make-data",
        "--kind",
        "synthetic",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(extra);
    run(&args)
}

#[test]
fn make_data_writes_deterministic_cifar_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let extra = ["--classes", "2", "--samples", "10", "--test-samples", "3"];
    for d in [&a, &b] {
        let o = make_data(d, &extra);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let train = fs::read(a.join("data_batch_1.bin")).unwrap();
    assert_eq!(train.len(), 20 * 3073);
    assert_eq!(fs::read(a.join("test_batch.bin")).unwrap().len(), 6 * 3073);
    assert_eq!(train, fs::read(b.join("data_batch_1.bin")).unwrap());
    assert!(a.join("batches.meta.txt").exists());
    assert!(a.join("manifest.txt").exists());

    let o = run(&[
        "make-data",
        "--kind",
        "cifar-check",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn truncated_cifar_fails_check_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = make_data(
        dir.path(),
        &["--classes", "2", "--samples", "4", "--test-samples", "0"],
    );
    assert_eq!(code(&o), 0);
    let path = dir.path().join("data_batch_1.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    let o = run(&[
        "make-data",
        "--kind",
        "cifar-check",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("byte offset"), "{}", stderr(&o));
}

#[test]
fn pretrain_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    pretrain_tiny(dir.path());
    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("step,"));
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("command"));
    let ck = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(ck.step, 2);
}

#[test]
fn unknown_override_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "pretrain",
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "encoder.nope=1",
    ]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("encoder.depth"),
        "valid keys listed: {}",
        stderr(&o)
    );
}

#[test]
fn compare_identical_arms_agree() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.txt");
    fs::write(
        &grid,
        format!("seeds = 0\nbase {}\narm a\narm b\n", TINY.join(" ")),
    )
    .unwrap();
    let out = dir.path().join("cmp");
    let o = run(&[
        "compare",
        "--grid",
        grid.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("probe.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[2] == "ok"));
    assert_eq!(rows[0][3..], rows[1][3..]);
    assert!(out.join("probe.txt").exists());
    assert!(out.join("runs/a_seed0/final.ckpt").exists());
}

#[test]
fn compare_rejects_unknown_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "compare",
        "--grid",
        "no-such-grid",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn analyze_attn_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    pretrain_tiny(&dir.path().join("run"));
    let out = dir.path().join("attn");
    let ck = dir.path().join("run/final.ckpt");
    let o = run(&[
        "analyze-attn",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--samples",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = fs::read_to_string(out.join("head_kl.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    assert_eq!(rows, 2 * 2);
    for f in [
        "layer_kl.csv",
        "head_kl.svg",
        "attn_layer1_query0.pgm",
        "attn_layer1_query0.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }

    let o = run(&[
        "analyze-attn",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--query",
        "99",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn identical_heads_report_zero_kl() {
    let dir = tempfile::tempdir().unwrap();
    pretrain_tiny(&dir.path().join("run"));
    let mut ck = load_checkpoint(&dir.path().join("run/final.ckpt")).unwrap();
    let (d, heads) = (ck.config.encoder.embed_dim, ck.config.encoder.heads);
    let hd = d / heads;
    for blk in 0..ck.config.encoder.depth {
        for m in ["q", "k"] {
            let w = ck
                .params
                .get_mut(&format!("blocks.{blk}.attn.{m}.weight"))
                .unwrap();
            for row in 0..d {
                for h in 1..heads {
                    for j in 0..hd {
                        w.data_mut()[row * d + h * hd + j] = w.data()[row * d + j];
                    }
                }
            }
        }
        let b = ck
            .params
            .get_mut(&format!("blocks.{blk}.attn.q.bias"))
            .unwrap();
        for h in 1..heads {
            for j in 0..hd {
                b.data_mut()[h * hd + j] = b.data()[j];
            }
        }
    }
    let path = dir.path().join("same.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let out = dir.path().join("attn");
    let o = run(&[
        "analyze-attn",
        "--checkpoint",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--samples",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("head_kl.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let kl: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(kl, 0.0, "{line}");
    }
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = run(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));

    let o = run(&["gradcheck", "--corrupt-gradient", "blocks.0.attn.q.weight"]);
    assert_eq!(code(&o), 1);
    let all = format!("{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(all.contains("blocks.0.attn.q.weight"), "{all}");
}
