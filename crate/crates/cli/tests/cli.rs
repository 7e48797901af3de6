use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn segdiff(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segdiff"))
        .args(args)
        .current_dir(cwd)
        .env("SEGDIFF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = segdiff(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (PathBuf::from(p.file_name().unwrap()), bytes)
        })
        .collect();
    v.sort();
    v
}

const TINY_TRAIN: &[&str] = &[
    "--epochs",
    "1",
    "--batch-size",
    "8",
    "--warmup",
    "1",
    "--base-channels",
    "8",
    "--diffusion-steps",
    "40",
];

fn train(tmp: &Path, out: &str, mode: &str) {
    let mut args = vec!["train", "--data", "d", "--out", out, "--mode", mode];
    args.extend_from_slice(TINY_TRAIN);
    ok(&args, tmp);
}

#[test]
fn gen_data_counts_and_reproduces() {
    let tmp = TempDir::new().unwrap();
    ok(
        &["gen-data", "--out", "a", "--n", "100", "--seed", "5"],
        tmp.path(),
    );
    ok(
        &["gen-data", "--out", "b", "--n", "100", "--seed", "5"],
        tmp.path(),
    );
    let a = files(&tmp.path().join("a"));
    let pgms = a
        .iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "pgm"))
        .count();
    assert_eq!(pgms, 200);
    assert!(a.iter().any(|(p, _)| p == Path::new("manifest.txt")));
    assert_eq!(a, files(&tmp.path().join("b")));
    ok(
        &["gen-data", "--out", "c", "--n", "100", "--seed", "6"],
        tmp.path(),
    );
    assert_ne!(a, files(&tmp.path().join("c")));
}

#[test]
fn gen_data_rejects_empty_split() {
    let tmp = TempDir::new().unwrap();
    let out = segdiff(&["gen-data", "--out", "a", "--n", "2"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("heldout, validation, test"));
}

#[test]
fn config_file_is_layered_under_flags() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("p.cfg"),
        "# phantoms\nn = 60\nseed = 9\nnoise_sigma = 0.02\n",
    )
    .unwrap();
    ok(
        &[
            "gen-data", "--config", "p.cfg", "--out", "a", "--seed", "11",
        ],
        tmp.path(),
    );
    let eff = fs::read_to_string(tmp.path().join("a/effective_config.txt")).unwrap();
    assert!(eff.contains("n = 60"));
    assert!(eff.contains("seed = 11"));
    assert!(eff.contains("noise_sigma = 0.02"));
    fs::write(tmp.path().join("bad.cfg"), "nosie_sigma = 0.02\n").unwrap();
    let out = segdiff(
        &["gen-data", "--config", "bad.cfg", "--out", "b"],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nosie_sigma"));
}

#[test]
fn train_outputs_and_probes() {
    let tmp = TempDir::new().unwrap();
    ok(&["gen-data", "--out", "d", "--n", "40"], tmp.path());
    train(tmp.path(), "u", "unconditional");
    let probe = fs::read_to_string(tmp.path().join("u/mask_probe.tsv")).unwrap();
    let rows: Vec<&str> = probe.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split('\t').nth(1) == Some("0")));
    assert!(!tmp.path().join("u/ablation_histogram.tsv").exists());

    train(tmp.path(), "a", "guided-ablated");
    let hist = fs::read_to_string(tmp.path().join("a/ablation_histogram.tsv")).unwrap();
    let total: u64 = hist
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(2).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(hist.lines().count(), 9);
    assert_eq!(total, 28);
    let loss = fs::read_to_string(tmp.path().join("a/loss.tsv")).unwrap();
    assert!(loss.starts_with("step\tepoch\tlr\tloss\n"));
    assert_eq!(loss.lines().count(), 5);

    train(tmp.path(), "a2", "guided-ablated");
    assert_eq!(files(&tmp.path().join("a")), files(&tmp.path().join("a2")));
}

#[test]
fn train_exit_codes() {
    let tmp = TempDir::new().unwrap();
    ok(&["gen-data", "--out", "d", "--n", "40"], tmp.path());
    let mut args = vec![
        "train", "--data", "d", "--out", "x", "--mode", "guided", "--lr", "1e30",
    ];
    args.extend_from_slice(TINY_TRAIN);
    let out = segdiff(&args, tmp.path());
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step"));
    assert_eq!(
        code(&segdiff(
            &["train", "--data", "missing", "--out", "x"],
            tmp.path()
        )),
        3
    );
    assert_eq!(
        code(&segdiff(
            &["train", "--data", "d", "--out", "x", "--mode", "fancy"],
            tmp.path()
        )),
        2
    );
    let out = segdiff(&["train", "--out", "x"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
}

#[test]
fn sample_patterns_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    ok(&["gen-data", "--out", "d", "--n", "40"], t);
    train(t, "m", "guided-ablated");
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "sample",
            "--ckpt",
            "m/model.ckpt",
            "--out",
            out,
            "--seed",
            "7",
        ];
        args.extend_from_slice(extra);
        ok(&args, t);
    };
    run(
        "s1",
        &["--masks", "d", "--sampler", "ddim", "--steps", "10"],
    );
    run(
        "s2",
        &["--masks", "d", "--sampler", "ddim", "--steps", "10"],
    );
    assert_eq!(files(&t.join("s1")), files(&t.join("s2")));
    assert!(t.join("s1/contact_sheet.pgm").exists());

    // the test split of 40 phantoms is indices 37..40
    run("verbatim", &["--masks", "d", "--pattern", "", "--n", "2"]);
    assert_eq!(
        fs::read(t.join("verbatim/msk_000001.pgm")).unwrap(),
        fs::read(t.join("d/msk_000038.pgm")).unwrap()
    );

    run("full", &["--masks", "d", "--pattern", "1,2,3", "--n", "3"]);
    run("empty", &["--masks", "empty", "--n", "3"]);
    for i in 0..3 {
        let name = format!("gen_{i:06}.pgm");
        assert_eq!(
            fs::read(t.join("full").join(&name)).unwrap(),
            fs::read(t.join("empty").join(&name)).unwrap()
        );
    }

    let out = segdiff(
        &[
            "sample",
            "--ckpt",
            "m/model.ckpt",
            "--masks",
            "empty",
            "--pattern",
            "5",
            "--out",
            "x",
        ],
        t,
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("class 5"));
    let out = segdiff(
        &[
            "sample",
            "--ckpt",
            "m/model.ckpt",
            "--masks",
            "empty",
            "--sampler",
            "ddpm",
            "--steps",
            "10",
            "--out",
            "x",
        ],
        t,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn evaluate_with_stand_in_generators() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    // 480 phantoms leave 36 test items, enough for 32-dimensional features
    ok(&["gen-data", "--out", "d", "--n", "480"], t);
    ok(
        &[
            "train",
            "--data",
            "d",
            "--out",
            "seg",
            "--mode",
            "segmenter",
            "--epochs",
            "1",
        ],
        t,
    );
    let text = ok(
        &[
            "evaluate",
            "--protocol",
            "faithfulness",
            "--gen-ckpt",
            "oracle",
            "--seg-ckpt",
            "seg/model.ckpt",
            "--data",
            "d",
            "--out",
            "f",
        ],
        t,
    );
    assert!(text.contains("dice_gen_vs_real = 1.000000"));
    let tsv = fs::read_to_string(t.join("f/report.tsv")).unwrap();
    assert!(tsv.contains("dice_gen_vs_real\t1.000000"));
    assert!(t.join("f/effective_config.txt").exists());

    let text = ok(
        &[
            "evaluate",
            "--protocol",
            "fid",
            "--gen-ckpt",
            "oracle",
            "--seg-ckpt",
            "seg/model.ckpt",
            "--data",
            "d",
            "--out",
            "g",
        ],
        t,
    );
    let fid: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("fid = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(fid.abs() <= 1e-6);
    assert!(text.contains("not comparable"));

    let out = segdiff(
        &[
            "evaluate",
            "--protocol",
            "faithfulness",
            "--gen-ckpt",
            "noise",
            "--data",
            "d",
            "--out",
            "h",
        ],
        t,
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seg-ckpt"));
    let out = segdiff(
        &[
            "evaluate",
            "--protocol",
            "empty-mask",
            "--gen-ckpt",
            "noise",
            "--seg-ckpt",
            "seg/model.ckpt",
            "--data",
            "d",
            "--out",
            "h",
        ],
        t,
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--uncond-ckpt"));
    let out = segdiff(
        &[
            "evaluate",
            "--protocol",
            "psnr",
            "--gen-ckpt",
            "noise",
            "--data",
            "d",
            "--out",
            "h",
        ],
        t,
    );
    assert_eq!(code(&out), 2);
}
