use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semcolor(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semcolor"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run semcolor")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = semcolor(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in ["list.txt", "images", "masks"] {
        let p = dir.join(sub);
        if p.is_file() {
            files.push((sub.to_string(), fs::read(&p).unwrap()));
            continue;
        }
        let mut names: Vec<_> = fs::read_dir(&p).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for n in names {
            files.push((n.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&n).unwrap()));
        }
    }
    files
}

// a tiny model keeps these runs to seconds
const TINY: [&str; 14] = [
    "--set", "num_classes=4", "--set", "base_channels=4", "--set", "embedding_channels=8",
    "--set", "generator_channels=8", "--set", "generator_layers=1", "--set", "epochs=2",
    "--set", "batch_size=4",
];

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["gen-data", "--out", "a", "--num", "6", "--size", "32", "--classes", "4", "--seed", "7"]);
    ok(t.path(), &["gen-data", "--out", "b", "--num", "6", "--size", "32", "--classes", "4", "--seed", "7"]);
    let (a, b) = (read_tree(&t.path().join("a")), read_tree(&t.path().join("b")));
    assert_eq!(a.len(), 1 + 6 + 6);
    assert_eq!(a, b);

    let again = semcolor(t.path(), &["gen-data", "--out", "a", "--num", "2"]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"));
    ok(t.path(), &["gen-data", "--out", "a", "--num", "2", "--force"]);

    ok(t.path(), &["gen-data", "--out", "gray", "--num", "2", "--classes", "1"]);
    let missing = semcolor(t.path(), &["gen-data", "--num", "2"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("--out"));
}

#[test]
fn train_defaults_errors_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let dump = ok(t.path(), &["train", "--dump-config"]);
    let text = String::from_utf8_lossy(&dump.stdout);
    for line in ["lr = 0.001", "beta1 = 0.95", "beta2 = 0.9995", "lambda_emb = 1", "lambda_seg = 100", "lambda_gen = 1"] {
        assert!(text.lines().any(|l| l == line), "{line}");
    }

    ok(t.path(), &["gen-data", "--out", "d", "--num", "4", "--classes", "4", "--seed", "1"]);
    let bad_key = semcolor(t.path(), &["train", "--data", "d", "--out", "x.ckpt", "--set", "momentum=0.9"]);
    assert!(!bad_key.status.success());
    assert!(stderr(&bad_key).contains("momentum"));
    fs::write(t.path().join("bad.cfg"), "lr = 0.001\nwarmup = 10\n").unwrap();
    let bad_file = semcolor(t.path(), &["train", "--data", "d", "--out", "x.ckpt", "--config", "bad.cfg"]);
    assert!(stderr(&bad_file).contains("warmup"));
    let bad_regime = semcolor(t.path(), &["train", "--data", "d", "--out", "x.ckpt", "--regime", "both"]);
    assert!(stderr(&bad_regime).contains("both"));
    let no_init = semcolor(t.path(), &["train", "--data", "d", "--out", "x.ckpt", "--regime", "seg_only_pretrained"]);
    assert!(!no_init.status.success());
    assert!(stderr(&no_init).contains("--init"));

    let mut a = vec!["train", "--data", "d", "--val", "d", "--out", "a.ckpt", "--seed", "3"];
    a.extend(TINY);
    ok(t.path(), &a);
    let mut b = vec!["train", "--data", "d", "--val", "d", "--out", "b.ckpt", "--seed", "3"];
    b.extend(TINY);
    ok(t.path(), &b);
    let (ca, cb) = (fs::read_to_string(t.path().join("a.csv")).unwrap(), fs::read_to_string(t.path().join("b.csv")).unwrap());
    assert_eq!(ca, cb);
    assert!(ca.starts_with("epoch,split,L_emb,L_seg,L_gen,L_sum\n"));
    assert_eq!(ca.lines().count(), 1 + 2 * 2);
    assert_eq!(fs::read(t.path().join("a.ckpt")).unwrap(), fs::read(t.path().join("b.ckpt")).unwrap());

    let mut c = vec!["train", "--data", "d", "--out", "c.ckpt", "--regime", "color_only"];
    c.extend(TINY);
    ok(t.path(), &c);
    let mut p = vec!["train", "--data", "d", "--out", "p.ckpt", "--regime", "seg_only_pretrained", "--init", "c.ckpt"];
    p.extend(TINY);
    ok(t.path(), &p);
}

#[test]
fn sample_and_eval() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["gen-data", "--out", "d", "--num", "4", "--classes", "4", "--seed", "2"]);
    let mut train = vec!["train", "--data", "d", "--out", "m.ckpt"];
    train.extend(TINY);
    ok(t.path(), &train);

    let input = "d/images/0000.png";
    ok(t.path(), &["sample", "--ckpt", "m.ckpt", "--input", input, "--count", "3", "--seed", "5", "--out", "s1"]);
    ok(t.path(), &["sample", "--ckpt", "m.ckpt", "--input", input, "--count", "3", "--seed", "5", "--out", "s2"]);
    let files = |d: &str| -> Vec<Vec<u8>> { (0..3).map(|i| fs::read(t.path().join(d).join(format!("sample_{i:03}.png"))).unwrap()).collect() };
    let (s1, s2) = (files("s1"), files("s2"));
    assert_eq!(s1, s2);
    assert!(s1[0] != s1[1] && s1[1] != s1[2] && s1[0] != s1[2]);

    // a 48x48 input is rescaled with a warning
    ok(t.path(), &["gen-data", "--out", "big", "--num", "1", "--size", "48", "--classes", "4"]);
    let big = semcolor(t.path(), &["sample", "--ckpt", "m.ckpt", "--input", "big/images/0000.png", "--out", "s3"]);
    assert!(big.status.success());
    assert!(stderr(&big).contains("rescaling"));

    let missing = semcolor(t.path(), &["sample", "--ckpt", "nope.ckpt", "--input", input, "--out", "s4"]);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("nope.ckpt"));
    assert_eq!(stderr(&missing).trim().lines().count(), 1);

    ok(t.path(), &["eval", "--ckpt", "m.ckpt", "--data", "d", "--out", "r1", "--seed", "4"]);
    ok(t.path(), &["eval", "--ckpt", "m.ckpt", "--data", "d", "--out", "r2", "--seed", "4"]);
    let report = fs::read_to_string(t.path().join("r1/metrics.csv")).unwrap();
    assert_eq!(report, fs::read_to_string(t.path().join("r2/metrics.csv")).unwrap());
    let rows: Vec<_> = report.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    assert_eq!(rows, ["psnr", "msssim", "miou", "diversity"]);
    assert!(t.path().join("r1/diversity_histogram.csv").exists());

    let bogus = semcolor(t.path(), &["eval", "--ckpt", "m.ckpt", "--data", "d", "--out", "r3", "--metrics", "psnr,fid"]);
    assert!(!bogus.status.success());
    assert!(stderr(&bogus).contains("psnr, msssim, miou, diversity"));

    ok(t.path(), &["eval", "--oracle", "--data", "d", "--out", "ro"]);
    let oracle = fs::read_to_string(t.path().join("ro/metrics.csv")).unwrap();
    assert!(oracle.contains("test,psnr,100.0"));
    assert!(oracle.contains("test,msssim,1.0"));
    assert!(oracle.contains("test,miou,1.0"));
}

#[test]
fn help_lists_flags_and_defaults() {
    let t = tempfile::tempdir().unwrap();
    for (cmd, flags) in [
        ("gen-data", &["--out", "--num", "--size", "--classes", "--seed", "--force"][..]),
        ("train", &["--data", "--regime", "--config", "--init", "--out", "lr = 0.001", "beta1 = 0.95", "lambda_seg = 100"][..]),
        ("sample", &["--ckpt", "--input", "--count", "--seed", "--temperature", "--out"][..]),
        ("eval", &["--ckpt", "--data", "--metrics", "--out", "--oracle"][..]),
    ] {
        let out = ok(t.path(), &[cmd, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}
