use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
preset = "tiny"
data_dir = "data"
out = "out"
checkpoint_every = 5

[corpus]
train = 4
dev = 2
test = 2
duration_s = 0.3

[train]
steps = 10
batch_size = 2
validate_every = 5
"#;

fn cadunet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadunet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn paper_defaults_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&cadunet(dir.path(), &["--paper-defaults"]));
    assert!(text.contains("freq_bins = 512"));
    fs::write(dir.path().join("paper.toml"), &text).unwrap();
    let again = ok(&cadunet(dir.path(), &["--config", "paper.toml", "--paper-defaults"]));
    assert_eq!(text, again);
}

#[test]
fn synth_train_resume_evaluate_enhance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    let out = ok(&cadunet(d, &["synth-data", "--config", "run.toml"]));
    assert!(out.contains("train 4, dev 2, test 2"), "{out}");
    assert!(d.join("data/manifest.jsonl").exists());

    ok(&cadunet(d, &["train", "--config", "run.toml"]));
    let log = fs::read_to_string(d.join("out/train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,"));
    assert_eq!(log.lines().filter(|l| l.starts_with("step")).count(), 1);
    assert!(d.join("out/step00000005.ckpt").exists());
    let first = fs::read(d.join("out/step00000010.ckpt")).unwrap();

    ok(&cadunet(d, &["train", "--config", "run.toml", "--checkpoint", "out/step00000005.ckpt"]));
    assert_eq!(fs::read(d.join("out/step00000010.ckpt")).unwrap(), first, "resume diverged");

    let out = ok(&cadunet(d, &["evaluate", "--config", "run.toml", "--checkpoint", "out/last.ckpt", "--split", "dev"]));
    assert!(out.contains("output SI-SDR"), "{out}");
    let csv = fs::read_to_string(d.join("out/eval_dev.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let mix = fs::read_dir(d.join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("_mixture.wav"))
        .unwrap();
    let mix = mix.to_str().unwrap();
    let out = ok(&cadunet(d, &["enhance", "--config", "run.toml", "--checkpoint", "out/last.ckpt", "--input", mix]));
    assert!(out.contains("max |speech + noise - input|"), "{out}");
    let stem = Path::new(mix).file_stem().unwrap().to_str().unwrap();
    assert!(d.join(format!("out/{stem}_speech.wav")).exists());
    assert!(d.join(format!("out/{stem}_noise.wav")).exists());

    ok(&cadunet(d, &["inspect-attention", "--config", "run.toml", "--checkpoint", "out/last.ckpt", "--input", mix]));
    assert!(d.join("out/attention_seg0000.csv").exists());
    assert!(d.join("out/attention_summary.csv").exists());
}

#[test]
fn errors_name_the_field_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let out = cadunet(d, &["train", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));

    fs::write(d.join("typo.toml"), "[unet]\nlevelz = 3\n").unwrap();
    let out = cadunet(d, &["train", "--config", "typo.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("levelz"));

    let out = cadunet(d, &["evaluate", "--preset", "tiny"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));

    let out = cadunet(d, &["train", "--preset", "tiny", "--data", "missing"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn gradcheck_subcommand_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&cadunet(dir.path(), &["gradcheck", "--per-param", "1"]));
    assert!(out.contains("max relative error"), "{out}");
}
