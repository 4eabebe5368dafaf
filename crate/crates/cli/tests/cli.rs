use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cuside-array"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TRAIN_SMOKE: &[&str] = &[
    "train",
    "--synth",
    "4",
    "--val-synth",
    "2",
    "--steps",
    "3",
    "--batch-size",
    "2",
    "--eval-every",
    "2",
    "--warmup",
    "1",
    "--seed",
    "5",
];

fn train_smoke(out: &Path) -> Output {
    let mut args = TRAIN_SMOKE.to_vec();
    args.extend(["--out", p(out)]);
    run(&args)
}

#[test]
fn help_and_usage_errors() {
    for sub in ["simulate", "train", "eval", "enhance", "stream", "bench", "verify"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub} --help");
        assert!(stdout(&o).contains("Usage"));
    }
    assert_eq!(code(&run(&["simulate", "--no-such-flag"])), 1);
    assert_eq!(code(&run(&["simulate"])), 1, "missing --out");
    assert_eq!(code(&run(&["eval", "--model", "/nonexistent/model.ckpt"])), 3);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, "n = 1\nseed = 9\n").unwrap();
    let out = dir.path().join("d");
    let o = run(&["simulate", "--config", p(&cfg), "--n", "2", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("\"n\":2") && err.contains("\"seed\":9"), "{err}");

    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(code(&run(&["simulate", "--config", p(&cfg), "--out", p(&out)])), 1);
}

#[test]
fn simulate_is_byte_identical_and_audits_snr() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["simulate", "--out", p(d), "--n", "3", "--seed", "4", "--audit-snr"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("SNR audit passed"));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3 * 3 + 1);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn train_is_deterministic_and_downstream_commands_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = train_smoke(d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.jsonl", "val.jsonl"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(a.join("metrics.jsonl")).unwrap().lines().count(), 3);
    let model = a.join("final.ckpt");
    assert!(model.exists());

    let csv = dir.path().join("r.csv");
    let hyps = dir.path().join("h.jsonl");
    let o = run(&[
        "eval", "--model", p(&model), "--synth", "2", "--csv", p(&csv), "--hyp-out", p(&hyps),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    for row in ["non-streaming", "none", "real", "simulated"] {
        assert!(table.contains(row), "{table}");
    }
    assert!(table.contains("400 ms") && table.contains("800 ms"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);
    assert_eq!(std::fs::read_to_string(&hyps).unwrap().lines().count(), 8);

    let data = dir.path().join("data");
    assert_eq!(code(&run(&["simulate", "--out", p(&data), "--n", "1"])), 0);
    let mix = data.join("utt00000_mix.wav");
    let events = dir.path().join("ev.jsonl");
    let o = run(&["stream", "--model", p(&model), "--input", p(&mix), "--mode", "real", "--events", p(&events)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("algorithmic 800 ms"));
    for line in std::fs::read_to_string(&events).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["alg_latency_ms"].as_f64(), Some(800.0));
    }
    let o = run(&["stream", "--model", p(&model), "--input", p(&mix), "--mode", "simulated"]);
    assert!(stdout(&o).contains("algorithmic 400 ms") && stdout(&o).contains("simulator"));

    let enh = dir.path().join("enh.wav");
    let o = run(&[
        "enhance",
        "--input",
        p(&mix),
        "--speech",
        p(&data.join("utt00000_speech.wav")),
        "--noise",
        p(&data.join("utt00000_noise.wav")),
        "--output",
        p(&enh),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(enh.exists() && stdout(&o).contains("SI-SDR"));
    let o = run(&["enhance", "--input", p(&mix), "--output", p(&enh), "--model", p(&model), "--mode", "real"]);
    assert_eq!(code(&o), 0);
    assert_eq!(code(&run(&["enhance", "--input", p(&mix), "--output", p(&enh)])), 1);

    let o = run(&["bench", "--model", p(&model), "--seconds", "1", "--repeats", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mvdr") && stdout(&o).contains("stream_simulated_chunk"));
}

#[test]
fn train_resume_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let (whole, split) = (dir.path().join("w"), dir.path().join("s"));
    assert_eq!(code(&train_smoke(&whole)), 0);
    let mut first = TRAIN_SMOKE.to_vec();
    let i = first.iter().position(|a| *a == "--steps").unwrap();
    first[i + 1] = "2";
    first.extend(["--out", p(&split)]);
    assert_eq!(code(&run(&first)), 0);
    let mut rest = TRAIN_SMOKE.to_vec();
    rest.extend(["--out", p(&split), "--resume"]);
    let o = run(&rest);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(whole.join("metrics.jsonl")).unwrap(),
        std::fs::read(split.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn verify_passes_and_detects_an_injected_fault() {
    let o = run(&["verify", "--filter", "chunk"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("1/1 checks passed"));
    let o = run(&["verify", "--filter", "ctc", "--inject-fault", "ctc"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&run(&["verify", "--filter", "no-such-check"])), 1);
}
