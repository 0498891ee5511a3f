use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use structpe::pianoroll::{save_roll, Pianoroll};
use structpe::synth::{synth_corpus, zero_offsets, SynthConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_structpe"))
}

fn structpe(cmd: &str, config: &Path, overrides: &[(&str, &str)]) -> Output {
    let mut c = bin();
    c.arg(cmd).arg("--config").arg(config).env_remove("STRUCTPE_SEED");
    for (k, v) in overrides {
        c.arg(format!("--{k}")).arg(v);
    }
    c.output().expect("run structpe")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Synthetic songs as MIDI + label files + an offsets file.
    fn new(n_songs: usize) -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let songs = synth_corpus(n_songs, SynthConfig::default(), 21).unwrap();
        std::fs::create_dir_all(dir.path().join("midi")).unwrap();
        std::fs::create_dir_all(dir.path().join("labels")).unwrap();
        for s in &songs {
            std::fs::write(dir.path().join(format!("midi/{}.mid", s.id)), s.midi_bytes()).unwrap();
            std::fs::write(dir.path().join(format!("labels/{}.labels", s.id)), s.labels_text()).unwrap();
        }
        std::fs::write(dir.path().join("offsets.txt"), zero_offsets(&songs)).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, extra: serde_json::Value) -> PathBuf {
        let mut cfg = serde_json::json!({
            "seed": 5,
            "paths.midi_dir": self.path("midi"),
            "paths.labels_dir": self.path("labels"),
            "paths.offsets": self.path("offsets.txt"),
            "paths.corpus_dir": self.path("corpus"),
            "paths.out_dir": self.path("out"),
            "model.d_model": 16,
            "model.d_ff": 32,
            "model.n_tracks": 2,
            "model.target_track": 1,
            "model.pe.variant": "L-S-RPE",
            "train.setting": "A1",
            "train.curriculum": [{"length": 512, "epochs": 1}],
            "train.steps_per_epoch": 50,
            "train.batch_size": 1,
            "train.base_lr": 0.05,
            "train.warmup_steps": 20,
            "train.valid_fraction": 0.5,
        });
        for (k, v) in extra.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        let path = self.path("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path
    }
}

fn report_rows(text: &str) -> Vec<(String, String, f64)> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("song\t"))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].to_string(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn end_to_end_accompaniment() {
    let ws = Workspace::new(2);
    let cfg = ws.config(serde_json::json!({}));
    for cmd in ["ingest", "train", "generate", "evaluate"] {
        let out = structpe(cmd, &cfg, &[]);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
    }
    let manifest = std::fs::read_to_string(ws.path("corpus/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(manifest.contains("song00\t1024\t2\t"));
    let report = std::fs::read_to_string(ws.path("out/report.tsv")).unwrap();
    assert!(report.contains("NDD is the raw mean"));
    let means: Vec<f64> = report_rows(&report)
        .into_iter()
        .filter(|r| r.0 == "mean")
        .map(|r| r.2)
        .collect();
    assert_eq!(means.len(), 4);
    assert!(means.iter().all(|v| v.is_finite()));
    // A1 generates the target track over [0, 512)
    let generated = structpe::pianoroll::load_roll(ws.path("out/generated/song00.roll")).unwrap();
    assert_eq!((generated.n_tracks(), generated.n_time()), (1, 512));
    assert!(ws.path("out/velocity/song00.roll").exists());
    assert!(ws.path("out/train_log.ndjson").exists());

    // the echoed config reproduces the run
    let echoed = ws.path("out/config.json");
    let text = std::fs::read_to_string(&echoed).unwrap();
    let copy = ws.path("echo.json");
    std::fs::write(&copy, &text).unwrap();
    let rerun = structpe("evaluate", &copy, &[]);
    assert!(rerun.status.success(), "{}", stderr(&rerun));
    assert_eq!(std::fs::read_to_string(&echoed).unwrap(), text);
}

#[test]
fn ingest_flags_missing_offsets() {
    let ws = Workspace::new(2);
    std::fs::write(ws.path("offsets.txt"), "song00 0\n").unwrap();
    let out = structpe("ingest", &ws.config(serde_json::json!({})), &[]);
    assert_eq!(out.status.code(), Some(1));
    let manifest = std::fs::read_to_string(ws.path("corpus/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    let failures = std::fs::read_to_string(ws.path("out/ingest_failures.tsv")).unwrap();
    assert!(failures.contains("song01\tno offset"), "{failures}");
}

#[test]
fn ingest_rejects_empty_directory() {
    let ws = Workspace::new(0);
    let out = structpe("ingest", &ws.config(serde_json::json!({})), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("empty corpus"));
}

#[test]
fn evaluate_target_against_itself() {
    let ws = Workspace::new(2);
    let songs = synth_corpus(2, SynthConfig { repeats: 1 }, 3).unwrap();
    for sub in ["gen", "tgt"] {
        std::fs::create_dir_all(ws.path(sub)).unwrap();
        for s in &songs {
            save_roll(&s.roll, ws.path(&format!("{sub}/{}.roll", s.id))).unwrap();
        }
    }
    let cfg = ws.config(serde_json::json!({
        "paths.generated_dir": ws.path("gen"),
        "paths.target_dir": ws.path("tgt"),
    }));
    let out = structpe("evaluate", &cfg, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = std::fs::read_to_string(ws.path("out/report.tsv")).unwrap();
    let rows = report_rows(&report);
    assert_eq!(rows.len(), 12);
    for (_, metric, v) in rows {
        let want = if metric == "CS" || metric == "GS" { 100.0 } else { 0.0 };
        assert_eq!(v, want, "{metric}");
    }
    assert!(report.contains("song00\tSSMD\t0.00\n"));

    // a missing prediction is a per-song failure
    std::fs::remove_file(ws.path("gen/song01.roll")).unwrap();
    let out = structpe("evaluate", &cfg, &[]);
    assert_eq!(out.status.code(), Some(1));
    let report = std::fs::read_to_string(ws.path("out/report.tsv")).unwrap();
    assert!(report.contains("# failed song01"));
}

#[test]
fn plot_ssm_images() {
    let ws = Workspace::new(0);
    let mut a = Pianoroll::zeros(1, 96).unwrap();
    for t in 0..32 {
        a.set(0, 60, t, true).unwrap();
        a.set(0, 67, t + 64, true).unwrap();
    }
    save_roll(&a, ws.path("a.roll")).unwrap();
    save_roll(&Pianoroll::zeros(2, 64).unwrap(), ws.path("b.roll")).unwrap();
    let cfg = ws.config(serde_json::json!({ "plot.rolls": [ws.path("a.roll"), ws.path("b.roll")] }));
    let out = structpe("plot-ssm", &cfg, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let img = std::fs::read_to_string(ws.path("out/ssm/00_a.pgm")).unwrap();
    assert_eq!(img, "P2\n3 3\n255\n255 0 0\n0 255 0\n0 0 255\n");
    let montage = std::fs::read_to_string(ws.path("out/ssm/montage.pgm")).unwrap();
    assert!(montage.starts_with("P2\n7 3\n255\n"));
}

#[test]
fn overrides_env_seed_and_variant_mismatch() {
    let ws = Workspace::new(2);
    let cfg = ws.config(serde_json::json!({}));
    assert!(structpe("ingest", &cfg, &[]).status.success());
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--train.steps_per_epoch", "5"])
        .env("STRUCTPE_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("out/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 99);
    assert_eq!(echoed["train.steps_per_epoch"], 5);

    let out = structpe("generate", &cfg, &[("model.pe.variant", "NS-RPE-chord")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("PE variant mismatch"), "{}", stderr(&out));

    let out = structpe("train", &cfg, &[("model.bogus", "1")]);
    assert_eq!(out.status.code(), Some(2));
}
