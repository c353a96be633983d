use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sahc");

const SPEC: &str = "synth.C=4\nsynth.D_in=8\nsynth.train=4\nsynth.val=2\nsynth.test=2\n\
synth.mean_duration=30\nsynth.std_duration=5\nsynth.boundary_width=4\nsynth.noise=0.4\n";

const CONFIG: &str = "model.D_in=8\nmodel.C=4\nmodel.D=16\nmodel.L_frame=3\nmodel.L_seg=2\n\
model.M=2\nmodel.k=3\nmodel.N_head=2\nmodel.T_max=1000\nmodel.dropout=0.1\n\
train.epochs=3\ntrain.lr=0.002\n";

fn sahc(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("run sahc")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

/// Synthetic data plus a three-epoch training run.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = root.join("spec.txt");
    fs::write(&spec, SPEC).unwrap();
    let config = root.join("config.txt");
    fs::write(&config, CONFIG).unwrap();
    let data = root.join("data");
    let run = root.join("run");
    ok(&sahc(&["synth", "--spec", p(&spec), "--out", p(&data), "--seed", "3"]));
    ok(&sahc(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run)]));
    Fixture {
        _dir: dir,
        root,
        data,
        run,
    }
}

#[test]
fn synth_writes_every_video_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, "synth.train=30\nsynth.val=10\nsynth.test=10\nsynth.D_in=4\nsynth.mean_duration=20\nsynth.std_duration=3\nsynth.boundary_width=2\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let summary = ok(&sahc(&["synth", "--spec", p(&spec), "--out", p(&a), "--seed", "9"]));
    assert!(summary.contains("videos=50"), "{summary}");
    ok(&sahc(&["synth", "--spec", p(&spec), "--out", p(&b), "--seed", "9"]));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.to_string_lossy().ends_with(".sfb")).count(), 50);
    assert!(a.join("manifest.txt").exists());
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn synth_rejects_a_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = sahc(&["synth", "--out", p(&dir.path().join("d")), "--set", "synth.C=1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn training_eval_and_predict_agree() {
    let f = fixture();
    let run = &f.run;
    let marker = fs::read_to_string(run.join("best")).unwrap();
    assert!(run.join(marker.trim()).exists());
    assert!(run.join("best.ckpt").exists());
    let log = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,lr,L_frame,L_segment,L_smooth,total,val_accuracy"));

    let report = f.root.join("report");
    let best = run.join("best.ckpt");
    let table = ok(&sahc(&["eval", "--checkpoint", p(&best), "--data", p(&f.data), "--split", "test", "--report", p(&report)]));
    let kv = fs::read_to_string(report.join("metrics.kv")).unwrap();
    for metric in ["accuracy", "precision", "recall", "jaccard"] {
        assert!(table.contains(metric), "{table}");
        let line = kv.lines().find(|l| l.starts_with(&format!("{metric}.mean="))).unwrap();
        let v: f64 = line.split('=').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{line}");
    }

    // streamed predictions match the offline evaluation frame for frame
    let video = fs::read_to_string(f.data.join("manifest.txt"))
        .unwrap()
        .lines()
        .skip_while(|l| *l != "[test]")
        .nth(1)
        .unwrap()
        .to_string();
    let ribbon = f.root.join("ribbon");
    let input = f.data.join(format!("{video}.sfb"));
    let streamed = ok(&sahc(&["predict", "--checkpoint", p(&best), "--input", p(&input), "--ribbon", p(&ribbon)]));
    let offline = fs::read_to_string(report.join("predictions").join(format!("{video}.csv"))).unwrap();
    assert_eq!(streamed, offline);
    let frames = sahc::data::read_sfb(&input).unwrap().len();
    assert_eq!(streamed.lines().count(), frames);
    for (t, line) in streamed.lines().enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        assert_eq!(parts[0], t.to_string());
        let conf: f32 = parts[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&conf));
    }
    assert!(ribbon.join(format!("{video}.svg")).exists());
    assert!(ribbon.join(format!("{video}.csv")).exists());

    let online = ok(&sahc(&[
        "eval", "--checkpoint", p(&best), "--data", p(&f.data), "--split", "val", "--report", p(&f.root.join("online")), "--online", "--checks", "5",
    ]));
    assert!(online.contains("causality certificate: PASS"), "{online}");

    let bad = sahc(&["eval", "--checkpoint", p(&best), "--data", p(&f.data), "--split", "dev", "--report", p(&report)]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn resume_continues_epoch_numbering() {
    let f = fixture();
    let out = sahc(&[
        "train", "--data", p(&f.data), "--out", p(&f.run), "--resume", p(&f.run.join("epoch_0003.ckpt")), "--set", "train.epochs=5",
    ]);
    ok(&out);
    assert!(f.run.join("epoch_0005.ckpt").exists());
    let log = fs::read_to_string(f.run.join("epochs.csv")).unwrap();
    let epochs: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3", "4", "5"]);
}

#[test]
fn failures_map_to_exit_codes() {
    let f = fixture();
    let cfg = f.root.join("bad.txt");
    fs::write(&cfg, "model.D_in=8\nmodel.C=4\nmodel.depthh=2\n").unwrap();
    let out = sahc(&["train", "--config", p(&cfg), "--data", p(&f.data), "--out", p(&f.root.join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.depthh"));

    // width mismatch between data and configuration
    let out = sahc(&["train", "--data", p(&f.data), "--out", p(&f.root.join("y")), "--set", "model.D_in=9", "--set", "model.C=4"]);
    assert_eq!(code(&out), 3);

    // a truncated feature file
    let victim = fs::read_dir(&f.data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "sfb"))
        .unwrap();
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
    let out = sahc(&["predict", "--checkpoint", p(&f.run.join("best.ckpt")), "--input", p(&victim), "--ribbon", p(&f.root.join("r"))]);
    assert_eq!(code(&out), 3);
    let out = sahc(&["eval", "--checkpoint", p(&f.run.join("best.ckpt")), "--data", p(&f.data), "--report", p(&f.root.join("z"))]);
    assert_eq!(code(&out), 3);

    // a model of another width
    let other = f.root.join("other");
    ok(&sahc(&["synth", "--out", p(&other), "--set", "synth.D_in=5", "--set", "synth.C=4", "--set", "synth.train=1", "--set", "synth.val=0", "--set", "synth.test=1"]));
    let out = sahc(&["eval", "--checkpoint", p(&f.run.join("best.ckpt")), "--data", p(&other), "--report", p(&f.root.join("w"))]);
    assert_eq!(code(&out), 3);

    let out = Command::new(BIN).args(["eval"]).output().unwrap();
    assert_eq!(code(&out), 2);
}
