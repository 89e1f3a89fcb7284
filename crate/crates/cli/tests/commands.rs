use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssa_core::data::Dataset;
use ssa_core::harness::{EvalReport, Model};
use ssa_core::tensor::io::save_tensor;
use ssa_core::{Bundle, LabelMask, Tensor};

fn ssa(args: &[&str]) -> Output {
    ssa_env(args, None)
}

fn ssa_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssa"));
    cmd.args(args).env_remove("SSA_SEED");
    if let Some(s) = seed {
        cmd.env("SSA_SEED", s);
    }
    cmd.output().expect("run ssa")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset shared by the training tests.
fn tiny_data(root: &Path) -> PathBuf {
    let dir = root.join("data");
    let o = ssa(&["generate", "--out", p(&dir), "--count", "15", "--height", "16", "--width", "16", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--batch-size", "2", "--feat-dim", "4"];
    args.extend_from_slice(extra);
    ssa(&args)
}

fn report_lines(run: &Path) -> Vec<String> {
    fs::read_to_string(run.join("reports.jsonl")).unwrap().lines().map(String::from).collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn generate_zero_writes_only_a_manifest() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("empty");
    assert_eq!(code(&ssa(&["generate", "--out", p(&out), "--count", "0"])), 0);
    let files = dir_bytes(&out);
    assert_eq!(files.len(), 1);
    assert_eq!(files[0].0, "manifest.txt");
    assert!(String::from_utf8(files[0].1.clone()).unwrap().contains("count=0"));
}

#[test]
fn generate_is_deterministic_and_consistent() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert_eq!(code(&ssa(&["generate", "--out", p(&a)])), 0);
    assert_eq!(code(&ssa(&["generate", "--out", p(&b), "--threads", "4"])), 0);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let ds = Dataset::<f64>::load(&a).unwrap();
    assert_eq!(ds.len(), 100);
    assert!(ds.inconsistent_samples().unwrap().is_empty());
}

#[test]
fn generate_rejects_bad_inputs() {
    let t = tempfile::tempdir().unwrap();
    let o = ssa(&["generate", "--out", p(&t.path().join("x")), "--classes", "1"]);
    assert_eq!(code(&o), 1);
    let blocker = t.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = ssa(&["generate", "--out", p(&blocker.join("sub")), "--count", "1"]);
    assert_ne!(code(&o), 0);
    assert!(!stderr(&o).is_empty());
    assert_eq!(code(&ssa(&["generate", "--count", "2"])), 1);
    assert_eq!(code(&ssa(&["frobnicate"])), 1);
}

#[test]
fn vanilla_single_iteration_gives_one_report() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path());
    let run = t.path().join("run");
    let o = train(&data, &run, &["--head", "vanilla", "--iterations", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = report_lines(&run);
    assert_eq!(lines.len(), 1);
    let r = EvalReport::from_json_line(&lines[0]).unwrap();
    assert_eq!(r.iteration, 1);
    assert_eq!(r.loss_breakdown.l_g, 0.0);
    let names: Vec<String> = dir_bytes(&run).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["checkpoint.ssah", "manifest.txt", "reports.jsonl"]);
}

#[test]
fn zero_lambdas_drop_distillation_from_the_total() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path());
    let run = t.path().join("run");
    let o = train(
        &data,
        &run,
        &["--head", "ssa", "--iterations", "2", "--eval-interval", "1", "--lambda-r", "0", "--lambda-s", "0", "--lambda-p", "0"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for line in report_lines(&run) {
        let b = EvalReport::from_json_line(&line).unwrap().loss_breakdown;
        assert!(b.l_rd > 0.0 && b.l_pd > 0.0);
        assert!((b.total - (b.l_c + b.l_g)).abs() < 1e-12, "{b:?}");
    }
}

#[test]
fn eval_reproduces_the_final_report() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path());
    let run = t.path().join("run");
    assert_eq!(code(&train(&data, &run, &["--iterations", "6", "--eval-interval", "4"])), 0);
    let lines = report_lines(&run);
    assert_eq!(lines.len(), 2);
    let o = ssa(&["eval", "--checkpoint", p(&run.join("checkpoint.ssah")), "--data", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim_end(), lines[1]);
}

#[test]
fn eval_rejects_mismatched_inputs() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path());
    let run = t.path().join("run");
    assert_eq!(code(&train(&data, &run, &["--iterations", "1"])), 0);
    let other = t.path().join("other");
    assert_eq!(code(&ssa(&["generate", "--out", p(&other), "--count", "2"])), 0);
    let o = ssa(&["eval", "--checkpoint", p(&run.join("checkpoint.ssah")), "--data", p(&other)]);
    assert_eq!(code(&o), 1);

    let bad = t.path().join("bad.ssah");
    let mut bytes = fs::read(run.join("checkpoint.ssah")).unwrap();
    bytes.truncate(bytes.len() - 5);
    fs::write(&bad, bytes).unwrap();
    let o = ssa(&["eval", "--checkpoint", p(&bad), "--data", p(&data)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("byte offset"), "{}", stderr(&o));
}

#[test]
fn gradcheck_small_passes() {
    for head in ["ssa", "vanilla"] {
        let o = ssa(&["gradcheck", "--preset", "small", "--head", head]);
        assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
        assert!(stdout(&o).contains("PASS"));
    }
    // an impossible tolerance is a numerical failure
    assert_eq!(code(&ssa(&["gradcheck", "--tol", "0"])), 2);
    assert_eq!(code(&ssa(&["gradcheck", "--preset", "huge"])), 1);
}

#[test]
fn losses_prints_a_breakdown() {
    let t = tempfile::tempdir().unwrap();
    let labels = LabelMask::from_fn(6, 6, |_, x| if x < 3 { 0 } else { 2 });
    let lp = t.path().join("labels.pgm");
    labels.save_pgm(&lp).unwrap();
    let student = Tensor::<f64>::from_fn(&[6, 6, 3], |i| ((i * 7) % 5) as f64 * 0.3);
    let teacher = Tensor::<f64>::from_fn(&[6, 6, 3], |i| ((i * 3) % 4) as f64 * 0.5);
    let (sp, tp) = (t.path().join("s.ssat"), t.path().join("t.ssat"));
    save_tensor(&sp, &student).unwrap();
    save_tensor(&tp, &teacher).unwrap();
    let o = ssa(&["losses", "--student", p(&sp), "--teacher", p(&tp), "--labels", p(&lp)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for key in ["l_c", "l_g", "l_rd", "l_sd", "l_pd", "total"] {
        assert!(out.contains(key), "{out}");
    }

    // bundles carry prototypes
    let mut b = Bundle::<f64>::new();
    b.insert("fused", student.clone()).unwrap();
    b.insert("s_proto", Tensor::from_fn(&[3, 2], |i| i as f64)).unwrap();
    b.insert("p_proto", Tensor::from_fn(&[3, 2], |i| -(i as f64))).unwrap();
    let bp = t.path().join("s.ssah");
    b.save(&bp).unwrap();
    let o = ssa(&["losses", "--student", p(&bp), "--teacher", p(&bp), "--labels", p(&lp)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let bad = t.path().join("bad.ssat");
    let mut bytes = fs::read(&sp).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&bad, bytes).unwrap();
    let o = ssa(&["losses", "--student", p(&bad), "--teacher", p(&tp), "--labels", p(&lp)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("byte offset"), "{}", stderr(&o));

    let small = Tensor::<f64>::zeros(&[5, 6, 3]);
    save_tensor(&tp, &small).unwrap();
    let o = ssa(&["losses", "--student", p(&sp), "--teacher", p(&tp), "--labels", p(&lp)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn exported_masks_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path());
    let run = t.path().join("run");
    assert_eq!(code(&train(&data, &run, &["--iterations", "3"])), 0);
    let masks = t.path().join("masks");
    let ck = run.join("checkpoint.ssah");
    let o = ssa(&["export-masks", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&masks)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ds = Dataset::<f64>::load(&data).unwrap();
    let (model, _) = Model::<f64>::from_bundle(&Bundle::load(&ck).unwrap()).unwrap();
    assert_eq!(fs::read_dir(&masks).unwrap().count(), ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let m = LabelMask::load_pgm(masks.join(format!("mask_{i:05}.pgm"))).unwrap();
        assert_eq!(m, model.predict(&s.image).unwrap());
    }
}

#[test]
fn seed_env_overrides_the_flag() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path());
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    let args = |out: &PathBuf| {
        vec!["train", "--data", p(&data), "--out", p(out), "--iterations", "2", "--batch-size", "2", "--feat-dim", "4"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let run = |out: &PathBuf, seed_flag: &str, env: Option<&str>| {
        let mut v = args(out);
        v.extend(["--seed".to_string(), seed_flag.to_string()]);
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        assert_eq!(code(&ssa_env(&refs, env)), 0);
    };
    run(&a, "1", Some("9"));
    run(&b, "9", None);
    run(&c, "1", None);
    assert!(fs::read_to_string(a.join("manifest.txt")).unwrap().contains("\nseed=9\n"));
    assert_eq!(report_lines(&a), report_lines(&b));
    assert_ne!(report_lines(&a), report_lines(&c));
}

#[test]
fn flags_override_config_file_and_manifest_replays() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path());
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, format!("# toy run\ndata={}\niterations=5\neval_interval=1\nlr=0.01\n", p(&data))).unwrap();
    let run = t.path().join("run");
    let o = ssa(&["train", "--config", p(&cfg), "--out", p(&run), "--iterations", "3", "--batch-size", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    for entry in ["iterations=3", "eval_interval=1", "lr=0.01", "batch_size=2", "num_classes=4"] {
        assert!(manifest.lines().any(|l| l == entry), "{entry} missing from\n{manifest}");
    }
    assert_eq!(report_lines(&run).len(), 3);

    // the manifest is itself a config file that reproduces the run
    let replay = t.path().join("replay");
    let o = ssa(&["train", "--config", p(&run.join("manifest.txt")), "--out", p(&replay)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(run.join("reports.jsonl")).unwrap(), fs::read(replay.join("reports.jsonl")).unwrap());
    assert_eq!(fs::read(run.join("checkpoint.ssah")).unwrap(), fs::read(replay.join("checkpoint.ssah")).unwrap());

    fs::write(&cfg, "colour=blue\n").unwrap();
    let o = ssa(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&t.path().join("x"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn bad_training_values_are_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path());
    for extra in [
        &["--lr", "-1"][..],
        &["--head", "fancy"],
        &["--pe-kind", "wavelet"],
        &["--num-classes", "1"],
        &["--iterations", "0"],
    ] {
        let o = train(&data, &t.path().join("x"), extra);
        assert_eq!(code(&o), 1, "{extra:?}: {}", stderr(&o));
    }
    assert_eq!(code(&ssa(&["train", "--data", p(&t.path().join("missing")), "--out", p(&t.path().join("y"))])), 3);
}

#[test]
fn divergence_exits_two_and_keeps_artifacts() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path());
    let run = t.path().join("run");
    let o = train(&data, &run, &["--lr", "1e12", "--iterations", "50", "--eval-interval", "1", "--optimizer", "sgd_momentum"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(run.join("manifest.txt").exists());
    let ck = Bundle::<f64>::load(run.join("checkpoint.ssah")).unwrap();
    let it: usize = ck.meta("iteration").unwrap().parse().unwrap();
    assert!(it < 50);
    assert_eq!(report_lines(&run).len(), it);
}

#[test]
fn identical_runs_are_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path());
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for run in [&a, &b] {
        assert_eq!(code(&train(&data, run, &["--iterations", "4", "--eval-interval", "2", "--seed", "5"])), 0);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}
