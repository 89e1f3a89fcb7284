use ssa_core::data::{Dataset, SynthConfig};
use ssa_core::harness::{evaluate, train, train_eval_split, EvalReport, HeadMode, Model, TrainConfig};
use ssa_core::head::HeadConfig;
use ssa_core::Bundle;

fn small_data(count: usize, threads: usize) -> Dataset<f64> {
    let sc = SynthConfig { height: 16, width: 16, ..SynthConfig::default() };
    Dataset::generate(&sc, 40, count, threads).unwrap()
}

fn quick(mode: HeadMode, seed: u64, iterations: usize) -> TrainConfig {
    TrainConfig { iterations, eval_interval: 5, batch_size: 4, lr: 5e-3, seed, head_mode: mode, ..TrainConfig::default() }
}

fn run(ds: &Dataset<f64>, tc: &TrainConfig, hc: &HeadConfig) -> (Vec<String>, Vec<u8>) {
    let mut lines = Vec::new();
    let out = train(ds, tc, hc, &mut |r| {
        lines.push(r.to_json_line());
        Ok(())
    })
    .unwrap();
    (lines, out.model.to_bundle(tc.iterations).unwrap().to_bytes())
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = small_data(12, 3);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back: Dataset<f64> = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert!(back.inconsistent_samples().unwrap().is_empty());

    let empty = small_data(0, 1);
    let dir = tempfile::tempdir().unwrap();
    empty.save(dir.path()).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    assert!(Dataset::<f64>::load(dir.path()).unwrap().is_empty());
}

#[test]
fn same_seed_same_reports_and_weights() {
    let hc = HeadConfig::new(4, 6);
    for mode in [HeadMode::Ssa, HeadMode::Vanilla] {
        let a = run(&small_data(20, 1), &quick(mode, 3, 10), &hc);
        let b = run(&small_data(20, 4), &quick(mode, 3, 10), &hc);
        assert_eq!(a.0.len(), 2);
        assert_eq!(a, b, "{mode}");
        let c = run(&small_data(20, 1), &quick(mode, 4, 10), &hc);
        assert_ne!(a.0, c.0);
    }
}

#[test]
fn inference_ignores_the_teacher() {
    let ds = small_data(20, 2);
    let hc = HeadConfig::new(4, 6);
    let tc = quick(HeadMode::Ssa, 1, 15);
    let trained = train(&ds, &tc, &hc, &mut |_| Ok(())).unwrap();
    let model = trained.model;
    assert!(model.has_teacher());

    let mut stripped = model.clone();
    stripped.strip_teacher();
    let mut bundle = model.to_bundle(15).unwrap();
    let teacher_names: Vec<String> = bundle.names().filter(|n| n.starts_with("teacher.")).map(String::from).collect();
    assert!(!teacher_names.is_empty());
    for n in &teacher_names {
        bundle.remove(n);
    }
    let (reloaded, iteration) = Model::<f64>::from_bundle(&Bundle::from_bytes(&bundle.to_bytes()).unwrap()).unwrap();
    assert_eq!(iteration, 15);
    assert!(!reloaded.has_teacher());

    for s in &ds.samples {
        let p = model.predict(&s.image).unwrap();
        assert_eq!(p, stripped.predict(&s.image).unwrap());
        assert_eq!(p, reloaded.predict(&s.image).unwrap());
    }
    // evaluation on the teacher-less model reproduces the final report's metrics
    let (_, eval) = train_eval_split(&ds);
    let full = evaluate(&model, &ds, &eval, 15).unwrap();
    let bare = evaluate(&reloaded, &ds, &eval, 15).unwrap();
    assert_eq!(full.miou, bare.miou);
    assert_eq!(full.per_class_iou, bare.per_class_iou);
    assert_eq!(&full, trained.reports.last().unwrap());
}

#[test]
fn training_lowers_the_loss_over_three_seeds() {
    let ds = small_data(40, 2);
    let hc = HeadConfig::new(4, 8);
    let window = 10;
    for mode in [HeadMode::Ssa, HeadMode::Vanilla] {
        for seed in 1..=3 {
            let tc = TrainConfig { eval_interval: 1000, ..quick(mode, seed, 150) };
            let out = train(&ds, &tc, &hc, &mut |_| Ok(())).unwrap();
            let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
            let first = mean(&out.losses[..window]);
            let last = mean(&out.losses[out.losses.len() - window..]);
            assert!(last < first, "{mode} seed {seed}: {first} -> {last}");
            assert_eq!(out.reports.len(), 1);
        }
    }
}

#[test]
fn report_lines_parse_back() {
    let (lines, _) = run(&small_data(10, 1), &quick(HeadMode::Ssa, 0, 5), &HeadConfig::new(4, 4));
    let r = EvalReport::from_json_line(&lines[0]).unwrap();
    assert_eq!(r.iteration, 5);
    assert_eq!(r.to_json_line(), lines[0]);
    assert_eq!(r.per_class_iou.len(), 4);
}
