use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssa_core::data::{Dataset, SynthConfig};
use ssa_core::distill::{total_loss, LossBreakdown};
use ssa_core::harness::gradcheck::{grad_check, HeadFixture, Preset, DEFAULT_EPS, DEFAULT_TOL};
use ssa_core::harness::{evaluate, train_eval_split, HeadMode, Model, TrainConfig, Trainer};
use ssa_core::head::{HeadConfig, HeadOutput};
use ssa_core::tensor::io::tensor_from_bytes;
use ssa_core::{Bundle, Error, LabelMask, Tape, Tensor, BUNDLE_MAGIC};

const RUN_HEADER: &str = "ssa-run 1";
const CHECKPOINT: &str = "checkpoint.ssah";
const REPORTS: &str = "reports.jsonl";
const MANIFEST: &str = "manifest.txt";

#[derive(Parser)]
#[command(name = "ssa", version, about = "Adaptive prototype segmentation head: data, training and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint, report stream and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's held-out split.
    Eval(EvalArgs),
    /// Finite-difference gradient check of the head.
    Gradcheck(GradcheckArgs),
    /// Loss breakdown for given student/teacher outputs.
    Losses(LossesArgs),
    /// Write predicted masks as PGM files.
    ExportMasks(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    shapes: usize,
    #[arg(long, default_value_t = SynthConfig::default().color_jitter)]
    color_jitter: f64,
    /// Worker threads; output does not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// `key=value` file; flags override it, it overrides built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "head")]
    head_mode: Option<String>,
    /// Overridden by SSA_SEED when set.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    eval_interval: Option<String>,
    #[arg(long)]
    num_classes: Option<String>,
    #[arg(long)]
    feat_dim: Option<String>,
    #[arg(long)]
    lambda_r: Option<String>,
    #[arg(long)]
    lambda_s: Option<String>,
    #[arg(long)]
    lambda_p: Option<String>,
    #[arg(long)]
    boundary_edge_size: Option<String>,
    #[arg(long)]
    spatial_softmax_axis: Option<String>,
    #[arg(long)]
    pe_kind: Option<String>,
    #[arg(long)]
    center_normalize: Option<String>,
    #[arg(long)]
    teacher_mode: Option<String>,
    #[arg(long)]
    ignore_index: Option<String>,
}

impl TrainArgs {
    fn flag_entries(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("head_mode", &self.head_mode),
            ("seed", &self.seed),
            ("batch_size", &self.batch_size),
            ("iterations", &self.iterations),
            ("lr", &self.lr),
            ("optimizer", &self.optimizer),
            ("eval_interval", &self.eval_interval),
            ("num_classes", &self.num_classes),
            ("feat_dim", &self.feat_dim),
            ("lambda_r", &self.lambda_r),
            ("lambda_s", &self.lambda_s),
            ("lambda_p", &self.lambda_p),
            ("boundary_edge_size", &self.boundary_edge_size),
            ("spatial_softmax_axis", &self.spatial_softmax_axis),
            ("pe_kind", &self.pe_kind),
            ("center_normalize", &self.center_normalize),
            ("teacher_mode", &self.teacher_mode),
            ("ignore_index", &self.ignore_index),
        ]
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "small")]
    preset: String,
    #[arg(long, default_value = "ssa")]
    head: String,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args)]
struct LossesArgs {
    /// Student logits (tensor file) or a bundle with fused, s_proto and p_proto.
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    /// PGM label map.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda_r: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_s: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_p: f64,
    #[arg(long, default_value_t = 4)]
    boundary_edge_size: usize,
    #[arg(long, default_value_t = 255)]
    ignore_index: u32,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with its exit status: 1 usage, 2 numerical, 3 data format.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::NonFinite(_) | Error::Diverged { .. } => 2,
            Error::Format { .. } | Error::InvalidLabel { .. } | Error::Io(_) => 3,
            Error::Shape { .. } | Error::Contract(_) => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Losses(a) => cmd_losses(a),
        Command::ExportMasks(a) => cmd_export_masks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> CmdResult {
    let cfg = SynthConfig {
        height: a.height,
        width: a.width,
        classes: a.classes,
        shapes_per_image: a.shapes,
        noise_sigma: a.noise,
        color_jitter: a.color_jitter,
    };
    cfg.validate()?;
    let ds = Dataset::<f64>::generate(&cfg, a.seed, a.count, a.threads.max(1))?;
    ds.save(&a.out)
        .map_err(|e| Failure { code: 1, message: format!("cannot write {}: {e}", a.out.display()) })?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

/// Parses a `key=value` config file. `#` starts a comment line.
fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        // a run manifest doubles as a config file
        if line.is_empty() || line.starts_with('#') || (n == 0 && line == RUN_HEADER) {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(usage(format!("{}:{}: expected key=value", path.display(), n + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Effective `key=value` configuration: defaults, then the config file, then
/// flags, then SSA_SEED. `num_classes` stays unset unless given, so it can
/// follow the dataset.
fn resolve_entries(a: &TrainArgs) -> Result<(BTreeMap<String, String>, Option<PathBuf>), Failure> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (k, v) in HeadConfig::default().to_entries().into_iter().chain(TrainConfig::default().to_entries()) {
        map.insert(k.to_string(), v);
    }
    map.remove("num_classes");
    let mut data = None;
    if let Some(path) = &a.config {
        for (k, v) in read_config_file(path)? {
            match k.as_str() {
                "data" => data = Some(PathBuf::from(v)),
                "run" | "version" => {}
                _ if k.starts_with("artifact.") => {}
                "num_classes" => {
                    map.insert(k, v);
                }
                _ if map.contains_key(&k) => {
                    map.insert(k, v);
                }
                _ => return Err(usage(format!("unknown config key {k:?} in {}", path.display()))),
            }
        }
    }
    for (k, v) in a.flag_entries() {
        if let Some(v) = v {
            map.insert(k.to_string(), v.clone());
        }
    }
    if let Ok(seed) = std::env::var("SSA_SEED") {
        map.insert("seed".into(), seed);
    }
    if a.data.is_some() {
        data = a.data.clone();
    }
    Ok((map, data))
}

fn manifest_text(head: &HeadConfig, train: &TrainConfig, data: &Path) -> String {
    let mut s = format!("{RUN_HEADER}\nversion={}\n", env!("CARGO_PKG_VERSION"));
    s += &format!("data={}\n", data.display());
    for (k, v) in head.to_entries().into_iter().chain(train.to_entries()) {
        s += &format!("{k}={v}\n");
    }
    s += &format!("artifact.checkpoint={CHECKPOINT}\nartifact.reports={REPORTS}\n");
    s
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let (mut map, data) = resolve_entries(&a)?;
    let data = data.ok_or_else(|| usage("--data is required (flag or config file)"))?;
    let dataset = Dataset::<f64>::load(&data)?;
    map.entry("num_classes".into()).or_insert_with(|| dataset.config.classes.to_string());
    let head = HeadConfig::from_entries(|k| map.get(k).map(String::as_str))?;
    let train = TrainConfig::from_entries(|k| map.get(k).map(String::as_str))?;

    fs::create_dir_all(&a.out)
        .map_err(|e| usage(format!("cannot create {}: {e}", a.out.display())))?;
    fs::write(a.out.join(MANIFEST), manifest_text(&head, &train, &data))?;
    let mut reports = fs::File::create(a.out.join(REPORTS))?;

    let mut trainer = Trainer::new(&dataset, &train, &head)?;
    let mut failure = None;
    while trainer.iteration() < train.iterations {
        if let Err(e) = trainer.step() {
            failure = Some(e);
            break;
        }
        if trainer.report_due() {
            let r = trainer.evaluate()?;
            log::info!("iteration {} miou {:.4}", r.iteration, r.miou);
            writeln!(reports, "{}", r.to_json_line())?;
        }
    }
    reports.flush()?;
    // Partial runs still leave the last good parameters behind.
    trainer.model().to_bundle(trainer.iteration())?.save(a.out.join(CHECKPOINT))?;
    match failure {
        Some(e) => Err(e.into()),
        None => {
            println!("trained {} iterations; artifacts in {}", trainer.iteration(), a.out.display());
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<(Model<f64>, usize), Failure> {
    let bundle = Bundle::<f64>::load(path)?;
    Ok(Model::from_bundle(&bundle)?)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (model, iteration) = load_model(&a.checkpoint)?;
    let dataset = Dataset::<f64>::load(&a.data)?;
    check_geometry(&model, &dataset)?;
    let (_, eval_idx) = train_eval_split(&dataset);
    let report = evaluate(&model, &dataset, &eval_idx, iteration)?;
    println!("{}", report.to_json_line());
    Ok(())
}

fn check_geometry(model: &Model<f64>, ds: &Dataset<f64>) -> CmdResult {
    if (model.height, model.width) != (ds.config.height, ds.config.width) {
        return Err(usage(format!(
            "checkpoint is for {}x{} images, dataset has {}x{}",
            model.height, model.width, ds.config.height, ds.config.width
        )));
    }
    for s in &ds.samples {
        s.labels.validate(model.config.num_classes, model.config.ignore_index)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let preset: Preset = a.preset.parse()?;
    let mode: HeadMode = a.head.parse()?;
    let fixture = HeadFixture::preset(preset, mode)?;
    let report = grad_check(&fixture, a.eps, a.tol)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let worst = report.worst().map(|t| t.name.clone()).unwrap_or_default();
        Err(Failure {
            code: 2,
            message: format!("relative error {:.3e} in {worst} exceeds {:e}", report.max_rel_error(), a.tol),
        })
    }
}

/// Logits plus optional prototypes read from a tensor file or a bundle.
struct BranchFile {
    fused: Tensor<f64>,
    s_proto: Option<Tensor<f64>>,
    p_proto: Option<Tensor<f64>>,
}

fn read_branch(path: &Path) -> Result<BranchFile, Failure> {
    let bytes = fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(BUNDLE_MAGIC.as_bytes()) {
        let b = Bundle::<f64>::from_bytes(&bytes)?;
        Ok(BranchFile {
            fused: b.require("fused")?.clone(),
            s_proto: b.get("s_proto").cloned(),
            p_proto: b.get("p_proto").cloned(),
        })
    } else {
        Ok(BranchFile {
            fused: tensor_from_bytes(&bytes)?,
            s_proto: None,
            p_proto: None,
        })
    }
}

fn cmd_losses(a: LossesArgs) -> CmdResult {
    let student = read_branch(&a.student)?;
    let teacher = read_branch(&a.teacher)?;
    let labels = LabelMask::load_pgm(&a.labels)?;
    let k = match *student.fused.shape() {
        [h, w, k] if h == labels.height() && w == labels.width() => k,
        ref s => {
            return Err(Failure {
                code: 3,
                message: format!(
                    "student logits {s:?} do not match {}x{} labels",
                    labels.height(),
                    labels.width()
                ),
            })
        }
    };
    if teacher.fused.shape() != student.fused.shape() {
        return Err(Failure {
            code: 3,
            message: format!("teacher logits {:?} vs student {:?}", teacher.fused.shape(), student.fused.shape()),
        });
    }
    labels.validate(k, a.ignore_index)?;
    let cfg = HeadConfig {
        num_classes: k,
        lambda_r: a.lambda_r,
        lambda_s: a.lambda_s,
        lambda_p: a.lambda_p,
        boundary_edge_size: a.boundary_edge_size,
        ignore_index: a.ignore_index,
        ..HeadConfig::default()
    };
    cfg.validate()?;
    // Missing prototypes on either side contribute zero prototype distillation.
    let protos_of = |x: &BranchFile| match (&x.s_proto, &x.p_proto) {
        (Some(s), Some(p)) => Some((s.clone(), p.clone())),
        _ => None,
    };
    let (sp, tp) = (protos_of(&student), protos_of(&teacher));
    let zero = Tensor::zeros(&[k, 1]);
    let ((ss, sp_), (ts, tp_)) = match (sp, tp) {
        (Some(s), Some(t)) => (s, t),
        _ => ((zero.clone(), zero.clone()), (zero.clone(), zero)),
    };
    let mut tape = Tape::new();
    let mk = |tape: &mut Tape<f64>, fused: &Tensor<f64>, s: Tensor<f64>, p: Tensor<f64>| {
        let fused = tape.constant(fused.clone());
        let s_proto = tape.constant(s);
        let p_proto = tape.constant(p);
        HeadOutput {
            coarse: fused,
            fused,
            s_center: s_proto,
            p_center: p_proto,
            s_proto,
            p_proto,
            p_feat: fused,
        }
    };
    let so = mk(&mut tape, &student.fused, ss, sp_);
    let to = mk(&mut tape, &teacher.fused, ts, tp_);
    let terms = total_loss(&mut tape, &so, &to, &labels, &cfg)?;
    let b: LossBreakdown = terms.breakdown;
    if !b.is_finite() {
        return Err(Failure { code: 2, message: format!("non-finite loss\n{}", b.to_record()) });
    }
    print!("{}", b.to_record());
    Ok(())
}

fn cmd_export_masks(a: ExportArgs) -> CmdResult {
    let (model, _) = load_model(&a.checkpoint)?;
    let dataset = Dataset::<f64>::load(&a.data)?;
    check_geometry(&model, &dataset)?;
    fs::create_dir_all(&a.out).map_err(|e| usage(format!("cannot create {}: {e}", a.out.display())))?;
    for (i, s) in dataset.samples.iter().enumerate() {
        let mask = model.predict(&s.image)?;
        mask.save_pgm(a.out.join(format!("mask_{i:05}.pgm")))?;
    }
    println!("wrote {} masks to {}", dataset.len(), a.out.display());
    Ok(())
}
