use serde::{Deserialize, Serialize};

use crate::data::{encode, Dataset, SplitMix64};
use crate::distill::{seg_loss, LossBreakdown};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

use super::metrics::IouCounts;
use super::model::{argmax_mask, BoundHead, HeadMode, Model};
use super::objective::head_objective;
use super::optim::{Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub eval_interval: usize,
    pub head_mode: HeadMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            iterations: 2000,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_interval: 100,
            head_mode: HeadMode::Ssa,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a positive number, got {}", self.lr)));
        }
        if self.eval_interval < 1 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("iterations", self.iterations.to_string()),
            ("lr", self.lr.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("head_mode", self.head_mode.to_string()),
        ]
    }

    pub fn from_entries<'a>(lookup: impl Fn(&str) -> Option<&'a str>) -> Result<Self> {
        fn field<'a, V: std::str::FromStr>(lookup: &impl Fn(&str) -> Option<&'a str>, key: &str) -> Result<V> {
            let raw = lookup(key).ok_or_else(|| Error::Config(format!("missing config entry {key}")))?;
            raw.parse().map_err(|_| Error::Config(format!("cannot parse {key}={raw}")))
        }
        let cfg = Self {
            batch_size: field(&lookup, "batch_size")?,
            iterations: field(&lookup, "iterations")?,
            lr: field(&lookup, "lr")?,
            optimizer: field(&lookup, "optimizer")?,
            seed: field(&lookup, "seed")?,
            eval_interval: field(&lookup, "eval_interval")?,
            head_mode: field(&lookup, "head_mode")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `(train, eval)` sample indices. Tiny datasets may land entirely on one
/// side of the held-out rule; the other side is then reused.
pub fn train_eval_split<T: Scalar>(dataset: &Dataset<T>) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut eval) = dataset.split();
    if train.is_empty() {
        train = eval.clone();
    }
    if eval.is_empty() {
        eval = train.clone();
    }
    (train, eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iteration: usize,
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub loss_breakdown: LossBreakdown,
}

impl EvalReport {
    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::format(e.column() as u64, e.to_string()))
    }
}

/// Mean IoU and single-image loss breakdown over `indices`, using the
/// student path for prediction.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset<T>, indices: &[usize], iteration: usize) -> Result<EvalReport> {
    let k = model.config.num_classes;
    let ignore = model.config.ignore_index;
    let mut counts = IouCounts::new(k);
    let mut parts = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &dataset.samples[i];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let img = tape.constant(s.image.clone());
        let sf = encode(&mut tape, img, &bound.encoder)?;
        let (logits, breakdown) = match bound.head {
            BoundHead::Ssa { student, teacher: None } => {
                // Deployed checkpoint: only the supervised terms are available.
                let out = crate::head::ssa_forward(&mut tape, sf, &student, &model.config)?;
                let l = seg_loss(&mut tape, out.fused, &s.labels, ignore)?;
                let v = tape.value(l).item().as_f64();
                (out.fused, LossBreakdown { l_c: v, total: v, ..LossBreakdown::default() })
            }
            head => {
                let batch = head_objective(&mut tape, &head, &[(sf, &s.labels)], &model.config)?;
                (batch.logits[0], batch.breakdown)
            }
        };
        let pred = argmax_mask(tape.value(logits))?;
        counts.add(&pred, &s.labels, ignore);
        parts.push(breakdown);
    }
    let (per_class, miou) = counts.finish();
    Ok(EvalReport {
        iteration,
        per_class_iou: per_class.into_data(),
        miou,
        loss_breakdown: LossBreakdown::mean(&parts),
    })
}

/// Step-wise trainer; the model always holds the last successfully updated parameters.
pub struct Trainer<'a, T> {
    dataset: &'a Dataset<T>,
    config: TrainConfig,
    model: Model<T>,
    optimizer: Optimizer<T>,
    rng: SplitMix64,
    train_idx: Vec<usize>,
    eval_idx: Vec<usize>,
    iteration: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(dataset: &'a Dataset<T>, config: &TrainConfig, head: &HeadConfig) -> Result<Self> {
        config.validate()?;
        head.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        if dataset.config.classes != head.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the head is configured for {}",
                dataset.config.classes, head.num_classes
            )));
        }
        for s in &dataset.samples {
            s.labels.validate(head.num_classes, head.ignore_index)?;
        }
        let (train_idx, eval_idx) = train_eval_split(dataset);
        let model = Model::init(head, config.head_mode, dataset.config.height, dataset.config.width, config.seed)?;
        Ok(Self {
            dataset,
            config: config.clone(),
            model,
            optimizer: Optimizer::new(config.optimizer, config.lr),
            rng: SplitMix64::derive(config.seed, 200),
            train_idx,
            eval_idx,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn eval_indices(&self) -> &[usize] {
        &self.eval_idx
    }

    /// One optimisation step on a freshly sampled batch; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let next = self.iteration + 1;
        let batch: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.train_idx[self.rng.below(self.train_idx.len())])
            .collect();
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let mut items: Vec<(Var, &LabelMask)> = Vec::with_capacity(batch.len());
        for &i in &batch {
            let s = &self.dataset.samples[i];
            let img = tape.constant(s.image.clone());
            items.push((encode(&mut tape, img, &bound.encoder)?, &s.labels));
        }
        let loss = head_objective(&mut tape, &bound.head, &items, &self.model.config)?;
        let value = tape.value(loss.total).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: next,
                message: format!("training loss is {value}"),
            });
        }
        let mut grads = tape.backward(loss.total)?;
        let grads: Vec<_> = bound
            .vars()
            .into_iter()
            .map(|v| grads.take(v).expect("parameter leaf has a gradient"))
            .collect();
        self.optimizer.step(&mut self.model, &grads).map_err(|e| match e {
            Error::NonFinite(m) => Error::Diverged { iteration: next, message: format!("non-finite {m}") },
            e => e,
        })?;
        self.iteration = next;
        Ok(value)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.model, self.dataset, &self.eval_idx, self.iteration)
    }

    /// Whether a report is due after the current iteration.
    pub fn report_due(&self) -> bool {
        self.iteration.is_multiple_of(self.config.eval_interval) || self.iteration == self.config.iterations
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub model: Model<T>,
    pub reports: Vec<EvalReport>,
    /// Batch loss of every step.
    pub losses: Vec<f64>,
}

/// Full training run. Each report is passed to `sink` as soon as it exists,
/// so a diverging run still leaves every earlier report behind.
pub fn train<T: Scalar>(
    dataset: &Dataset<T>,
    config: &TrainConfig,
    head: &HeadConfig,
    sink: &mut dyn FnMut(&EvalReport) -> Result<()>,
) -> Result<TrainRun<T>> {
    let mut trainer = Trainer::new(dataset, config, head)?;
    let mut reports = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations);
    while trainer.iteration() < config.iterations {
        losses.push(trainer.step()?);
        if trainer.report_due() {
            let r = trainer.evaluate()?;
            log::info!("iteration {} miou {:.4} loss {:.4}", r.iteration, r.miou, r.loss_breakdown.total);
            sink(&r)?;
            reports.push(r);
        }
    }
    Ok(TrainRun {
        model: trainer.into_model(),
        reports,
        losses,
    })
}
