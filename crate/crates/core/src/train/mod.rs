//! Optimizer, split protocol and the semi-supervised training loop.

mod adam;
mod split;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use split::{hide_labels, make_splits, outer_split, LabelBudget, SplitSpec};

use std::fmt::Write as _;

use crate::autodiff::{Graph, NormMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, ModelSpec, BN_RATE, DEFAULT_LEAKY_SLOPE};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vat::{combined_loss, vat_regularizer, VatConfig};

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub labels: LabelBudget,
    pub repeats: usize,
    pub seed: u64,
    pub use_vat: bool,
    pub vat: VatConfig,
    pub model_kind: ModelKind,
    pub leaky_slope: f64,
    /// Test hook: when false every repeat reuses `seed` instead of `seed + i`.
    pub seed_per_repeat: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 100,
            labels: LabelBudget::Ratio(0.4),
            repeats: 3,
            seed: 0,
            use_vat: true,
            vat: VatConfig::default(),
            model_kind: ModelKind::SmallCnn,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            seed_per_repeat: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky slope must be finite".into()));
        }
        self.labels.validate()?;
        self.vat.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }

    /// Builds the model spec for samples shaped like `data`.
    pub fn model_spec(&self, data: &Dataset) -> Result<ModelSpec> {
        let dims = data.samples.dims();
        let expected_rank = if self.model_kind.is_cnn() { 4 } else { 2 };
        if dims.len() != expected_rank {
            return Err(Error::Shape(format!(
                "model kind {} needs rank-{expected_rank} samples, dataset has dims {dims:?}",
                self.model_kind
            )));
        }
        let classes = data.class_count().max(2);
        let mut spec = ModelSpec::new(self.model_kind, dims[1], classes);
        spec.leaky_slope = self.leaky_slope;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce_loss: f64,
    pub vat_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub split: SplitSpec,
    pub metrics: Vec<EpochMetrics>,
    pub model: Model,
}

impl RunResult {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.test_accuracy)
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolSummary {
    pub runs: Vec<RunResult>,
    pub mean: f64,
    pub std: f64,
}

/// Endless shuffled stream over the unlabeled indices; reshuffles on wrap.
struct UnlabeledStream<'a> {
    indices: &'a [usize],
    order: Vec<usize>,
    pos: usize,
}

impl<'a> UnlabeledStream<'a> {
    fn new(indices: &'a [usize]) -> Self {
        UnlabeledStream {
            indices,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(n);
        while batch.len() < n {
            if self.pos == self.order.len() {
                self.order = self.indices.to_vec();
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Trains one model on `split`, drawing everything stochastic from `rng`.
/// Only labels at `split.labeled` reach the loss.
pub fn train_run(cfg: &TrainConfig, data: &Dataset, split: &SplitSpec, rng: &mut Rng) -> Result<(Vec<EpochMetrics>, Model)> {
    train_run_with(cfg, data, split, rng, |_, _| {})
}

/// [`train_run`] calling `on_epoch` after every epoch's evaluation.
pub fn train_run_with(
    cfg: &TrainConfig,
    data: &Dataset,
    split: &SplitSpec,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model),
) -> Result<(Vec<EpochMetrics>, Model)> {
    cfg.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::Data("no labeled samples to train on".into()));
    }
    if split.test.is_empty() {
        return Err(Error::Data("no test samples to evaluate on".into()));
    }
    let mut use_vat = cfg.use_vat;
    if use_vat && split.unlabeled.is_empty() && !cfg.vat.include_labeled {
        log::warn!("unlabeled set is empty, falling back to supervised training");
        use_vat = false;
    }

    let mut model = Model::new(cfg.model_spec(data)?, rng);
    let adam = cfg.adam();
    let mut state = AdamState::default();
    let (labeled_x, labeled_y) = data.gather(&split.labeled)?;
    let (test_x, test_y) = data.gather(&split.test)?;
    let mut order = split.labeled.clone();
    let mut stream = UnlabeledStream::new(&split.unlabeled);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut ce_total = 0.0;
        let mut vat_total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(chunk)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let pass = model.forward(&mut g, &bound, xv, NormMode::Train { update_stats: true })?;
            let ce = g.cross_entropy(pass.logits, &y)?;
            ce_total += g.value(ce).data()[0];
            let loss = if use_vat {
                let mut batch = if split.unlabeled.is_empty() {
                    Vec::new()
                } else {
                    stream.next_batch(cfg.batch_size, rng)
                };
                if cfg.vat.include_labeled {
                    batch.extend_from_slice(chunk);
                }
                let (xu, _) = data.gather(&batch)?;
                let reg = vat_regularizer(&mut g, &model, &bound, &xu, &cfg.vat, rng)?;
                vat_total += g.value(reg.loss).data()[0];
                combined_loss(&mut g, ce, reg.loss, cfg.vat.alpha)?
            } else {
                ce
            };
            g.backward(loss)?;
            let grads = bound.grads(&g);
            drop(g);
            model.params.absorb_stats(&pass.stat_updates, BN_RATE);
            adam_step(&mut model.params, &grads, &mut state, &adam)?;
            steps += 1;
        }
        let record = EpochMetrics {
            epoch,
            ce_loss: ce_total / steps as f64,
            vat_loss: vat_total / steps as f64,
            train_accuracy: evaluate(&model, &labeled_x, &labeled_y)?,
            test_accuracy: evaluate(&model, &test_x, &test_y)?,
        };
        log::debug!(
            "epoch {epoch}: ce {:.4} vat {:.4} train {:.4} test {:.4}",
            record.ce_loss,
            record.vat_loss,
            record.train_accuracy,
            record.test_accuracy
        );
        on_epoch(&record, &model);
        metrics.push(record);
    }
    Ok((metrics, model))
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose eval-mode argmax matches the label.
pub fn evaluate(model: &Model, samples: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = samples.batch();
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} samples but {} labels", labels.len())));
    }
    let item = samples.item_len();
    let mut item_dims = samples.dims().to_vec();
    let mut correct = 0usize;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        item_dims[0] = end - start;
        let chunk = Tensor::new(&item_dims, samples.data()[start * item..end * item].to_vec())?;
        let logits = model.logits(&chunk, NormMode::Eval)?;
        let classes = logits.item_len();
        for (row, &label) in logits.data().chunks(classes).zip(&labels[start..end]) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Runs `cfg.repeats` independent runs over one fixed outer split.
pub fn run_protocol(cfg: &TrainConfig, data: &Dataset) -> Result<ProtocolSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no samples in dataset".into()));
    }
    let (train, test) = outer_split(&data.labels, &mut Rng::new(cfg.seed))?;
    let mut runs = Vec::with_capacity(cfg.repeats);
    for i in 0..cfg.repeats {
        let seed = if cfg.seed_per_repeat {
            cfg.seed.wrapping_add(i as u64)
        } else {
            cfg.seed
        };
        let mut rng = Rng::new(seed);
        let (labeled, unlabeled) = hide_labels(&data.labels, &train, cfg.labels, &mut rng)?;
        let split = SplitSpec {
            train: train.clone(),
            test: test.clone(),
            labeled,
            unlabeled,
        };
        log::info!(
            "repeat {}/{}: seed {seed}, {} labeled, {} unlabeled, {} test",
            i + 1,
            cfg.repeats,
            split.labeled.len(),
            split.unlabeled.len(),
            split.test.len()
        );
        let (metrics, model) = train_run(cfg, data, &split, &mut rng)?;
        let run = RunResult {
            seed,
            split,
            metrics,
            model,
        };
        log::info!("repeat {} final test accuracy {:.4}", i + 1, run.final_accuracy());
        runs.push(run);
    }
    let finals: Vec<f64> = runs.iter().map(RunResult::final_accuracy).collect();
    let (mean, std) = mean_and_std(&finals);
    Ok(ProtocolSummary { runs, mean, std })
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Formats like C's `%g`: 6 significant digits, trailing zeros dropped.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent in scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const METRICS_HEADER: &str = "epoch,ce_loss,vat_loss,train_acc,test_acc";

pub fn format_metrics(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            m.epoch,
            format_g6(m.ce_loss),
            format_g6(m.vat_loss),
            format_g6(m.train_accuracy),
            format_g6(m.test_accuracy)
        );
    }
    out
}

pub fn format_summary(summary: &ProtocolSummary) -> String {
    format!(
        "final_acc_mean={}\nfinal_acc_std={}\n",
        format_g6(summary.mean),
        format_g6(summary.std)
    )
}
