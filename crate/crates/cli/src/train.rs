use groupnet::structnet::{lower_to_inference, ForwardOptions, ModelGraph, PackedModel, Precision, Task};
use groupnet::tape::{Bound, OptimizerState, Tape};
use groupnet::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, RunConfig, SyntheticConfig};
use crate::data::{augment, load_splits, Dataset, Splits};
use crate::error::{CliError, Result};
use crate::metrics::{pixel_argmax, top_k, Confusion, MetricsLog};
use crate::modelfile::{ModelFile, ModelHeader};

/// Scalar used for training; evaluation of packed models runs in `f64`.
pub type Train = f32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub top1: f64,
    pub top5: f64,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

impl EvalMetrics {
    pub fn record(&self, log: &mut MetricsLog, epoch: usize, split: &str, task: Task) {
        match task {
            Task::Classification => {
                log.record(epoch, split, "top1", self.top1);
                log.record(epoch, split, "top5", self.top5);
            }
            Task::Segmentation => {
                log.record(epoch, split, "miou", self.miou);
                log.record(epoch, split, "pixel_accuracy", self.pixel_accuracy);
            }
        }
    }

    pub fn headline(&self, task: Task) -> f64 {
        match task {
            Task::Classification => self.top1,
            Task::Segmentation => self.miou,
        }
    }
}

/// Accumulates metrics over batches of logits.
struct Scorer {
    classes: usize,
    confusion: Confusion,
    top1: f64,
    top5: f64,
    seen: usize,
}

impl Scorer {
    fn new(classes: usize) -> Self {
        Self {
            classes,
            confusion: Confusion::new(classes),
            top1: 0.0,
            top5: 0.0,
            seen: 0,
        }
    }

    fn add(&mut self, logits: &Tensor<f64>, labels: &[usize], pixel: bool) {
        if pixel {
            self.confusion.add(&pixel_argmax(logits), labels);
        } else {
            let n = labels.len() as f64;
            self.top1 += top_k(logits, labels, 1) * n;
            self.top5 += top_k(logits, labels, 5.min(self.classes)) * n;
            self.seen += labels.len();
            let pred: Vec<usize> = logits
                .data()
                .chunks(self.classes)
                .map(|r| (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
                .collect();
            self.confusion.add(&pred, labels);
        }
    }

    fn finish(&self) -> EvalMetrics {
        let n = self.seen.max(1) as f64;
        EvalMetrics {
            top1: self.top1 / n,
            top5: self.top5 / n,
            miou: self.confusion.mean_iou(),
            pixel_accuracy: self.confusion.pixel_accuracy(),
        }
    }
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size).map(move |s| (s..(s + size).min(n)).collect())
}

pub fn evaluate_graph(model: &mut ModelGraph<Train>, data: &Dataset, opts: &ForwardOptions, batch: usize) -> Result<EvalMetrics> {
    let mut scorer = Scorer::new(model.config.num_classes);
    for idx in batches(data.len(), batch) {
        let part = data.subset(&idx);
        let logits = model.predict(&part.images.cast(), opts)?.cast::<f64>();
        scorer.add(&logits, &part.labels, data.pixel_labels);
    }
    Ok(scorer.finish())
}

pub fn evaluate_packed(model: &PackedModel, data: &Dataset) -> Result<EvalMetrics> {
    let mut scorer = Scorer::new(model.arch.num_classes);
    for idx in batches(data.len(), 64) {
        let part = data.subset(&idx);
        let logits = model.forward(&part.images)?;
        scorer.add(&logits, &part.labels, data.pixel_labels);
    }
    Ok(scorer.finish())
}

/// Training state saved for `export`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub input_shape: [usize; 3],
    pub mean: Tensor<f64>,
    pub graph: ModelGraph<Train>,
}

impl Checkpoint {
    pub fn to_model_file(&self) -> Result<ModelFile> {
        let mut graph = self.graph.clone();
        graph.freeze_bn();
        let mut model = lower_to_inference(&graph)?;
        model.input_mean = Some(self.mean.clone());
        Ok(ModelFile {
            header: header(&self.config, self.input_shape),
            model,
        })
    }
}

pub fn header(cfg: &RunConfig, input_shape: [usize; 3]) -> ModelHeader {
    ModelHeader {
        arch: cfg.arch.clone(),
        input_shape,
        dataset: cfg.data.kind,
        synthetic: (cfg.data.kind == DatasetKind::SyntheticShapes).then_some((cfg.data.synthetic, cfg.seed)),
        has_input_mean: true,
    }
}

pub struct RunOutcome {
    pub log: MetricsLog,
    pub checkpoint: Checkpoint,
    pub file: ModelFile,
    pub test: EvalMetrics,
}

struct Stage<'a> {
    name: &'static str,
    epochs: usize,
    precision: Precision,
    first_epoch: usize,
    splits: &'a Splits,
}

/// Re-estimates BN statistics on the first samples of `data`.
fn recalibrate(cfg: &RunConfig, model: &mut ModelGraph<Train>, data: &Dataset, precision: Precision) -> Result<()> {
    let n = cfg.optimizer.bn_recalibration.min(data.len());
    if n == 0 {
        return Ok(());
    }
    let parts = batches(n, cfg.optimizer.batch_size).map(|idx| data.images.gather(&idx).cast::<Train>());
    Ok(model.recalibrate_bn(parts, precision)?)
}

fn run_stage(
    cfg: &RunConfig,
    model: &mut ModelGraph<Train>,
    stage: Stage<'_>,
    rng: &mut ChaCha8Rng,
    log: &mut MetricsLog,
    progress: &mut dyn FnMut(&str),
) -> Result<()> {
    let o = &cfg.optimizer;
    let mut opt = OptimizerState::<Train>::new(o.kind(), o.schedule(), o.weight_decay)?;
    let train = &stage.splits.train;
    let pixel = train.pixel_labels;
    let per = train.labels_per_sample();
    let opts = ForwardOptions::train().with_precision(stage.precision);
    let eval = ForwardOptions::eval().with_precision(stage.precision);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for e in 0..stage.epochs {
        let epoch = stage.first_epoch + e;
        opt.set_epoch(e);
        order.shuffle(rng);
        let start = log.lines().len();
        let mut scorer = Scorer::new(cfg.arch.num_classes);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (step, idx) in order.chunks(o.batch_size).enumerate() {
            let mut images = train.images.gather(idx);
            augment(&mut images, cfg.data.augment, rng);
            let labels: Vec<usize> = idx.iter().flat_map(|&i| train.labels[i * per..(i + 1) * per].iter().copied()).collect();
            let mut tape = Tape::new();
            let mut bound = Bound::new(&model.store);
            let x = tape.constant(images.cast::<Train>());
            let y = model.forward(&mut tape, &mut bound, x, &opts)?;
            let loss = if pixel {
                tape.softmax_ce_nchw(y, &labels)?
            } else {
                tape.softmax_cross_entropy(y, &labels)?
            };
            let l = tape.value(loss).data()[0] as f64;
            if !l.is_finite() {
                return Err(CliError::Numeric(format!(
                    "non-finite loss {l} in {} epoch {epoch} step {step}",
                    stage.name
                )));
            }
            loss_sum += l * idx.len() as f64;
            count += idx.len();
            scorer.add(&tape.value(y).cast(), &labels, pixel);
            let grads = bound.collect(&tape.backward(loss)?);
            opt.step(model.store.values_mut(), &grads).map_err(|e| {
                CliError::Numeric(format!("{} epoch {epoch} step {step}: {e}", stage.name))
            })?;
        }
        let split = |s: &str| if stage.name == "train" { s.to_string() } else { format!("{}-{s}", stage.name) };
        log.record(epoch, &split("train"), "loss", loss_sum / count.max(1) as f64);
        scorer.finish().record(log, epoch, &split("train"), cfg.arch.task);
        recalibrate(cfg, model, train, stage.precision)?;
        if !stage.splits.val.is_empty() {
            let m = evaluate_graph(model, &stage.splits.val, &eval, 128)?;
            m.record(log, epoch, &split("val"), cfg.arch.task);
        }
        for line in &log.lines()[start..] {
            progress(line);
        }
    }
    Ok(())
}

/// Full-precision pretraining (optional) then binary fine-tuning, followed
/// by lowering and a test-set evaluation of the packed model.
pub fn train_on(cfg: &RunConfig, splits: &Splits, progress: &mut dyn FnMut(&str)) -> Result<RunOutcome> {
    let s = splits.train.images.shape();
    let input_shape = [s[1], s[2], s[3]];
    let mut model = ModelGraph::<Train>::build(&cfg.arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed);
    let mut log = MetricsLog::default();
    let pre = cfg.optimizer.pretrain_epochs;
    if pre > 0 {
        let stage = Stage {
            name: "pretrain",
            epochs: pre,
            precision: Precision::Full,
            first_epoch: 1,
            splits,
        };
        run_stage(cfg, &mut model, stage, &mut rng, &mut log, progress)?;
    }
    let stage = Stage {
        name: "train",
        epochs: cfg.optimizer.epochs,
        precision: Precision::Quantized,
        first_epoch: 1,
        splits,
    };
    run_stage(cfg, &mut model, stage, &mut rng, &mut log, progress)?;
    model.freeze_bn();
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        input_shape,
        mean: splits.mean.clone(),
        graph: model,
    };
    let file = checkpoint.to_model_file()?;
    let test = evaluate_packed(&file.model, &splits.test)?;
    let start = log.lines().len();
    test.record(&mut log, cfg.optimizer.epochs, "test", cfg.arch.task);
    for line in &log.lines()[start..] {
        progress(line);
    }
    Ok(RunOutcome {
        log,
        checkpoint,
        file,
        test,
    })
}

pub fn train(cfg: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<RunOutcome> {
    let splits = load_splits(&cfg.data, cfg.seed)?;
    train_on(cfg, &splits, progress)
}

/// Test split for a saved model, with the model's mean removed.
pub fn eval_data(header: &ModelHeader, model: &PackedModel, dir: &std::path::Path) -> Result<Dataset> {
    let mut data = match header.dataset {
        DatasetKind::MnistIdx => crate::data::load_mnist(dir, false)?,
        DatasetKind::Cifar10Binary => crate::data::load_cifar(dir, false)?,
        DatasetKind::SyntheticShapes => {
            let (s, seed): (SyntheticConfig, u64) = header.synthetic.unwrap_or_default();
            let cfg = crate::config::DataConfig {
                kind: DatasetKind::SyntheticShapes,
                synthetic: s,
                ..Default::default()
            };
            crate::data::load_split(&cfg, false, seed)?
        }
    };
    let shape = &data.images.shape()[1..];
    if shape != header.input_shape {
        return Err(CliError::Data(format!(
            "data has sample shape {shape:?}, the model expects {:?}",
            header.input_shape
        )));
    }
    if let Some(mean) = &model.input_mean {
        data.subtract_mean(mean);
    }
    Ok(data)
}
