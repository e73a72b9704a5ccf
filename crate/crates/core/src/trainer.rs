//! Model assembly, the optimization loop, evaluation and robustness sweeps.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndtensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;

use crate::attack;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corruption::{self, CorruptionSpec, CATALOG, SEVERITIES};
use crate::decoder::{self, DecodeOutput, DecoderConfig, Mode, NoiseSource, ReplayNoise, RngNoise};
use crate::encoder::{build_encoder, Encoder, FeaturePyramid, PyramidVars};
use crate::error::{DarnError, Result};
use crate::metrics::{self, ConfusionMatrix, Mask, MceReport, MetricRecord};
use crate::objectives::{self, LossBreakdown, LossWeights};
use crate::optim::AdamW;
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::schedule::Schedule;
use crate::synth::{self, SampleBatch, Tag};

const EVAL_BATCH: usize = 32;
const ENCODE_CHUNK: usize = 64;
/// Minimum validation gain that resets the patience counter.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

/// Encoder plus decoder, with all parameters in one ordered set.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub decoder: DecoderConfig,
    pub params: ParamSet,
}

/// What the decoder reads: cached features or images pushed through the encoder.
#[derive(Clone, Copy)]
pub enum Input<'a> {
    Pyramid(&'a FeaturePyramid),
    Images(Var),
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Model> {
        cfg.validate()?;
        let encoder = build_encoder(cfg.seed, cfg.in_channels, cfg.encoder_widths)?;
        let decoder = cfg.decoder_config();
        let mut params = encoder.params.clone();
        params.set_trainable("encoder.", !cfg.frozen);
        params.extend(decoder::build_decoder_params(&decoder, cfg.seed)?);
        Ok(Model {
            encoder,
            decoder,
            params,
        })
    }

    /// Replaces every parameter value; names and shapes must match the model.
    pub fn load_params(&mut self, params: ParamSet) -> Result<()> {
        let matches = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !matches {
            return Err(DarnError::Format("checkpoint parameters do not match the model".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn encoder_checksum(&self) -> u64 {
        self.params.filter_prefix("encoder.").checksum()
    }

    pub fn decoder_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for e in self.params.iter().filter(|e| !e.name.starts_with("encoder.")) {
            p.push(e.name.clone(), e.value.clone(), e.trainable);
        }
        p
    }

    /// Binds the parameters on `tape`, skipping the encoder when the decoder
    /// reads cached features.
    pub fn bind(&self, tape: &mut Tape, all_constant: bool, cached_features: bool) -> Bound {
        self.params
            .bind_where(tape, all_constant, |e| !(cached_features && e.name.starts_with("encoder.")))
    }

    /// Feature pyramid of concrete images under the current encoder weights.
    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let enc = self.params.filter_prefix("encoder.");
        let b = images.shape().first().copied().unwrap_or(0);
        let mut parts = Vec::new();
        for start in (0..b).step_by(ENCODE_CHUNK) {
            let idx: Vec<usize> = (start..(start + ENCODE_CHUNK).min(b)).collect();
            let mut tape = Tape::new();
            let bound = enc.bind(&mut tape, true);
            let x = tape.constant(images.select(&idx));
            let pyr = self.encoder.forward(&mut tape, &bound, x)?;
            parts.push(pyr.values(&tape));
        }
        FeaturePyramid::concat(&parts)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: Input<'_>,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<DecodeOutput> {
        let pyr: PyramidVars = match input {
            Input::Pyramid(p) => p.bind(tape),
            Input::Images(x) => self.encoder.forward(tape, bound, x)?,
        };
        decoder::decode(tape, &pyr, bound, &self.decoder, mode, noise)
    }
}

/// Training and validation samples with cached features when the encoder is frozen.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: SampleBatch,
    pub val: SampleBatch,
    pub train_pyramid: Option<FeaturePyramid>,
    pub val_pyramid: Option<FeaturePyramid>,
}

pub fn dataset_seed(seed: u64) -> u64 {
    rng::mix(seed, rng::label_hash("dataset"))
}

/// Generates the train/validation split; validation samples follow the
/// training samples in the same seeded stream.
pub fn build_data(cfg: &RunConfig, model: &Model) -> Result<Data> {
    let synth_cfg = cfg.synth_config();
    let (n_train, n_val) = cfg.split_sizes();
    let seed = dataset_seed(cfg.seed);
    let train = synth::generate(&synth_cfg, seed, 0, n_train)?;
    let val = synth::generate(&synth_cfg, seed, n_train as u64, n_val)?;
    let (train_pyramid, val_pyramid) = if cfg.frozen {
        (Some(model.encode(&train.images)?), Some(model.encode(&val.images)?))
    } else {
        (None, None)
    };
    Ok(Data {
        train,
        val,
        train_pyramid,
        val_pyramid,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub epoch: u64,
    pub split: Split,
    pub loss: LossBreakdown,
    pub miou: f64,
    pub mean_c: f64,
    pub std_c: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub seed: u64,
}

/// Fixed 9-significant-digit rendering used by every CSV.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.8e}")
}

impl RunRecord {
    pub const CSV_HEADER: &'static str =
        "run_id,epoch,split,loss_total,loss_ce,loss_dice,loss_complexity,miou,mean_c,std_c,lr,grad_norm,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.epoch,
            self.split.name(),
            fmt_num(self.loss.total),
            fmt_num(self.loss.ce),
            fmt_num(self.loss.dice),
            fmt_num(self.loss.complexity),
            fmt_num(self.miou),
            fmt_num(self.mean_c),
            fmt_num(self.std_c),
            fmt_num(self.lr),
            fmt_num(self.grad_norm),
            self.seed
        )
    }
}

/// Mean and population standard deviation; NaN for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug)]
struct LossAccumulator {
    sum: [f64; 4],
    count: usize,
    weights: LossWeights,
}

impl LossAccumulator {
    fn new(weights: LossWeights) -> Self {
        LossAccumulator {
            sum: [0.0; 4],
            count: 0,
            weights,
        }
    }

    fn add(&mut self, b: &LossBreakdown, n: usize) {
        for (s, v) in self.sum.iter_mut().zip([b.total, b.ce, b.dice, b.complexity]) {
            *s += v * n as f64;
        }
        self.count += n;
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.count.max(1) as f64;
        LossBreakdown {
            total: self.sum[0] / n,
            ce: self.sum[1] / n,
            dice: self.sum[2] / n,
            complexity: self.sum[3] / n,
            beta: self.weights.beta,
            lambda_dice: self.weights.lambda_dice,
        }
    }
}

/// Validation-style evaluation result.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: MetricRecord,
    pub loss: LossBreakdown,
    /// Per-sample complexity, empty without a complexity head.
    pub c: Vec<f64>,
}

impl Evaluation {
    pub fn miou(&self) -> f64 {
        self.metrics.miou
    }

    /// Mean complexity over samples carrying `tag`.
    pub fn mean_c_for(&self, tags: &[Tag], tag: Tag) -> f64 {
        let v: Vec<f64> = self
            .c
            .iter()
            .zip(tags)
            .filter(|(_, t)| **t == tag)
            .map(|(c, _)| *c)
            .collect();
        mean_std(&v).0
    }
}

/// Deterministic eval-mode pass over `batch`. Uses `pyramid` when given,
/// otherwise encodes the images with the model's current encoder.
pub fn evaluate(
    model: &Model,
    batch: &SampleBatch,
    pyramid: Option<&FeaturePyramid>,
    weights: &LossWeights,
) -> Result<Evaluation> {
    let owned;
    let pyramid = match pyramid {
        Some(p) => p,
        None => {
            owned = model.encode(&batch.images)?;
            &owned
        }
    };
    let mut cm = ConfusionMatrix::new(model.decoder.num_classes);
    let mut acc = LossAccumulator::new(*weights);
    let mut cs = Vec::new();
    let mut noise = ReplayNoise::default();
    for start in (0..batch.len()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(batch.len())).collect();
        let pyr = pyramid.select(&idx);
        let target = batch.labels.select(&idx);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true, true);
        let out = model.forward(&mut tape, &bound, Input::Pyramid(&pyr), Mode::Eval, &mut noise)?;
        let lv = objectives::total_loss(&mut tape, out.logits, &target, out.complexity, weights)?;
        acc.add(&lv.breakdown(&tape, weights), idx.len());
        cm.add(&metrics::argmax(tape.value(out.logits))?, &target)?;
        if let Some(c) = out.complexity {
            cs.extend_from_slice(tape.value(c).data());
        }
    }
    Ok(Evaluation {
        metrics: cm.record(),
        loss: acc.mean(),
        c: cs,
    })
}

/// Outcome of one training epoch.
#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub train: RunRecord,
    pub val: RunRecord,
    pub val_eval: Evaluation,
    pub stop: bool,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub data: Arc<Data>,
    pub optimizer: AdamW,
    pub schedule: Schedule,
    /// Completed epochs.
    pub epoch: u64,
    pub global_step: u64,
    pub best_miou: f64,
    pub epochs_since_best: u64,
    pub best_params: ParamSet,
    pub records: Vec<RunRecord>,
    /// Epoch-averaged global gradient L2 norm.
    pub grad_norms: Vec<f64>,
    pub run_id: String,
    pub out_dir: Option<PathBuf>,
    stopped: bool,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Trainer> {
        let model = Model::new(&cfg)?;
        let data = Arc::new(build_data(&cfg, &model)?);
        Self::with_data(cfg, data)
    }

    /// Fresh trainer on prebuilt data; the data must come from a config with
    /// the same seed, dataset settings and encoder.
    pub fn with_data(cfg: RunConfig, data: Arc<Data>) -> Result<Trainer> {
        let model = Model::new(&cfg)?;
        if cfg.frozen != data.train_pyramid.is_some() {
            return Err(DarnError::config("data caching does not match the frozen flag"));
        }
        let batches = data.train.len().div_ceil(cfg.batch_size) as u64;
        let schedule = Schedule {
            base_lr: cfg.lr,
            min_lr: cfg.min_lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: batches * cfg.epochs as u64,
        };
        if cfg.epochs > 0 {
            schedule.validate()?;
        }
        let optimizer = AdamW::new(cfg.adamw(), &model.params);
        Ok(Trainer {
            best_params: model.params.clone(),
            cfg,
            model,
            data,
            optimizer,
            schedule,
            epoch: 0,
            global_step: 0,
            best_miou: f64::NEG_INFINITY,
            epochs_since_best: 0,
            records: Vec::new(),
            grad_norms: Vec::new(),
            run_id: "run".into(),
            out_dir: None,
            stopped: false,
        })
    }

    /// Restores the optimization state captured by `ckpt`.
    pub fn resume(cfg: RunConfig, data: Arc<Data>, ckpt: Checkpoint) -> Result<Trainer> {
        let mut t = Self::with_data(cfg, data)?;
        if ckpt.seed != t.cfg.seed {
            return Err(DarnError::config(format!(
                "checkpoint seed {} differs from config seed {}",
                ckpt.seed, t.cfg.seed
            )));
        }
        t.model.load_params(ckpt.params)?;
        t.best_params = t.model.params.clone();
        t.optimizer = ckpt.optimizer;
        t.schedule = ckpt.schedule;
        t.epoch = ckpt.epoch;
        t.global_step = ckpt.global_step;
        t.best_miou = ckpt.best_miou;
        t.epochs_since_best = ckpt.epochs_since_best;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.snapshot(&self.model.params)
    }

    fn snapshot(&self, params: &ParamSet) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            best_miou: self.best_miou,
            epochs_since_best: self.epochs_since_best,
            seed: self.cfg.seed,
            global_step: self.global_step,
            schedule: self.schedule,
            optimizer: self.optimizer.clone(),
            params: params.clone(),
        }
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    /// Creates `out_dir`, writes the CSV header and initial checkpoints.
    pub fn attach_output(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), format!("{}\n", RunRecord::CSV_HEADER))?;
        self.out_dir = Some(dir.to_path_buf());
        self.checkpoint().save(&dir.join("last.ckpt"))?;
        self.snapshot(&self.best_params).save(&dir.join("best.ckpt"))?;
        Ok(())
    }

    fn train_input<'a>(&self, tape: &mut Tape, idx: &[usize], pyr: &'a mut Option<FeaturePyramid>) -> Input<'a> {
        match &self.data.train_pyramid {
            Some(p) => {
                *pyr = Some(p.select(idx));
                Input::Pyramid(pyr.as_ref().expect("just set"))
            }
            None => Input::Images(tape.constant(self.data.train.images.select(idx))),
        }
    }

    /// Runs one epoch of optimization followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let e = self.epoch;
        let seed = self.cfg.seed;
        let weights = self.cfg.loss_weights();
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng::indexed_stream(seed, "shuffle", e));
        let mut noise = RngNoise(rng::indexed_stream(seed, "dropout", e));

        let mut acc = LossAccumulator::new(weights);
        let mut cm = ConfusionMatrix::new(self.cfg.num_classes);
        let mut cs = Vec::new();
        let mut norms = Vec::new();
        let mut lr = 0.0;
        for idx in order.chunks(self.cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, false, self.data.train_pyramid.is_some());
            let mut pyr = None;
            let input = self.train_input(&mut tape, idx, &mut pyr);
            let out = self.model.forward(&mut tape, &bound, input, Mode::Train, &mut noise)?;
            let target = self.data.train.labels.select(idx);
            let lv = objectives::total_loss(&mut tape, out.logits, &target, out.complexity, &weights)?;
            let b = lv.breakdown(&tape, &weights);
            if !b.total.is_finite() {
                return Err(DarnError::NonFiniteLoss {
                    epoch: e as usize + 1,
                    step: self.global_step,
                });
            }
            acc.add(&b, idx.len());
            cm.add(&metrics::argmax(tape.value(out.logits))?, &target)?;
            if let Some(c) = out.complexity {
                cs.extend_from_slice(tape.value(c).data());
            }
            let grads = tape.backward(lv.total)?;
            let gvec: Vec<Option<Tensor>> = bound
                .vars()
                .iter()
                .zip(self.model.params.iter())
                .map(|(v, p)| match v {
                    Some(v) if p.trainable => grads.get(*v),
                    _ => None,
                })
                .collect();
            let sq: f64 = gvec.iter().flatten().flat_map(|g| g.data()).map(|g| g * g).sum();
            norms.push(sq.sqrt());
            lr = self.schedule.lr_at(self.global_step)?;
            self.optimizer.step(&mut self.model.params, &gvec, lr)?;
            self.global_step += 1;
        }
        let grad_norm = mean_std(&norms).0;
        self.grad_norms.push(grad_norm);

        let val_eval = evaluate(&self.model, &self.data.val, self.data.val_pyramid.as_ref(), &weights)?;
        self.epoch += 1;
        let (tm, ts) = mean_std(&cs);
        let (vm, vs) = mean_std(&val_eval.c);
        let record = |split, loss, miou, mean_c, std_c| RunRecord {
            run_id: self.run_id.clone(),
            epoch: self.epoch,
            split,
            loss,
            miou,
            mean_c,
            std_c,
            lr,
            grad_norm,
            seed,
        };
        let train = record(Split::Train, acc.mean(), cm.record().miou, tm, ts);
        let val = record(Split::Val, val_eval.loss, val_eval.miou(), vm, vs);

        if val_eval.miou() > self.best_miou + IMPROVEMENT_THRESHOLD {
            self.best_miou = val_eval.miou();
            self.epochs_since_best = 0;
            self.best_params = self.model.params.clone();
        } else {
            self.epochs_since_best += 1;
        }
        self.stopped = self.epochs_since_best >= self.cfg.patience as u64;

        if let Some(dir) = self.out_dir.clone() {
            let mut f = OpenOptions::new().append(true).open(dir.join("metrics.csv"))?;
            writeln!(f, "{}\n{}", train.csv_row(), val.csv_row())?;
            self.checkpoint().save(&dir.join("last.ckpt"))?;
            if self.epochs_since_best == 0 {
                self.snapshot(&self.best_params).save(&dir.join("best.ckpt"))?;
            }
        }
        self.records.push(train.clone());
        self.records.push(val.clone());
        Ok(EpochSummary {
            train,
            val,
            val_eval,
            stop: self.stopped,
        })
    }

    /// Trains until `epochs` are done or early stopping triggers.
    pub fn train(&mut self) -> Result<()> {
        while !self.stopped && self.epoch < self.cfg.epochs as u64 {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Model carrying the best validation parameters.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        m.params = self.best_params.clone();
        m
    }
}

/// Clean, corrupted and adversarial mIoU of a model on one split.
#[derive(Clone, Debug)]
pub struct RobustnessReport {
    pub clean: f64,
    /// `(spec, mIoU)` for every corruption and severity, in catalogue order.
    pub cells: Vec<(CorruptionSpec, f64)>,
    pub fgsm: f64,
    pub epsilon: f64,
    /// Largest `|x' − x|` produced by the attack over all batches.
    pub fgsm_linf: f64,
    pub mce: MceReport,
}

/// FGSM adversarial copies of `images` against the eval-mode total loss.
pub fn fgsm_images(model: &Model, images: &Tensor, labels: &Mask, weights: &LossWeights, epsilon: f64) -> Result<Tensor> {
    let b = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..b).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(b)).collect();
        let target = labels.select(&idx);
        let adv = attack::fgsm(&images.select(&idx), epsilon, |tape, x| {
            let bound = model.params.bind(tape, true);
            let mut noise = ReplayNoise::default();
            let out = model.forward(tape, &bound, Input::Images(x), Mode::Eval, &mut noise)?;
            Ok(objectives::total_loss(tape, out.logits, &target, out.complexity, weights)?.total)
        })?;
        parts.push(adv);
    }
    Ok(Tensor::stack(&parts)?)
}

pub fn robustness(
    model: &Model,
    batch: &SampleBatch,
    weights: &LossWeights,
    seed: u64,
    epsilon: f64,
) -> Result<RobustnessReport> {
    let clean = evaluate(model, batch, None, weights)?.miou();
    let mut cells = Vec::new();
    let mut grid = std::collections::BTreeMap::new();
    for def in CATALOG {
        for s in SEVERITIES {
            let spec = CorruptionSpec::new(def.name, s)?;
            let images = corruption::corrupt(&batch.images, &spec, rng::mix(seed, s as u64))?;
            let mut corrupted = batch.clone();
            corrupted.images = images;
            let m = evaluate(model, &corrupted, None, weights)?.miou();
            grid.insert((def.name.to_string(), s), m);
            cells.push((spec, m));
        }
    }
    let adv = fgsm_images(model, &batch.images, &batch.labels, weights, epsilon)?;
    let fgsm_linf = adv
        .data()
        .iter()
        .zip(batch.images.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut attacked = batch.clone();
    attacked.images = adv;
    let fgsm = evaluate(model, &attacked, None, weights)?.miou();
    let mce = metrics::mce(clean, &grid)?;
    Ok(RobustnessReport {
        clean,
        cells,
        fgsm,
        epsilon,
        fgsm_linf,
        mce,
    })
}
