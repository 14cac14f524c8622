//! Optimisation, evaluation and the ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::INPUT_MULTIPLE;
use crate::checkpoint::save_checkpoint;
use crate::data::{
    apply_augment, collate, downsample_labels, eval_resize, pad_to_multiple, sample_rng, AugmentConfig, AugmentDraw,
    Sample, IGNORE_INDEX,
};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::metrics::{aggregate, argmax_classes, ConfusionMatrix, MiouMode};
use crate::model::{Model, ModelConfig, Strategy};
use crate::nn::{Ctx, ParamGroup, ParamStore};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    pub backbone_lr_multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aux_weight: f64,
}

pub const OPTIM_KEYS: [&str; 8] = [
    "optim.base_lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.lr_power",
    "optim.backbone_lr_multiplier",
    "optim.epochs",
    "optim.batch_size",
    "optim.aux_weight",
];

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_power: 0.9,
            backbone_lr_multiplier: 0.1,
            epochs: 50,
            batch_size: 8,
            aux_weight: 0.4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("backbone_lr_multiplier", self.backbone_lr_multiplier),
            ("aux_weight", self.aux_weight),
        ];
        if let Some((name, v)) = non_negative.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config(format!("optim.{name} = {v} must be finite and non-negative")));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("optim.base_lr must be positive"));
        }
        if !(self.lr_power > 0.0 && self.lr_power <= 1.0) {
            return Err(Error::config("optim.lr_power must lie in (0, 1]"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("optim.epochs and optim.batch_size must be positive"));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read_into("optim.base_lr", &mut self.base_lr)?;
        kv.read_into("optim.momentum", &mut self.momentum)?;
        kv.read_into("optim.weight_decay", &mut self.weight_decay)?;
        kv.read_into("optim.lr_power", &mut self.lr_power)?;
        kv.read_into("optim.backbone_lr_multiplier", &mut self.backbone_lr_multiplier)?;
        kv.read_into("optim.epochs", &mut self.epochs)?;
        kv.read_into("optim.batch_size", &mut self.batch_size)?;
        kv.read_into("optim.aux_weight", &mut self.aux_weight)?;
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("optim.base_lr", self.base_lr);
        kv.set("optim.momentum", self.momentum);
        kv.set("optim.weight_decay", self.weight_decay);
        kv.set("optim.lr_power", self.lr_power);
        kv.set("optim.backbone_lr_multiplier", self.backbone_lr_multiplier);
        kv.set("optim.epochs", self.epochs);
        kv.set("optim.batch_size", self.batch_size);
        kv.set("optim.aux_weight", self.aux_weight);
        kv
    }
}

/// `base_lr · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, total: usize, base_lr: f64, power: f64) -> Result<f64> {
    if iter > total || total == 0 {
        return Err(Error::Contract(format!("iteration {iter} outside 0..={total}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / total as f64).powf(power))
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        SgdState {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }
}

/// One SGD step: `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`, with `η` scaled by
/// the backbone multiplier for backbone parameters. `grads[i]` belongs to
/// parameter `i`; `None` is a zero gradient. Nothing is modified when any
/// gradient is non-finite.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut SgdState<T>,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::shape("sgd step", &[params.len()], &[grads.len(), state.velocity.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("sgd gradient", p.value.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    let (mu, wd) = (T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let eta = T::lit(match p.group {
            ParamGroup::Backbone => lr * cfg.backbone_lr_multiplier,
            ParamGroup::Head => lr,
        });
        let grad = g.as_ref().map(|g| g.data());
        for (i, (theta, vel)) in p.value.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gi = grad.map_or(T::zero(), |g| g[i]);
            *vel = mu * *vel + gi + wd * *theta;
            *theta -= eta * *vel;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    /// `None` trains on the samples as they are.
    pub augment: Option<AugmentConfig>,
    /// Smaller-side extent evaluation images are resized to.
    pub eval_base: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn toy() -> Self {
        let augment = AugmentConfig::toy();
        TrainConfig {
            optim: OptimConfig::default(),
            eval_base: augment.base_size,
            augment: Some(augment),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
            if a.crop_size % INPUT_MULTIPLE != 0 {
                return Err(Error::config(format!("crop size {} must be divisible by {INPUT_MULTIPLE}", a.crop_size)));
            }
        }
        if self.eval_base == 0 {
            return Err(Error::config("evaluation base size must be positive"));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub main_loss: f64,
    pub aux_loss: f64,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    pub miou_class: f64,
    pub miou_sample: f64,
    pub pixel_accuracy: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,main_loss,aux_loss,lr,miou_class,miou_sample,pix_acc,seconds";

impl MetricsRecord {
    /// CSV row with mIoU and accuracy as percentages.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.8},{:.4},{:.4},{:.4},{:.3}",
            self.epoch,
            self.main_loss,
            self.aux_loss,
            self.lr,
            100.0 * self.miou_class,
            100.0 * self.miou_sample,
            100.0 * self.pixel_accuracy,
            self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub per_sample: Vec<ConfusionMatrix>,
    pub total: ConfusionMatrix,
    pub miou_class: f64,
    pub miou_sample: f64,
    pub pixel_accuracy: f64,
}

/// Class map for one sample at its evaluation extent: smaller side resized
/// to `base`, padded to a multiple of 8 for the network, logits upsampled
/// bilinearly to the padded extent and the padding cut away again.
pub fn predict<T: Real>(model: &Model<T>, sample: &Sample, base: usize) -> Result<(Tensor<i32>, Sample)> {
    let resized = eval_resize(sample, base);
    let padded = pad_to_multiple(&resized, INPUT_MULTIPLE);
    let (ph, pw) = (padded.height(), padded.width());
    let image = padded.image.cast::<T>().reshape(vec![1, 3, ph, pw])?;
    let logits = model.infer(&image)?.main;
    let tape = Tape::inference();
    let x = tape.constant(logits);
    let up = tape.resize_bilinear(x, ph, pw)?;
    let classes = argmax_classes(&tape.value(up))?;
    let (h, w) = (resized.height(), resized.width());
    let full = classes.data();
    let pred = Tensor::from_fn(vec![h, w], |k| full[(k / w) * pw + k % w]);
    Ok((pred, resized))
}

/// Deterministic evaluation; per-sample work runs in parallel and the
/// integer confusion counts are summed afterwards.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample], base: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let classes = model.config().num_classes;
    let per_sample = samples
        .par_iter()
        .map(|s| {
            s.check_labels(classes)?;
            let (pred, resized) = predict(model, s, base)?;
            let mut m = ConfusionMatrix::new(classes);
            m.add(pred.data(), resized.labels.data())?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = aggregate(&per_sample, classes);
    Ok(Evaluation {
        miou_class: crate::metrics::miou(&per_sample, MiouMode::ClassMean)?,
        miou_sample: crate::metrics::miou(&per_sample, MiouMode::SampleMean)?,
        pixel_accuracy: total.pixel_accuracy()?,
        per_sample,
        total,
    })
}

/// Eval-mode pixel accuracy on the 1/4 grid the main loss is computed on,
/// against nearest-downsampled labels. Sample extents must be multiples of 8.
pub fn grid_accuracy<T: Real>(model: &Model<T>, samples: &[Sample]) -> Result<f64> {
    let classes = model.config().num_classes;
    let mut total = ConfusionMatrix::new(classes);
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let image = s.image.cast::<T>().reshape(vec![1, 3, h, w])?;
        let pred = argmax_classes(&model.infer(&image)?.main)?;
        let labels = downsample_labels(&s.labels.clone().reshape(vec![1, h, w])?, 4)?;
        if pred.shape() != labels.shape() {
            return Err(Error::shape("grid accuracy", pred.shape(), labels.shape()));
        }
        total.add(pred.data(), labels.data())?;
    }
    total.pixel_accuracy()
}

/// Losses of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
}

/// Forward and backward on one batch, then an SGD step at `lr`.
pub fn train_step(
    model: &mut Model<f32>,
    state: &mut SgdState<f32>,
    images: &Tensor<f32>,
    labels: &Tensor<i32>,
    lr: f64,
    cfg: &OptimConfig,
    dropout_seed: u64,
) -> Result<StepLoss> {
    let main_labels = downsample_labels(labels, 4)?;
    let tape = Tape::new();
    let vars = model.params.attach(&tape);
    let (loss, main, aux) = {
        let mut ctx = Ctx::train(&tape, vars.clone(), &mut model.buffers, dropout_seed);
        let x = tape.constant(images.clone());
        let out = model.network.forward(&mut ctx, x)?;
        let main = tape.cross_entropy(out.main, &main_labels, IGNORE_INDEX)?;
        match out.aux {
            Some(aux_logits) if cfg.aux_weight > 0.0 => {
                let aux_labels = downsample_labels(labels, 8)?;
                let aux = tape.cross_entropy(aux_logits, &aux_labels, IGNORE_INDEX)?;
                let weighted = tape.scale(aux, cfg.aux_weight as f32)?;
                (tape.add(main, weighted)?, main, Some(aux))
            }
            _ => (main, main, None),
        }
    };
    let value = |v| tape.value(v).data()[0] as f64;
    let step = StepLoss {
        total: value(loss),
        main: value(main),
        aux: aux.map_or(0.0, value),
    };
    if !step.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", step.total)));
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
    sgd_step(&mut model.params, &grads, state, lr, cfg)?;
    Ok(step)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    /// First epoch (1-based) reaching the best validation class-mean mIoU.
    pub best_epoch: usize,
    pub step_lrs: Vec<f64>,
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn best(&self) -> &MetricsRecord {
        &self.records[self.best_epoch - 1]
    }

    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("at least one epoch")
    }
}

/// Index of the first maximum, the earliest epoch on ties.
pub fn first_argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

fn checkpoint_meta(record: &MetricsRecord, cfg: &TrainConfig) -> KvMap {
    let mut meta = KvMap::new();
    meta.set("epoch", record.epoch);
    meta.set("miou_class", record.miou_class);
    meta.set("miou_sample", record.miou_sample);
    meta.set("pixel_accuracy", record.pixel_accuracy);
    meta.set("eval_base", cfg.eval_base);
    meta
}

/// Trains for `cfg.optim.epochs` epochs, evaluating on `val` after each.
///
/// With an output directory the metrics CSV grows by one row per epoch,
/// `best.ckpt` is replaced whenever validation mIoU improves and `last.ckpt`
/// holds the latest epoch. A non-finite loss aborts the run and leaves the
/// checkpoints of earlier epochs in place.
pub fn train_loop(
    model: &mut Model<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if val.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let classes = model.config().num_classes;
    for s in train.iter().chain(val) {
        s.check_labels(classes)?;
    }
    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join(METRICS_FILE))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let opt = &cfg.optim;
    let steps_per_epoch = train.len().div_ceil(opt.batch_size);
    let total_steps = steps_per_epoch * opt.epochs;
    let mut state = SgdState::new(&model.params);
    let mut outcome = TrainOutcome {
        records: Vec::with_capacity(opt.epochs),
        best_epoch: 0,
        step_lrs: Vec::with_capacity(total_steps),
        step_losses: Vec::with_capacity(total_steps),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut iter = 0;
    for epoch in 1..=opt.epochs {
        let started = Instant::now();
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
        shuffle.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let (mut main_sum, mut aux_sum, mut lr) = (0.0, 0.0, 0.0);
        for batch in order.chunks(opt.batch_size) {
            let prepared: Vec<Sample> = batch
                .par_iter()
                .map(|&i| match &cfg.augment {
                    Some(a) => {
                        let draw = AugmentDraw::sample(a, &mut sample_rng(cfg.seed, epoch, i));
                        apply_augment(&train[i], a, &draw)
                    }
                    None => train[i].clone(),
                })
                .collect();
            let refs: Vec<&Sample> = prepared.iter().collect();
            let (images, labels) = collate(&refs)?;
            lr = poly_lr(iter, total_steps, opt.base_lr, opt.lr_power)?;
            let dropout_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(iter as u64);
            let step = train_step(model, &mut state, &images, &labels, lr, opt, dropout_seed)?;
            main_sum += step.main;
            aux_sum += step.aux;
            outcome.step_lrs.push(lr);
            outcome.step_losses.push(step.total);
            iter += 1;
        }
        let eval = evaluate(model, val, cfg.eval_base)?;
        let record = MetricsRecord {
            epoch,
            main_loss: main_sum / steps_per_epoch as f64,
            aux_loss: aux_sum / steps_per_epoch as f64,
            lr,
            miou_class: eval.miou_class,
            miou_sample: eval.miou_sample,
            pixel_accuracy: eval.pixel_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        let improved = outcome.records.iter().all(|r| record.miou_class > r.miou_class);
        if let Some(dir) = out {
            let meta = checkpoint_meta(&record, cfg);
            if improved {
                save_checkpoint(dir.join(BEST_CHECKPOINT), model, &meta)?;
            }
            save_checkpoint(dir.join(LAST_CHECKPOINT), model, &meta)?;
        }
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", record.csv_row())?;
            f.flush()?;
        }
        on_epoch(&record);
        if improved {
            outcome.best_epoch = epoch;
        }
        outcome.records.push(record);
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: Strategy,
    /// Best validation class-mean mIoU.
    pub miou: f64,
    /// Pixel accuracy at the best epoch.
    pub accuracy: f64,
    /// Epochs to convergence.
    pub epochs: usize,
    pub params: usize,
}

pub const ABLATION_HEADER: &str = "model,strategy,miou,accuracy,epochs,params";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "FBNet,{},{:.2},{:.2},{},{}",
            r.strategy.label(),
            100.0 * r.miou,
            100.0 * r.accuracy,
            r.epochs,
            r.params
        );
    }
    out
}

/// Trains every strategy from the same seed, data and optimiser settings.
/// Each run writes into `<out>/<strategy key>/` and the table goes to
/// `<out>/ablation.csv`.
pub fn ablation_run(
    train: &[Sample],
    val: &[Sample],
    base: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(Strategy, &MetricsRecord),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(Strategy::ALL.len());
    for strategy in Strategy::ALL {
        let model_cfg = ModelConfig {
            strategy,
            ..base.clone()
        };
        let mut model = Model::<f32>::new(&model_cfg, cfg.seed)?;
        let params = model.parameter_count().total;
        let dir = out.map(|o| o.join(strategy.key()));
        let outcome = train_loop(&mut model, train, val, cfg, dir.as_deref(), |r| on_epoch(strategy, r))?;
        let best = outcome.best();
        rows.push(AblationRow {
            strategy,
            miou: best.miou_class,
            accuracy: best.pixel_accuracy,
            epochs: outcome.best_epoch,
            params,
        });
        if let Some(o) = out {
            fs::write(o.join("ablation.csv"), ablation_csv(&rows))?;
        }
    }
    Ok(rows)
}
