//! Training loop: AdamW over the learnable set with the poly schedule,
//! periodic evaluation, and best-checkpoint tracking (F1 for BCD, Score
//! for SCD).

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::augment::{augment_sample, AugmentConfig};
use crate::autodiff::ParamSet;
use crate::bitab::HeadKind;
use crate::data::{load_sample, LoadedSample, SampleRecord};
use crate::error::{Error, Result};
use crate::infer;
use crate::metrics::{
    bcd_metrics, scd_metrics, total_loss, ConfusionCounts, MetricReport,
};
use crate::model::BanModel;
use crate::ops;
use crate::optim::{poly_lr, AdamW, OptimConfig};

/// Where training samples come from: disk records or an in-memory set.
pub enum SampleSource {
    Records(Vec<SampleRecord>),
    Memory(Vec<LoadedSample>),
}

impl SampleSource {
    pub fn len(&self) -> usize {
        match self {
            SampleSource::Records(r) => r.len(),
            SampleSource::Memory(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fetch(&self, idx: usize) -> Result<LoadedSample> {
        match self {
            SampleSource::Records(r) => load_sample(&r[idx]),
            SampleSource::Memory(s) => Ok(s[idx].clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub optim: OptimConfig,
    pub max_iters: usize,
    pub power: f64,
    pub min_lr: f64,
    /// Evaluate on the validation source every this many iterations; 0 = never.
    pub eval_interval: usize,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    pub work_dir: Option<PathBuf>,
    /// Print a progress line every this many iterations; 0 = silent.
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            optim: OptimConfig::default(),
            max_iters: 100,
            power: 1.0,
            min_lr: 0.0,
            eval_interval: 0,
            seed: 42,
            augment: None,
            work_dir: None,
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<f32>,
    pub best_metric: Option<f64>,
    pub best_iter: Option<usize>,
    pub final_eval: Option<MetricReport>,
}

/// Stream seed for (run seed, epoch, sample slot): splitmix64 over the tuple.
fn derive_stream(seed: u64, epoch: u64, slot: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(epoch.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(slot.wrapping_mul(0x94d049bb133111eb));
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// One optimizer step over a batch: forward, mean loss, backward, update.
/// A non-finite loss aborts with diagnostics (and a parameter dump when a
/// work dir is configured).
pub fn train_step(
    model: &BanModel,
    batch: &[LoadedSample],
    set: &ParamSet,
    opt: &mut AdamW,
    lr: f64,
    work_dir: Option<&std::path::Path>,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::config("empty training batch"));
    }
    set.zero_grad();
    let mut losses = Vec::with_capacity(batch.len());
    for sample in batch {
        let logits = model.forward(&sample.t1, &sample.t2)?;
        let sem = sample.semantic.as_ref().map(|(a, b)| (a, b));
        losses.push(total_loss(&logits, &sample.label, sem)?);
    }
    let loss = ops::mul_scalar(&ops::add_n(&losses), 1.0 / batch.len() as f32);
    let value = loss.scalar();
    if !value.is_finite() {
        if let Some(dir) = work_dir {
            let dump = dir.join("diagnostics.ckpt");
            let _ = set.to_container().write(&dump);
        }
        return Err(Error::numeric(format!(
            "non-finite training loss {value}; parameters dumped if a work dir is set"
        )));
    }
    loss.backward();
    opt.step(set, lr)?;
    Ok(value)
}

/// Evaluate on a source: full-image forward when the image fits the window,
/// sliding window otherwise.
pub fn evaluate(
    model: &BanModel,
    source: &SampleSource,
    window: Option<usize>,
    stride: Option<usize>,
) -> Result<(ConfusionCounts, MetricReport)> {
    if source.is_empty() {
        return Err(Error::data("empty evaluation source"));
    }
    let scd = model.spec.head_kind == HeadKind::Scd;
    let mut counts = if scd {
        ConfusionCounts::new_scd(model.spec.num_semantic_classes)
    } else {
        ConfusionCounts::new_bcd()
    };
    for idx in 0..source.len() {
        let sample = source.fetch(idx)?;
        let (h, w) = (sample.t1.height(), sample.t1.width());
        let win = window.unwrap_or_else(|| h.min(w)).min(h).min(w);
        let st = stride.unwrap_or(win).min(win);
        if scd {
            let pred = infer::sliding_window_infer_scd(model, &sample.t1, &sample.t2, win, st)?;
            counts.update(&pred.change, &sample.label)?;
            let (l1, l2) = sample.semantic.as_ref().ok_or_else(|| {
                Error::data("scd evaluation needs semantic labels".to_string())
            })?;
            counts.update_seg(&pred.sem_t1, l1)?;
            counts.update_seg(&pred.sem_t2, l2)?;
        } else {
            let pred = infer::sliding_window_infer(model, &sample.t1, &sample.t2, win, st)?;
            counts.update(&pred, &sample.label)?;
        }
    }
    let bcd = bcd_metrics(&counts)?;
    let report = if scd {
        MetricReport::from_scd(&bcd, &scd_metrics(&counts)?)
    } else {
        MetricReport::from_bcd(&bcd)
    };
    Ok((counts, report))
}

/// Full training run. Batches walk a per-epoch shuffled order; each sample
/// slot owns an independent derived RNG stream, so the batch stream is a
/// pure function of (seed, data).
pub fn train_loop(
    model: &BanModel,
    train: &SampleSource,
    val: Option<&SampleSource>,
    settings: &TrainSettings,
) -> Result<TrainReport> {
    settings.optim.validate()?;
    if train.is_empty() {
        return Err(Error::data("empty training source"));
    }
    if settings.max_iters == 0 {
        return Err(Error::config("max_iters must be positive"));
    }
    let set = model.learnable_params();
    let mut opt = AdamW::new(&set, settings.optim);
    let mut report = TrainReport::default();
    let selection_metric = match model.spec.head_kind {
        HeadKind::BinaryChange => "f1_c",
        HeadKind::Scd => "score",
    };

    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch = 0u64;
    let mut cursor = 0usize;
    let mut shuffle_rng =
        ChaCha12Rng::seed_from_u64(derive_stream(settings.seed, epoch, u64::MAX));
    order.shuffle(&mut shuffle_rng);

    for iter in 0..settings.max_iters {
        let mut batch = Vec::with_capacity(settings.optim.batch_size);
        for _ in 0..settings.optim.batch_size {
            if cursor == n {
                cursor = 0;
                epoch += 1;
                let mut rng =
                    ChaCha12Rng::seed_from_u64(derive_stream(settings.seed, epoch, u64::MAX));
                order.shuffle(&mut rng);
            }
            let idx = order[cursor];
            let mut sample = train.fetch(idx)?;
            if let Some(aug) = &settings.augment {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_stream(
                    settings.seed,
                    epoch,
                    cursor as u64,
                ));
                sample = augment_sample(&sample, aug, &mut rng)?;
            }
            batch.push(sample);
            cursor += 1;
        }
        let lr = poly_lr(
            iter,
            settings.max_iters,
            settings.optim.base_lr,
            settings.power,
            settings.min_lr,
        )?;
        let loss = train_step(
            model,
            &batch,
            &set,
            &mut opt,
            lr,
            settings.work_dir.as_deref(),
        )?;
        report.losses.push(loss);
        if settings.log_every > 0 && (iter + 1) % settings.log_every == 0 {
            println!("iter {:>6}  lr {lr:.3e}  loss {loss:.5}", iter + 1);
        }

        let do_eval = settings.eval_interval > 0
            && ((iter + 1) % settings.eval_interval == 0 || iter + 1 == settings.max_iters);
        if do_eval {
            if let Some(val) = val {
                let (_, metrics) = evaluate(model, val, None, None)?;
                let value = metrics
                    .get(selection_metric)
                    .ok_or_else(|| Error::config("selection metric missing from report"))?;
                if settings.log_every > 0 {
                    println!("iter {:>6}  val {selection_metric} {value:.4}", iter + 1);
                }
                if report.best_metric.is_none_or(|best| value > best) {
                    report.best_metric = Some(value);
                    report.best_iter = Some(iter + 1);
                    if let Some(dir) = &settings.work_dir {
                        model.save_learnable(dir.join("best.ckpt"))?;
                    }
                }
                report.final_eval = Some(metrics);
            }
        }
    }
    if let Some(dir) = &settings.work_dir {
        model.save_learnable(dir.join("last.ckpt"))?;
    }
    Ok(report)
}
