//! Adam with a step schedule, one optimization step per video, per-epoch
//! validation and best-epoch selection.

mod checkpoint;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};

use crate::config::TrainConfig;
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::losses::{downsample_labels, total_loss, LabelHierarchy, LossBreakdown};
use crate::model::{forward, init_model, ModelParams};
use crate::params::{Mode, ParamStore};
use crate::tensor::{Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter tensor and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<F>> = store.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. `grads` follows the store order. Nothing
/// is modified when any gradient is non-finite.
pub fn adam_step<F: Real>(store: &mut ParamStore<F>, grads: &[Vec<F>], state: &mut AdamState<F>, lr: f64) -> Result<()> {
    assert_eq!(grads.len(), store.len(), "one gradient per parameter tensor");
    for (id, g) in store.ids().zip(grads) {
        assert_eq!(g.len(), store.get(id).numel(), "gradient shape mismatch for `{}`", store.name(id));
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let bc1 = F::of(1.0 - ADAM_BETA1.powf(state.step as f64));
    let bc2 = F::of(1.0 - ADAM_BETA2.powf(state.step as f64));
    let (b1, b2) = (F::of(ADAM_BETA1), F::of(ADAM_BETA2));
    let (one, eps, lr) = (F::one(), F::of(ADAM_EPS), F::of(lr));
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let theta = store.get_mut(id).data_mut();
        for i in 0..theta.len() {
            let g = grads[k][i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Learning rate for the 0-based `epoch`: `base · factor^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Mean training loss terms and validation accuracy of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub frame: f64,
    pub segment: f64,
    /// Smoothing penalty before weighting by `λ`.
    pub smooth: f64,
    pub total: f64,
    pub val_accuracy: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,L_frame,L_segment,L_smooth,total,val_accuracy";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.frame, self.segment, self.smooth, self.total, self.val_accuracy
        )
        .unwrap();
        s
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest validation accuracy, earliest epoch on ties.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Highest validation accuracy; the earliest epoch wins ties.
///
/// Panics on an empty slice.
pub fn select_best(checkpoints: &[Checkpoint]) -> &Checkpoint {
    let mut best = checkpoints.first().expect("select_best needs at least one checkpoint");
    for c in &checkpoints[1..] {
        if improves(c, best) {
            best = c;
        }
    }
    best
}

fn improves(candidate: &Checkpoint, incumbent: &Checkpoint) -> bool {
    candidate.val_accuracy > incumbent.val_accuracy
        || (candidate.val_accuracy == incumbent.val_accuracy && candidate.epoch < incumbent.epoch)
}

/// Labels of every level the model builds.
pub fn label_hierarchy(labels: &[usize], cfg: &crate::config::ModelConfig) -> LabelHierarchy {
    if cfg.levels() == 0 {
        LabelHierarchy {
            levels: vec![labels.to_vec()],
        }
    } else {
        downsample_labels(labels, cfg.fusion_kernel, cfg.levels())
    }
}

pub fn features_tensor<F: Real>(video: &FeatureSequence) -> Tensor<F> {
    Tensor::new([video.len(), video.dim], video.features.iter().map(|&x| F::of_f32(x)).collect())
}

/// Per-frame arg-max predictions of the eval-mode network.
pub fn predict_classes(params: &ModelParams<f32>, video: &FeatureSequence) -> Result<Vec<usize>> {
    Ok(params.predict(&features_tensor(video))?.argmax_rows())
}

/// Mean over videos of per-video frame accuracy.
pub fn mean_accuracy(params: &ModelParams<f32>, videos: &[FeatureSequence]) -> Result<f64> {
    let accs: Vec<f64> = videos
        .par_iter()
        .map(|v| {
            let pred = predict_classes(params, v)?;
            let hits = pred.iter().zip(&v.labels).filter(|(a, b)| a == b).count();
            Ok(hits as f64 / v.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
}

fn check_videos(cfg: &TrainConfig, videos: &[FeatureSequence]) -> Result<()> {
    for v in videos {
        if v.dim != cfg.model.input_dim || v.num_classes != cfg.model.num_classes {
            return Err(Error::Data(format!(
                "video `{}` has D_in={} and C={}, configuration expects D_in={} and C={}",
                v.video_id, v.dim, v.num_classes, cfg.model.input_dim, cfg.model.num_classes
            )));
        }
    }
    Ok(())
}

fn global_norm_clip(grads: &mut [Vec<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Forward, loss, backward and one Adam update on a single video.
fn train_step(
    params: &mut ModelParams<f32>,
    opt: &mut AdamState<f32>,
    cfg: &TrainConfig,
    video: &FeatureSequence,
    lr: f64,
    epoch: usize,
    dropout_seed: u64,
) -> Result<LossBreakdown> {
    let diverged = |reason: String| Error::Divergence {
        epoch,
        video: video.video_id.clone(),
        reason,
    };
    let labels = label_hierarchy(&video.labels, &cfg.model);
    let mut g = params.graph(Mode::Train, dropout_seed);
    let h = g.input(features_tensor(video));
    let out = forward(&mut g, params, h)?;
    let terms = total_loss(&mut g, &out, &labels, &cfg.loss);
    if !terms.breakdown.total.is_finite() {
        return Err(diverged(format!("loss is {}", terms.breakdown.total)));
    }
    let grads = g.tape.backward(terms.total).map_err(|e| diverged(e.to_string()))?;
    let mut flat: Vec<Vec<f32>> = params
        .store
        .ids()
        .map(|id| grads.get(g.param(id)).expect("parameter gradient").data().to_vec())
        .collect();
    if let Some(c) = cfg.clip_norm {
        global_norm_clip(&mut flat, c);
    }
    adam_step(&mut params.store, &flat, opt, lr)?;
    Ok(terms.breakdown)
}

/// Trains for `cfg.epochs` epochs, or the remaining ones when resuming.
///
/// Videos are visited in a fresh seeded permutation each epoch. After each
/// epoch `on_epoch` receives the log record and a checkpoint carrying the
/// optimizer state. Validation uses `val`, or `train` when `val` is empty.
pub fn train(
    cfg: &TrainConfig,
    train: &[FeatureSequence],
    val: &[FeatureSequence],
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochRecord, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training videos".into()));
    }
    check_videos(cfg, train)?;
    check_videos(cfg, val)?;
    let val = if val.is_empty() {
        log::warn!("no validation videos; selecting the best epoch on training accuracy");
        train
    } else {
        val
    };

    let (mut params, mut opt, start, mut best) = match resume {
        Some(ckpt) => {
            ckpt.ensure_compatible(&cfg.model)?;
            let params = ckpt.model()?;
            let opt = ckpt.optimizer.clone().unwrap_or_else(|| AdamState::new(&params.store));
            (params, opt, ckpt.epoch, Some(ckpt))
        }
        None => {
            let params = init_model::<f32>(&cfg.model, cfg.seed)?;
            let opt = AdamState::new(&params.store);
            (params, opt, 0, None)
        }
    };
    if start >= cfg.epochs {
        return Err(Error::config(format!(
            "checkpoint is already at epoch {start} of {}",
            cfg.epochs
        )));
    }

    let mut log_records = Vec::new();
    let mut last = None;
    for e in start..cfg.epochs {
        let epoch = e + 1;
        let lr = lr_at(e, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for &i in &order {
            let b = train_step(&mut params, &mut opt, cfg, &train[i], lr, epoch, rng.random())?;
            sum.frame += b.frame;
            sum.segment += b.segment;
            sum.smooth += b.smooth;
            sum.total += b.total;
        }
        let n = train.len() as f64;
        let val_accuracy = mean_accuracy(&params, val)?;
        let record = EpochRecord {
            epoch,
            lr,
            frame: sum.frame / n,
            segment: sum.segment / n,
            smooth: sum.smooth / n,
            total: sum.total / n,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: lr {lr:e} loss {:.4} (frame {:.4}, segment {:.4}, smooth {:.4}) val accuracy {:.4}",
            record.total,
            record.frame,
            record.segment,
            record.smooth,
            val_accuracy
        );
        let ckpt = Checkpoint {
            config: cfg.clone(),
            epoch,
            val_accuracy,
            params: params.store.clone(),
            optimizer: Some(opt.clone()),
        };
        on_epoch(&record, &ckpt)?;
        log_records.push(record);
        if best.as_ref().is_none_or(|b| improves(&ckpt, b)) {
            best = Some(ckpt.clone());
        }
        last = Some(ckpt);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        last: last.expect("at least one epoch ran"),
        log: log_records,
    })
}
