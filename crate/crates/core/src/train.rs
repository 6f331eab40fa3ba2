//! Alternating two-stage optimization.
//!
//! Stage 1 fits the frame-level CVAE to attention supplied by the frozen
//! segment model. Stage 2 fits the segment model and detector against the
//! detection losses plus the reconstruction coupling through the frozen
//! CVAE. By default the stages alternate epoch by epoch.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{write_atomic, CheckpointError};
use crate::detector::{
    clf_loss_from_logits_on, context_window, reg_loss_on, DEFAULT_IOU_THRESHOLDS, DEFAULT_NMS_IOU,
    DEFAULT_SCORE_THRESH,
};
use crate::error::ModelError;
use crate::exec::Exec;
use crate::model::{EvalFailure, GafModels};
use crate::nn::ParamSet;
use crate::segment::{fuse_on, pool_or_mean_on, AttentionMap, SegmentModel};
use crate::frame::CvaeModel;
use crate::synth::{sha256_hex, FeatureSequence, SynthError};
use crate::tape::Tape;

/// Mean attention-map quality and mAP are logged every this many epochs.
pub const EVAL_EVERY: usize = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("numerical failure in stage {stage}, epoch {epoch}, step {step}: {source}")]
    Numerical {
        stage: u8,
        epoch: usize,
        step: usize,
        source: ModelError,
    },
    #[error("non-finite gradient {value} in {param}[{index}]")]
    NonFiniteGradient {
        param: String,
        index: usize,
        value: f64,
    },
    #[error("frozen {model} parameters changed during epoch {epoch}")]
    FreezeViolation { model: &'static str, epoch: usize },
    #[error("dataset {path}: {source}")]
    Data { path: PathBuf, source: SynthError },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalFailure),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Whether the failure is numerical (NaN/Inf) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::Numerical { .. } | TrainError::NonFiniteGradient { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Odd epochs run stage 1, even epochs stage 2.
    PerEpoch,
    /// Within every epoch, blocks of this many sequences alternate stages.
    PerSteps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta_kl: f64,
    pub alpha: f64,
    pub beta_reg: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub train_data: PathBuf,
    pub eval_data: Option<PathBuf>,
    pub checkpoint: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Defaults sized for small models trained from scratch on a CPU.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            weight_decay: 1e-3,
            beta_kl: 0.1,
            alpha: 1.0,
            beta_reg: 1.0,
            schedule: Schedule::PerEpoch,
            seed: 0,
            train_data: PathBuf::from("data/train.jsonl"),
            eval_data: Some(PathBuf::from("data/eval.jsonl")),
            checkpoint: PathBuf::from("runs/gaf.ckpt.json"),
        }
    }

    /// Gentle fine-tuning of pretrained weights: Adam at 1e-5 with weight decay
    /// 1e-3 for 20 epochs, one video per batch.
    pub fn finetune() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-3,
            epochs: 20,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "finetune" => Some(Self::finetune()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if [self.weight_decay, self.beta_kl, self.alpha, self.beta_reg]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("weight_decay, beta_kl, alpha and beta_reg must be non-negative");
        }
        if self.schedule == Schedule::PerSteps(0) {
            return bad("per_steps block size must be positive");
        }
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.checkpoint.with_extension("metrics.jsonl")
    }
}

/// Which stage-2 loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    /// Background classification of `f_nai` and zero-offset regression on
    /// background frames.
    pub non_action: bool,
    /// Reconstruction coupling through the frozen CVAE.
    pub recon: bool,
}

impl Objective {
    pub const BASIC: Self = Self {
        non_action: false,
        recon: false,
    };
    pub const NON_ACTION: Self = Self {
        non_action: true,
        recon: false,
    };
    pub const FULL: Self = Self {
        non_action: true,
        recon: true,
    };
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update: `p ← p·(1 − lr·wd)`, then the bias-corrected Adam step.
    /// Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64, weight_decay: f64) -> Result<(), TrainError> {
        for (p, g) in params.iter().zip(grads) {
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: p.name.clone(),
                    index,
                    value,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x *= decay;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Where stage 1 takes its conditioning attention from.
#[derive(Debug, Clone, Copy)]
pub enum LambdaSource<'a> {
    Segment(&'a SegmentModel),
    /// The ground-truth foreground mask.
    Oracle,
    /// `1 −` the ground-truth mask.
    Inverted,
}

impl LambdaSource<'_> {
    pub fn attention(&self, seq: &FeatureSequence) -> Result<AttentionMap, ModelError> {
        match self {
            LambdaSource::Segment(m) => m.attention_forward(&seq.features),
            LambdaSource::Oracle => AttentionMap::new(seq.fg_mask_f64()),
            LambdaSource::Inverted => Ok(AttentionMap::new(seq.fg_mask_f64())?.inverted()),
        }
    }
}

/// Optimizer state and the training RNG for one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub rng: ChaCha8Rng,
    pub frame_opt: AdamState,
    pub segment_opt: AdamState,
    pub detector_opt: AdamState,
}

impl TrainState {
    pub fn new(models: &GafModels, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            rng,
            frame_opt: AdamState::new(&models.frame.params),
            segment_opt: AdamState::new(&models.segment.params),
            detector_opt: AdamState::new(&models.detector.params),
        }
    }
}

/// Per-epoch summary of stage 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Epoch {
    pub loss: f64,
    pub recon: f64,
    pub kl_mean: f64,
    pub kl_min: f64,
}

/// One CVAE update on one sequence; returns `(loss, recon, kl)`.
pub fn stage1_step(
    frame: &mut CvaeModel,
    opt: &mut AdamState,
    rng: &mut ChaCha8Rng,
    seq: &FeatureSequence,
    lam: &AttentionMap,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64), TrainError> {
    let eps = frame.sample_eps(seq.len(), rng);
    let mut tape = Tape::new();
    let bound = frame.params.bind(&mut tape, true);
    let f = tape.constant(seq.features.clone());
    let l = tape.constant(lam.to_tensor());
    let num = |source: ModelError| TrainError::Numerical {
        stage: 1,
        epoch: 0,
        step: 0,
        source,
    };
    let out = frame.cvae_loss_on(&mut tape, &bound, f, l, &eps, cfg.beta_kl).map_err(num)?;
    let grads = tape.backward(out.total).map_err(|e| num(e.into()))?;
    let grads = bound.grads(&tape, &grads);
    opt.step(&mut frame.params, &grads, cfg.lr, cfg.weight_decay)?;
    Ok((
        tape.value(out.total).item(),
        tape.value(out.recon).item(),
        tape.value(out.kl).item(),
    ))
}

fn locate(err: TrainError, epoch: usize, step: usize) -> TrainError {
    match err {
        TrainError::Numerical { stage, source, .. } => TrainError::Numerical {
            stage,
            epoch,
            step,
            source,
        },
        other => other,
    }
}

/// One epoch of stage 1 over `data` in the given order.
pub fn train_stage1_epoch(
    frame: &mut CvaeModel,
    opt: &mut AdamState,
    rng: &mut ChaCha8Rng,
    data: &[&FeatureSequence],
    source: LambdaSource<'_>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Stage1Epoch, TrainError> {
    let mut acc = Stage1Epoch {
        loss: 0.0,
        recon: 0.0,
        kl_mean: 0.0,
        kl_min: f64::INFINITY,
    };
    for (step, seq) in data.iter().enumerate() {
        let lam = source.attention(seq).map_err(|source| TrainError::Numerical {
            stage: 1,
            epoch,
            step,
            source,
        })?;
        let (loss, recon, kl) = stage1_step(frame, opt, rng, seq, &lam, cfg).map_err(|e| locate(e, epoch, step))?;
        acc.loss += loss;
        acc.recon += recon;
        acc.kl_mean += kl;
        acc.kl_min = acc.kl_min.min(kl);
    }
    let n = data.len().max(1) as f64;
    acc.loss /= n;
    acc.recon /= n;
    acc.kl_mean /= n;
    Ok(acc)
}

/// Stage 1 alone for `cfg.epochs` epochs, shuffling every epoch. The
/// segment model (if it is the λ source) is only read.
pub fn train_stage1(
    frame: &mut CvaeModel,
    data: &[FeatureSequence],
    source: LambdaSource<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<Stage1Epoch>, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamState::new(&frame.params);
    let mut order: Vec<&FeatureSequence> = data.iter().collect();
    (1..=cfg.epochs)
        .map(|epoch| {
            order.shuffle(&mut rng);
            train_stage1_epoch(frame, &mut opt, &mut rng, &order, source, cfg, epoch)
        })
        .collect()
}

/// Stage-2 loss terms of one sequence, already weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stage2Terms {
    pub clf: Option<f64>,
    pub reg: Option<f64>,
    pub recon: Option<f64>,
    pub total: f64,
}

/// One segment + detector update on one sequence with the CVAE frozen.
pub fn stage2_step(
    models: &mut GafModels,
    state: &mut TrainState,
    seq: &FeatureSequence,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<Stage2Terms, TrainError> {
    let num = |source: ModelError| TrainError::Numerical {
        stage: 2,
        epoch: 0,
        step: 0,
        source,
    };
    let eps = objective
        .recon
        .then(|| models.frame.sample_eps(seq.len(), &mut state.rng));

    let mut tape = Tape::new();
    let seg_b = models.segment.params.bind(&mut tape, true);
    let det_b = models.detector.params.bind(&mut tape, true);
    let frame_b = models.frame.params.bind(&mut tape, false);
    let f = tape.constant(seq.features.clone());
    let out = models.segment.forward_on(&mut tape, &seg_b, f).map_err(num)?;
    let lam_vals = tape.value(out.lam).data().to_vec();
    let t_len = seq.len();

    let mut terms = Stage2Terms::default();
    let mut parts = Vec::new();
    let mut build = |tape: &mut Tape| -> Result<(), ModelError> {
        if cfg.alpha > 0.0 && !seq.intervals.is_empty() {
            // background has no class, so f_nai pools over the whole sequence
            let logits_nai = if objective.non_action && seq.fg_mask.contains(&0) {
                let inv = tape.one_minus(out.lam)?;
                let f_nai = pool_or_mean_on(tape, out.enhanced, inv, "non-action")?;
                Some(models.detector.logits_on(tape, &det_b, f_nai)?)
            } else {
                None
            };
            let mut per_interval = Vec::with_capacity(seq.intervals.len());
            for iv in &seq.intervals {
                let window: Vec<usize> = context_window(iv, t_len).collect();
                let rows = tape.gather_rows(out.enhanced, &window)?;
                let w = tape.gather_rows(out.lam, &window)?;
                let f_ai = pool_or_mean_on(tape, rows, w, "action")?;
                let logits_ai = models.detector.logits_on(tape, &det_b, f_ai)?;
                per_interval.push(clf_loss_from_logits_on(
                    tape,
                    logits_ai,
                    logits_nai,
                    iv.class_id,
                    models.detector.num_classes,
                )?);
            }
            let mut clf = per_interval[0];
            for &v in &per_interval[1..] {
                clf = tape.add(clf, v)?;
            }
            let clf = tape.scale(clf, cfg.alpha / per_interval.len() as f64)?;
            terms.clf = Some(tape.value(clf).item());
            parts.push(clf);
        }
        if cfg.beta_reg > 0.0 {
            let offsets = models.detector.offsets_on(tape, &det_b, out.enhanced)?;
            let reg = reg_loss_on(tape, offsets, &lam_vals, &seq.intervals, objective.non_action)?;
            let reg = tape.scale(reg, cfg.beta_reg)?;
            terms.reg = Some(tape.value(reg).item());
            parts.push(reg);
        }
        if let Some(eps) = &eps {
            let recon = fuse_on(tape, &models.frame, &frame_b, f, out.lam, eps)?;
            terms.recon = Some(tape.value(recon).item());
            parts.push(recon);
        }
        Ok(())
    };
    build(&mut tape).map_err(num)?;

    let Some((&first, rest)) = parts.split_first() else {
        return Ok(terms);
    };
    let mut total = first;
    for &p in rest {
        total = tape.add(total, p).map_err(|e| num(e.into()))?;
    }
    terms.total = tape.value(total).item();

    let grads = tape.backward(total).map_err(|e| num(e.into()))?;
    if frame_b.grads(&tape, &grads).iter().flatten().any(|&g| g != 0.0) {
        return Err(TrainError::FreezeViolation {
            model: "frame",
            epoch: 0,
        });
    }
    let seg_g = seg_b.grads(&tape, &grads);
    let det_g = det_b.grads(&tape, &grads);
    state
        .segment_opt
        .step(&mut models.segment.params, &seg_g, cfg.lr, cfg.weight_decay)?;
    state
        .detector_opt
        .step(&mut models.detector.params, &det_g, cfg.lr, cfg.weight_decay)?;
    Ok(terms)
}

/// One epoch of stage 2; returns the mean total loss.
pub fn train_stage2_epoch(
    models: &mut GafModels,
    state: &mut TrainState,
    data: &[&FeatureSequence],
    cfg: &TrainConfig,
    objective: Objective,
    epoch: usize,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (step, seq) in data.iter().enumerate() {
        let terms = stage2_step(models, state, seq, cfg, objective).map_err(|e| match e {
            TrainError::FreezeViolation { model, .. } => TrainError::FreezeViolation { model, epoch },
            other => locate(other, epoch, step),
        })?;
        total += terms.total;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Stage 2 alone for `cfg.epochs` epochs.
pub fn train_stage2(
    models: &mut GafModels,
    data: &[FeatureSequence],
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<Vec<f64>, TrainError> {
    cfg.validate()?;
    let mut state = TrainState::new(models, cfg.seed);
    let mut order: Vec<&FeatureSequence> = data.iter().collect();
    (1..=cfg.epochs)
        .map(|epoch| {
            order.shuffle(&mut state.rng);
            train_stage2_epoch(models, &mut state, &order, cfg, objective, epoch)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "frame")]
    Frame,
    #[serde(rename = "segment")]
    Segment,
    #[serde(rename = "mixed")]
    Mixed,
}

/// One line of the metrics history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: f64,
    pub lambda_fg_mean: f64,
    pub lambda_bg_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
}

/// Checksums of the parameters a stage must not touch, taken before and
/// after the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeCheck {
    pub epoch: usize,
    pub model: &'static str,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub freeze_checks: Vec<FreezeCheck>,
}

fn frozen_checksums(models: &GafModels, stage: Stage) -> Vec<(&'static str, String)> {
    match stage {
        Stage::Frame => vec![
            ("segment", models.segment.params.checksum()),
            ("detector", models.detector.params.checksum()),
        ],
        Stage::Segment => vec![("frame", models.frame.params.checksum())],
        Stage::Mixed => Vec::new(),
    }
}

/// Runs the alternating schedule, logging one [`EpochRecord`] per epoch.
/// `monitor` supplies the sequences for attention statistics and mAP;
/// mAP is computed every [`EVAL_EVERY`] epochs.
pub fn train_alternating(
    models: &mut GafModels,
    train: &[FeatureSequence],
    monitor: &[FeatureSequence],
    cfg: &TrainConfig,
    objective: Objective,
    exec: Exec,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut state = TrainState::new(models, cfg.seed);
    let mut order: Vec<&FeatureSequence> = train.iter().collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut freeze_checks = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut state.rng);
        let stage = match cfg.schedule {
            Schedule::PerEpoch if epoch % 2 == 1 => Stage::Frame,
            Schedule::PerEpoch => Stage::Segment,
            Schedule::PerSteps(_) => Stage::Mixed,
        };
        let before = frozen_checksums(models, stage);
        let loss = match (stage, cfg.schedule) {
            (Stage::Frame, _) => {
                let seg = models.segment.clone();
                train_stage1_epoch(
                    &mut models.frame,
                    &mut state.frame_opt,
                    &mut state.rng,
                    &order,
                    LambdaSource::Segment(&seg),
                    cfg,
                    epoch,
                )?
                .loss
            }
            (Stage::Segment, _) => train_stage2_epoch(models, &mut state, &order, cfg, objective, epoch)?,
            (Stage::Mixed, Schedule::PerSteps(k)) => {
                let mut seg_loss = 0.0;
                let mut seg_steps = 0usize;
                for (block, chunk) in order.chunks(k).enumerate() {
                    if block % 2 == 0 {
                        let seg = models.segment.clone();
                        train_stage1_epoch(
                            &mut models.frame,
                            &mut state.frame_opt,
                            &mut state.rng,
                            chunk,
                            LambdaSource::Segment(&seg),
                            cfg,
                            epoch,
                        )?;
                    } else {
                        seg_loss += train_stage2_epoch(models, &mut state, chunk, cfg, objective, epoch)? * chunk.len() as f64;
                        seg_steps += chunk.len();
                    }
                }
                seg_loss / seg_steps.max(1) as f64
            }
            (Stage::Mixed, Schedule::PerEpoch) => unreachable!("per-epoch schedule never mixes"),
        };
        for ((model, before), (_, after)) in before.into_iter().zip(frozen_checksums(models, stage)) {
            if before != after {
                return Err(TrainError::FreezeViolation { model, epoch });
            }
            freeze_checks.push(FreezeCheck {
                epoch,
                model,
                before,
                after,
            });
        }

        let stats = models.lambda_stats(monitor, exec).map_err(|source| TrainError::Numerical {
            stage: 2,
            epoch,
            step: 0,
            source,
        })?;
        let map = if epoch % EVAL_EVERY == 0 {
            Some(
                models
                    .evaluate(monitor, &DEFAULT_IOU_THRESHOLDS, DEFAULT_SCORE_THRESH, DEFAULT_NMS_IOU, exec)?
                    .avg_map,
            )
        } else {
            None
        };
        debug!("epoch {epoch} {stage:?}: loss {loss:.4} fg {:.3} bg {:.3}", stats.fg_mean, stats.bg_mean);
        history.push(EpochRecord {
            epoch,
            stage,
            loss,
            lambda_fg_mean: stats.fg_mean,
            lambda_bg_mean: stats.bg_mean,
            map,
        });
    }
    Ok(TrainOutcome {
        history,
        freeze_checks,
    })
}

pub fn history_to_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e.to_string())))
        .collect()
}

/// A dataset file and the SHA-256 of the bytes actually read.
pub struct LoadedData {
    pub seqs: Vec<FeatureSequence>,
    pub checksum: String,
}

pub fn load_data(path: &Path) -> Result<LoadedData, TrainError> {
    let data_err = |source: SynthError| TrainError::Data {
        path: path.to_path_buf(),
        source,
    };
    let bytes = fs::read(path).map_err(|e| data_err(e.into()))?;
    let seqs = crate::synth::parse_jsonl(bytes.as_slice()).map_err(data_err)?;
    Ok(LoadedData {
        seqs,
        checksum: sha256_hex(&bytes),
    })
}

/// Result of [`run`]: what was written and from which inputs.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub history: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub train_checksum: String,
    pub eval_checksum: Option<String>,
}

/// Loads the datasets named in `cfg`, trains the full model, and writes the
/// checkpoint and metrics history (each atomically, only on success).
pub fn run(cfg: &TrainConfig, exec: Exec) -> Result<RunOutput, TrainError> {
    cfg.validate()?;
    let train = load_data(&cfg.train_data)?;
    let eval = cfg.eval_data.as_deref().map(load_data).transpose()?;
    let first = train
        .seqs
        .first()
        .ok_or_else(|| TrainError::Config(format!("{} holds no sequences", cfg.train_data.display())))?;
    let num_classes = train
        .seqs
        .iter()
        .chain(eval.iter().flat_map(|e| &e.seqs))
        .flat_map(|s| &s.intervals)
        .map(|iv| iv.class_id)
        .max()
        .unwrap_or(1);
    let mut models = GafModels::with_defaults(first.dim(), num_classes, cfg.seed);
    let monitor = eval.as_ref().map_or(&train.seqs, |e| &e.seqs);
    info!(
        "training on {} sequences for {} epochs (lr {}, seed {})",
        train.seqs.len(),
        cfg.epochs,
        cfg.lr,
        cfg.seed
    );
    let outcome = train_alternating(&mut models, &train.seqs, monitor, cfg, Objective::FULL, exec)?;
    models.checkpoint().save(&cfg.checkpoint)?;
    let metrics = cfg.metrics_path();
    write_atomic(&metrics, history_to_jsonl(&outcome.history).as_bytes())?;
    Ok(RunOutput {
        history: outcome.history,
        checkpoint: cfg.checkpoint.clone(),
        metrics,
        train_checksum: train.checksum,
        eval_checksum: eval.map(|e| e.checksum),
    })
}
