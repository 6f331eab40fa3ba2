//! Minimal anchor-free 1D action analyzer and its evaluation.
//!
//! Every frame predicts class logits and two non-negative offsets
//! `(d_start, d_end)` to the boundaries of the action it belongs to.
//! Proposals come from frames whose attention clears a threshold and are
//! pruned by class-wise greedy NMS. Evaluation follows the usual temporal
//! localization protocol: greedy one-to-one matching at an IoU threshold and
//! all-point interpolated average precision.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::ser::{Serialize, SerializeMap, Serializer};
use thiserror::Error;

use crate::error::{ModelError, Result};
use crate::nn::{Bound, Linear, ParamSet};
use crate::synth::{ActionInterval, FeatureSequence};
use crate::tape::{softplus, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SCORE_THRESH: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_IOU_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
/// Context added on each side of an interval when pooling, as a share of
/// its length.
pub const WINDOW_CONTEXT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub d: usize,
    pub num_classes: usize,
    pub params: ParamSet,
    pub clf_head: Linear,
    pub reg_head: Linear,
}

impl DetectorModel {
    /// `num_classes` excludes background; the classifier has one more output.
    pub fn new(d: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let clf_head = Linear::new(&mut params, "detector.clf_head", d, num_classes + 1, rng);
        let reg_head = Linear::new(&mut params, "detector.reg_head", d, 2, rng);
        Self {
            d,
            num_classes,
            params,
            clf_head,
            reg_head,
        }
    }

    pub fn logits_on(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        Ok(self.clf_head.forward(tape, bound, x)?)
    }

    /// Non-negative boundary offsets `[T × 2]`.
    pub fn offsets_on(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let raw = self.reg_head.forward(tape, bound, features)?;
        Ok(tape.softplus(raw)?)
    }

    /// `−log p(c | f_ai) − log p(0 | f_nai)`; the non-action term is skipped
    /// when `f_nai` is `None`.
    pub fn clf_loss_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        f_ai: Var,
        f_nai: Option<Var>,
        class_id: usize,
    ) -> Result<Var> {
        let ai = self.logits_on(tape, bound, f_ai)?;
        let nai = f_nai.map(|f| self.logits_on(tape, bound, f)).transpose()?;
        clf_loss_from_logits_on(tape, ai, nai, class_id, self.num_classes)
    }

    pub fn clf_loss(&self, f_ai: &Tensor, f_nai: &Tensor, class_id: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let row = |t: &Tensor| t.clone().reshaped(vec![1, t.numel()]);
        let ai = tape.constant(row(f_ai)?);
        let nai = tape.constant(row(f_nai)?);
        let l = self.clf_loss_on(&mut tape, &bound, ai, Some(nai), class_id)?;
        Ok(tape.value(l).item())
    }

    /// Per-frame detection from enhanced features and attention.
    pub fn decode(
        &self,
        seq_id: &str,
        enhanced: &Tensor,
        lam: &[f64],
        score_thresh: f64,
        nms_iou: f64,
    ) -> Result<DetectionResult> {
        if !(0.0..=1.0).contains(&score_thresh) || !(0.0..=1.0).contains(&nms_iou) {
            return Err(ModelError::Contract(format!(
                "thresholds must lie in [0, 1], got score {score_thresh} and nms {nms_iou}"
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(enhanced.clone());
        let logits = self.logits_on(&mut tape, &bound, x)?;
        let log_probs = tape.log_softmax(logits)?;
        let raw_offsets = self.reg_head.forward(&mut tape, &bound, x)?;
        let log_probs = tape.value(log_probs);
        let raw_offsets = tape.value(raw_offsets);
        let t_len = enhanced.rows() as f64;

        let mut candidates = Vec::new();
        for (t, &l) in lam.iter().enumerate() {
            if l < score_thresh {
                continue;
            }
            let row = log_probs.row(t);
            let (class_id, lp) = (1..row.len())
                .map(|c| (c, row[c]))
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            let off = raw_offsets.row(t);
            let start = (t as f64 - softplus(off[0])).max(0.0);
            let end = (t as f64 + softplus(off[1])).min(t_len);
            if end <= start {
                continue;
            }
            candidates.push(Proposal {
                start,
                end,
                class_id,
                score: (l * lp.exp()).clamp(0.0, 1.0),
            });
        }
        Ok(DetectionResult {
            seq_id: seq_id.to_string(),
            proposals: nms(candidates, nms_iou),
        })
    }
}

/// Classification loss from precomputed `[1 × (K+1)]` logits.
pub fn clf_loss_from_logits_on(
    tape: &mut Tape,
    logits_ai: Var,
    logits_nai: Option<Var>,
    class_id: usize,
    num_classes: usize,
) -> Result<Var> {
    if class_id == 0 || class_id > num_classes {
        return Err(ModelError::Contract(format!(
            "action-instance class must lie in 1..={num_classes}, got {class_id}"
        )));
    }
    let ls = tape.log_softmax(logits_ai)?;
    let pick = tape.index(ls, class_id)?;
    let mut loss = tape.neg(pick)?;
    if let Some(nai) = logits_nai {
        let ls = tape.log_softmax(nai)?;
        let bg = tape.index(ls, 0)?;
        loss = tape.sub(loss, bg)?;
    }
    Ok(loss)
}

/// Boundary regression targets `(t − start, end − t)` inside intervals and
/// zeros on background frames.
pub fn offset_targets(t_len: usize, intervals: &[ActionInterval]) -> Tensor {
    let mut targets = Tensor::zeros(&[t_len, 2]);
    for iv in intervals {
        for t in iv.start..iv.end {
            targets.data_mut()[2 * t] = (t - iv.start) as f64;
            targets.data_mut()[2 * t + 1] = (iv.end - t) as f64;
        }
    }
    targets
}

/// λ-weighted smooth-L1 offset regression over `[T × 2]` predicted offsets.
///
/// Foreground frames are weighted by λ_t; with `include_background`,
/// background frames regress toward zero offsets weighted by `1 − λ_t`.
/// The weights are constants: this loss trains the regressor, not λ.
pub fn reg_loss_on(
    tape: &mut Tape,
    offsets: Var,
    lam: &[f64],
    intervals: &[ActionInterval],
    include_background: bool,
) -> Result<Var> {
    let t_len = tape.shape(offsets)[0];
    let mut fg = vec![false; t_len];
    for iv in intervals {
        fg[iv.start..iv.end].iter_mut().for_each(|m| *m = true);
    }
    let weights: Vec<f64> = (0..t_len)
        .map(|t| match (fg[t], include_background) {
            (true, _) => lam[t],
            (false, true) => 1.0 - lam[t],
            (false, false) => 0.0,
        })
        .collect();
    let targets = tape.constant(offset_targets(t_len, intervals));
    let w = tape.constant(Tensor::column(&weights));
    let residual = tape.sub(offsets, targets)?;
    let penalty = tape.smooth_l1(residual)?;
    let weighted = tape.mul(penalty, w)?;
    let total = tape.sum(weighted)?;
    Ok(tape.scale(total, 1.0 / t_len as f64)?)
}

/// `α · L_clf + β · L_reg`.
pub fn detector_loss_on(tape: &mut Tape, clf: Var, reg: Var, alpha: f64, beta_reg: f64) -> Result<Var> {
    if alpha < 0.0 || beta_reg < 0.0 {
        return Err(ModelError::Contract("loss weights must be non-negative".into()));
    }
    let a = tape.scale(clf, alpha)?;
    let b = tape.scale(reg, beta_reg)?;
    Ok(tape.add(a, b)?)
}

/// Frames pooled for one interval: the interval plus
/// [`WINDOW_CONTEXT`] of its length on both sides, clipped to the sequence.
pub fn context_window(iv: &ActionInterval, t_len: usize) -> std::ops::Range<usize> {
    let ctx = (iv.len() as f64 * WINDOW_CONTEXT).round() as usize;
    iv.start.saturating_sub(ctx)..(iv.end + ctx).min(t_len)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Proposal {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectionResult {
    pub seq_id: String,
    /// Sorted by descending score.
    pub proposals: Vec<Proposal>,
}

/// Intersection over union of `[start, end)` intervals.
pub fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Class-wise greedy NMS. A proposal is dropped when its IoU with an already
/// kept proposal of the same class exceeds `iou_thresh`.
pub fn nms(mut proposals: Vec<Proposal>, iou_thresh: f64) -> Vec<Proposal> {
    proposals.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Proposal> = Vec::with_capacity(proposals.len());
    for p in proposals {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == p.class_id && iou((k.start, k.end), (p.start, p.end)) > iou_thresh);
        if !suppressed {
            kept.push(p);
        }
    }
    kept
}

/// Proposals equal to the ground truth with unit scores.
pub fn ground_truth_results(truth: &[FeatureSequence]) -> Vec<DetectionResult> {
    truth
        .iter()
        .map(|s| DetectionResult {
            seq_id: s.seq_id.clone(),
            proposals: s
                .intervals
                .iter()
                .map(|iv| Proposal {
                    start: iv.start as f64,
                    end: iv.end as f64,
                    class_id: iv.class_id,
                    score: 1.0,
                })
                .collect(),
        })
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("detections reference unknown sequence {0}")]
    UnknownSequence(String),
    #[error("IoU threshold {0} outside [0, 1]")]
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// AP per class (classes with at least one ground-truth instance), one
    /// value per threshold.
    pub ap: BTreeMap<usize, Vec<f64>>,
    pub map: Vec<f64>,
    pub avg_map: f64,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

impl Serialize for EvalReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let per_threshold = |vals: &[f64]| -> BTreeMap<String, f64> {
            self.thresholds.iter().map(|&t| threshold_key(t)).zip(vals.iter().copied()).collect()
        };
        let ap: BTreeMap<String, BTreeMap<String, f64>> = self
            .ap
            .iter()
            .map(|(c, vals)| (format!("class_{c}"), per_threshold(vals)))
            .collect();
        let mut m = s.serialize_map(Some(3))?;
        m.serialize_entry("map", &per_threshold(&self.map))?;
        m.serialize_entry("avg_map", &self.avg_map)?;
        m.serialize_entry("ap", &ap)?;
        m.end()
    }
}

/// All-point interpolated AP from score-ranked true/false-positive flags.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &hit) in tp.iter().enumerate() {
        hits += usize::from(hit);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    // precision envelope, then integrate over recall steps
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

pub fn evaluate_map(
    results: &[DetectionResult],
    truth: &[FeatureSequence],
    iou_thresholds: &[f64],
) -> std::result::Result<EvalReport, EvalError> {
    if let Some(&bad) = iou_thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(EvalError::Threshold(bad));
    }
    let seq_index: HashMap<&str, usize> = truth.iter().enumerate().map(|(i, s)| (s.seq_id.as_str(), i)).collect();

    // proposals grouped by class, tagged with their sequence
    let mut by_class: BTreeMap<usize, Vec<(usize, Proposal)>> = BTreeMap::new();
    for r in results {
        let &si = seq_index
            .get(r.seq_id.as_str())
            .ok_or_else(|| EvalError::UnknownSequence(r.seq_id.clone()))?;
        for p in &r.proposals {
            by_class.entry(p.class_id).or_default().push((si, *p));
        }
    }
    let mut gt_by_class: BTreeMap<usize, Vec<(usize, ActionInterval)>> = BTreeMap::new();
    for (si, s) in truth.iter().enumerate() {
        for iv in &s.intervals {
            gt_by_class.entry(iv.class_id).or_default().push((si, *iv));
        }
    }

    let mut ap = BTreeMap::new();
    for (&class_id, gts) in &gt_by_class {
        let mut preds = by_class.remove(&class_id).unwrap_or_default();
        // score descending; ties broken by content so input order is irrelevant
        preds.sort_by(|(sa, a), (sb, b)| {
            b.score
                .total_cmp(&a.score)
                .then(sa.cmp(sb))
                .then(a.start.total_cmp(&b.start))
                .then(a.end.total_cmp(&b.end))
        });
        let per_threshold = iou_thresholds
            .iter()
            .map(|&thr| {
                let mut matched = vec![false; gts.len()];
                let tp: Vec<bool> = preds
                    .iter()
                    .map(|(si, p)| {
                        let best = gts
                            .iter()
                            .enumerate()
                            .filter(|(g, (gs, _))| gs == si && !matched[*g])
                            .map(|(g, (_, iv))| (g, iou((p.start, p.end), (iv.start as f64, iv.end as f64))))
                            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                                Some(b) if b.1 >= cur.1 => Some(b),
                                _ => Some(cur),
                            });
                        match best {
                            Some((g, o)) if o >= thr => {
                                matched[g] = true;
                                true
                            }
                            _ => false,
                        }
                    })
                    .collect();
                interpolated_ap(&tp, gts.len())
            })
            .collect::<Vec<f64>>();
        ap.insert(class_id, per_threshold);
    }

    let map: Vec<f64> = (0..iou_thresholds.len())
        .map(|i| {
            if ap.is_empty() {
                0.0
            } else {
                ap.values().map(|v: &Vec<f64>| v[i]).sum::<f64>() / ap.len() as f64
            }
        })
        .collect();
    let avg_map = if map.is_empty() {
        0.0
    } else {
        map.iter().sum::<f64>() / map.len() as f64
    };
    Ok(EvalReport {
        thresholds: iou_thresholds.to_vec(),
        ap,
        map,
        avg_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::mask_from_intervals;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(id: &str, t: usize, intervals: Vec<ActionInterval>) -> FeatureSequence {
        FeatureSequence {
            seq_id: id.into(),
            features: Tensor::zeros(&[t, 1]),
            fg_mask: mask_from_intervals(t, &intervals),
            intervals,
        }
    }

    fn iv(start: usize, end: usize, class_id: usize) -> ActionInterval {
        ActionInterval { start, end, class_id }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou((2.0, 9.0), (2.0, 9.0)), 1.0);
        assert_eq!(iou((0.0, 3.0), (5.0, 9.0)), 0.0);
        assert!((iou((0.0, 10.0), (5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_logits_give_near_zero_loss() {
        let mut tape = Tape::new();
        let mut ai = vec![-30.0; 6];
        ai[3] = 30.0;
        let mut nai = vec![-30.0; 6];
        nai[0] = 30.0;
        let a = tape.constant(Tensor::new(vec![1, 6], ai).unwrap());
        let n = tape.constant(Tensor::new(vec![1, 6], nai).unwrap());
        let l = clf_loss_from_logits_on(&mut tape, a, Some(n), 3, 5).unwrap();
        assert!(tape.value(l).item() <= 1e-9);
    }

    #[test]
    fn uniform_logits_give_two_log_six() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 6]));
        let l = clf_loss_from_logits_on(&mut tape, a, Some(a), 2, 5).unwrap();
        assert!((tape.value(l).item() - 2.0 * 6f64.ln()).abs() < 1e-12);
        assert!((2.0 * 6f64.ln() - 3.5835).abs() < 1e-4);
    }

    #[test]
    fn background_class_rejected_for_action_instance() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 6]));
        assert!(matches!(
            clf_loss_from_logits_on(&mut tape, a, None, 0, 5),
            Err(ModelError::Contract(_))
        ));
    }

    #[test]
    fn regression_hand_example() {
        // interval [10, 20), frame 12 predicts (2, 8): zero residual
        let targets = offset_targets(24, &[iv(10, 20, 1)]);
        assert_eq!(&targets.data()[24..26], &[2.0, 8.0]);
    }

    #[test]
    fn perfect_offsets_give_zero_loss() {
        let intervals = [iv(3, 9, 2), iv(12, 15, 1)];
        let mut tape = Tape::new();
        let off = tape.constant(offset_targets(16, &intervals));
        let lam = vec![0.7; 16];
        let l = reg_loss_on(&mut tape, off, &lam, &intervals, true).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn zero_attention_keeps_only_background_term() {
        let intervals = [iv(2, 6, 1)];
        let mut tape = Tape::new();
        let off = tape.constant(Tensor::full(&[8, 2], 3.0));
        let lam = vec![0.0; 8];
        let l = reg_loss_on(&mut tape, off, &lam, &intervals, true).unwrap();
        // 4 background frames, two offsets each at smooth-L1(3) = 2.5
        assert_eq!(tape.value(l).item(), 4.0 * 2.0 * 2.5 / 8.0);
        let only_fg = reg_loss_on(&mut tape, off, &lam, &intervals, false).unwrap();
        assert_eq!(tape.value(only_fg).item(), 0.0);
    }

    #[test]
    fn detector_loss_reductions() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let r = tape.constant(Tensor::scalar(3.0));
        for (a, b, want) in [(1.0, 0.0, 2.0), (0.0, 1.0, 3.0), (1.0, 1.0, 5.0)] {
            let l = detector_loss_on(&mut tape, c, r, a, b).unwrap();
            assert_eq!(tape.value(l).item(), want);
        }
    }

    #[test]
    fn windows_add_quarter_context() {
        assert_eq!(context_window(&iv(10, 30, 1), 128), 5..35);
        assert_eq!(context_window(&iv(0, 8, 1), 10), 0..10);
    }

    fn model(seed: u64) -> DetectorModel {
        DetectorModel::new(4, 3, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn low_attention_gives_no_proposals() {
        let m = model(0);
        let f = Tensor::full(&[10, 4], 0.3);
        let r = m.decode("s", &f, &[0.2; 10], 0.5, 0.5).unwrap();
        assert!(r.proposals.is_empty());
    }

    #[test]
    fn single_candidate_survives() {
        let m = model(1);
        let f = Tensor::full(&[10, 4], 0.3);
        let mut lam = vec![0.0; 10];
        lam[4] = 0.9;
        let r = m.decode("s", &f, &lam, 0.5, 0.5).unwrap();
        assert_eq!(r.proposals.len(), 1);
        let p = r.proposals[0];
        assert!(p.start < 4.0 + 1e-12 && p.end > 4.0 && (0.0..=1.0).contains(&p.score));
    }

    #[test]
    fn decode_rejects_bad_thresholds() {
        let m = model(2);
        let f = Tensor::full(&[4, 4], 0.0);
        assert!(m.decode("s", &f, &[0.5; 4], 1.5, 0.5).is_err());
    }

    #[test]
    fn nms_keeps_best_of_overlapping_triple() {
        // pairwise IoU between 2/3 and 9/11
        let mk = |s: f64, e: f64, score: f64| Proposal { start: s, end: e, class_id: 1, score };
        let props = vec![mk(0.0, 10.0, 0.9), mk(1.0, 11.0, 0.8), mk(2.0, 12.0, 0.7)];
        for (i, a) in props.iter().enumerate() {
            for b in &props[i + 1..] {
                assert!(iou((a.start, a.end), (b.start, b.end)) > 0.5);
            }
        }
        let kept = nms(props, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_is_class_wise() {
        let a = Proposal { start: 0.0, end: 5.0, class_id: 1, score: 0.9 };
        let b = Proposal { class_id: 2, score: 0.8, ..a };
        assert_eq!(nms(vec![b, a], 0.5), vec![a, b]);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = vec![seq("a", 50, vec![iv(3, 10, 1), iv(20, 40, 2)]), seq("b", 50, vec![iv(0, 5, 2)])];
        let report = evaluate_map(&ground_truth_results(&truth), &truth, &DEFAULT_IOU_THRESHOLDS).unwrap();
        assert!(report.map.iter().all(|&m| m == 1.0));
        assert_eq!(report.avg_map, 1.0);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let truth = vec![seq("a", 50, vec![iv(3, 10, 1)])];
        let report = evaluate_map(&[], &truth, &[0.5]).unwrap();
        assert_eq!(report.map, vec![0.0]);
    }

    #[test]
    fn unknown_sequence_rejected() {
        let truth = vec![seq("a", 10, vec![])];
        let results = vec![DetectionResult { seq_id: "zzz".into(), proposals: vec![] }];
        assert_eq!(
            evaluate_map(&results, &truth, &[0.5]),
            Err(EvalError::UnknownSequence("zzz".into()))
        );
    }

    #[test]
    fn interpolated_ap_hand_example() {
        // TP, FP, TP with 2 GT: precision 1, 1/2, 2/3 -> envelope 1, 2/3, 2/3
        let ap = interpolated_ap(&[true, false, true], 2);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn report_json_shape() {
        let truth = vec![seq("a", 50, vec![iv(3, 10, 1)])];
        let report = evaluate_map(&ground_truth_results(&truth), &truth, &[0.5]).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["map"]["0.5"], 1.0);
        assert_eq!(json["avg_map"], 1.0);
        assert_eq!(json["ap"]["class_1"]["0.5"], 1.0);
        assert_eq!(json["map"].as_object().unwrap().len(), 1);
    }
}
