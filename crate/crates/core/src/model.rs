//! The three trained components together, with checkpointing and
//! whole-dataset inference.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::detector::{evaluate_map, DetectionResult, DetectorModel, EvalError, EvalReport};
use crate::error::Result;
use crate::exec::Exec;
use crate::frame::{CvaeDims, CvaeModel};
use crate::metrics::{lambda_stats, LambdaStats};
use crate::segment::{SegmentDims, SegmentModel};
use crate::synth::FeatureSequence;

#[derive(Debug, Clone)]
pub struct GafModels {
    pub frame: CvaeModel,
    pub segment: SegmentModel,
    pub detector: DetectorModel,
}

impl GafModels {
    pub fn new(frame_dims: CvaeDims, seg_dims: SegmentDims, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = CvaeModel::new(frame_dims, &mut rng);
        let segment = SegmentModel::new(seg_dims, &mut rng);
        let detector = DetectorModel::new(seg_dims.d, num_classes, &mut rng);
        Self {
            frame,
            segment,
            detector,
        }
    }

    /// Default-sized models for `d`-dimensional features and `num_classes`
    /// action classes.
    pub fn with_defaults(d: usize, num_classes: usize, seed: u64) -> Self {
        Self::new(CvaeDims::new(d), SegmentDims::new(d), num_classes, seed)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_sets([&self.frame.params, &self.segment.params, &self.detector.params])
    }

    /// Rebuilds models whose sizes are read off the stored shapes.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let shape = |name: &str| ck.shape_of(name);
        let bad = |name: &str| CheckpointError::BadParam {
            name: name.to_string(),
            detail: "unexpected rank".into(),
        };
        let dim = |name: &str, axis: usize| -> Result<usize, CheckpointError> {
            shape(name)?.get(axis).copied().ok_or_else(|| bad(name))
        };
        let d = dim("frame.theta_reduce.weight", 0)?;
        let frame_dims = CvaeDims {
            d,
            d_r: dim("frame.theta_reduce.weight", 1)?,
            h_enc: dim("frame.enc_fc.weight", 1)?,
            h_dec: dim("frame.dec_fc.weight", 1)?,
            d_z: dim("frame.enc_mu.weight", 1)?,
        };
        let seg_dims = SegmentDims {
            d,
            h_att: dim("segment.att_head.0.kernel", 2)?,
            att_kernel: dim("segment.att_head.0.kernel", 0)?,
        };
        let classes = dim("detector.clf_head.weight", 1)?;
        if classes < 2 {
            return Err(bad("detector.clf_head.weight"));
        }
        let mut models = Self::new(frame_dims, seg_dims, classes - 1, 0);
        ck.restore(&mut models.frame.params)?;
        ck.restore(&mut models.segment.params)?;
        ck.restore(&mut models.detector.params)?;
        ck.check_no_extras([&models.frame.params, &models.segment.params, &models.detector.params])?;
        Ok(models)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn detect(&self, seq: &FeatureSequence, score_thresh: f64, nms_iou: f64) -> Result<DetectionResult> {
        let (lam, enhanced) = self.segment.forward(&seq.features)?;
        self.detector
            .decode(&seq.seq_id, &enhanced, lam.values(), score_thresh, nms_iou)
    }

    pub fn detect_all(
        &self,
        seqs: &[FeatureSequence],
        score_thresh: f64,
        nms_iou: f64,
        exec: Exec,
    ) -> Result<Vec<DetectionResult>> {
        exec.map(seqs, |s| self.detect(s, score_thresh, nms_iou))
            .into_iter()
            .collect()
    }

    pub fn evaluate(
        &self,
        seqs: &[FeatureSequence],
        iou_thresholds: &[f64],
        score_thresh: f64,
        nms_iou: f64,
        exec: Exec,
    ) -> Result<EvalReport, EvalFailure> {
        let results = self.detect_all(seqs, score_thresh, nms_iou, exec)?;
        Ok(evaluate_map(&results, seqs, iou_thresholds)?)
    }

    /// Attention on every frame of `seqs` against the ground-truth mask.
    pub fn lambda_stats(&self, seqs: &[FeatureSequence], exec: Exec) -> Result<LambdaStats> {
        let lams = exec
            .map(seqs, |s| self.segment.attention_forward(&s.features))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(lambda_stats(seqs.iter().zip(&lams).flat_map(|(s, l)| {
            l.values().iter().copied().zip(s.fg_mask.iter().copied())
        })))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalFailure {
    #[error(transparent)]
    Model(#[from] crate::error::ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
