//! Loss-term ablation: the same data, seed and schedule trained three
//! times with progressively more stage-2 terms.

use serde::Serialize;

use crate::detector::{DEFAULT_IOU_THRESHOLDS, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH};
use crate::exec::Exec;
use crate::model::GafModels;
use crate::synth::FeatureSequence;
use crate::train::{train_alternating, Objective, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    #[serde(rename = "L_ai")]
    Basic,
    #[serde(rename = "+L_n-ai")]
    NonAction,
    #[serde(rename = "+L_R")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Basic, Variant::NonAction, Variant::Full];

    pub fn objective(self) -> Objective {
        match self {
            Variant::Basic => Objective::BASIC,
            Variant::NonAction => Objective::NON_ACTION,
            Variant::Full => Objective::FULL,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Basic => "L_ai",
            Variant::NonAction => "+L_n-ai",
            Variant::Full => "+L_R",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// mAP at each of [`AblationTable::thresholds`].
    pub map: Vec<f64>,
    pub avg_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub thresholds: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn map_at(&self, variant: Variant, thr: f64) -> Option<f64> {
        let i = self.thresholds.iter().position(|&t| (t - thr).abs() < 1e-12)?;
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.map[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for t in &self.thresholds {
            out.push_str(&format!(",map@{t}"));
        }
        out.push_str(",avg_map\n");
        for r in &self.rows {
            out.push_str(r.variant.label());
            for m in &r.map {
                out.push_str(&format!(",{m:.6}"));
            }
            out.push_str(&format!(",{:.6}\n", r.avg_map));
        }
        out
    }
}

/// Trains every variant from the same initialization and scores it on
/// `eval`. Variants run through `exec`, so they may train concurrently.
pub fn ablate(
    cfg: &TrainConfig,
    train: &[FeatureSequence],
    eval: &[FeatureSequence],
    num_classes: usize,
    exec: Exec,
) -> Result<AblationTable, TrainError> {
    cfg.validate()?;
    let d = train
        .first()
        .map(|s| s.dim())
        .ok_or_else(|| TrainError::Config("ablation needs training data".into()))?;
    let thresholds = DEFAULT_IOU_THRESHOLDS.to_vec();
    let rows = exec.map(&Variant::ALL, |&variant| -> Result<AblationRow, TrainError> {
        let mut models = GafModels::with_defaults(d, num_classes, cfg.seed);
        // nested work stays sequential so variants do not oversubscribe
        train_alternating(&mut models, train, eval, cfg, variant.objective(), Exec::Sequential)?;
        let report = models.evaluate(eval, &thresholds, DEFAULT_SCORE_THRESH, DEFAULT_NMS_IOU, Exec::Sequential)?;
        Ok(AblationRow {
            variant,
            map: report.map.clone(),
            avg_map: report.avg_map,
        })
    });
    Ok(AblationTable {
        thresholds,
        rows: rows.into_iter().collect::<Result<_, _>>()?,
    })
}
