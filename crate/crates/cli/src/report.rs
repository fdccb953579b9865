//! Metric report JSON: what one (config, seed) evaluation produced.

use serde::{Deserialize, Serialize};

use noisyseg_core::metrics::{AggregateMetrics, MetricReport};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossConfigJson {
    pub bce: f64,
    pub sce: f64,
    pub rce: f64,
    pub normalize: bool,
    /// Per-term override for the cross-entropy terms; `None` follows
    /// `normalize`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalize_active: Option<bool>,
}

impl LossConfigJson {
    pub fn to_core(&self) -> noisyseg_core::losses::LossConfig {
        let mut config =
            noisyseg_core::losses::LossConfig::new(self.bce, self.sce, self.rce, self.normalize);
        config.normalize_active = self.normalize_active;
        config
    }
}

/// Provenance block at the top of a report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfigJson {
    pub row: String,
    pub loss: LossConfigJson,
    /// "bin" or "soft".
    pub label_mode: String,
    pub seed: u64,
    pub epochs: u32,
    pub dataset: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VolumeMetricsJson {
    pub id: String,
    pub dice: f64,
    pub pixel_iou: f64,
    pub gt_instances: u64,
    pub pred_instances: u64,
    pub det_true_pos: u64,
    pub det_false_pos: u64,
    pub det_false_neg: u64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AggregateJson {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean matched-instance IoU at threshold 0.5.
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub dice: f64,
}

impl From<AggregateMetrics> for AggregateJson {
    fn from(a: AggregateMetrics) -> Self {
        Self {
            ap50: a.ap50,
            ap75: a.ap75,
            iou: a.iou,
            recall: a.recall,
            precision: a.precision,
            dice: a.dice,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportJson {
    pub config: RunConfigJson,
    pub per_volume: Vec<VolumeMetricsJson>,
    pub aggregate: AggregateJson,
}

impl ReportJson {
    pub fn from_core(config: RunConfigJson, report: &MetricReport) -> Self {
        Self {
            config,
            per_volume: report
                .per_volume
                .iter()
                .map(|v| VolumeMetricsJson {
                    id: v.id.clone(),
                    dice: v.dice,
                    pixel_iou: v.pixel_iou,
                    gt_instances: v.gt_instances,
                    pred_instances: v.pred_instances,
                    det_true_pos: v.det_true_pos,
                    det_false_pos: v.det_false_pos,
                    det_false_neg: v.det_false_neg,
                })
                .collect(),
            aggregate: report.aggregate.into(),
        }
    }
}
