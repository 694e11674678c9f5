//! From raw pathway grids to final detections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{decode, iou, AnchorSet, BBox, CellAddress, Pathway};
use crate::model::{ModelConfig, PathwayOutput};
use crate::tape::sigmoid;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
/// Box IOU a cell's prediction must exceed to count toward the active-cell census.
pub const CENSUS_IOU: f64 = 0.5;

/// Total number of (cell, anchor) proposals: `Σ S_p² · A`.
pub fn count_proposals(config: &ModelConfig) -> usize {
    count_for_grids(&config.grid_sizes(), config.anchors_per_cell)
}

pub fn count_for_grids(grids: &[usize], anchors_per_cell: usize) -> usize {
    grids.iter().map(|s| s * s).sum::<usize>() * anchors_per_cell
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub class_prob: f64,
    pub confidence: f64,
    pub source: CellAddress,
}

impl Detection {
    pub fn score(&self, mode: ScoreMode) -> f64 {
        match mode {
            ScoreMode::ConfidenceTimesClass => self.confidence * self.class_prob,
            ScoreMode::Confidence => self.confidence,
        }
    }
}

/// Wire form of a [`Detection`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub class_prob: f64,
    pub confidence: f64,
    pub pathway: Pathway,
    pub i: usize,
    pub j: usize,
    pub anchor: usize,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            w: d.bbox.w,
            h: d.bbox.h,
            class_id: d.class_id,
            class_prob: d.class_prob,
            confidence: d.confidence,
            pathway: d.source.pathway,
            i: d.source.row,
            j: d.source.col,
            anchor: d.source.anchor,
        }
    }
}

/// Decoded prediction of one (cell, anchor) slot.
pub fn decode_slot(
    out: &PathwayOutput,
    config: &ModelConfig,
    anchors: &AnchorSet,
    cell: CellAddress,
) -> (Detection, Vec<f64>) {
    let cpa = config.channels_per_anchor();
    let (r, c, a) = (cell.row, cell.col, cell.anchor);
    let raw = [0, 1, 2, 3].map(|k| out.raw(cpa, a, k, r, c));
    let bbox = decode(raw, cell, anchors.get(cell.pathway, a), out.stride);
    let probs: Vec<f64> = (0..config.num_classes)
        .map(|k| sigmoid(out.raw(cpa, a, 5 + k, r, c)))
        .collect();
    let mut class_id = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p > probs[class_id] {
            class_id = k;
        }
    }
    (
        Detection {
            bbox,
            class_id,
            class_prob: probs[class_id],
            confidence: sigmoid(out.raw(cpa, a, 4, r, c)),
            source: cell,
        },
        probs,
    )
}

/// One detection per (pathway, cell, anchor), ordered by pathway, then
/// row-major cell, then anchor.
pub fn decode_all(outputs: &[PathwayOutput], config: &ModelConfig, anchors: &AnchorSet) -> Vec<Detection> {
    let mut dets = Vec::with_capacity(count_proposals(config));
    for out in outputs {
        let s = out.size();
        for row in 0..s {
            for col in 0..s {
                for anchor in 0..config.anchors_per_cell {
                    let cell = CellAddress {
                        pathway: out.pathway,
                        row,
                        col,
                        anchor,
                    };
                    dets.push(decode_slot(out, config, anchors, cell).0);
                }
            }
        }
    }
    dets
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    ConfidenceTimesClass,
    Confidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub score: ScoreMode,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            iou_threshold: DEFAULT_NMS_IOU,
            score: ScoreMode::ConfidenceTimesClass,
        }
    }
}

/// Greedy per-class non-maximum suppression.
///
/// Detections scoring below the threshold are dropped; the rest are visited
/// by descending confidence and kept unless they overlap an already kept box
/// of the same class by more than `iou_threshold`.
pub fn nms(detections: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut cands: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.score(cfg.score) >= cfg.conf_threshold)
        .collect();
    cands.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept_by_class: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
    let mut kept = Vec::new();
    for d in cands {
        let same = kept_by_class.entry(d.class_id).or_default();
        if same.iter().all(|k| iou(k, &d.bbox) <= cfg.iou_threshold) {
            same.push(d.bbox);
            kept.push(*d);
        }
    }
    kept
}

/// Number of distinct cells whose most confident anchor exceeds
/// `conf_threshold` and overlaps `gt` by more than [`CENSUS_IOU`].
pub fn active_cell_census(detections: &[Detection], gt: &BBox, conf_threshold: f64) -> usize {
    let mut best: BTreeMap<(Pathway, usize, usize), &Detection> = BTreeMap::new();
    for d in detections {
        let key = (d.source.pathway, d.source.row, d.source.col);
        match best.get(&key) {
            Some(b) if b.confidence >= d.confidence => {}
            _ => {
                best.insert(key, d);
            }
        }
    }
    best.values()
        .filter(|d| d.confidence > conf_threshold && iou(&d.bbox, gt) > CENSUS_IOU)
        .count()
}
