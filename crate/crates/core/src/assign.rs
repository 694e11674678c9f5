//! Training-target construction.
//!
//! For each annotation the cell under the box center is located in every
//! pathway. Of the resulting `3·A` (pathway, anchor) candidates, those whose
//! shape-only IOU with the box exceeds the threshold become positives; when
//! none does, the single best candidate is used instead.

use serde::{Deserialize, Serialize};

use crate::boxes::{encode, wh_iou, AnchorSet, BBox, CellAddress, Pathway};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;
pub const DEFAULT_SMOOTHING: f64 = 0.05;
/// Boxes narrower or shorter than this (pixels) are skipped.
pub const MIN_BOX_EXTENT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_id: usize,
}

/// Grid cell containing pixel coordinate `(x, y)` at `stride`, floor-indexed.
pub fn cell_of(x: f64, y: f64, stride: usize, grid: usize) -> (usize, usize) {
    let s = stride as f64;
    let col = ((x / s).floor().max(0.0) as usize).min(grid - 1);
    let row = ((y / s).floor().max(0.0) as usize).min(grid - 1);
    (row, col)
}

/// The `3·A` candidates for `bbox`, paired with their shape-only IOU, in
/// (pathway small→large, anchor) order.
pub fn candidates(bbox: &BBox, config: &ModelConfig, anchors: &AnchorSet) -> Vec<(CellAddress, f64)> {
    let mut out = Vec::with_capacity(3 * anchors.per_pathway());
    for p in Pathway::ALL {
        let (row, col) = cell_of(bbox.cx, bbox.cy, config.stride(p), config.grid_size(p));
        for prior in anchors.for_pathway(p) {
            let cell = CellAddress {
                pathway: p,
                row,
                col,
                anchor: prior.anchor_index,
            };
            out.push((cell, wh_iou(bbox, prior)));
        }
    }
    out
}

/// Positive (cell, anchor) slots for one annotation. Never empty.
pub fn select_positive_anchors(
    ann: &Annotation,
    config: &ModelConfig,
    anchors: &AnchorSet,
    threshold: f64,
) -> Vec<CellAddress> {
    let cands = candidates(&ann.bbox, config, anchors);
    let above: Vec<CellAddress> = cands.iter().filter(|(_, v)| *v > threshold).map(|(c, _)| *c).collect();
    if !above.is_empty() {
        return above;
    }
    // first maximum wins, which is the lowest (pathway, anchor) on ties
    let mut best = cands[0];
    for c in &cands[1..] {
        if c.1 > best.1 {
            best = *c;
        }
    }
    vec![best.0]
}

/// Targets and positive mask for one pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwayTarget {
    /// `[A·(5+C), S, S]`
    pub values: Tensor,
    /// `[A, S, S]`, 1 at positive anchors.
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetTensor {
    pub pathways: Vec<PathwayTarget>,
    /// Annotations dropped for having a degenerate box.
    pub skipped: usize,
}

impl TargetTensor {
    pub fn zeros(config: &ModelConfig) -> Self {
        let a = config.anchors_per_cell;
        Self {
            pathways: Pathway::ALL
                .iter()
                .map(|&p| {
                    let s = config.grid_size(p);
                    PathwayTarget {
                        values: Tensor::zeros(&[config.output_channels(), s, s]),
                        mask: Tensor::zeros(&[a, s, s]),
                    }
                })
                .collect(),
            skipped: 0,
        }
    }

    pub fn positives(&self) -> usize {
        self.pathways.iter().map(|p| p.mask.sum() as usize).sum()
    }

    pub fn is_positive(&self, cell: CellAddress) -> bool {
        self.pathways[cell.pathway.index()]
            .mask
            .at3(cell.anchor, cell.row, cell.col)
            == 1.0
    }
}

/// Soft one-hot class distribution.
pub fn soft_one_hot(class_id: usize, num_classes: usize, smoothing: f64) -> Vec<f64> {
    if num_classes == 1 {
        return vec![1.0];
    }
    let off = smoothing / (num_classes - 1) as f64;
    (0..num_classes)
        .map(|c| if c == class_id { 1.0 - smoothing } else { off })
        .collect()
}

pub fn build_targets(
    annotations: &[Annotation],
    config: &ModelConfig,
    anchors: &AnchorSet,
    smoothing: f64,
) -> Result<TargetTensor> {
    build_targets_with(annotations, config, anchors, DEFAULT_IOU_THRESHOLD, smoothing)
}

pub fn build_targets_with(
    annotations: &[Annotation],
    config: &ModelConfig,
    anchors: &AnchorSet,
    threshold: f64,
    smoothing: f64,
) -> Result<TargetTensor> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Invalid(format!("smoothing {smoothing} outside [0, 1)")));
    }
    let mut targets = TargetTensor::zeros(config);
    let cpa = config.channels_per_anchor();
    let mut order: Vec<&Annotation> = Vec::with_capacity(annotations.len());
    for ann in annotations {
        if ann.class_id >= config.num_classes {
            return Err(Error::Invalid(format!(
                "class id {} out of range for {} classes",
                ann.class_id, config.num_classes
            )));
        }
        if !(ann.bbox.w >= MIN_BOX_EXTENT && ann.bbox.h >= MIN_BOX_EXTENT) || !ann.bbox.is_valid() {
            targets.skipped += 1;
            continue;
        }
        order.push(ann);
    }
    if targets.skipped > 0 {
        log::warn!("skipped {} degenerate annotation(s)", targets.skipped);
    }
    // Ascending area: on a contested slot the larger box is written last.
    order.sort_by(|a, b| a.bbox.area().total_cmp(&b.bbox.area()));
    for ann in order {
        let classes = soft_one_hot(ann.class_id, config.num_classes, smoothing);
        for cell in select_positive_anchors(ann, config, anchors, threshold) {
            let p = cell.pathway;
            let coords = encode(&ann.bbox, cell, anchors.get(p, cell.anchor), config.stride(p))?;
            let t = &mut targets.pathways[p.index()];
            let s = config.grid_size(p);
            let plane = s * s;
            let at = cell.row * s + cell.col;
            let vals = t.values.data_mut();
            let base = cell.anchor * cpa;
            for (k, v) in coords.iter().enumerate() {
                vals[(base + k) * plane + at] = *v;
            }
            vals[(base + 4) * plane + at] = 1.0;
            for (k, v) in classes.iter().enumerate() {
                vals[(base + 5 + k) * plane + at] = *v;
            }
            t.mask.data_mut()[cell.anchor * plane + at] = 1.0;
        }
    }
    Ok(targets)
}
