//! Evaluation helpers: detection, detection rate, shift sweeps, and
//! cell-conditioned image sets.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{candidates, Annotation};
use crate::boxes::{iou, kmeans_extents, AnchorSet, CellAddress, Pathway};
use crate::data::{
    image_seed, image_to_tensor, placement_at_cell, render_rgb, shift_image, single_object_scene, GeneratorConfig,
    Sample, ShapeKind, MIN_SHAPE_SIZE,
};
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, ModelConfig, ModelState};
use crate::postprocess::{decode_all, nms, Detection, NmsConfig};
use crate::tensor::Tensor;

/// IOU a detection needs with its ground truth to count as a hit.
pub const MATCH_IOU: f64 = 0.5;

/// Anchor priors from k-means over box extents, `3·per_pathway` clusters.
pub fn priors_from_extents(extents: &[(f64, f64)], per_pathway: usize) -> Result<AnchorSet> {
    let centers = kmeans_extents(extents, 3 * per_pathway, 100)?;
    AnchorSet::from_extents(&centers, per_pathway)
}

/// Forward, decode every slot, then NMS.
pub fn detect(state: &ModelState, anchors: &AnchorSet, image: &Tensor, cfg: &NmsConfig) -> Result<Vec<Detection>> {
    let out = state.forward(image)?;
    Ok(nms(&decode_all(&out.pathways, &state.config, anchors), cfg))
}

pub fn matches_annotation(det: &Detection, ann: &Annotation) -> bool {
    det.class_id == ann.class_id && iou(&det.bbox, &ann.bbox) >= MATCH_IOU
}

/// Fraction of annotations matched by at least one surviving detection.
pub fn detection_rate(state: &ModelState, anchors: &AnchorSet, samples: &[Sample], cfg: &NmsConfig) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let dets = detect(state, anchors, &s.tensor(), cfg)?;
        for ann in &s.annotations {
            total += 1;
            if dets.iter().any(|d| matches_annotation(d, ann)) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no annotations to evaluate".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// The (pathway, cell, anchor) whose prior best matches the annotation's shape.
pub fn best_slot(ann: &Annotation, config: &ModelConfig, anchors: &AnchorSet) -> CellAddress {
    let cands = candidates(&ann.bbox, config, anchors);
    let mut best = cands[0];
    for c in &cands[1..] {
        if c.1 > best.1 {
            best = *c;
        }
    }
    best.0
}

/// Cell with the highest confidence (over anchors) on one pathway.
pub fn confidence_argmax(out: &ForwardOutput, config: &ModelConfig, pathway: Pathway) -> (usize, usize, f64) {
    let p = &out.pathways[pathway.index()];
    let cpa = config.channels_per_anchor();
    let s = p.size();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for row in 0..s {
        for col in 0..s {
            for a in 0..config.anchors_per_cell {
                let v = p.raw(cpa, a, 4, row, col);
                if v > best.2 {
                    best = (row, col, v);
                }
            }
        }
    }
    (best.0, best.1, crate::tape::sigmoid(best.2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Axis> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            _ => Err(Error::Invalid(format!("axis must be x or y, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub shift: i64,
    pub row: usize,
    pub col: usize,
    pub confidence: f64,
}

/// Argmax-confidence cell of `pathway` for each shifted copy of `img`.
pub fn shift_sweep(
    state: &ModelState,
    img: &RgbImage,
    pathway: Pathway,
    axis: Axis,
    shifts: &[i64],
) -> Result<Vec<ShiftRow>> {
    shifts
        .iter()
        .map(|&k| {
            let (dx, dy) = match axis {
                Axis::X => (k, 0),
                Axis::Y => (0, k),
            };
            let out = state.forward(&image_to_tensor(&shift_image(img, dx, dy)))?;
            let (row, col, confidence) = confidence_argmax(&out, &state.config, pathway);
            Ok(ShiftRow {
                shift: k,
                row,
                col,
                confidence,
            })
        })
        .collect()
}

/// `n` single-object images of `kind` whose object is centered in `cell` and
/// sized after the cell's anchor prior, scaled by up to `size_jitter` (relative)
/// per axis.
#[allow(clippy::too_many_arguments)]
pub fn cell_conditioned_samples(
    seed: u64,
    config: &ModelConfig,
    anchors: &AnchorSet,
    gen: &GeneratorConfig,
    kind: ShapeKind,
    cell: CellAddress,
    n: usize,
    size_jitter: f64,
) -> Result<Vec<Sample>> {
    let prior = *anchors.get(cell.pathway, cell.anchor);
    let limit = gen.image_size as f64;
    (0..n)
        .map(|idx| {
            let label = format!(
                "cell_{}_{}_{}_{}",
                cell.pathway.name(),
                cell.row,
                cell.col,
                kind.class_id()
            );
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, &label, idx));
            let center = placement_at_cell(&cell, config, 0.3, &mut rng)?;
            let mut side = |p: f64, c: f64| {
                let f = if size_jitter > 0.0 {
                    rng.random_range(1.0 - size_jitter..=1.0 + size_jitter)
                } else {
                    1.0
                };
                // keep the shape inside the image
                (p * f).max(MIN_SHAPE_SIZE).min(2.0 * c.min(limit - c))
            };
            let w = side(prior.pw, center.0);
            let h = side(prior.ph, center.1);
            let spec = single_object_scene(rng.random(), gen, kind, center, (w, h));
            let (image, annotations) = render_rgb(&spec)?;
            Ok(Sample {
                id: format!("{label}_{idx:03}"),
                image,
                annotations,
            })
        })
        .collect()
}
