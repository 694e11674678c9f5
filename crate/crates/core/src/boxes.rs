//! Box geometry: IOU, anchor priors, and the raw-offset parameterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::sigmoid;

/// Cell offsets are kept inside `[EPS, 1 − EPS]` so that logits stay finite and
/// decoded centers stay strictly inside their cell.
pub const OFFSET_EPS: f64 = 1e-4;

/// Raw width/height logits are clamped to this magnitude before `exp`.
pub const MAX_SCALE_LOGIT: f64 = 10.0;

/// Axis-aligned box in input-image pixels, center-size form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    /// Clip to `[0, width] × [0, height]`, keeping center-size form.
    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x0().clamp(0.0, width);
        let x1 = self.x1().clamp(0.0, width);
        let y0 = self.y0().clamp(0.0, height);
        let y1 = self.y1().clamp(0.0, height);
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }
}

/// Head output branch, ordered from the finest grid to the coarsest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Small,
    Medium,
    Large,
}

impl Pathway {
    pub const ALL: [Pathway; 3] = [Pathway::Small, Pathway::Medium, Pathway::Large];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Pathway::Small => "small",
            Pathway::Medium => "medium",
            Pathway::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Result<Pathway> {
        match s {
            "small" => Ok(Pathway::Small),
            "medium" => Ok(Pathway::Medium),
            "large" => Ok(Pathway::Large),
            other => Err(Error::Invalid(format!("unknown pathway `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrior {
    pub pathway: Pathway,
    pub anchor_index: usize,
    pub pw: f64,
    pub ph: f64,
}

impl AnchorPrior {
    pub fn area(&self) -> f64 {
        self.pw * self.ph
    }
}

/// One (pathway, row, col, anchor) slot of the head output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellAddress {
    pub pathway: Pathway,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
}

/// All anchor priors of a model, `A` per pathway, ascending by area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    priors: Vec<AnchorPrior>,
    per_pathway: usize,
}

impl AnchorSet {
    /// Assign extents (any order) to pathways: sorted by area, the smallest `A`
    /// go to the small pathway and so on.
    pub fn from_extents(extents: &[(f64, f64)], per_pathway: usize) -> Result<Self> {
        if per_pathway == 0 || extents.len() != 3 * per_pathway {
            return Err(Error::Invalid(format!(
                "need exactly {} anchor extents, got {}",
                3 * per_pathway,
                extents.len()
            )));
        }
        if extents.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::Invalid("anchor extents must be positive".into()));
        }
        let mut sorted = extents.to_vec();
        sorted.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        let priors = sorted
            .iter()
            .enumerate()
            .map(|(n, &(pw, ph))| AnchorPrior {
                pathway: Pathway::ALL[n / per_pathway],
                anchor_index: n % per_pathway,
                pw,
                ph,
            })
            .collect();
        Ok(Self { priors, per_pathway })
    }

    pub fn per_pathway(&self) -> usize {
        self.per_pathway
    }

    pub fn all(&self) -> &[AnchorPrior] {
        &self.priors
    }

    pub fn get(&self, pathway: Pathway, anchor: usize) -> &AnchorPrior {
        &self.priors[pathway.index() * self.per_pathway + anchor]
    }

    pub fn for_pathway(&self, pathway: Pathway) -> &[AnchorPrior] {
        let s = pathway.index() * self.per_pathway;
        &self.priors[s..s + self.per_pathway]
    }

    /// Checks the ordering invariant after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.per_pathway == 0 || self.priors.len() != 3 * self.per_pathway {
            return Err(Error::Invalid("anchor set has wrong prior count".into()));
        }
        for (n, p) in self.priors.iter().enumerate() {
            if p.pathway != Pathway::ALL[n / self.per_pathway] || p.anchor_index != n % self.per_pathway {
                return Err(Error::Invalid(format!("anchor prior {n} is mislabelled")));
            }
            if !(p.pw > 0.0 && p.ph > 0.0) {
                return Err(Error::Invalid(format!("anchor prior {n} has non-positive extent")));
            }
        }
        if self.priors.windows(2).any(|w| w[0].area() > w[1].area()) {
            return Err(Error::Invalid("anchor priors are not sorted by area".into()));
        }
        Ok(())
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// IOU of two extents placed on a common center.
pub fn wh_iou_extents(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

/// Shape-only IOU between a box and an anchor prior.
pub fn wh_iou(gt: &BBox, prior: &AnchorPrior) -> f64 {
    wh_iou_extents(gt.w, gt.h, prior.pw, prior.ph)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Map raw `(tx, ty, tw, th)` at a cell to an image-space box.
pub fn decode(raw: [f64; 4], cell: CellAddress, prior: &AnchorPrior, stride: usize) -> BBox {
    let s = stride as f64;
    let ox = sigmoid(raw[0]).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
    let oy = sigmoid(raw[1]).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
    let tw = raw[2].clamp(-MAX_SCALE_LOGIT, MAX_SCALE_LOGIT);
    let th = raw[3].clamp(-MAX_SCALE_LOGIT, MAX_SCALE_LOGIT);
    BBox {
        cx: (ox + cell.col as f64) * s,
        cy: (oy + cell.row as f64) * s,
        w: prior.pw * tw.exp(),
        h: prior.ph * th.exp(),
    }
}

/// Inverse of [`decode`] for a box whose center lies in `cell`.
pub fn encode(bx: &BBox, cell: CellAddress, prior: &AnchorPrior, stride: usize) -> Result<[f64; 4]> {
    let s = stride as f64;
    let (fx, fy) = (bx.cx / s, bx.cy / s);
    if !bx.is_valid() || fx.floor() != cell.col as f64 || fy.floor() != cell.row as f64 {
        return Err(Error::CenterOutsideCell {
            cx: bx.cx,
            cy: bx.cy,
            row: cell.row,
            col: cell.col,
            stride,
        });
    }
    let ox = (fx - cell.col as f64).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
    let oy = (fy - cell.row as f64).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
    Ok([logit(ox), logit(oy), (bx.w / prior.pw).ln(), (bx.h / prior.ph).ln()])
}

/// k-means over box extents with `1 − wh_iou` as the distance.
///
/// Deterministic: centroids start at area quantiles and Lloyd iterations run
/// until assignments stop changing. Returns `k` extents sorted by area.
pub fn kmeans_extents(extents: &[(f64, f64)], k: usize, max_iter: usize) -> Result<Vec<(f64, f64)>> {
    if k == 0 || extents.len() < k {
        return Err(Error::Invalid(format!(
            "k-means needs at least k = {k} extents, got {}",
            extents.len()
        )));
    }
    let mut sorted = extents.to_vec();
    sorted.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    let n = sorted.len();
    let mut centroids: Vec<(f64, f64)> = (0..k).map(|i| sorted[(2 * i + 1) * n / (2 * k)]).collect();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (slot, &(w, h)) in assignment.iter_mut().zip(&sorted) {
            let best = (0..k)
                .max_by(|&a, &b| {
                    let ia = wh_iou_extents(w, h, centroids[a].0, centroids[a].1);
                    let ib = wh_iou_extents(w, h, centroids[b].0, centroids[b].1);
                    ia.total_cmp(&ib).then(b.cmp(&a))
                })
                .unwrap_or(0);
            if *slot != best {
                *slot = best;
                changed = true;
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&(f64, f64)> = sorted
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|(e, _)| e)
                .collect();
            if !members.is_empty() {
                let m = members.len() as f64;
                *centroid = (
                    members.iter().map(|e| e.0).sum::<f64>() / m,
                    members.iter().map(|e| e.1).sum::<f64>() / m,
                );
            }
        }
        if !changed {
            break;
        }
    }
    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Ok(centroids)
}
