//! Detection loss: squared error on raw box logits at positive anchors, binary
//! cross-entropy on confidence everywhere, and on class logits at positives.

use serde::{Deserialize, Serialize};

use crate::assign::TargetTensor;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub coord: f64,
    pub conf_pos: f64,
    pub conf_neg: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coord: 5.0,
            conf_pos: 1.0,
            conf_neg: 0.5,
            class: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("coord", self.coord),
            ("conf_pos", self.conf_pos),
            ("conf_neg", self.conf_neg),
            ("class", self.class),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("loss weight {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub coord: f64,
    pub conf_pos: f64,
    pub conf_neg: f64,
    pub class: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.coord += other.coord;
        self.conf_pos += other.conf_pos;
        self.conf_neg += other.conf_neg;
        self.class += other.class;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * k,
            coord: self.coord * k,
            conf_pos: self.conf_pos * k,
            conf_neg: self.conf_neg * k,
            class: self.class * k,
        }
    }
}

pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Records the loss of the three raw pathway grids against `targets`.
pub fn yolo_loss(
    tape: &mut Tape,
    outputs: &[Var; 3],
    targets: &TargetTensor,
    config: &ModelConfig,
    weights: &LossWeights,
) -> Result<LossVars> {
    let cpa = config.channels_per_anchor();
    let a_count = config.anchors_per_cell;
    let mut terms: Vec<Var> = Vec::new();
    let mut breakdown = LossBreakdown::default();
    for (out, tgt) in outputs.iter().zip(&targets.pathways) {
        let shape = tape.value(*out).shape().to_vec();
        if shape != tgt.values.shape() || tgt.mask.shape() != [a_count, shape[1], shape[2]] {
            return Err(Error::shape(
                "yolo_loss",
                format!(
                    "output {shape:?} vs target {:?} / mask {:?}",
                    tgt.values.shape(),
                    tgt.mask.shape()
                ),
            ));
        }
        let plane = shape[1] * shape[2];
        let n = shape.iter().product::<usize>();
        let mut w_coord = vec![0.0; n];
        let mut w_pos = vec![0.0; n];
        let mut w_neg = vec![0.0; n];
        let mut w_class = vec![0.0; n];
        let mask = tgt.mask.data();
        for a in 0..a_count {
            for at in 0..plane {
                let base = a * cpa * plane + at;
                if mask[a * plane + at] > 0.0 {
                    for k in 0..4 {
                        w_coord[base + k * plane] = weights.coord;
                    }
                    w_pos[base + 4 * plane] = weights.conf_pos;
                    for k in 5..cpa {
                        w_class[base + k * plane] = weights.class;
                    }
                } else {
                    w_neg[base + 4 * plane] = weights.conf_neg;
                }
            }
        }
        let t = tgt.values.data();
        let coord = tape.weighted_sq_err(*out, t.to_vec(), w_coord)?;
        let pos = tape.weighted_bce_logits(*out, t.to_vec(), w_pos)?;
        let neg = tape.weighted_bce_logits(*out, t.to_vec(), w_neg)?;
        let class = tape.weighted_bce_logits(*out, t.to_vec(), w_class)?;
        breakdown.coord += tape.value(coord).data()[0];
        breakdown.conf_pos += tape.value(pos).data()[0];
        breakdown.conf_neg += tape.value(neg).data()[0];
        breakdown.class += tape.value(class).data()[0];
        terms.extend([coord, pos, neg, class]);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    breakdown.total = tape.value(total).data()[0];
    Ok(LossVars { total, breakdown })
}
