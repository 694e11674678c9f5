//! JSON payloads shared by the command line and the HTTP service.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use miniyolo::data::{Sample, ShapeKind};
use miniyolo::model::default_taps;
use miniyolo::postprocess::{decode_all, decode_slot, nms, DetectionRecord, NmsConfig};
use miniyolo::saliency::{heatmap_png, saliency_averaged, NeuronKind, NeuronSelector, SaliencyMap};
use miniyolo::{AnchorPrior, AnchorSet, CellAddress, Error, ForwardOutput, ModelConfig, ModelState, Pathway, Result};

/// Schema version carried by every response.
pub const SCHEMA_VERSION: u32 = 1;

pub fn class_name(class_id: usize) -> String {
    ShapeKind::from_class(class_id)
        .map(|k| k.name().to_string())
        .unwrap_or_else(|| format!("class_{class_id}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathwayInfo {
    pub pathway: Pathway,
    pub stride: usize,
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigPayload {
    pub v: u32,
    pub input_size: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub anchors_per_cell: usize,
    pub pathways: Vec<PathwayInfo>,
    pub anchors: Vec<AnchorPrior>,
    pub tap_layers: Vec<String>,
    pub neurons: Vec<String>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Largest accepted |dx| and |dy| for shift requests, pixels.
    pub max_shift: usize,
}

impl ConfigPayload {
    pub fn new(config: &ModelConfig, anchors: &AnchorSet, nms_cfg: &NmsConfig) -> Self {
        Self {
            v: SCHEMA_VERSION,
            input_size: config.input_size,
            num_classes: config.num_classes,
            class_names: (0..config.num_classes).map(class_name).collect(),
            anchors_per_cell: config.anchors_per_cell,
            pathways: Pathway::ALL
                .iter()
                .map(|&p| PathwayInfo {
                    pathway: p,
                    stride: config.stride(p),
                    grid: config.grid_size(p),
                })
                .collect(),
            anchors: anchors.all().to_vec(),
            tap_layers: config.tap_layers.clone(),
            neurons: ["x", "y", "w", "h", "c", "p"].map(String::from).to_vec(),
            conf_threshold: nms_cfg.conf_threshold,
            nms_iou: nms_cfg.iou_threshold,
            max_shift: config.input_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorPayload {
    pub anchor: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub class_probs: Vec<f64>,
    /// Raw `(tx, ty, tw, th, tc, class logits...)`.
    pub raw: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPayload {
    pub i: usize,
    pub j: usize,
    pub anchors: Vec<AnchorPayload>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPayload {
    pub pathway: Pathway,
    pub stride: usize,
    pub grid: usize,
    /// Row-major.
    pub cells: Vec<CellPayload>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferPayload {
    pub v: u32,
    pub pathways: Vec<GridPayload>,
    pub detections: Vec<DetectionRecord>,
}

impl InferPayload {
    pub fn new(out: &ForwardOutput, config: &ModelConfig, anchors: &AnchorSet, nms_cfg: &NmsConfig) -> Self {
        let cpa = config.channels_per_anchor();
        let pathways = out
            .pathways
            .iter()
            .map(|p| {
                let s = p.size();
                let mut cells = Vec::with_capacity(s * s);
                for i in 0..s {
                    for j in 0..s {
                        let anchors = (0..config.anchors_per_cell)
                            .map(|a| {
                                let cell = CellAddress {
                                    pathway: p.pathway,
                                    row: i,
                                    col: j,
                                    anchor: a,
                                };
                                let (det, class_probs) = decode_slot(p, config, anchors, cell);
                                AnchorPayload {
                                    anchor: a,
                                    cx: det.bbox.cx,
                                    cy: det.bbox.cy,
                                    w: det.bbox.w,
                                    h: det.bbox.h,
                                    confidence: det.confidence,
                                    class_probs,
                                    raw: (0..cpa).map(|ch| p.raw(cpa, a, ch, i, j)).collect(),
                                }
                            })
                            .collect();
                        cells.push(CellPayload { i, j, anchors });
                    }
                }
                GridPayload {
                    pathway: p.pathway,
                    stride: p.stride,
                    grid: s,
                    cells,
                }
            })
            .collect();
        let detections = nms(&decode_all(&out.pathways, config, anchors), nms_cfg)
            .iter()
            .map(DetectionRecord::from)
            .collect();
        Self {
            v: SCHEMA_VERSION,
            pathways,
            detections,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectPayload {
    pub v: u32,
    pub detections: Vec<DetectionRecord>,
}

fn default_tap() -> String {
    default_taps()[0].clone()
}

fn default_n() -> usize {
    15
}

/// Upper bound on images averaged per saliency request.
pub const MAX_SALIENCY_IMAGES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyRequest {
    pub class_id: usize,
    pub pathway: String,
    pub i: usize,
    pub j: usize,
    pub anchor: usize,
    pub neuron: String,
    #[serde(default = "default_tap")]
    pub tap_layer: String,
    #[serde(default = "default_n")]
    pub n: usize,
}

impl SaliencyRequest {
    /// Validated selector; range errors are reported as [`Error::Invalid`].
    pub fn selector(&self, config: &ModelConfig) -> Result<NeuronSelector> {
        if self.class_id >= config.num_classes {
            return Err(Error::Invalid(format!("class_id {} out of range", self.class_id)));
        }
        if !(1..=MAX_SALIENCY_IMAGES).contains(&self.n) {
            return Err(Error::Invalid(format!("n must lie in 1..={MAX_SALIENCY_IMAGES}")));
        }
        let pathway = Pathway::parse(&self.pathway)?;
        let sel = NeuronSelector {
            cell: CellAddress {
                pathway,
                row: self.i,
                col: self.j,
                anchor: self.anchor,
            },
            neuron: NeuronKind::parse(&self.neuron, self.class_id)?,
        };
        sel.validate(config)?;
        if !config.tap_layers.contains(&self.tap_layer) {
            return Err(Error::UnknownTap(self.tap_layer.clone()));
        }
        Ok(sel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyPayload {
    pub v: u32,
    pub map: SaliencyMap,
    pub shortfall: usize,
    pub png_base64: String,
}

/// Averaged saliency over the images of `samples` that qualify for the request.
pub fn saliency_payload<'a>(
    state: &ModelState,
    samples: impl IntoIterator<Item = &'a Sample> + Clone,
    req: &SaliencyRequest,
) -> Result<SaliencyPayload> {
    let sel = req.selector(&state.config)?;
    let res = saliency_averaged(state, samples, req.class_id, &sel, &req.tap_layer, req.n)?;
    let scale = (state.config.input_size / res.map.shape[1]).max(1) as u32;
    let png = heatmap_png(&res.map, scale)?;
    Ok(SaliencyPayload {
        v: SCHEMA_VERSION,
        map: res.map,
        shortfall: res.shortfall,
        png_base64: STANDARD.encode(png),
    })
}
