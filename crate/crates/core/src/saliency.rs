//! Detection saliency: per-output-neuron attribution maps at tap layers.
//!
//! For a single raw output scalar, the map over a tap layer is the
//! channel-mean of `activation ⊙ gradient`, kept signed. Maps for many
//! images with an object under the same cell are then averaged.

use std::collections::HashMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::boxes::{CellAddress, Pathway};
use crate::data::{encode_png, is_border_cell, Sample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which channel of an anchor's output vector to explain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "class_id")]
pub enum NeuronKind {
    X,
    Y,
    W,
    H,
    C,
    P(usize),
}

impl NeuronKind {
    pub fn channel(self) -> usize {
        match self {
            NeuronKind::X => 0,
            NeuronKind::Y => 1,
            NeuronKind::W => 2,
            NeuronKind::H => 3,
            NeuronKind::C => 4,
            NeuronKind::P(k) => 5 + k,
        }
    }

    /// Parses `x|y|w|h|c|p`; `p` takes `class_id`.
    pub fn parse(s: &str, class_id: usize) -> Result<Self> {
        Ok(match s {
            "x" => NeuronKind::X,
            "y" => NeuronKind::Y,
            "w" => NeuronKind::W,
            "h" => NeuronKind::H,
            "c" => NeuronKind::C,
            "p" => NeuronKind::P(class_id),
            other => return Err(Error::Invalid(format!("unknown neuron kind `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeuronSelector {
    pub cell: CellAddress,
    pub neuron: NeuronKind,
}

impl NeuronSelector {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let s = config.grid_size(self.cell.pathway);
        if self.cell.row >= s || self.cell.col >= s || self.cell.anchor >= config.anchors_per_cell {
            return Err(Error::Invalid(format!("cell {:?} outside the {s}x{s} grid", self.cell)));
        }
        if let NeuronKind::P(k) = self.neuron {
            if k >= config.num_classes {
                return Err(Error::Invalid(format!("class id {k} out of range")));
            }
        }
        Ok(())
    }

    /// Flat index of the selected scalar in its pathway grid.
    fn flat_index(&self, config: &ModelConfig) -> usize {
        let s = config.grid_size(self.cell.pathway);
        let ch = self.cell.anchor * config.channels_per_anchor() + self.neuron.channel();
        (ch * s + self.cell.row) * s + self.cell.col
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub layer: String,
    /// `[H, W]` of the tap layer.
    pub shape: [usize; 2],
    pub selector: NeuronSelector,
    pub n_images: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_ids: Vec<String>,
}

impl SaliencyMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.shape[1] + col]
    }

    /// Mass-weighted mean position `(row, col)` of `|map|`, in tap cells.
    pub fn center_of_mass(&self) -> Result<(f64, f64)> {
        let (m, r, c) = self.moments();
        if m == 0.0 {
            return Err(Error::ZeroMap);
        }
        Ok((r / m, c / m))
    }

    /// Horizontal and vertical spatial variance of `|map|`, in tap cells².
    pub fn axis_variances(&self) -> Result<(f64, f64)> {
        let (cr, cc) = self.center_of_mass()?;
        let (mut m, mut vx, mut vy) = (0.0, 0.0, 0.0);
        for r in 0..self.shape[0] {
            for c in 0..self.shape[1] {
                let w = self.at(r, c).abs();
                m += w;
                vx += w * (c as f64 - cc).powi(2);
                vy += w * (r as f64 - cr).powi(2);
            }
        }
        Ok((vx / m, vy / m))
    }

    fn moments(&self) -> (f64, f64, f64) {
        let (mut m, mut sr, mut sc) = (0.0, 0.0, 0.0);
        for r in 0..self.shape[0] {
            for c in 0..self.shape[1] {
                let w = self.at(r, c).abs();
                m += w;
                sr += w * r as f64;
                sc += w * c as f64;
            }
        }
        (m, sr, sc)
    }
}

/// Root-mean-squared distance of `|map|` mass from its center of mass.
pub fn concentration(map: &SaliencyMap) -> Result<f64> {
    let (vx, vy) = map.axis_variances()?;
    Ok((vx + vy).sqrt())
}

/// Position of an output cell's center on a tap grid, in tap-cell index units.
pub fn project_cell(cell: &CellAddress, config: &ModelConfig, tap_shape: [usize; 2]) -> (f64, f64) {
    let stride = config.stride(cell.pathway) as f64;
    let tap_stride_y = config.input_size as f64 / tap_shape[0] as f64;
    let tap_stride_x = config.input_size as f64 / tap_shape[1] as f64;
    (
        (cell.row as f64 + 0.5) * stride / tap_stride_y - 0.5,
        (cell.col as f64 + 0.5) * stride / tap_stride_x - 0.5,
    )
}

/// Saliency of one output neuron for one image.
pub fn saliency_single(
    state: &ModelState,
    image: &Tensor,
    selector: &NeuronSelector,
    tap_layer: &str,
) -> Result<SaliencyMap> {
    saliency_single_scaled(state, image, selector, tap_layer, 1.0)
}

/// As [`saliency_single`], with backward seeded by `seed`.
pub fn saliency_single_scaled(
    state: &ModelState,
    image: &Tensor,
    selector: &NeuronSelector,
    tap_layer: &str,
    seed: f64,
) -> Result<SaliencyMap> {
    let config = &state.config;
    if !config.tap_layers.iter().any(|t| t == tap_layer) {
        return Err(Error::UnknownTap(tap_layer.to_string()));
    }
    selector.validate(config)?;
    let mut tape = Tape::new();
    // The image is the only differentiable leaf, so every activation is tracked
    // without accumulating parameter gradients.
    let img = tape.leaf(image.clone());
    let graph = state.forward_on_tape(&mut tape, img, false)?;
    let out = graph.outputs[selector.cell.pathway.index()];
    let scalar = tape.select(out, selector.flat_index(config))?;
    let grads = tape.backward_scaled(scalar, seed)?;
    let tap = graph.taps[tap_layer];
    let act = tape.value(tap);
    let (c, h, w) = act.dims3()?;
    let plane = h * w;
    let mut values = vec![0.0; plane];
    if let Some(g) = grads.raw(tap) {
        for ch in 0..c {
            let a = &act.data()[ch * plane..(ch + 1) * plane];
            let gr = &g[ch * plane..(ch + 1) * plane];
            for ((v, x), y) in values.iter_mut().zip(a).zip(gr) {
                *v += x * y;
            }
        }
        for v in &mut values {
            *v /= c as f64;
        }
    }
    Ok(SaliencyMap {
        layer: tap_layer.to_string(),
        shape: [h, w],
        selector: *selector,
        n_images: 1,
        values,
        image_ids: Vec::new(),
    })
}

/// Whether some annotation of `class_id` has its center inside the cell footprint.
fn sample_matches(sample: &Sample, class_id: usize, cell: &CellAddress, config: &ModelConfig) -> bool {
    let s = config.stride(cell.pathway) as f64;
    sample.annotations.iter().any(|a| {
        a.class_id == class_id
            && (a.bbox.cx / s).floor() == cell.col as f64
            && (a.bbox.cy / s).floor() == cell.row as f64
    })
}

/// Ids of images with a `class_id` instance centered in `cell`, in dataset order.
pub fn select_images_for_cell<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    class_id: usize,
    cell: &CellAddress,
    config: &ModelConfig,
) -> Vec<String> {
    samples
        .into_iter()
        .filter(|s| sample_matches(s, class_id, cell, config))
        .map(|s| s.id.clone())
        .collect()
}

/// Precomputed (class, pathway, row, col) → image positions lookup.
#[derive(Clone, Debug, Default)]
pub struct CellIndex {
    entries: HashMap<(usize, Pathway, usize, usize), Vec<usize>>,
    ids: Vec<String>,
}

impl CellIndex {
    pub fn build<'a>(samples: impl IntoIterator<Item = &'a Sample>, config: &ModelConfig) -> Self {
        let mut index = CellIndex::default();
        for (pos, sample) in samples.into_iter().enumerate() {
            index.ids.push(sample.id.clone());
            for a in &sample.annotations {
                for p in Pathway::ALL {
                    let s = config.stride(p) as f64;
                    let (col, row) = ((a.bbox.cx / s).floor(), (a.bbox.cy / s).floor());
                    if col < 0.0 || row < 0.0 {
                        continue;
                    }
                    let list = index
                        .entries
                        .entry((a.class_id, p, row as usize, col as usize))
                        .or_default();
                    if list.last() != Some(&pos) {
                        list.push(pos);
                    }
                }
            }
        }
        index
    }

    pub fn query(&self, class_id: usize, cell: &CellAddress) -> Vec<String> {
        self.entries
            .get(&(class_id, cell.pathway, cell.row, cell.col))
            .map(|v| v.iter().map(|&i| self.ids[i].clone()).collect())
            .unwrap_or_default()
    }
}

/// Outcome of [`saliency_averaged`].
#[derive(Clone, Debug, PartialEq)]
pub struct AveragedSaliency {
    pub map: SaliencyMap,
    /// How many fewer images than requested were available.
    pub shortfall: usize,
}

/// Mean of single-image maps over up to `n` images with a `class_id`
/// instance centered under the selected cell. Border cells are refused.
pub fn saliency_averaged<'a>(
    state: &ModelState,
    samples: impl IntoIterator<Item = &'a Sample> + Clone,
    class_id: usize,
    selector: &NeuronSelector,
    tap_layer: &str,
    n: usize,
) -> Result<AveragedSaliency> {
    let config = &state.config;
    selector.validate(config)?;
    let grid = config.grid_size(selector.cell.pathway);
    if is_border_cell(selector.cell.row, selector.cell.col, grid) {
        return Err(Error::BorderCell {
            row: selector.cell.row,
            col: selector.cell.col,
            grid,
        });
    }
    if n == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    let chosen: Vec<&Sample> = samples
        .into_iter()
        .filter(|s| sample_matches(s, class_id, &selector.cell, config))
        .take(n)
        .collect();
    if chosen.is_empty() {
        return Err(Error::NoQualifyingImages { class_id });
    }
    let images: Vec<Tensor> = chosen.iter().map(|s| s.tensor()).collect();
    let mut map = average_maps(state, &images, selector, tap_layer)?;
    map.image_ids = chosen.iter().map(|s| s.id.clone()).collect();
    let shortfall = n - chosen.len();
    if shortfall > 0 {
        log::warn!("saliency: only {} of {n} requested images qualify", chosen.len());
    }
    Ok(AveragedSaliency { map, shortfall })
}

/// Arithmetic mean of the single-image maps of `images`.
pub fn average_maps(
    state: &ModelState,
    images: &[Tensor],
    selector: &NeuronSelector,
    tap_layer: &str,
) -> Result<SaliencyMap> {
    let mut acc: Option<SaliencyMap> = None;
    for img in images {
        let m = saliency_single(state, img, selector, tap_layer)?;
        match &mut acc {
            None => acc = Some(m),
            Some(a) => {
                for (x, y) in a.values.iter_mut().zip(&m.values) {
                    *x += y;
                }
            }
        }
    }
    let mut map = acc.ok_or_else(|| Error::Invalid("no images to average".into()))?;
    let k = images.len() as f64;
    for v in &mut map.values {
        *v /= k;
    }
    map.n_images = images.len();
    Ok(map)
}

const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Viridis-style color of level `t ∈ [0, 255]`.
pub fn colormap(level: u8) -> [u8; 3] {
    let t = level as f64 / 255.0 * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f).round() as u8;
    }
    out
}

/// Heat map of `|map|`: the minimum maps to level 0 and the maximum to 255,
/// each tap cell drawn as a `scale × scale` block.
pub fn heatmap_image(map: &SaliencyMap, scale: u32) -> RgbImage {
    let mags: Vec<f64> = map.values.iter().map(|v| v.abs()).collect();
    let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let (h, w) = (map.shape[0] as u32, map.shape[1] as u32);
    let scale = scale.max(1);
    RgbImage::from_fn(w * scale, h * scale, |x, y| {
        let v = mags[(y / scale * w + x / scale) as usize];
        let level = if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        };
        image::Rgb(colormap(level))
    })
}

pub fn heatmap_png(map: &SaliencyMap, scale: u32) -> Result<Vec<u8>> {
    encode_png(&heatmap_image(map, scale))
}
