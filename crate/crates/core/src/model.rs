//! The mini detector: a strided-conv backbone with three taps feeding a
//! three-pathway head.
//!
//! Wiring (every hidden conv is followed by leaky-ReLU, output convs are linear):
//!
//! ```text
//! image ─ stem (stride-2 convs) ─ backbone.s8 ─ down ─ backbone.s16 ─ down ─ backbone.s32
//!                                    │                     │                     │
//!          fusion ◄─ cat ◄─ up ◄─ lat16 ◄─ neck.s16 ◄─ cat ◄─ up ◄─ lat32 ◄──────┤
//!            │                          │                                        │
//!   small.neck ─ small.head ─ small.out │                                        │
//!            └─ down ─ cat(neck.s16) ─ medium.neck ─ medium.head ─ medium.out    │
//!                                           └─ down ─ cat(backbone.s32) ─ large.neck ─ large.head ─ large.out
//! ```
//!
//! The small pathway therefore sees the top-down fusion of all three backbone
//! taps, and the medium and large pathways see progressively re-downsampled
//! versions of it.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::Pathway;
use crate::error::{Error, Result};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// Initial bias of every confidence channel; σ(−4) ≈ 0.018.
pub const CONFIDENCE_BIAS_INIT: f64 = -4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelWidths {
    /// One entry per stride-2 stem conv; `2^len` must equal the finest stride.
    pub stem: Vec<usize>,
    /// Backbone tap widths at the three pathway strides.
    pub stages: [usize; 3],
    /// Neck/head widths of the small, medium and large pathways.
    pub heads: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub anchors_per_cell: usize,
    pub pathway_strides: [usize; 3],
    pub widths: ChannelWidths,
    pub leaky_alpha: f64,
    pub tap_layers: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 96,
            num_classes: 3,
            anchors_per_cell: 3,
            pathway_strides: [8, 16, 32],
            widths: ChannelWidths {
                stem: vec![8, 16, 24],
                stages: [32, 48, 64],
                heads: [24, 48, 64],
            },
            leaky_alpha: Activation::DEFAULT_LEAK,
            tap_layers: default_taps(),
        }
    }
}

/// The pre-head fusion layer plus the last three convs of every pathway.
pub fn default_taps() -> Vec<String> {
    let mut taps = vec!["fusion".to_string()];
    for p in Pathway::ALL {
        for part in ["neck", "head", "out"] {
            taps.push(format!("{}.{part}", p.name()));
        }
    }
    taps
}

/// Every layer name whose output may be tapped.
pub fn tappable_layers() -> Vec<String> {
    let mut names = vec![
        "backbone.s8".to_string(),
        "backbone.s16".to_string(),
        "backbone.s32".to_string(),
        "neck.s16".to_string(),
    ];
    names.extend(default_taps());
    names
}

impl ModelConfig {
    /// Configuration at the scale of the full-size detector (416 px, 80 classes).
    pub fn paper_scale() -> Self {
        Self {
            input_size: 416,
            num_classes: 80,
            ..Self::default()
        }
    }

    pub fn channels_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn output_channels(&self) -> usize {
        self.anchors_per_cell * self.channels_per_anchor()
    }

    pub fn stride(&self, p: Pathway) -> usize {
        self.pathway_strides[p.index()]
    }

    pub fn grid_size(&self, p: Pathway) -> usize {
        self.input_size / self.stride(p)
    }

    pub fn grid_sizes(&self) -> [usize; 3] {
        Pathway::ALL.map(|p| self.grid_size(p))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.anchors_per_cell == 0 {
            return fail("anchors_per_cell must be positive".into());
        }
        if self.input_size == 0 {
            return fail("input_size must be positive".into());
        }
        for &s in &self.pathway_strides {
            if s == 0 || !self.input_size.is_multiple_of(s) {
                return fail(format!("input_size {} not divisible by stride {s}", self.input_size));
            }
        }
        let [s0, s1, s2] = self.pathway_strides;
        if !(s0 < s1 && s1 < s2) {
            return fail("grid sizes must strictly decrease across pathways".into());
        }
        if s1 != 2 * s0 || s2 != 2 * s1 {
            return fail("consecutive pathway strides must differ by a factor of 2".into());
        }
        if !s0.is_power_of_two() || s0 < 2 {
            return fail(format!("finest stride {s0} must be a power of two >= 2"));
        }
        if 1usize << self.widths.stem.len() != s0 {
            return fail(format!(
                "stem has {} stride-2 convs, finest stride {s0} needs {}",
                self.widths.stem.len(),
                s0.trailing_zeros()
            ));
        }
        let widths = self
            .widths
            .stem
            .iter()
            .chain(&self.widths.stages)
            .chain(&self.widths.heads);
        if widths.into_iter().any(|&w| w == 0) {
            return fail("channel widths must be positive".into());
        }
        if !(self.leaky_alpha.is_finite() && (0.0..1.0).contains(&self.leaky_alpha)) {
            return fail("leaky_alpha must lie in [0, 1)".into());
        }
        let known = tappable_layers();
        for t in &self.tap_layers {
            if !known.contains(t) {
                return fail(format!("tap layer `{t}` is not a layer of this model"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One conv layer of the plan.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Output convs are linear and initialized with small weights.
    pub is_output: bool,
}

impl LayerSpec {
    fn conv(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            is_output: false,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// The ordered list of conv layers implied by a config.
pub fn layer_plan(config: &ModelConfig) -> Vec<LayerSpec> {
    let w = &config.widths;
    let [st8, st16, st32] = w.stages;
    let [hs, hm, hl] = w.heads;
    let out = config.output_channels();
    let mut plan = Vec::new();
    let mut prev = 3;
    for (i, &c) in w.stem.iter().enumerate() {
        plan.push(LayerSpec::conv(format!("stem.{i}"), prev, c, 3, 2));
        prev = c;
    }
    plan.push(LayerSpec::conv("backbone.s8", prev, st8, 3, 1));
    plan.push(LayerSpec::conv("down.s16", st8, st16, 3, 2));
    plan.push(LayerSpec::conv("backbone.s16", st16, st16, 3, 1));
    plan.push(LayerSpec::conv("down.s32", st16, st32, 3, 2));
    plan.push(LayerSpec::conv("backbone.s32", st32, st32, 3, 1));
    plan.push(LayerSpec::conv("lat.s32", st32, hm, 1, 1));
    plan.push(LayerSpec::conv("neck.s16", hm + st16, hm, 3, 1));
    plan.push(LayerSpec::conv("lat.s16", hm, hs, 1, 1));
    plan.push(LayerSpec::conv("fusion", hs + st8, hs, 3, 1));
    plan.push(LayerSpec::conv("small.neck", hs, hs, 3, 1));
    plan.push(LayerSpec::conv("small.head", hs, hs, 3, 1));
    plan.push(LayerSpec {
        is_output: true,
        ..LayerSpec::conv("small.out", hs, out, 1, 1)
    });
    plan.push(LayerSpec::conv("down.medium", hs, hs, 3, 2));
    plan.push(LayerSpec::conv("medium.neck", hs + hm, hm, 3, 1));
    plan.push(LayerSpec::conv("medium.head", hm, hm, 3, 1));
    plan.push(LayerSpec {
        is_output: true,
        ..LayerSpec::conv("medium.out", hm, out, 1, 1)
    });
    plan.push(LayerSpec::conv("down.large", hm, hm, 3, 2));
    plan.push(LayerSpec::conv("large.neck", hm + st32, hl, 3, 1));
    plan.push(LayerSpec::conv("large.head", hl, hl, 3, 1));
    plan.push(LayerSpec {
        is_output: true,
        ..LayerSpec::conv("large.out", hl, out, 1, 1)
    });
    plan
}

/// Spatial extent of every layer's output, for tap shape checks.
pub fn layer_output_shape(config: &ModelConfig, name: &str) -> Option<[usize; 3]> {
    let plan = layer_plan(config);
    let spec = plan.iter().find(|l| l.name == name)?;
    let s = config.input_size;
    let stride = if let Some(idx) = name.strip_prefix("stem.") {
        let i: u32 = idx.parse().ok()?;
        2usize.pow(i + 1)
    } else if name == "backbone.s8" || name == "fusion" || name.starts_with("small.") {
        config.pathway_strides[0]
    } else if name.ends_with("s16") || name == "down.medium" || name.starts_with("medium.") {
        config.pathway_strides[1]
    } else {
        config.pathway_strides[2]
    };
    Some([spec.out_channels, s / stride, s / stride])
}

pub type Params = BTreeMap<String, Tensor>;

/// Parameter tensors keyed by `<layer>.weight` / `<layer>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
}

impl ModelState {
    /// Deterministic He-style initialization.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let cpa = config.channels_per_anchor();
        for layer in layer_plan(&config) {
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let std = if layer.is_output {
                0.01
            } else {
                (2.0 / ((1.0 + config.leaky_alpha.powi(2)) * fan_in)).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let shape = layer.weight_shape();
            let n: usize = shape.iter().product();
            let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let mut b = vec![0.0; layer.out_channels];
            if layer.is_output {
                for a in 0..config.anchors_per_cell {
                    b[a * cpa + 4] = CONFIDENCE_BIAS_INIT;
                }
            }
            params.insert(format!("{}.weight", layer.name), Tensor::new(shape.to_vec(), w)?);
            params.insert(
                format!("{}.bias", layer.name),
                Tensor::new(vec![layer.out_channels], b)?,
            );
        }
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks that `params` matches the layer plan exactly.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let plan = layer_plan(&self.config);
        if self.params.len() != 2 * plan.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                2 * plan.len(),
                self.params.len()
            )));
        }
        for layer in plan {
            for (suffix, shape) in [
                ("weight", layer.weight_shape().to_vec()),
                ("bias", vec![layer.out_channels]),
            ] {
                let key = format!("{}.{suffix}", layer.name);
                match self.params.get(&key) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Config(format!(
                            "{key}: expected shape {shape:?}, found {:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Config(format!("missing parameter {key}"))),
                }
            }
        }
        Ok(())
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape(
                "forward",
                format!("image must be [3, {s}, {s}], got {:?}", image.shape()),
            ));
        }
        if !image.is_finite() {
            return Err(Error::NonFinite("image"));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, image: Var, trainable: bool) -> Result<Graph> {
        self.forward_with_override(tape, image, trainable, None)
    }

    /// Forward pass in which the output of layer `name` is replaced by a fixed
    /// tensor; used to probe the downstream sub-network in isolation.
    pub fn forward_with_override(
        &self,
        tape: &mut Tape,
        image: Var,
        trainable: bool,
        layer_override: Option<(&str, &Tensor)>,
    ) -> Result<Graph> {
        self.check_image(tape.value(image))?;
        let mut params = BTreeMap::new();
        for (k, v) in &self.params {
            let var = if trainable {
                tape.leaf(v.clone())
            } else {
                tape.constant(v.clone())
            };
            params.insert(k.clone(), var);
        }
        let act = Activation::LeakyRelu(self.config.leaky_alpha);
        let mut b = Builder {
            tape,
            params: &params,
            layers: layer_plan(&self.config),
            act,
            nodes: BTreeMap::new(),
            layer_override,
        };

        let mut x = image;
        for i in 0..self.config.widths.stem.len() {
            x = b.conv(&format!("stem.{i}"), x)?;
        }
        let b8 = b.conv("backbone.s8", x)?;
        let x = b.conv("down.s16", b8)?;
        let b16 = b.conv("backbone.s16", x)?;
        let x = b.conv("down.s32", b16)?;
        let b32 = b.conv("backbone.s32", x)?;

        let lat = b.conv("lat.s32", b32)?;
        let up = b.tape.upsample2x(lat)?;
        let cat = b.tape.concat_channels(up, b16)?;
        let n16 = b.conv("neck.s16", cat)?;
        let lat = b.conv("lat.s16", n16)?;
        let up = b.tape.upsample2x(lat)?;
        let cat = b.tape.concat_channels(up, b8)?;
        let fusion = b.conv("fusion", cat)?;

        let x = b.conv("small.neck", fusion)?;
        let x = b.conv("small.head", x)?;
        let small = b.conv("small.out", x)?;

        let down = b.conv("down.medium", fusion)?;
        let cat = b.tape.concat_channels(down, n16)?;
        let mneck = b.conv("medium.neck", cat)?;
        let x = b.conv("medium.head", mneck)?;
        let medium = b.conv("medium.out", x)?;

        let down = b.conv("down.large", mneck)?;
        let cat = b.tape.concat_channels(down, b32)?;
        let x = b.conv("large.neck", cat)?;
        let x = b.conv("large.head", x)?;
        let large = b.conv("large.out", x)?;

        let taps = self
            .config
            .tap_layers
            .iter()
            .map(|t| (t.clone(), b.nodes[t.as_str()]))
            .collect();
        Ok(Graph {
            outputs: [small, medium, large],
            taps,
            params,
        })
    }

    /// Pure forward pass returning raw pathway grids and tap activations.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::inference();
        let img = tape.constant(image.clone());
        let graph = self.forward_on_tape(&mut tape, img, false)?;
        Ok(graph.collect(&tape, &self.config))
    }
}

struct Builder<'a> {
    tape: &'a mut Tape,
    params: &'a BTreeMap<String, Var>,
    layers: Vec<LayerSpec>,
    act: Activation,
    nodes: BTreeMap<String, Var>,
    layer_override: Option<(&'a str, &'a Tensor)>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let spec = self
            .layers
            .iter()
            .find(|l| l.name == name)
            .unwrap_or_else(|| panic!("layer {name} missing from plan"));
        let (stride, pad, linear) = (spec.stride, spec.kernel / 2, spec.is_output);
        let w = self.params[&format!("{name}.weight")];
        let bias = self.params[&format!("{name}.bias")];
        let mut y = self.tape.conv2d(x, w, bias, stride, pad)?;
        if !linear {
            y = self.tape.activation(y, self.act)?;
        }
        if let Some((target, value)) = self.layer_override {
            if target == name {
                if value.shape() != self.tape.value(y).shape() {
                    return Err(Error::shape(
                        "forward",
                        format!("override for {name} has shape {:?}", value.shape()),
                    ));
                }
                y = self.tape.leaf(value.clone());
            }
        }
        self.nodes.insert(name.to_string(), y);
        Ok(y)
    }
}

/// Tape handles for one recorded forward pass.
pub struct Graph {
    pub outputs: [Var; 3],
    pub taps: BTreeMap<String, Var>,
    pub params: BTreeMap<String, Var>,
}

impl Graph {
    pub fn collect(&self, tape: &Tape, config: &ModelConfig) -> ForwardOutput {
        ForwardOutput {
            pathways: Pathway::ALL
                .iter()
                .map(|&p| PathwayOutput {
                    pathway: p,
                    grid: tape.value(self.outputs[p.index()]).clone(),
                    stride: config.stride(p),
                })
                .collect(),
            taps: self
                .taps
                .iter()
                .map(|(k, &v)| (k.clone(), tape.value(v).clone()))
                .collect(),
        }
    }
}

/// Raw `[A·(5+C), S, S]` grid of one pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwayOutput {
    pub pathway: Pathway,
    pub grid: Tensor,
    pub stride: usize,
}

impl PathwayOutput {
    pub fn size(&self) -> usize {
        self.grid.shape()[1]
    }

    /// Raw value of channel `ch` of anchor `a` at (row, col).
    pub fn raw(&self, cpa: usize, a: usize, ch: usize, row: usize, col: usize) -> f64 {
        self.grid.at3(a * cpa + ch, row, col)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub pathways: Vec<PathwayOutput>,
    pub taps: BTreeMap<String, Tensor>,
}
