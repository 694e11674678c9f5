#![allow(dead_code)]

pub mod oracles;

use miniyolo::model::ChannelWidths;
use miniyolo::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// A very small network: strides 2/4/8 on an 8 or 16 px input.
pub fn tiny_config(rng: &mut impl Rng) -> ModelConfig {
    let mut w = || rng.random_range(1..=3usize);
    ModelConfig {
        input_size: 8,
        num_classes: 1,
        anchors_per_cell: 1,
        pathway_strides: [2, 4, 8],
        widths: ChannelWidths {
            stem: vec![w()],
            stages: [w(), w(), w()],
            heads: [w(), w(), w()],
        },
        tap_layers: vec![
            "fusion".into(),
            "small.head".into(),
            "medium.neck".into(),
            "medium.out".into(),
        ],
        ..ModelConfig::default()
    }
    .randomized(rng)
}

trait Randomized {
    fn randomized(self, rng: &mut impl Rng) -> Self;
}

impl Randomized for ModelConfig {
    fn randomized(mut self, rng: &mut impl Rng) -> Self {
        self.input_size = if rng.random_bool(0.5) { 8 } else { 16 };
        self.num_classes = rng.random_range(1..=2);
        self.anchors_per_cell = rng.random_range(1..=2);
        self
    }
}

pub fn tiny_anchors(config: &ModelConfig) -> AnchorSet {
    let a = config.anchors_per_cell;
    let ext: Vec<(f64, f64)> = (1..=3 * a).map(|i| (1.5 * i as f64, 1.2 * i as f64 + 0.5)).collect();
    AnchorSet::from_extents(&ext, a).unwrap()
}

/// Perturbs every parameter by a small random amount so that biases and
/// confidence logits leave their initial values.
pub fn jitter_params(state: &mut ModelState, rng: &mut impl Rng) {
    for t in state.params.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}
