//! Mini-batch Adam training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{build_targets, TargetTensor, DEFAULT_SMOOTHING};
use crate::boxes::AnchorSet;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{yolo_loss, LossBreakdown, LossWeights};
use crate::model::ModelState;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the epochs after which the rate is multiplied by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossWeights,
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 8,
            learning_rate: 1e-3,
            decay_at: 0.7,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossWeights::default(),
            smoothing: DEFAULT_SMOOTHING,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Invalid("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if (epoch as f64) >= self.decay_at * self.epochs as f64 {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

/// Mean per-image loss terms of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub coord: f64,
    pub conf_pos: f64,
    pub conf_neg: f64,
    pub class: f64,
}

impl EpochLoss {
    fn from_breakdown(epoch: usize, b: &LossBreakdown) -> Self {
        Self {
            epoch,
            total: b.total,
            coord: b.coord,
            conf_pos: b.conf_pos,
            conf_neg: b.conf_neg,
            class: b.class,
        }
    }
}

/// Loss curve as CSV: `epoch,total,coord,conf_pos,conf_neg,class`.
pub fn write_loss_csv(history: &[EpochLoss], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,total,coord,conf_pos,conf_neg,class")?;
    for e in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, e.total, e.coord, e.conf_pos, e.conf_neg, e.class
        )?;
    }
    Ok(())
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(state: &ModelState) -> Self {
        let zeros = || {
            state
                .params
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, state: &mut ModelState, grads: &BTreeMap<String, Vec<f64>>, lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - tc.beta1.powi(self.t);
        let c2 = 1.0 - tc.beta2.powi(self.t);
        for (name, param) in state.params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("moment per param");
            let v = self.v.get_mut(name).expect("moment per param");
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
                v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + tc.adam_eps);
            }
        }
    }
}

/// Loss and parameter gradients of one image.
pub fn image_gradients(
    state: &ModelState,
    image: &Tensor,
    targets: &TargetTensor,
    weights: &LossWeights,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let img = tape.constant(image.clone());
    let graph = state.forward_on_tape(&mut tape, img, true)?;
    let loss = yolo_loss(&mut tape, &graph.outputs, targets, &state.config, weights)?;
    let grads = tape.backward(loss.total)?;
    let per_param = graph.params.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect();
    Ok((loss.breakdown, per_param))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
}

/// Train `state` in place. On divergence the parameters are restored to the
/// end of the last finished epoch and an error is returned.
pub fn train(
    state: &mut ModelState,
    anchors: &AnchorSet,
    dataset: &Dataset,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss, &ModelState),
) -> Result<TrainReport> {
    tc.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let targets = dataset
        .samples
        .iter()
        .map(|s| build_targets(&s.annotations, &state.config, anchors, tc.smoothing))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(state);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();
    let mut last_good = state.params.clone();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let lr = tc.learning_rate_at(epoch);
        let mut sum = LossBreakdown::default();
        for (step, batch) in order.chunks(tc.batch_size).enumerate() {
            let mut acc: BTreeMap<String, Vec<f64>> = state
                .params
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
                .collect();
            for &i in batch {
                let (loss, grads) = image_gradients(state, &dataset.samples[i].tensor(), &targets[i], &tc.loss)?;
                if !loss.total.is_finite() {
                    state.params = last_good;
                    return Err(Error::Diverged { epoch, step });
                }
                sum.accumulate(&loss);
                for (k, g) in grads {
                    for (a, v) in acc.get_mut(&k).expect("grad per param").iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            let k = 1.0 / batch.len() as f64;
            for g in acc.values_mut() {
                for v in g.iter_mut() {
                    *v *= k;
                }
            }
            adam.step(state, &acc, lr, tc);
        }
        let mean = sum.scaled(1.0 / dataset.len() as f64);
        let row = EpochLoss::from_breakdown(epoch, &mean);
        log::info!(
            "epoch {epoch}: loss {:.4} (coord {:.4}, pos {:.4}, neg {:.4}, class {:.4})",
            row.total,
            row.coord,
            row.conf_pos,
            row.conf_neg,
            row.class
        );
        report.history.push(row);
        last_good = state.params.clone();
        on_epoch(&row, state);
    }
    Ok(report)
}
