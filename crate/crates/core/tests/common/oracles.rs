//! Independent reference implementations used as test oracles.

use miniyolo::assign::{build_targets, Annotation, DEFAULT_IOU_THRESHOLD};
use miniyolo::boxes::iou;
use miniyolo::loss::{yolo_loss, LossWeights};
use miniyolo::model::ChannelWidths;
use miniyolo::postprocess::{Detection, NmsConfig};
use miniyolo::saliency::{NeuronKind, NeuronSelector};
use miniyolo::*;
use rand::Rng;

use super::*;

/// Proposal count by walking every (pathway, row, col, anchor) slot.
pub fn enumerate_proposals(cfg: &ModelConfig) -> usize {
    let mut n = 0;
    for &stride in &cfg.pathway_strides {
        let s = cfg.input_size / stride;
        for _row in 0..s {
            for _col in 0..s {
                for _a in 0..cfg.anchors_per_cell {
                    n += 1;
                }
            }
        }
    }
    n
}

/// Fourth-order central differences of `f` at every entry of `x`.
///
/// Piecewise-linear activations make the stencil invalid when it straddles a
/// kink; the step is shrunk until estimates at `h` and `h/2` agree.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            let f0 = {
                probe.data_mut()[i] = orig;
                f(&probe).abs()
            };
            let mut stencil = |h: f64| {
                let mut at = |d: f64| {
                    probe.data_mut()[i] = orig + d;
                    f(&probe)
                };
                let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
            };
            let mut step = h;
            let mut est = stencil(step);
            for _ in 0..6 {
                let half = stencil(step / 2.0);
                // rounding noise of the difference quotient at this step
                let noise = 64.0 * f0 * f64::EPSILON / step;
                if (half - est).abs() <= 1e-6 * half.abs().max(est.abs()) + noise {
                    est = half;
                    break;
                }
                step /= 3.0;
                est = stencil(step);
            }
            probe.data_mut()[i] = orig;
            est
        })
        .collect()
}

/// Elementwise relative error; magnitudes below 1e-6 are compared on that
/// floor, which is where the finite-difference oracle runs into rounding.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Gradient of the full detection loss with respect to every parameter.
pub fn check_network(seed: u64) -> (usize, f64) {
    let mut r = rng(seed);
    let cfg = tiny_config(&mut r);
    let anchors = tiny_anchors(&cfg);
    let mut state = ModelState::build(cfg.clone(), seed).unwrap();
    jitter_params(&mut state, &mut r);
    let n = cfg.input_size as f64;
    let image = random_tensor(&[3, cfg.input_size, cfg.input_size], 1.0, &mut r).map(|v| v.abs());
    let anns: Vec<Annotation> = (0..r.random_range(1..3))
        .map(|_| Annotation {
            bbox: BBox::new(
                r.random_range(1.0..n - 1.0),
                r.random_range(1.0..n - 1.0),
                r.random_range(1.0..n),
                r.random_range(1.0..n),
            ),
            class_id: r.random_range(0..cfg.num_classes),
        })
        .collect();
    let targets = build_targets(&anns, &cfg, &anchors, 0.05).unwrap();
    let weights = LossWeights::default();

    let mut tape = Tape::new();
    let img = tape.constant(image.clone());
    let graph = state.forward_on_tape(&mut tape, img, true).unwrap();
    let loss = yolo_loss(&mut tape, &graph.outputs, &targets, &cfg, &weights).unwrap();
    let grads = tape.backward(loss.total).unwrap();

    let loss_at = |s: &ModelState| {
        let mut t = Tape::inference();
        let img = t.constant(image.clone());
        let g = s.forward_on_tape(&mut t, img, false).unwrap();
        let l = yolo_loss(&mut t, &g.outputs, &targets, &cfg, &weights).unwrap();
        t.value(l.total).data()[0]
    };
    let (mut checked, mut worst) = (0, 0.0f64);
    for (name, &var) in &graph.params {
        let analytic = grads.wrt(var);
        let base = state.params[name].clone();
        let mut probe = state.clone();
        let numeric = numeric_grad(&base, 1e-3, |p| {
            probe.params.insert(name.clone(), p.clone());
            loss_at(&probe)
        });
        for (a, b) in analytic.data().iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *b));
            checked += 1;
        }
    }
    (checked, worst)
}

/// Shape-only IOU written out from the corner form of two co-centered boxes.
pub fn oracle_wh_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let ix = (w1 / 2.0).min(w2 / 2.0) * 2.0;
    let iy = (h1 / 2.0).min(h2 / 2.0) * 2.0;
    let inter = ix * iy;
    inter / (w1 * h1 + w2 * h2 - inter)
}

/// Every (pathway, anchor) pair at the center cell, brute force.
pub fn oracle_positives(ann: &Annotation, cfg: &ModelConfig, anchors: &AnchorSet) -> Vec<CellAddress> {
    let mut all = Vec::new();
    for (pi, &p) in Pathway::ALL.iter().enumerate() {
        let stride = cfg.pathway_strides[pi] as f64;
        let grid = cfg.input_size / cfg.pathway_strides[pi];
        let col = ((ann.bbox.cx / stride) as usize).min(grid - 1);
        let row = ((ann.bbox.cy / stride) as usize).min(grid - 1);
        for a in 0..cfg.anchors_per_cell {
            let prior = anchors.get(p, a);
            let v = oracle_wh_iou(ann.bbox.w, ann.bbox.h, prior.pw, prior.ph);
            all.push((
                CellAddress {
                    pathway: p,
                    row,
                    col,
                    anchor: a,
                },
                v,
            ));
        }
    }
    let above: Vec<CellAddress> = all
        .iter()
        .filter(|c| c.1 > DEFAULT_IOU_THRESHOLD)
        .map(|c| c.0)
        .collect();
    if !above.is_empty() {
        return above;
    }
    let max = all.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    vec![all.iter().find(|c| c.1 == max).unwrap().0]
}

pub fn random_annotation(r: &mut impl Rng, size: f64, classes: usize) -> Annotation {
    Annotation {
        bbox: BBox::new(
            r.random_range(0.0..size),
            r.random_range(0.0..size),
            r.random_range(1.0..size),
            r.random_range(1.0..size),
        ),
        class_id: r.random_range(0..classes),
    }
}

pub fn default_anchors() -> AnchorSet {
    let ext = [
        (12.0, 11.0),
        (13.0, 16.0),
        (18.0, 14.0),
        (18.0, 22.0),
        (26.0, 21.0),
        (25.0, 32.0),
        (37.0, 30.0),
        (40.0, 45.0),
        (57.0, 54.0),
    ];
    AnchorSet::from_extents(&ext, 3).unwrap()
}

pub fn random_detections(r: &mut impl Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|k| {
            // a few exact confidence ties
            let confidence = if k % 7 == 3 { 0.6 } else { r.random_range(0.0..1.0) };
            Detection {
                bbox: BBox::new(
                    r.random_range(0.0..60.0),
                    r.random_range(0.0..60.0),
                    r.random_range(4.0..30.0),
                    r.random_range(4.0..30.0),
                ),
                class_id: r.random_range(0..3),
                class_prob: r.random_range(0.3..1.0),
                confidence,
                source: CellAddress {
                    pathway: Pathway::Small,
                    row: k / 10,
                    col: k % 10,
                    anchor: 0,
                },
            }
        })
        .collect()
}

/// Fixed point of "keep a candidate unless a better-ranked, kept, same-class
/// candidate overlaps it", found by Jacobi iteration from the all-kept state.
pub fn nms_oracle(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let cand: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence * dets[i].class_prob >= cfg.conf_threshold)
        .collect();
    let better = |a: usize, b: usize| {
        dets[a].confidence > dets[b].confidence || (dets[a].confidence == dets[b].confidence && a < b)
    };
    let mut keep = vec![true; dets.len()];
    for _ in 0..=cand.len() {
        let next: Vec<bool> = (0..dets.len())
            .map(|i| {
                cand.contains(&i)
                    && !cand.iter().any(|&j| {
                        j != i
                            && keep[j]
                            && better(j, i)
                            && dets[j].class_id == dets[i].class_id
                            && iou(&dets[j].bbox, &dets[i].bbox) > cfg.iou_threshold
                    })
            })
            .collect();
        if next == keep {
            break;
        }
        keep = next;
    }
    let mut out: Vec<usize> = (0..dets.len()).filter(|&i| keep[i]).collect();
    out.sort_by(|&a, &b| {
        if better(a, b) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    out.into_iter().map(|i| dets[i]).collect()
}

/// 32 px network whose small head has a single channel.
pub fn saliency_fixture() -> ModelState {
    let cfg = ModelConfig {
        input_size: 32,
        num_classes: 2,
        anchors_per_cell: 2,
        widths: ChannelWidths {
            stem: vec![2, 3, 3],
            stages: [4, 4, 5],
            heads: [1, 4, 4],
        },
        tap_layers: vec![
            "fusion".into(),
            "small.head".into(),
            "medium.neck".into(),
            "medium.out".into(),
        ],
        ..ModelConfig::default()
    };
    let mut state = ModelState::build(cfg, 5).unwrap();
    jitter_params(&mut state, &mut rng(6));
    state
}

pub fn positive_image(seed: u64, size: usize) -> Tensor {
    random_tensor(&[3, size, size], 1.0, &mut rng(seed)).map(|v| v.abs())
}

pub fn selector(p: Pathway, row: usize, col: usize, anchor: usize, neuron: NeuronKind) -> NeuronSelector {
    NeuronSelector {
        cell: CellAddress {
            pathway: p,
            row,
            col,
            anchor,
        },
        neuron,
    }
}
