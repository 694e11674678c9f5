//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary, one criterion after another, so that the timing
//! checks are not disturbed by concurrently running tests. The desk-scale
//! training run is cached under the test tmp dir, keyed by everything that
//! determines its result.

mod common;

use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::oracles::*;
use common::*;
use miniyolo::assign::{select_positive_anchors, DEFAULT_IOU_THRESHOLD};
use miniyolo::checkpoint::Checkpoint;
use miniyolo::data::{generate_split, is_border_cell, Dataset, GeneratorConfig, ShapeKind};
use miniyolo::eval::{best_slot, cell_conditioned_samples, detection_rate, priors_from_extents, shift_sweep, Axis};
use miniyolo::postprocess::{active_cell_census, count_for_grids, count_proposals, decode_all, nms, NmsConfig};
use miniyolo::saliency::*;
use miniyolo::train::{train, TrainConfig};
use miniyolo::*;
use rand::Rng;
use sha2::{Digest, Sha256};

const COUNT_BUDGET: Duration = Duration::from_secs(1);
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const GRADIENT_TOL: f64 = 1e-4;
const ASSIGN_BUDGET: Duration = Duration::from_secs(10);
const NMS_BUDGET: Duration = Duration::from_secs(10);
const SALIENCY_UNIT_BUDGET: Duration = Duration::from_secs(60);

const TRAIN_IMAGES: usize = 2000;
const HELD_OUT: usize = 200;
const DATA_SEED: u64 = 7;
const MODEL_SEED: u64 = 7;
const MIN_DETECTION_RATE: f64 = 0.9;
const TRAIN_BUDGET_SECS: f64 = 30.0 * 60.0;

const SHIFT_IMAGES: usize = 50;
const SHIFT_CELLS: i64 = 2;
const MIN_SHIFT_FRACTION: f64 = 0.9;

const CENSUS_THRESHOLD: f64 = 0.5;
const MAX_CENSUS: usize = 4;
const MIN_CENSUS_FRACTION: f64 = 0.95;

const SALIENCY_N: usize = 15;
const SALIENCY_TAP: &str = "fusion";
const SALIENCY_PATHWAY: Pathway = Pathway::Medium;
const SALIENCY_CELLS: [(usize, usize); 5] = [(3, 3), (2, 2), (2, 4), (4, 2), (4, 4)];
const CENTER_CELL: (usize, usize) = (3, 3);
const SALIENCY_SIZE_JITTER: f64 = 0.2;
const COM_TOL: f64 = 1.5;
const MIN_AXIS_CELLS: usize = 4;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!(
        "criterion {id:>2} {} {name}: {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn proposal_count() -> Outcome {
    let t = Instant::now();
    let closed = count_for_grids(&[13, 26, 52], 3);
    let full = count_proposals(&ModelConfig::paper_scale());
    let mut r = rng(101);
    let mut agree = 0;
    for _ in 0..50 {
        let s0 = 1usize << r.random_range(1..4);
        let cfg = ModelConfig {
            input_size: 4 * s0 * r.random_range(1..8),
            anchors_per_cell: r.random_range(1..6),
            pathway_strides: [s0, 2 * s0, 4 * s0],
            widths: miniyolo::model::ChannelWidths {
                stem: vec![1; s0.trailing_zeros() as usize],
                stages: [1, 1, 1],
                heads: [1, 1, 1],
            },
            ..ModelConfig::default()
        };
        if cfg.validate().is_ok() && count_proposals(&cfg) == enumerate_proposals(&cfg) {
            agree += 1;
        }
    }
    let el = t.elapsed();
    outcome(
        closed == 10647 && full == 10647 && agree == 50 && el < COUNT_BUDGET,
        format!("count={closed}, full-scale config={full}, enumeration agrees on {agree}/50, {el:.2?}"),
    )
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let (mut worst, mut checked) = (0.0f64, 0);
    for seed in 0..20 {
        let (n, w) = check_network(1000 + seed);
        worst = worst.max(w);
        checked += n;
    }
    let el = t.elapsed();
    outcome(
        worst < GRADIENT_TOL && el < GRADIENT_BUDGET,
        format!(
            "20 networks, {checked} parameter entries, worst relative error {worst:.2e} (< {GRADIENT_TOL:e}), {el:.1?}"
        ),
    )
}

fn assignment() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::default();
    let anchors = default_anchors();
    let mut r = rng(103);
    let (mut agree, mut sound, mut covered) = (0, 0, 0);
    let total = 2000;
    for _ in 0..total {
        let ann = random_annotation(&mut r, cfg.input_size as f64, cfg.num_classes);
        let got = select_positive_anchors(&ann, &cfg, &anchors, DEFAULT_IOU_THRESHOLD);
        covered += usize::from(!got.is_empty());
        agree += usize::from(got == oracle_positives(&ann, &cfg, &anchors));
        let shape_iou = |p: &AnchorPrior| oracle_wh_iou(ann.bbox.w, ann.bbox.h, p.pw, p.ph);
        let max = anchors.all().iter().map(shape_iou).fold(f64::NEG_INFINITY, f64::max);
        let ok = got.iter().all(|c| {
            let v = shape_iou(anchors.get(c.pathway, c.anchor));
            v > DEFAULT_IOU_THRESHOLD || (got.len() == 1 && v == max)
        });
        sound += usize::from(ok);
    }
    let el = t.elapsed();
    outcome(
        agree == total && sound == total && covered == total && el < ASSIGN_BUDGET,
        format!("{total} annotations: covered {covered}, rule holds {sound}, oracle agreement {agree}, {el:.2?}"),
    )
}

fn nms_equivalence() -> Outcome {
    let t = Instant::now();
    let cfg = NmsConfig::default();
    let mut r = rng(104);
    let (mut agree, mut idem, mut anti) = (0, 0, 0);
    for _ in 0..200 {
        let n = r.random_range(0..=100);
        let dets = random_detections(&mut r, n);
        let kept = nms(&dets, &cfg);
        agree += usize::from(kept == nms_oracle(&dets, &cfg));
        idem += usize::from(nms(&kept, &cfg) == kept);
        let antichain = kept.iter().enumerate().all(|(i, a)| {
            kept[i + 1..]
                .iter()
                .all(|b| a.class_id != b.class_id || miniyolo::boxes::iou(&a.bbox, &b.bbox) <= cfg.iou_threshold)
        });
        anti += usize::from(antichain);
    }
    let el = t.elapsed();
    outcome(
        agree == 200 && idem == 200 && anti == 200 && el < NMS_BUDGET,
        format!("200 sets: oracle {agree}, idempotent {idem}, antichain {anti}, {el:.2?}"),
    )
}

struct Trained {
    ckpt: Checkpoint,
    train_secs: f64,
    cached: bool,
}

fn train_config() -> TrainConfig {
    TrainConfig::default()
}

fn cache_key(gen: &GeneratorConfig, tc: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(ModelConfig::default().hash());
    h.update(serde_json::to_vec(tc).unwrap());
    h.update(gen.hash());
    h.update(format!("{TRAIN_IMAGES}/{DATA_SEED}/{MODEL_SEED}"));
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn trained(train_set: &Dataset, gen: &GeneratorConfig) -> Trained {
    let tc = train_config();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let key = cache_key(gen, &tc);
    let ckpt_path = dir.join(format!("acceptance-{key}.myolo"));
    let time_path = dir.join(format!("acceptance-{key}.secs"));
    if let (Ok(ckpt), Ok(secs)) = (Checkpoint::load(&ckpt_path), fs::read_to_string(&time_path)) {
        if let Ok(train_secs) = secs.trim().parse() {
            return Trained {
                ckpt,
                train_secs,
                cached: true,
            };
        }
    }
    let t = Instant::now();
    let anchors = priors_from_extents(&train_set.extents(), 3).unwrap();
    let mut state = ModelState::build(ModelConfig::default(), MODEL_SEED).unwrap();
    let report = train(&mut state, &anchors, train_set, &tc, |e, _| {
        println!("  epoch {:>2} loss {:.3} ({:.0?})", e.epoch, e.total, t.elapsed())
    })
    .unwrap();
    let train_secs = t.elapsed().as_secs_f64();
    let ckpt = Checkpoint::new(state, anchors, report.history.len(), report.history);
    ckpt.save(&ckpt_path).unwrap();
    fs::write(&time_path, format!("{train_secs}")).unwrap();
    Trained {
        ckpt,
        train_secs,
        cached: false,
    }
}

/// Retrains the first epoch from the same seeds and compares its loss
/// bit-for-bit with the recorded curve.
fn first_epoch_reproduces(train_set: &Dataset, ckpt: &Checkpoint) -> bool {
    let anchors = priors_from_extents(&train_set.extents(), 3).unwrap();
    if anchors != ckpt.anchors {
        return false;
    }
    let mut state = ModelState::build(ModelConfig::default(), MODEL_SEED).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        ..train_config()
    };
    let rerun = train(&mut state, &anchors, train_set, &tc, |_, _| {}).unwrap();
    ckpt.meta.loss_curve.first().map(|e| e.total.to_bits()) == rerun.history.first().map(|e| e.total.to_bits())
}

fn desk_training(tr: &Trained, held_out: &Dataset, reproducible: bool) -> Outcome {
    let rate = detection_rate(
        &tr.ckpt.state,
        &tr.ckpt.anchors,
        &held_out.samples,
        &NmsConfig::default(),
    )
    .unwrap();
    outcome(
        rate >= MIN_DETECTION_RATE && tr.train_secs <= TRAIN_BUDGET_SECS && reproducible,
        format!(
            "detection rate {rate:.3} (>= {MIN_DETECTION_RATE}) on {} held-out images, training {:.0} s{} (<= {TRAIN_BUDGET_SECS:.0} s), first epoch reproduced bit-exactly: {reproducible}",
            held_out.len(),
            tr.train_secs,
            if tr.cached { " (cached run)" } else { "" },
        ),
    )
}

/// Held-out single-object images whose object can move two cells either way
/// along x on its best-matching pathway without leaving the image.
fn shift_images(config: &ModelConfig, anchors: &AnchorSet) -> Vec<(Pathway, image::RgbImage)> {
    let pool = generate_split(4000, DATA_SEED, "shift", &GeneratorConfig::single_object()).unwrap();
    let size = config.input_size as f64;
    pool.samples
        .into_iter()
        .filter_map(|s| {
            let ann = s.annotations[0];
            let slot = best_slot(&ann, config, anchors);
            let stride = config.stride(slot.pathway) as f64;
            let grid = config.grid_size(slot.pathway);
            let reach = SHIFT_CELLS as f64 * stride;
            let fits = ann.bbox.cx - ann.bbox.w / 2.0 - reach >= 0.0 && ann.bbox.cx + ann.bbox.w / 2.0 + reach <= size;
            let col = slot.col as i64;
            let interior = col >= SHIFT_CELLS && col + SHIFT_CELLS < grid as i64;
            (fits && interior).then_some((slot.pathway, s.image))
        })
        .take(SHIFT_IMAGES)
        .collect()
}

fn shift_behavior(state: &ModelState, anchors: &AnchorSet) -> Outcome {
    let images = shift_images(&state.config, anchors);
    let mut ok = 0;
    let mut conf_ratio = Vec::new();
    for (pathway, img) in &images {
        let stride = state.config.stride(*pathway) as i64;
        let shifts: Vec<i64> = (-SHIFT_CELLS..=SHIFT_CELLS).map(|k| k * stride).collect();
        let rows = shift_sweep(state, img, *pathway, Axis::X, &shifts).unwrap();
        let base = rows[SHIFT_CELLS as usize].col as i64;
        let follows = rows
            .iter()
            .zip(-SHIFT_CELLS..=SHIFT_CELLS)
            .all(|(r, k)| r.col as i64 == base + k);
        ok += usize::from(follows);
        let (lo, hi) = rows.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), r| {
            (lo.min(r.confidence), hi.max(r.confidence))
        });
        conf_ratio.push(lo / hi);
    }
    let frac = ok as f64 / images.len().max(1) as f64;
    conf_ratio.sort_by(f64::total_cmp);
    outcome(
        images.len() == SHIFT_IMAGES && frac >= MIN_SHIFT_FRACTION,
        format!(
            "argmax column follows dx in {ok}/{} images ({frac:.2} >= {MIN_SHIFT_FRACTION}); median min/max confidence over the sweep {:.2}",
            images.len(),
            conf_ratio.get(conf_ratio.len() / 2).copied().unwrap_or(f64::NAN)
        ),
    )
}

fn census_at(state: &ModelState, anchors: &AnchorSet, held_out: &Dataset, threshold: f64) -> Vec<usize> {
    let mut v: Vec<usize> = held_out
        .samples
        .iter()
        .map(|s| {
            let out = state.forward(&s.tensor()).unwrap();
            active_cell_census(
                &decode_all(&out.pathways, &state.config, anchors),
                &s.annotations[0].bbox,
                threshold,
            )
        })
        .collect();
    v.sort_unstable();
    v
}

fn census_summary(v: &[usize]) -> (f64, (usize, usize)) {
    let frac = v.iter().filter(|&&c| c <= MAX_CENSUS).count() as f64 / v.len() as f64;
    let n = v.len();
    (frac, (v[(n - 1) / 2], v[n / 2]))
}

fn active_cells(state: &ModelState, anchors: &AnchorSet, held_out: &Dataset) -> Outcome {
    let main = census_at(state, anchors, held_out, CENSUS_THRESHOLD);
    let (frac, (m_lo, m_hi)) = census_summary(&main);
    let median_ok = [m_lo, m_hi].iter().all(|m| (1..=2).contains(m));
    let mut detail = format!(
        "threshold {CENSUS_THRESHOLD}: census <= {MAX_CENSUS} in {frac:.3} of images (>= {MIN_CENSUS_FRACTION}), median {}",
        if m_lo == m_hi { format!("{m_lo}") } else { format!("{m_lo}/{m_hi}") }
    );
    for t in [0.25, 0.75] {
        let v = census_at(state, anchors, held_out, t);
        let (f, (a, b)) = census_summary(&v);
        detail.push_str(&format!(
            "; at {t}: <= {MAX_CENSUS} in {f:.3}, median {a}/{b}, max {}",
            v[v.len() - 1]
        ));
    }
    outcome(frac >= MIN_CENSUS_FRACTION && median_ok, detail)
}

struct CellMaps {
    cell: CellAddress,
    c: SaliencyMap,
    w: SaliencyMap,
    h: SaliencyMap,
}

/// Averaged c, w and h maps for each tested cell, over images whose object of
/// a fixed class is centered in that cell and sized after its middle prior.
fn cell_maps(state: &ModelState, anchors: &AnchorSet, cells: &[(usize, usize)], pathway: Pathway) -> Vec<CellMaps> {
    let gen = GeneratorConfig::single_object();
    cells
        .iter()
        .enumerate()
        .map(|(k, &(row, col))| {
            let kind = ShapeKind::ALL[k % ShapeKind::ALL.len()];
            let cell = CellAddress {
                pathway,
                row,
                col,
                anchor: 1,
            };
            let samples = cell_conditioned_samples(
                DATA_SEED,
                &state.config,
                anchors,
                &gen,
                kind,
                cell,
                SALIENCY_N,
                SALIENCY_SIZE_JITTER,
            )
            .unwrap();
            let map = |neuron| {
                let sel = NeuronSelector { cell, neuron };
                let res = saliency_averaged(state, &samples, kind.class_id(), &sel, SALIENCY_TAP, SALIENCY_N).unwrap();
                assert_eq!(res.shortfall, 0);
                res.map
            };
            CellMaps {
                cell,
                c: map(NeuronKind::C),
                w: map(NeuronKind::W),
                h: map(NeuronKind::H),
            }
        })
        .collect()
}

fn localization(state: &ModelState, maps: &[CellMaps], large: &[CellMaps]) -> Outcome {
    let mut hits = 0;
    let mut parts = Vec::new();
    for m in maps {
        let (r, c) = m.c.center_of_mass().unwrap();
        let (pr, pc) = project_cell(&m.cell, &state.config, m.c.shape);
        let d = ((r - pr).powi(2) + (c - pc).powi(2)).sqrt();
        hits += usize::from(d <= COM_TOL);
        parts.push(format!("({},{}) {d:.2}", m.cell.row, m.cell.col));
    }
    let info: Vec<String> = large
        .iter()
        .map(|m| {
            let (r, c) = m.c.center_of_mass().unwrap();
            let (pr, pc) = project_cell(&m.cell, &state.config, m.c.shape);
            format!(
                "large ({},{}) {:.2}",
                m.cell.row,
                m.cell.col,
                ((r - pr).powi(2) + (c - pc).powi(2)).sqrt()
            )
        })
        .collect();
    outcome(
        hits == maps.len() && maps.len() >= 5,
        format!(
            "{hits}/{} non-border {} cells within {COM_TOL} tap cells [{}]; info: {}",
            maps.len(),
            SALIENCY_PATHWAY.name(),
            parts.join(", "),
            info.join(", ")
        ),
    )
}

fn concentration_ordering(maps: &[CellMaps]) -> Outcome {
    let center = maps
        .iter()
        .find(|m| (m.cell.row, m.cell.col) == CENTER_CELL)
        .expect("center cell tested");
    let (cc, cw, ch) = (
        concentration(&center.c).unwrap(),
        concentration(&center.w).unwrap(),
        concentration(&center.h).unwrap(),
    );
    let ordering = cc < cw && cc < ch;
    let mut wide = 0;
    let mut tall = 0;
    for m in maps {
        let (wx, wy) = m.w.axis_variances().unwrap();
        let (hx, hy) = m.h.axis_variances().unwrap();
        wide += usize::from(wx >= wy);
        tall += usize::from(hy >= hx);
    }
    outcome(
        ordering && wide >= MIN_AXIS_CELLS && tall >= MIN_AXIS_CELLS,
        format!(
            "center {CENTER_CELL:?}: concentration c {cc:.3}, w {cw:.3}, h {ch:.3}; w-map wider than tall in {wide}/{n}, h-map taller than wide in {tall}/{n} (need {MIN_AXIS_CELLS})",
            n = maps.len()
        ),
    )
}

fn saliency_invariants(trained: &ModelState) -> Outcome {
    let t = Instant::now();
    let mut linear = true;
    let mut zero = true;
    let fixture = saliency_fixture();
    let cases = [
        (&fixture, positive_image(40, 32), Pathway::Medium),
        (trained, positive_image(41, 96), Pathway::Medium),
    ];
    for (state, img, p) in &cases {
        let sel = selector(*p, 1, 1, 0, NeuronKind::C);
        let base = saliency_single(state, img, &sel, "fusion").unwrap();
        for k in [2.0, 0.25, -8.0, 1024.0] {
            let scaled = saliency_single_scaled(state, img, &sel, "fusion", k).unwrap();
            linear &= base.values.iter().zip(&scaled.values).all(|(a, b)| k * a == *b);
        }
        // the small pathway head cannot see a medium output neuron
        let unreachable = saliency_single(state, img, &sel, "small.head").unwrap();
        zero &= unreachable.values.iter().all(|&v| v == 0.0);
        let zero_seed = saliency_single_scaled(state, img, &sel, "fusion", 0.0).unwrap();
        zero &= zero_seed.values.iter().all(|&v| v == 0.0);
    }
    let el = t.elapsed();
    outcome(
        linear && zero && el < SALIENCY_UNIT_BUDGET,
        format!("seed scaling exact: {linear}; zero-gradient maps exactly zero: {zero}; {el:.2?}"),
    )
}

fn checkpoint_round_trip(ckpt: &Checkpoint) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roundtrip.myolo");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load_expecting(&path, &ckpt.state.config).unwrap();
    let mut r = rng(111);
    let mut identical = 0;
    for _ in 0..10 {
        let img = random_tensor(&[3, 96, 96], 1.0, &mut r).map(|v| v.abs());
        let (a, b) = (ckpt.state.forward(&img).unwrap(), back.state.forward(&img).unwrap());
        let same = a.pathways.iter().zip(&b.pathways).all(|(p, q)| {
            p.grid.shape() == q.grid.shape()
                && p.grid
                    .data()
                    .iter()
                    .zip(q.grid.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        identical += usize::from(same);
    }
    outcome(
        identical == 10 && back == *ckpt,
        format!("{identical}/10 forwards bit-identical after save/load"),
    )
}

fn main() -> std::process::ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |id, name, o: Outcome| {
        report(id, name, &o);
        results.push((id, name, o));
    };

    run(1, "proposal-count identity", proposal_count());
    run(2, "gradient correctness", gradients());
    run(3, "assignment soundness", assignment());
    run(4, "NMS oracle equivalence", nms_equivalence());

    let gen = GeneratorConfig::default();
    let train_set = generate_split(TRAIN_IMAGES, DATA_SEED, "train", &gen).unwrap();
    let held_out = generate_split(HELD_OUT, DATA_SEED, "test", &GeneratorConfig::single_object()).unwrap();
    let tr = trained(&train_set, &gen);
    let reproducible = first_epoch_reproduces(&train_set, &tr.ckpt);
    drop(train_set);
    let state = &tr.ckpt.state;
    let anchors = &tr.ckpt.anchors;
    run(5, "desk-scale training", desk_training(&tr, &held_out, reproducible));
    run(6, "shift behavior", shift_behavior(state, anchors));
    run(7, "active-cell census", active_cells(state, anchors, &held_out));

    let grid = state.config.grid_size(SALIENCY_PATHWAY);
    assert!(SALIENCY_CELLS.iter().all(|&(r, c)| !is_border_cell(r, c, grid)));
    let maps = cell_maps(state, anchors, &SALIENCY_CELLS, SALIENCY_PATHWAY);
    let large = cell_maps(state, anchors, &[(1, 1)], Pathway::Large);
    run(8, "saliency localization", localization(state, &maps, &large));
    run(9, "saliency concentration ordering", concentration_ordering(&maps));
    run(10, "saliency invariants", saliency_invariants(state));
    run(11, "checkpoint round trip", checkpoint_round_trip(&tr.ckpt));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
