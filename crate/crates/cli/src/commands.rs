//! Subcommand implementations. Each returns its output instead of printing.

use std::fs;
use std::io::Write;
use std::path::Path;

use miniyolo::checkpoint::Checkpoint;
use miniyolo::data::{decode_png, generate_dataset, image_to_tensor, load_dataset, DatasetMeta, GeneratorConfig};
use miniyolo::eval::{confidence_argmax, detect, priors_from_extents, shift_sweep, Axis, ShiftRow};
use miniyolo::postprocess::{count_for_grids, DetectionRecord, NmsConfig};
use miniyolo::train::{train, write_loss_csv, TrainConfig};
use miniyolo::{ModelConfig, ModelState, Pathway};

use crate::error::{CliError, CliResult};
use crate::payload::{saliency_payload, DetectPayload, SaliencyPayload, SaliencyRequest, SCHEMA_VERSION};

pub fn generate(out: &Path, n_train: usize, n_val: usize, seed: u64) -> CliResult<DatasetMeta> {
    Ok(generate_dataset(
        n_train,
        n_val,
        seed,
        &GeneratorConfig::default(),
        out,
    )?)
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub loss_csv: Option<&'a Path>,
    pub model_seed: u64,
    pub config: TrainConfig,
}

pub fn train_command(args: &TrainArgs) -> CliResult<Checkpoint> {
    let files = load_dataset(args.data)?;
    let anchors = priors_from_extents(&files.train.extents(), ModelConfig::default().anchors_per_cell)?;
    let mut state = ModelState::build(ModelConfig::default(), args.model_seed)?;
    log::info!(
        "training on {} images, {} parameters",
        files.train.len(),
        state.parameter_count()
    );
    let report = train(&mut state, &anchors, &files.train, &args.config, |_, _| {})?;
    let ckpt = Checkpoint::new(state, anchors, report.history.len(), report.history.clone());
    ckpt.save(args.out)?;
    if let Some(path) = args.loss_csv {
        let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        write_loss_csv(&report.history, &mut f).map_err(|e| CliError::io(path, e))?;
    }
    Ok(ckpt)
}

fn read_png(path: &Path, config: &ModelConfig) -> CliResult<image::RgbImage> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let img = decode_png(&bytes)?;
    if img.width() as usize != config.input_size || img.height() as usize != config.input_size {
        return Err(CliError::Usage(format!(
            "image is {}x{}, the model expects {}x{}",
            img.width(),
            img.height(),
            config.input_size,
            config.input_size
        )));
    }
    Ok(img)
}

pub fn detect_command(ckpt: &Checkpoint, image: &Path, nms_cfg: &NmsConfig) -> CliResult<DetectPayload> {
    let img = read_png(image, &ckpt.state.config)?;
    let dets = detect(&ckpt.state, &ckpt.anchors, &image_to_tensor(&img), nms_cfg)?;
    Ok(DetectPayload {
        v: SCHEMA_VERSION,
        detections: dets.iter().map(DetectionRecord::from).collect(),
    })
}

pub fn count_command(grids: &[usize], anchors_per_cell: usize) -> CliResult<usize> {
    if grids.is_empty() || grids.contains(&0) || anchors_per_cell == 0 {
        return Err(CliError::Usage("grid sizes and anchor count must be positive".into()));
    }
    Ok(count_for_grids(grids, anchors_per_cell))
}

/// Parses `a..b` (inclusive) into the shifts `a, a+step, ..., <= b`.
pub fn parse_range(range: &str, step: i64) -> CliResult<Vec<i64>> {
    let bad = || CliError::Usage(format!("range must look like -16..16, got `{range}`"));
    let (a, b) = range.split_once("..").ok_or_else(bad)?;
    let a: i64 = a.trim().parse().map_err(|_| bad())?;
    let b: i64 = b.trim().parse().map_err(|_| bad())?;
    if step <= 0 || a > b {
        return Err(CliError::Usage("range needs start <= end and a positive step".into()));
    }
    Ok((0..).map(|k| a + k * step).take_while(|&v| v <= b).collect())
}

/// Rows of the sweep; without an explicit pathway, the one holding the most
/// confident cell of the unshifted image is used.
pub fn shift_sweep_command(
    ckpt: &Checkpoint,
    image: &Path,
    axis: Axis,
    shifts: &[i64],
    pathway: Option<Pathway>,
) -> CliResult<(Pathway, Vec<ShiftRow>)> {
    let config = &ckpt.state.config;
    let img = read_png(image, config)?;
    let limit = config.input_size as i64;
    if shifts.iter().any(|s| s.abs() > limit) {
        return Err(CliError::Usage(format!("shifts must stay within ±{limit} px")));
    }
    let pathway = match pathway {
        Some(p) => p,
        None => {
            let out = ckpt.state.forward(&image_to_tensor(&img))?;
            Pathway::ALL
                .into_iter()
                .max_by(|a, b| {
                    confidence_argmax(&out, config, *a)
                        .2
                        .total_cmp(&confidence_argmax(&out, config, *b).2)
                })
                .expect("three pathways")
        }
    };
    Ok((pathway, shift_sweep(&ckpt.state, &img, pathway, axis, shifts)?))
}

pub fn write_shift_csv(rows: &[ShiftRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "shift,row,col,confidence")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.shift, r.row, r.col, r.confidence)?;
    }
    Ok(())
}

pub fn saliency_command(ckpt: &Checkpoint, data: &Path, req: &SaliencyRequest) -> CliResult<SaliencyPayload> {
    let files = load_dataset(data)?;
    let samples: Vec<_> = files.all().collect();
    Ok(saliency_payload(&ckpt.state, samples.iter().copied(), req)?)
}
