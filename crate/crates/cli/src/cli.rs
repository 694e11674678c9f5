use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use miniyolo::checkpoint::Checkpoint;
use miniyolo::data::load_dataset;
use miniyolo::eval::Axis;
use miniyolo::postprocess::NmsConfig;
use miniyolo::train::TrainConfig;
use miniyolo::Pathway;

use crate::commands::{
    count_command, detect_command, generate, parse_range, saliency_command, shift_sweep_command, train_command,
    write_shift_csv, TrainArgs,
};
use crate::error::{CliError, CliResult};
use crate::payload::SaliencyRequest;
use crate::server::{serve, AppState};

#[derive(Debug, Parser)]
#[command(name = "miniyolo", version, about = "Mini multi-scale single-shot detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic shapes dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the detector and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-epoch loss components as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Detect objects in one PNG; prints JSON.
    Detect {
        #[arg(long = "checkpoint", alias = "ckpt")]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        conf: Option<f64>,
        #[arg(long)]
        iou: Option<f64>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Number of raw proposals for the given grids.
    Count {
        #[arg(long, value_delimiter = ',', default_values_t = [13, 26, 52])]
        grids: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        anchors: usize,
    },
    /// Most confident cell while translating the input; prints CSV.
    ShiftSweep {
        #[arg(long = "checkpoint", alias = "ckpt")]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "x")]
        axis: String,
        #[arg(long, default_value = "-16..16", allow_hyphen_values = true)]
        range: String,
        #[arg(long, default_value_t = 2)]
        step: i64,
        #[arg(long)]
        pathway: Option<String>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Averaged saliency for one output neuron; prints JSON.
    Saliency {
        #[arg(long = "checkpoint", alias = "ckpt")]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        class_id: usize,
        #[arg(long)]
        pathway: String,
        #[arg(long)]
        i: usize,
        #[arg(long)]
        j: usize,
        #[arg(long, default_value_t = 0)]
        anchor: usize,
        #[arg(long)]
        neuron: String,
        #[arg(long, default_value = "fusion")]
        tap_layer: String,
        #[arg(long, default_value_t = 15)]
        n: usize,
        /// Also write the heatmap as a PNG.
        #[arg(long)]
        png: Option<PathBuf>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the JSON API (and optionally a static front end).
    Serve {
        #[arg(long = "checkpoint", alias = "ckpt")]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn nms_config(conf: Option<f64>, iou: Option<f64>) -> NmsConfig {
    let d = NmsConfig::default();
    NmsConfig {
        conf_threshold: conf.unwrap_or(d.conf_threshold),
        iou_threshold: iou.unwrap_or(d.iou_threshold),
        ..d
    }
}

/// Writes `text` to `out` if given (returning nothing to print), else returns it.
fn emit(out: Option<PathBuf>, text: String) -> CliResult<String> {
    match out {
        Some(path) => {
            fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

/// Runs one subcommand and returns what should go to stdout.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Generate {
            out,
            n_train,
            n_val,
            seed,
        } => {
            let meta = generate(&out, n_train, n_val, seed)?;
            Ok(serde_json::to_string_pretty(&meta)?)
        }
        Command::Train {
            data,
            out,
            epochs,
            batch_size,
            lr,
            seed,
            loss_csv,
        } => {
            let d = TrainConfig::default();
            let config = TrainConfig {
                epochs: epochs.unwrap_or(d.epochs),
                batch_size: batch_size.unwrap_or(d.batch_size),
                learning_rate: lr.unwrap_or(d.learning_rate),
                seed,
                ..d
            };
            let ckpt = train_command(&TrainArgs {
                data: &data,
                out: &out,
                loss_csv: loss_csv.as_deref(),
                model_seed: seed,
                config,
            })?;
            Ok(serde_json::to_string_pretty(&ckpt.meta)?)
        }
        Command::Detect {
            ckpt,
            image,
            conf,
            iou,
            out,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let dets = detect_command(&ckpt, &image, &nms_config(conf, iou))?;
            emit(out, serde_json::to_string_pretty(&dets)?)
        }
        Command::Count { grids, anchors } => Ok(count_command(&grids, anchors)?.to_string()),
        Command::ShiftSweep {
            ckpt,
            image,
            axis,
            range,
            step,
            pathway,
            out,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let pathway = pathway.as_deref().map(Pathway::parse).transpose()?;
            let shifts = parse_range(&range, step)?;
            let (_, rows) = shift_sweep_command(&ckpt, &image, Axis::parse(&axis)?, &shifts, pathway)?;
            let mut buf = Vec::new();
            write_shift_csv(&rows, &mut buf).expect("writing to memory");
            let csv = String::from_utf8(buf).expect("ascii csv");
            emit(out, csv.trim_end().to_string())
        }
        Command::Saliency {
            ckpt,
            data,
            class_id,
            pathway,
            i,
            j,
            anchor,
            neuron,
            tap_layer,
            n,
            png,
            out,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let req = SaliencyRequest {
                class_id,
                pathway,
                i,
                j,
                anchor,
                neuron,
                tap_layer,
                n,
            };
            let payload = saliency_command(&ckpt, &data, &req)?;
            if let Some(path) = png {
                use base64::Engine;
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(&payload.png_base64)
                    .expect("payload holds valid base64");
                fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
            }
            emit(out, serde_json::to_string(&payload)?)
        }
        Command::Serve {
            ckpt,
            data,
            addr,
            static_dir,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let files = load_dataset(&data)?;
            let runtime = tokio::runtime::Runtime::new().map_err(CliError::Server)?;
            runtime
                .block_on(serve(AppState::new(ckpt, files), &addr, static_dir))
                .map_err(CliError::Server)?;
            Ok(String::new())
        }
    }
}
