use std::process::Command;

use clap::Parser;

use miniyolo::checkpoint::Checkpoint;
use miniyolo::data::{encode_png, generate_split, GeneratorConfig};
use miniyolo::eval::{shift_sweep, Axis, ShiftRow};
use miniyolo::postprocess::NmsConfig;
use miniyolo::{AnchorSet, ModelConfig, ModelState, Pathway};
use miniyolo_cli::cli::{run, Cli};
use miniyolo_cli::commands::{count_command, detect_command, parse_range, shift_sweep_command, write_shift_csv};
use miniyolo_cli::CliError;

fn run_args(args: &[&str]) -> Result<String, CliError> {
    run(Cli::try_parse_from(std::iter::once("miniyolo").chain(args.iter().copied())).unwrap())
}

#[test]
fn count_defaults_give_10647() {
    assert_eq!(count_command(&[13, 26, 52], 3).unwrap(), 10647);
    assert_eq!(run_args(&["count"]).unwrap(), "10647");
    assert_eq!(
        run_args(&["count", "--grids", "12,6,3", "--anchors", "3"]).unwrap(),
        "567"
    );
    assert!(count_command(&[], 3).is_err());
    assert!(count_command(&[13, 0], 3).is_err());
    assert!(count_command(&[13], 0).is_err());
}

#[test]
fn binary_prints_count() {
    let out = Command::new(env!("CARGO_BIN_EXE_miniyolo"))
        .args(["count", "--grids", "13,26,52", "--anchors", "3"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "10647");
}

#[test]
fn binary_reports_errors_with_failure_status() {
    let out = Command::new(env!("CARGO_BIN_EXE_miniyolo"))
        .args(["detect", "--checkpoint", "/nonexistent/model.ckpt", "--image", "x.png"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("error"));
}

#[test]
fn ranges_are_inclusive() {
    assert_eq!(parse_range("-16..16", 8).unwrap(), vec![-16, -8, 0, 8, 16]);
    assert_eq!(parse_range("0..5", 2).unwrap(), vec![0, 2, 4]);
    assert_eq!(parse_range("3..3", 1).unwrap(), vec![3]);
    for bad in ["5..1", "1-5", "a..b", ""] {
        assert!(parse_range(bad, 1).is_err(), "{bad}");
    }
    assert!(parse_range("0..4", 0).is_err());
}

#[test]
fn negative_range_parses_from_the_command_line() {
    let cli = Cli::try_parse_from([
        "miniyolo",
        "shift-sweep",
        "--checkpoint",
        "c",
        "--image",
        "i",
        "--range",
        "-32..-8",
    ]);
    assert!(cli.is_ok());
}

#[test]
fn shift_csv_has_one_row_per_shift() {
    let rows = vec![
        ShiftRow {
            shift: -2,
            row: 1,
            col: 3,
            confidence: 0.5,
        },
        ShiftRow {
            shift: 0,
            row: 1,
            col: 4,
            confidence: 0.25,
        },
    ];
    let mut buf = Vec::new();
    write_shift_csv(&rows, &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "shift,row,col,confidence\n-2,1,3,0.5\n0,1,4,0.25\n"
    );
}

fn saved_model(dir: &std::path::Path) -> (Checkpoint, std::path::PathBuf) {
    let config = ModelConfig::default();
    let ext: Vec<(f64, f64)> = (1..=9).map(|i| (6.0 * i as f64, 5.0 * i as f64)).collect();
    let anchors = AnchorSet::from_extents(&ext, 3).unwrap();
    let ckpt = Checkpoint::new(ModelState::build(config, 3).unwrap(), anchors, 0, Vec::new());
    let path = dir.join("m.ckpt");
    ckpt.save(&path).unwrap();
    (ckpt, path)
}

#[test]
fn shift_sweep_command_matches_library_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = saved_model(dir.path());
    let sample = &generate_split(1, 9, "val", &GeneratorConfig::default())
        .unwrap()
        .samples[0];
    let img_path = dir.path().join("img.png");
    std::fs::write(&img_path, encode_png(&sample.image).unwrap()).unwrap();

    let shifts = parse_range("-16..16", 8).unwrap();
    let (p, rows) = shift_sweep_command(&ckpt, &img_path, Axis::Y, &shifts, Some(Pathway::Medium)).unwrap();
    assert_eq!(p, Pathway::Medium);
    assert_eq!(
        rows,
        shift_sweep(&ckpt.state, &sample.image, Pathway::Medium, Axis::Y, &shifts).unwrap()
    );
    assert_eq!(rows.iter().map(|r| r.shift).collect::<Vec<_>>(), shifts);

    assert!(shift_sweep_command(&ckpt, &img_path, Axis::X, &[97], None).is_err());
}

#[test]
fn detect_rejects_wrong_sized_images() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = saved_model(dir.path());
    let img_path = dir.path().join("small.png");
    std::fs::write(&img_path, encode_png(&image::RgbImage::new(40, 40)).unwrap()).unwrap();
    assert!(matches!(
        detect_command(&ckpt, &img_path, &NmsConfig::default()),
        Err(CliError::Usage(_))
    ));
}

#[test]
fn generate_then_detect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let meta = run_args(&[
        "generate",
        "--out",
        data.to_str().unwrap(),
        "--n-train",
        "3",
        "--n-val",
        "2",
        "--seed",
        "4",
    ])
    .unwrap();
    assert!(meta.contains('4'));
    let (_, ckpt_path) = saved_model(dir.path());
    let img = std::fs::read_dir(&data)
        .unwrap()
        .flatten()
        .flat_map(|e| std::fs::read_dir(e.path()).into_iter().flatten().flatten())
        .map(|e| e.path())
        .find(|p| p.extension().is_some_and(|x| x == "png"))
        .expect("generated pngs");
    let out = run_args(&[
        "detect",
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
    ])
    .unwrap();
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["v"], 1);
    assert!(v["detections"].is_array());

    let file = dir.path().join("dets.json");
    let printed = run_args(&[
        "detect",
        "--ckpt",
        ckpt_path.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--out",
        file.to_str().unwrap(),
    ])
    .unwrap();
    assert!(printed.is_empty());
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(written, v);
}
