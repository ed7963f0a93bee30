//! End-to-end tests of the `densify` binary: exit codes, stream discipline
//! (JSON summary on stdout, human text on stderr), determinism of artifacts,
//! and a full pipeline smoke run over synthetic data.

use std::fs;
use std::path::Path;
use std::process::Command;

use densify_core::eval::{format_kitti_label, parse_kitti_labels};
use densify_core::geometry::{CameraCalibration, Point3, PointCloud};
use densify_core::io::synth::{synth_scene, SynthSpec};
use densify_core::io::{write_calib, write_velodyne_bin};
use densify_core::model::ModelConfig;

fn densify(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_densify"))
        .args(args)
        .output()
        .expect("binary spawns");
    (
        out.status.code().expect("binary exits normally"),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Parses the last non-empty stdout line as the JSON summary.
fn summary_json(stdout: &str) -> serde_json::Value {
    let line = stdout.lines().rev().find(|l| !l.trim().is_empty()).expect("stdout has a summary");
    serde_json::from_str(line).expect("summary line is JSON")
}

#[test]
fn help_exits_zero() {
    let (code, stdout, _) = densify(&["--help"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("downsample") && stdout.contains("gradcheck"));
}

#[test]
fn unknown_flag_exits_one() {
    let (code, _, stderr) = densify(&["downsample", "--no-such-flag"]);
    assert_eq!(code, 1);
    assert!(!stderr.is_empty());
}

#[test]
fn missing_input_exits_two() {
    let tmp = tempfile::TempDir::new().unwrap();
    let out = tmp.path().join("out.bin");
    let (code, _, stderr) = densify(&[
        "downsample",
        "--in",
        "/definitely/not/here.bin",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(stderr.contains("error"), "stderr: {stderr}");
}

#[test]
fn failed_gradcheck_exits_three() {
    let tmp = tempfile::TempDir::new().unwrap();
    let config = tmp.path().join("micro.json");
    fs::write(
        &config,
        r#"{"model": {"in_channels": 1, "patch_size": 16, "token_dim": 16,
            "cnn_channels": [1, 2, 3, 4], "enc_layers": 1, "dec_layers": 1,
            "n_heads": 2, "ffn_dim": 8, "k_out": 2, "enc_dropout": 0.0,
            "dec_dropout": 0.0, "fourier_bands": 8, "fourier_sigma": 1.0,
            "fourier_seed": 0}}"#,
    )
    .unwrap();
    // No float gradient survives a 1e-18 bar; the command must fail honestly.
    let (code, stdout, _) = densify(&[
        "gradcheck",
        "--config",
        config.to_str().unwrap(),
        "--queries",
        "1",
        "--threshold",
        "1e-18",
    ]);
    assert_eq!(code, 3);
    let v = summary_json(&stdout);
    assert_eq!(v["passed"], serde_json::Value::Bool(false));
}

// Seed 4 is pinned by measurement: at these tiny widths some seeds leave a
// whole conv stage dead, which parks downstream zero-initialized biases
// exactly on the relu kink where central differences are one-sided and the
// check fails honestly. Seed 4 yields a fixture clear of such points
// (max rel err 4.4e-4), and the run is deterministic.
#[test]
fn passing_gradcheck_exits_zero() {
    let tmp = tempfile::TempDir::new().unwrap();
    let config = tmp.path().join("micro.json");
    fs::write(
        &config,
        r#"{"model": {"in_channels": 1, "patch_size": 16, "token_dim": 16,
            "cnn_channels": [1, 2, 3, 4], "enc_layers": 1, "dec_layers": 1,
            "n_heads": 2, "ffn_dim": 8, "k_out": 2, "enc_dropout": 0.0,
            "dec_dropout": 0.0, "fourier_bands": 8, "fourier_sigma": 1.0,
            "fourier_seed": 0}}"#,
    )
    .unwrap();
    let (code, stdout, stderr) = densify(&[
        "gradcheck",
        "--config",
        config.to_str().unwrap(),
        "--queries",
        "1",
        "--seed",
        "4",
    ]);
    assert_eq!(code, 0, "gradcheck: {stderr}");
    let v = summary_json(&stdout);
    assert_eq!(v["passed"], serde_json::Value::Bool(true));
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-3);
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let (code, _, _) =
            densify(&["synth", "--out", dir.to_str().unwrap(), "--seed", "11", "--scenes", "2"]);
        assert_eq!(code, 0);
    }
    for id in ["000000", "000001"] {
        for rel in [
            format!("velodyne/{id}.bin"),
            format!("image_2/{id}.pgm"),
            format!("calib/{id}.txt"),
            format!("label_2/{id}.txt"),
        ] {
            let fa = fs::read(a.join(&rel)).unwrap();
            let fb = fs::read(b.join(&rel)).unwrap();
            assert_eq!(fa, fb, "{rel} differs between same-seed runs");
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    for key in ["started_utc", "finished_utc"] {
        let ts = manifest[key].as_str().unwrap();
        assert!(ts.contains('T') && ts.ends_with('Z'), "{key} not RFC 3339: {ts}");
    }
}

#[test]
fn synth_zero_scenes_writes_manifest_only() {
    let tmp = tempfile::TempDir::new().unwrap();
    let dir = tmp.path().join("empty");
    let (code, _, _) = densify(&["synth", "--out", dir.to_str().unwrap(), "--scenes", "0"]);
    assert_eq!(code, 0);
    assert!(dir.join("manifest.json").exists());
    assert_eq!(fs::read_dir(dir.join("velodyne")).unwrap().count(), 0);
}

#[test]
fn fps_and_rps_select_differently() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scene = synth_scene(&SynthSpec { seed: 8, ..SynthSpec::default() }).unwrap();
    let dense = tmp.path().join("dense.bin");
    write_velodyne_bin(&scene.dense_cloud, &dense).unwrap();
    let mut outs = Vec::new();
    for method in ["fps", "rps"] {
        let out = tmp.path().join(format!("{method}.groups"));
        let (code, _, stderr) = densify(&[
            "sample",
            "--in",
            dense.to_str().unwrap(),
            "--dense",
            dense.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--n",
            "32",
            "--k",
            "4",
            "--method",
            method,
            "--seed",
            "6",
        ]);
        assert_eq!(code, 0, "{method}: {stderr}");
        outs.push(fs::read(&out).unwrap());
    }
    assert_ne!(outs[0], outs[1], "fps and rps picked identical query sets");
}

#[test]
fn sample_with_too_few_points_exits_two() {
    let tmp = tempfile::TempDir::new().unwrap();
    let sparse = tmp.path().join("sparse.bin");
    let cloud = PointCloud::new(vec![
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(2.0, 0.0, 0.0),
        Point3::new(3.0, 0.0, 0.0),
    ])
    .unwrap();
    write_velodyne_bin(&cloud, &sparse).unwrap();
    let (code, _, stderr) = densify(&[
        "sample",
        "--in",
        sparse.to_str().unwrap(),
        "--dense",
        sparse.to_str().unwrap(),
        "--out",
        tmp.path().join("g.groups").to_str().unwrap(),
        "--n",
        "10",
        "--k",
        "2",
    ]);
    assert_eq!(code, 2, "stderr: {stderr}");
}

#[test]
fn eval_of_identical_clouds_reports_zero_and_null_psnr() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scene = synth_scene(&SynthSpec { seed: 3, ..SynthSpec::default() }).unwrap();
    let bin = tmp.path().join("cloud.bin");
    write_velodyne_bin(&scene.dense_cloud, &bin).unwrap();
    let (code, stdout, _) =
        densify(&["eval", "--pred", bin.to_str().unwrap(), "--gt", bin.to_str().unwrap()]);
    assert_eq!(code, 0);
    let v = summary_json(&stdout);
    assert_eq!(v["chamfer"].as_f64(), Some(0.0));
    assert!(v["psnr"].is_null(), "psnr of identical clouds serializes as null, got {}", v["psnr"]);
}

#[test]
fn eval_scores_detections_against_labels() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scene = synth_scene(&SynthSpec { seed: 14, ..SynthSpec::default() }).unwrap();
    let bin = tmp.path().join("cloud.bin");
    write_velodyne_bin(&scene.dense_cloud, &bin).unwrap();

    let labels_path = tmp.path().join("labels.txt");
    let mut labels = String::new();
    for b in scene.boxes.as_ref().expect("synth scenes carry boxes") {
        labels.push_str(&format_kitti_label("Box", b, None));
        labels.push('\n');
    }
    fs::write(&labels_path, &labels).unwrap();

    // Detections identical to the ground truth, descending confidence.
    let entries = parse_kitti_labels(&labels).unwrap();
    let mut dets = String::new();
    for (i, e) in entries.iter().enumerate() {
        dets.push_str(&format_kitti_label(&e.class, &e.box3d, Some(0.9 - 0.01 * i as f64)));
        dets.push('\n');
    }
    let dets_path = tmp.path().join("dets.txt");
    fs::write(&dets_path, dets).unwrap();

    let (code, stdout, stderr) = densify(&[
        "eval",
        "--pred",
        bin.to_str().unwrap(),
        "--gt",
        bin.to_str().unwrap(),
        "--dets",
        dets_path.to_str().unwrap(),
        "--labels",
        labels_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stderr: {stderr}");
    let v = summary_json(&stdout);
    assert_eq!(v["ap"].as_f64(), Some(1.0), "perfect detections score AP 1.0");
}

/// Camera-frustum crop with real KITTI intrinsics (P2 of the standard split),
/// then the default 8/8 downsample. With the bottom image edge 202 px below
/// the principal point, kept beams steeper than ~15.6 degrees hit ground
/// inside the crop bound and drop out; five of the eight kept beams survive
/// across at most ~127 in-view azimuth columns, bounding the count near 635
/// before edge and occlusion losses. The fixture measures 551.
#[test]
fn kitti_intrinsics_crop_count() {
    let tmp = tempfile::TempDir::new().unwrap();
    let spec = SynthSpec { seed: 42, n_objects: 8, x_range: (8.0, 40.0), ..SynthSpec::default() };
    let scene = synth_scene(&spec).unwrap();
    let dense = tmp.path().join("dense.bin");
    write_velodyne_bin(&scene.dense_cloud, &dense).unwrap();

    let calib = CameraCalibration::new(
        [
            [7.215377e2, 0.0, 6.095593e2, 4.485728e1],
            [0.0, 7.215377e2, 1.72854e2, 2.163791e-1],
            [0.0, 0.0, 1.0, 2.745884e-3],
        ],
        [
            [0.9999239, 0.00983776, -0.00744505],
            [-0.0098698, 0.9999421, -0.00427846],
            [0.00740253, 0.00435161, 0.9999631],
        ],
        [
            [7.533745e-3, -9.999714e-1, -6.166020e-4, -4.069766e-3],
            [1.480249e-2, 7.280733e-4, -9.998902e-1, -7.631618e-2],
            [9.998621e-1, 7.523790e-3, 1.480755e-2, -2.717806e-1],
        ],
    )
    .unwrap();
    let calib_path = tmp.path().join("calib.txt");
    write_calib(&calib, &calib_path).unwrap();

    let (code, stdout, stderr) = densify(&[
        "downsample",
        "--in",
        dense.to_str().unwrap(),
        "--out",
        tmp.path().join("sparse.bin").to_str().unwrap(),
        "--calib",
        calib_path.to_str().unwrap(),
        "--img-w",
        "1242",
        "--img-h",
        "375",
        "--noise",
        "0",
    ]);
    assert_eq!(code, 0, "stderr: {stderr}");
    let v = summary_json(&stdout);
    let n = v["points_out"].as_i64().unwrap();
    assert!(
        (500..=650).contains(&n),
        "KITTI-intrinsics crop + 8/8 downsample gave {n} points, outside the derived band"
    );
}

#[test]
fn pipeline_smoke_through_binary() {
    let tmp = tempfile::TempDir::new().unwrap();
    let base = tmp.path().join("base");
    let (code, _, stderr) =
        densify(&["synth", "--out", base.to_str().unwrap(), "--seed", "5", "--scenes", "1"]);
    assert_eq!(code, 0, "synth: {stderr}");

    let dense = base.join("velodyne").join("000000.bin");
    let sparse = tmp.path().join("sparse.bin");
    let (code, _, stderr) = densify(&[
        "downsample",
        "--in",
        dense.to_str().unwrap(),
        "--out",
        sparse.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "downsample: {stderr}");

    let data = tmp.path().join("data");
    fs::create_dir_all(data.join("groups")).unwrap();
    fs::create_dir_all(data.join("image_2")).unwrap();
    let groups = data.join("groups").join("000000.groups");
    let (code, _, stderr) = densify(&[
        "sample",
        "--in",
        sparse.to_str().unwrap(),
        "--dense",
        dense.to_str().unwrap(),
        "--out",
        groups.to_str().unwrap(),
        "--n",
        "64",
        "--k",
        "8",
    ]);
    assert_eq!(code, 0, "sample: {stderr}");
    assert!(manifest_next_to(&groups));
    fs::copy(base.join("image_2").join("000000.pgm"), data.join("image_2").join("000000.pgm"))
        .unwrap();

    let config = tmp.path().join("config.json");
    let config_json = serde_json::json!({
        "model": serde_json::to_value(&micro_config(8)).unwrap(),
        "train": {"steps": 300, "lr_init": 1e-3, "seed": 1},
    });
    fs::write(&config, config_json.to_string()).unwrap();
    let ckpt = tmp.path().join("model.ckpt");
    let (code, stdout, stderr) = densify(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "train: {stderr}");
    assert!(manifest_next_to(&ckpt));
    let final_loss = summary_json(&stdout)["final_loss"].as_f64().unwrap();
    let initial_loss = first_logged_loss(&ckpt.with_extension("loss.csv"));
    assert!(
        final_loss < initial_loss,
        "training must reduce the chamfer loss below the untrained start, \
         got {final_loss:.4} vs {initial_loss:.4}"
    );

    let scene = tmp.path().join("scene");
    fs::create_dir_all(scene.join("velodyne")).unwrap();
    fs::create_dir_all(scene.join("image_2")).unwrap();
    fs::copy(&sparse, scene.join("velodyne").join("000000.bin")).unwrap();
    fs::copy(base.join("image_2").join("000000.pgm"), scene.join("image_2").join("000000.pgm"))
        .unwrap();
    let recon = tmp.path().join("recon.ply");
    let (code, stdout, stderr) = densify(&[
        "reconstruct",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        recon.to_str().unwrap(),
        "--n",
        "64",
    ]);
    assert_eq!(code, 0, "reconstruct: {stderr}");
    assert!(manifest_next_to(&recon));
    let v = summary_json(&stdout);
    assert_eq!(v["points"].as_u64(), Some(64 * 8));

    let (code, stdout, stderr) =
        densify(&["eval", "--pred", recon.to_str().unwrap(), "--gt", dense.to_str().unwrap()]);
    assert_eq!(code, 0, "eval: {stderr}");
    assert!(stderr.contains("chamfer"), "human-readable table goes to stderr");
    assert!(summary_json(&stdout)["chamfer"].as_f64().unwrap().is_finite());
}

fn micro_config(k_out: usize) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        patch_size: 32,
        token_dim: 16,
        cnn_channels: [1, 2, 3, 4],
        enc_layers: 1,
        dec_layers: 1,
        n_heads: 2,
        ffn_dim: 8,
        k_out,
        enc_dropout: 0.0,
        dec_dropout: 0.0,
        fourier_bands: 8,
        fourier_sigma: 0.05,
        fourier_seed: 0,
    }
}

/// Loss column of the first record in a training loss CSV.
fn first_logged_loss(csv: &Path) -> f64 {
    let text = fs::read_to_string(csv).expect("loss curve written by default");
    let mut lines = text.lines();
    let col = lines
        .next()
        .unwrap()
        .split(',')
        .position(|h| h == "loss")
        .expect("loss column in header");
    lines.next().unwrap().split(',').nth(col).unwrap().parse().unwrap()
}

fn manifest_next_to(artifact: &Path) -> bool {
    let name = artifact.file_name().unwrap().to_string_lossy();
    artifact.with_file_name(format!("{name}.manifest.json")).exists()
}
