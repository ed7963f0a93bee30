//! One function per subcommand. Each returns the final summary JSON value;
//! `main` prints it to stdout as the last machine-readable line. Commands may
//! print additional JSON lines of their own (training progress, a failing
//! gradient check) before returning.

use std::fs;
use std::path::{Path, PathBuf};

use densify_core::eval::{
    assemble_scene, average_precision, boxes_from_labels, detections_from_labels,
    format_kitti_label, parse_kitti_labels, reconstruction_report,
};
use densify_core::geometry::{frustum_crop, Point3, PointCloud};
use densify_core::io::synth::{place_objects, synth_scene_from, SynthSpec};
use densify_core::io::{
    self, read_calib, read_cloud, read_groups, read_image, read_velodyne_bin, scene_ids,
    write_calib, write_groups, write_pgm, write_ply, write_velodyne_bin,
};
use densify_core::lidar::{downsample_frame, DownsampleSpec, LidarSpec};
use densify_core::model::{
    forward, forward_on_tape, stage, ModelConfig, ModelWeights,
};
use densify_core::nn::{gradient_check, NnError, Tape, Tensor};
use densify_core::sampling::{
    extract_groups, farthest_point_sampling, random_point_sampling, QuerySet,
};
use densify_core::train::{
    batch_loss_with_grad, pairs_to_training_data, train, write_loss_csv, AdamState, Checkpoint,
    TrainConfig, TrainScene,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{
    Command, DownsampleArgs, EvalArgs, GradcheckArgs, ReconstructArgs, SampleArgs, SampleMethod,
    SynthArgs, TrainArgs,
};
use crate::error::CliError;
use crate::manifest::{manifest_path_for, RunManifest};

pub fn dispatch(cmd: &Command) -> Result<serde_json::Value, CliError> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Downsample(a) => cmd_downsample(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Config file schema shared by `train` and `gradcheck`: both sections are
/// optional and default to the reference configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn load_pipeline_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let Some(path) = path else { return Ok(PipelineConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e))
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<serde_json::Value, CliError> {
    for dir in [io::CLOUD_DIR, io::IMAGE_DIR, io::CALIB_DIR, io::LABEL_DIR] {
        let p = args.out.join(dir);
        fs::create_dir_all(&p).map_err(|e| file_err(&p, e))?;
    }
    let config = json!({
        "scenes": args.scenes,
        "objects": args.objects,
        "image_w": args.image_w,
        "image_h": args.image_h,
        "focal_px": args.focal,
    });
    let mut manifest = RunManifest::start("synth", args.seed, config);
    for i in 0..args.scenes {
        let spec = SynthSpec {
            seed: args.seed.wrapping_add(i as u64),
            n_objects: args.objects,
            image_w: args.image_w,
            image_h: args.image_h,
            focal_px: args.focal,
            ..SynthSpec::default()
        };
        let objects = place_objects(&spec)?;
        let scene = synth_scene_from(&spec, &objects)?;
        let id = format!("{i:06}");
        let cloud_path = args.out.join(io::CLOUD_DIR).join(format!("{id}.bin"));
        write_velodyne_bin(&scene.dense_cloud, &cloud_path)?;
        let image_path = args.out.join(io::IMAGE_DIR).join(format!("{id}.pgm"));
        write_pgm(&scene.image, &image_path)?;
        let calib_path = args.out.join(io::CALIB_DIR).join(format!("{id}.txt"));
        write_calib(&scene.calib, &calib_path)?;
        let label_path = args.out.join(io::LABEL_DIR).join(format!("{id}.txt"));
        let mut labels = String::new();
        for o in &objects {
            labels.push_str(&format_kitti_label(o.class_name(), &o.bounds(), None));
            labels.push('\n');
        }
        fs::write(&label_path, labels).map_err(|e| file_err(&label_path, e))?;
        for p in [&cloud_path, &image_path, &calib_path, &label_path] {
            manifest.add_output(p)?;
        }
        log::info!("scene {id}: {} points, {} objects", scene.dense_cloud.len(), objects.len());
    }
    let manifest_path = args.out.join("manifest.json");
    manifest.write(&manifest_path)?;
    Ok(json!({
        "cmd": "synth",
        "scenes": args.scenes,
        "dir": args.out.display().to_string(),
        "manifest": manifest_path.display().to_string(),
    }))
}

pub fn cmd_downsample(args: &DownsampleArgs) -> Result<serde_json::Value, CliError> {
    if args.beam_stride == 0 || args.azim_stride == 0 {
        return Err(CliError::Usage("strides must be at least 1".into()));
    }
    if !args.noise.is_finite() || args.noise < 0.0 {
        return Err(CliError::Usage(format!(
            "noise amplitude {} must be finite and non-negative",
            args.noise
        )));
    }
    let cloud = read_cloud(&args.input)?;
    let points_in = cloud.len();
    let (work, points_cropped) = match &args.calib {
        Some(calib_path) => {
            let calib = read_calib(calib_path)?;
            // clap guarantees both dimensions accompany --calib
            let (w, h) = (args.img_w.unwrap(), args.img_h.unwrap());
            let cropped = frustum_crop(&cloud, &calib, w, h);
            let n = cropped.len();
            (cropped, Some(n))
        }
        None => (cloud, None),
    };
    let spec = DownsampleSpec {
        beam_stride: args.beam_stride,
        azim_stride: args.azim_stride,
        noise_amplitude: args.noise,
        seed: args.seed,
    };
    let sparse = downsample_frame(&work, &LidarSpec::default(), &spec);
    write_cloud(&sparse, &args.out)?;
    match points_cropped {
        Some(c) => log::info!("{points_in} points in, {c} after crop, {} out", sparse.len()),
        None => log::info!("{points_in} points in, {} out", sparse.len()),
    }

    let config = json!({
        "beam_stride": args.beam_stride,
        "azim_stride": args.azim_stride,
        "noise": args.noise,
        "crop": args.calib.is_some(),
        "img_w": args.img_w,
        "img_h": args.img_h,
    });
    let mut manifest = RunManifest::start("downsample", args.seed, config);
    manifest.add_input(&args.input)?;
    if let Some(c) = &args.calib {
        manifest.add_input(c)?;
    }
    manifest.add_output(&args.out)?;
    let manifest_path = manifest_path_for(&args.out);
    manifest.write(&manifest_path)?;

    let mut value = json!({
        "cmd": "downsample",
        "points_in": points_in,
        "points_out": sparse.len(),
        "out": args.out.display().to_string(),
        "manifest": manifest_path.display().to_string(),
    });
    if let Some(c) = points_cropped {
        value["points_cropped"] = c.into();
    }
    Ok(value)
}

pub fn cmd_sample(args: &SampleArgs) -> Result<serde_json::Value, CliError> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if args.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    if !(args.radius > 0.0) {
        return Err(CliError::Usage(format!("--radius {} must be positive", args.radius)));
    }
    let sparse = read_cloud(&args.input)?;
    if sparse.is_empty() {
        return Err(file_err(&args.input, "sparse cloud is empty"));
    }
    let dense = read_cloud(&args.dense)?;
    let queries = select_queries(&sparse, args.n, args.method, args.seed)?;
    let (pairs, skipped) = extract_groups(&dense, &queries.queries, args.k, args.radius, args.seed)?;
    if !skipped.is_empty() {
        log::warn!(
            "{} of {} queries had no dense neighbor within {} m and were dropped",
            skipped.len(),
            queries.queries.len(),
            args.radius
        );
    }
    if pairs.is_empty() {
        return Err(CliError::Data(
            "no query found any dense neighbors; radius too small or clouds disjoint".into(),
        ));
    }
    write_groups(&pairs, args.radius, &args.out)?;

    let config = json!({
        "n": args.n,
        "k": args.k,
        "radius": args.radius,
        "method": method_name(args.method),
    });
    let mut manifest = RunManifest::start("sample", args.seed, config);
    manifest.add_input(&args.input)?;
    manifest.add_input(&args.dense)?;
    manifest.add_output(&args.out)?;
    let manifest_path = manifest_path_for(&args.out);
    manifest.write(&manifest_path)?;

    Ok(json!({
        "cmd": "sample",
        "method": method_name(args.method),
        "queries": args.n,
        "groups": pairs.len(),
        "skipped": skipped.len(),
        "k": args.k,
        "radius": args.radius,
        "out": args.out.display().to_string(),
        "manifest": manifest_path.display().to_string(),
    }))
}

fn method_name(m: SampleMethod) -> &'static str {
    match m {
        SampleMethod::Fps => "fps",
        SampleMethod::Rps => "rps",
    }
}

fn select_queries(
    cloud: &PointCloud,
    n: usize,
    method: SampleMethod,
    seed: u64,
) -> Result<QuerySet, CliError> {
    match method {
        // The start index derives from the seed so both methods key off the
        // same flag.
        SampleMethod::Fps => {
            let start = (seed % cloud.len() as u64) as usize;
            Ok(farthest_point_sampling(cloud, n, start)?)
        }
        SampleMethod::Rps => Ok(random_point_sampling(cloud, n, seed)?),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<serde_json::Value, CliError> {
    let mut config = load_pipeline_config(args.config.as_deref())?;
    if let Some(steps) = args.steps {
        config.train.steps = steps;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    config.model.validate()?;
    config.train.validate()?;

    let config_value =
        serde_json::to_value(&config).map_err(|e| CliError::Data(format!("config: {e}")))?;
    let mut manifest = RunManifest::start("train", config.train.seed, config_value);
    if let Some(c) = &args.config {
        manifest.add_input(c)?;
    }

    let groups_dir = args.data.join("groups");
    let ids = stems_with_ext(&groups_dir, "groups")?;
    if ids.is_empty() {
        return Err(file_err(&groups_dir, "no .groups files"));
    }
    let mut scenes = Vec::new();
    let mut radius = None;
    for id in &ids {
        let groups_path = groups_dir.join(format!("{id}.groups"));
        let gf = read_groups(&groups_path)?;
        if gf.k != config.model.k_out {
            return Err(CliError::Data(format!(
                "{}: groups hold {} points each but the model generates k_out {}; \
                 resample or change the model config",
                groups_path.display(),
                gf.k,
                config.model.k_out
            )));
        }
        match radius {
            None => radius = Some(gf.radius),
            Some(r) if r == gf.radius => {}
            Some(r) => {
                return Err(CliError::Data(format!(
                    "{}: radius {} differs from {} in earlier scenes",
                    groups_path.display(),
                    gf.radius,
                    r
                )))
            }
        }
        let img_path = image_path(&args.data, id)?;
        let image = read_image(&img_path)?;
        if image.shape()[0] != config.model.in_channels {
            return Err(CliError::Data(format!(
                "{}: image has {} channels, the model expects {}",
                img_path.display(),
                image.shape()[0],
                config.model.in_channels
            )));
        }
        let (queries, groups) = pairs_to_training_data(&gf.pairs)?;
        scenes.push(TrainScene { image, queries, groups });
        manifest.add_input(&groups_path)?;
        manifest.add_input(&img_path)?;
    }

    let mut weights = ModelWeights::init(config.model.clone(), config.train.seed)?;
    let mut adam = AdamState::new(&weights);
    log::info!(
        "training on {} scenes: {} parameters, {} steps",
        scenes.len(),
        weights.n_scalars(),
        config.train.steps
    );
    let records = train(&scenes, &mut weights, &mut adam, &config.train)?;
    for r in &records {
        if r.step % 100 == 0 || r.step + 1 == config.train.steps {
            println!("{}", json!({ "event": "train_step", "step": r.step, "lr": r.lr, "loss": r.loss }));
        }
    }

    let csv_path = args.loss_csv.clone().unwrap_or_else(|| args.out.with_extension("loss.csv"));
    write_loss_csv(&csv_path, &records)?;
    let step = adam.t;
    let final_loss = records.last().map(|r| r.loss);
    Checkpoint { weights, adam: Some(adam), step }.save(&args.out)?;

    manifest.add_output(&args.out)?;
    manifest.add_output(&csv_path)?;
    let manifest_path = manifest_path_for(&args.out);
    manifest.write(&manifest_path)?;

    Ok(json!({
        "cmd": "train",
        "scenes": ids.len(),
        "steps": step,
        "final_loss": final_loss,
        "checkpoint": args.out.display().to_string(),
        "loss_csv": csv_path.display().to_string(),
        "manifest": manifest_path.display().to_string(),
    }))
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<serde_json::Value, CliError> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if !(args.radius > 0.0) {
        return Err(CliError::Usage(format!("--radius {} must be positive", args.radius)));
    }
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let id = match &args.id {
        Some(id) => id.clone(),
        None => {
            let ids = scene_ids(&args.scene)?;
            match ids.len() {
                0 => return Err(file_err(&args.scene, "no scenes")),
                1 => ids.into_iter().next().unwrap(),
                n => {
                    return Err(CliError::Usage(format!(
                        "{}: {n} scenes present, pass --id",
                        args.scene.display()
                    )))
                }
            }
        }
    };
    let cloud_path = args.scene.join(io::CLOUD_DIR).join(format!("{id}.bin"));
    let sparse = read_velodyne_bin(&cloud_path)?;
    if sparse.is_empty() {
        return Err(file_err(&cloud_path, "cloud is empty"));
    }
    let img_path = image_path(&args.scene, &id)?;
    let image = read_image(&img_path)?;
    let queries = select_queries(&sparse, args.n, args.method, args.seed)?;
    let pred = forward(&ckpt.weights, &image, &queries.queries)?;
    let cloud = assemble_scene(&pred, &queries.queries, args.radius)?;
    write_ply(&cloud, &args.out)?;
    log::info!("scene {id}: {} queries densified to {} points", args.n, cloud.len());

    let config = json!({
        "id": id,
        "n": args.n,
        "method": method_name(args.method),
        "radius": args.radius,
        "k_out": ckpt.weights.config.k_out,
    });
    let mut manifest = RunManifest::start("reconstruct", args.seed, config);
    manifest.add_input(&args.ckpt)?;
    manifest.add_input(&cloud_path)?;
    manifest.add_input(&img_path)?;
    manifest.add_output(&args.out)?;
    let manifest_path = manifest_path_for(&args.out);
    manifest.write(&manifest_path)?;

    Ok(json!({
        "cmd": "reconstruct",
        "scene": id,
        "queries": args.n,
        "k": ckpt.weights.config.k_out,
        "points": cloud.len(),
        "out": args.out.display().to_string(),
        "manifest": manifest_path.display().to_string(),
    }))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<serde_json::Value, CliError> {
    let pred = read_cloud(&args.pred)?;
    let gt = read_cloud(&args.gt)?;
    let report = reconstruction_report(&pred, &gt)?;
    let mut value =
        serde_json::to_value(&report).map_err(|e| CliError::Data(format!("report: {e}")))?;
    let obj = value.as_object_mut().expect("report serializes to an object");
    obj.insert("cmd".into(), "eval".into());

    let psnr_text =
        if report.psnr.is_finite() { format!("{:.3}", report.psnr) } else { "inf".into() };
    eprintln!("metric            value");
    eprintln!("chamfer (m^2)     {:.6}", report.chamfer);
    eprintln!("psnr (dB)         {psnr_text}");
    eprintln!("points pred/gt    {}/{}", report.n_points_pred, report.n_points_gt);

    if let (Some(dets_path), Some(labels_path)) = (&args.dets, &args.labels) {
        if !(0.0..=1.0).contains(&args.iou) {
            return Err(CliError::Usage(format!("--iou {} outside [0, 1]", args.iou)));
        }
        let dets_text = fs::read_to_string(dets_path).map_err(|e| file_err(dets_path, e))?;
        let entries = parse_kitti_labels(&dets_text).map_err(|e| file_err(dets_path, e))?;
        let dets = detections_from_labels(&entries).map_err(|e| file_err(dets_path, e))?;
        let labels_text = fs::read_to_string(labels_path).map_err(|e| file_err(labels_path, e))?;
        let gts =
            boxes_from_labels(&parse_kitti_labels(&labels_text).map_err(|e| file_err(labels_path, e))?);
        let ap = average_precision(&dets, &gts, args.iou)?;
        obj.insert("ap".into(), ap.into());
        obj.insert("iou_threshold".into(), args.iou.into());
        eprintln!("AP@{:.2}           {ap:.4}", args.iou);
    }

    if let Some(mpath) = &args.manifest {
        let mut manifest = RunManifest::start("eval", 0, json!({ "iou": args.iou }));
        manifest.add_input(&args.pred)?;
        manifest.add_input(&args.gt)?;
        for p in [&args.dets, &args.labels].into_iter().flatten() {
            manifest.add_input(p)?;
        }
        manifest.write(mpath)?;
    }
    Ok(value)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<serde_json::Value, CliError> {
    if args.queries == 0 {
        return Err(CliError::Usage("--queries must be at least 1".into()));
    }
    if !(args.epsilon > 0.0) || !(args.threshold > 0.0) {
        return Err(CliError::Usage("epsilon and threshold must be positive".into()));
    }
    let model_cfg = match &args.config {
        Some(p) => load_pipeline_config(Some(p))?.model,
        None => ModelConfig::gradcheck_reduced(),
    };
    model_cfg.validate()?;

    let mut weights = ModelWeights::init(model_cfg.clone(), args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x9E37_79B9_7F4A_7C15);
    let side = 2 * model_cfg.patch_size;
    let image = Tensor::rand_uniform(&mut rng, &[model_cfg.in_channels, side, side], 0.0, 1.0);
    let queries: Vec<Point3> = (0..args.queries)
        .map(|_| {
            Point3::new(
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
            )
        })
        .collect();
    let target = Tensor::rand_uniform(&mut rng, &[args.queries, model_cfg.k_out, 3], -1.0, 1.0);

    // The training loss on a fixed probe batch, with dropout off so the
    // function stays differentiable at every evaluation point.
    let eval_loss = |w: &ModelWeights, want: bool| -> Result<(f64, Option<Vec<Tensor>>), NnError> {
        let mut tape = Tape::new();
        let vars = stage(w, &mut tape);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0); // dropout disabled, never drawn
        let pred =
            forward_on_tape(&mut tape, w, &vars, &image, &queries, false, &mut drop_rng, None)
                .map_err(|e| NnError::Numeric(e.to_string()))?;
        let (loss, dpred) = batch_loss_with_grad(tape.value(pred), &target)
            .map_err(|e| NnError::Numeric(e.to_string()))?;
        if !want {
            return Ok((loss, None));
        }
        let grads = tape.backward(pred, Some(dpred))?;
        let mut out = Vec::new();
        for p in w.params() {
            let g = if p.trainable {
                vars.get(&p.name)
                    .ok()
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            } else {
                Tensor::zeros(p.value.shape())
            };
            out.push(g);
        }
        Ok((loss, Some(out)))
    };

    let report = gradient_check(
        weights.params_mut(),
        |p, want| {
            // The perturbed slice aliases the weights' storage; rebuild a view.
            let view = ModelWeights::from_parts(
                model_cfg.clone(),
                p.iter().map(|q| (q.name.clone(), q.value.clone(), q.trainable)).collect(),
            )
            .map_err(|e| NnError::Numeric(e.to_string()))?;
            eval_loss(&view, want)
        },
        args.epsilon,
    )?;

    let passed = report.max_rel_err < args.threshold;
    eprintln!(
        "max relative error {:.3e} at {}[{}], {} coordinates checked in {:.1} s",
        report.max_rel_err, report.worst_param, report.worst_index, report.checked,
        report.elapsed_secs
    );
    let value = json!({
        "cmd": "gradcheck",
        "max_rel_err": report.max_rel_err,
        "worst_param": report.worst_param,
        "worst_index": report.worst_index,
        "checked": report.checked,
        "elapsed_secs": report.elapsed_secs,
        "threshold": args.threshold,
        "passed": passed,
    });
    if let Some(mpath) = &args.manifest {
        let config =
            serde_json::to_value(&model_cfg).map_err(|e| CliError::Data(format!("config: {e}")))?;
        let mut manifest = RunManifest::start("gradcheck", args.seed, config);
        if let Some(c) = &args.config {
            manifest.add_input(c)?;
        }
        manifest.write(mpath)?;
    }
    if !passed {
        // The summary line still belongs on the machine stream when the check
        // fails; the caller only prints it on success.
        println!("{value}");
        return Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e} is not below {:.1e}",
            report.max_rel_err, args.threshold
        )));
    }
    Ok(value)
}

/// Writes a cloud by extension, `.bin` (LiDAR quadruples) or `.ply`.
fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<(), CliError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => Ok(write_velodyne_bin(cloud, path)?),
        Some("ply") => Ok(write_ply(cloud, path)?),
        _ => Err(CliError::Usage(format!(
            "{}: cloud outputs need a .bin or .ply extension",
            path.display()
        ))),
    }
}

fn image_path(root: &Path, id: &str) -> Result<PathBuf, CliError> {
    let pgm = root.join(io::IMAGE_DIR).join(format!("{id}.pgm"));
    if pgm.exists() {
        return Ok(pgm);
    }
    let ppm = root.join(io::IMAGE_DIR).join(format!("{id}.ppm"));
    if ppm.exists() {
        return Ok(ppm);
    }
    Err(CliError::Data(format!("no image for scene {id} under {}", root.display())))
}

fn stems_with_ext(dir: &Path, ext: &str) -> Result<Vec<String>, CliError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| file_err(dir, e))? {
        let p = entry.map_err(|e| file_err(dir, e))?.path();
        if p.extension().is_none_or(|e| e != ext) {
            continue;
        }
        if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
            ids.push(stem.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}
