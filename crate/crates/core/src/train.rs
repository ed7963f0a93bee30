//! Chamfer-loss training: AdamW with decoupled weight decay, cosine learning
//! rate decay, global gradient clipping, and bit-exact checkpointing.
//!
//! The loss and its gradient are computed outside the tape (nearest-neighbor
//! search does not need tracing); the gradient is injected as the backward
//! seed of the model output.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;
use crate::model::{forward_on_tape, stage, ModelError, ModelWeights};
use crate::nn::{NnError, Parameter, Tape, Tensor};
use crate::sampling::QueryGroupPair;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("bad training data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 2000,
            lr_init: 1e-4,
            lr_final: 1e-6,
            weight_decay: 0.1,
            clip_norm: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return err("steps must be positive".into());
        }
        if !(self.lr_init > 0.0) || !(self.lr_final > 0.0) {
            return err("learning rates must be positive".into());
        }
        if self.lr_final > self.lr_init {
            return err(format!("lr_final {} exceeds lr_init {}", self.lr_final, self.lr_init));
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay must be nonnegative".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return err("adam_eps must be positive".into());
        }
        Ok(())
    }
}

/// Squared-distance Chamfer loss between two equal-size point sets, plus its
/// gradient with respect to `pred`. Both are `[k, 3]`. Nearest-neighbor ties
/// resolve to the lowest index, which also fixes the subgradient there.
pub fn chamfer_loss(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor), TrainError> {
    let k = check_group_shapes(pred, gt)?;
    let mut grad = vec![0.0f64; k * 3];
    let loss = chamfer_into(pred.data(), gt.data(), k, &mut grad, 1.0);
    Ok((loss, Tensor::new(vec![k, 3], grad)?))
}

/// Mean per-group Chamfer loss over `n` prediction/target groups, `[n, k, 3]`
/// each.
pub fn batch_loss(pred: &Tensor, gt: &Tensor) -> Result<f64, TrainError> {
    Ok(batch_loss_with_grad(pred, gt)?.0)
}

/// `batch_loss` along with its gradient with respect to `pred`, shaped like
/// `pred`. Used as the backward seed for the model output.
pub fn batch_loss_with_grad(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor), TrainError> {
    let (n, k) = match (pred.shape(), gt.shape()) {
        ([n1, k1, 3], [n2, k2, 3]) if n1 == n2 && k1 == k2 => (*n1, *k1),
        (p, g) => {
            return Err(TrainError::Data(format!(
                "group tensors {p:?} and {g:?} must both be [n, k, 3] with matching sizes"
            )))
        }
    };
    if n == 0 || k == 0 {
        return Err(TrainError::Data("point groups must be non-empty".into()));
    }
    let mut grad = vec![0.0f64; pred.numel()];
    let weight = 1.0 / n as f64;
    let mut total = 0.0;
    for g in 0..n {
        let lo = g * k * 3;
        let hi = lo + k * 3;
        total += chamfer_into(&pred.data()[lo..hi], &gt.data()[lo..hi], k, &mut grad[lo..hi], weight);
    }
    Ok((total * weight, Tensor::new(pred.shape().to_vec(), grad)?))
}

fn check_group_shapes(pred: &Tensor, gt: &Tensor) -> Result<usize, TrainError> {
    match (pred.shape(), gt.shape()) {
        ([k1, 3], [k2, 3]) if k1 == k2 && *k1 > 0 => Ok(*k1),
        (p, g) => Err(TrainError::Data(format!(
            "point sets {p:?} and {g:?} must both be non-empty [k, 3]"
        ))),
    }
}

/// One group's symmetric Chamfer term; adds `weight` times its gradient into
/// `grad` (flattened `[k, 3]`, same layout as `pred`).
fn chamfer_into(pred: &[f64], gt: &[f64], k: usize, grad: &mut [f64], weight: f64) -> f64 {
    let inv_k = 1.0 / k as f64;
    let w = 2.0 * inv_k * weight;
    let mut loss = 0.0;
    for i in 0..k {
        let j = nearest(&pred[i * 3..i * 3 + 3], gt, k);
        let (dx, dy, dz) = diff3(pred, i, gt, j);
        loss += dx * dx + dy * dy + dz * dz;
        grad[i * 3] += w * dx;
        grad[i * 3 + 1] += w * dy;
        grad[i * 3 + 2] += w * dz;
    }
    for j in 0..k {
        let i = nearest(&gt[j * 3..j * 3 + 3], pred, k);
        let (dx, dy, dz) = diff3(pred, i, gt, j);
        loss += dx * dx + dy * dy + dz * dz;
        grad[i * 3] += w * dx;
        grad[i * 3 + 1] += w * dy;
        grad[i * 3 + 2] += w * dz;
    }
    loss * inv_k
}

fn diff3(a: &[f64], i: usize, b: &[f64], j: usize) -> (f64, f64, f64) {
    (a[i * 3] - b[j * 3], a[i * 3 + 1] - b[j * 3 + 1], a[i * 3 + 2] - b[j * 3 + 2])
}

fn nearest(p: &[f64], set: &[f64], k: usize) -> usize {
    let mut best = 0;
    let mut best_d2 = f64::INFINITY;
    for (j, q) in set.chunks_exact(3).enumerate().take(k) {
        let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
        let d2 = dx * dx + dy * dy + dz * dz;
        if d2 < best_d2 {
            best_d2 = d2;
            best = j;
        }
    }
    best
}

/// Cosine decay from `lr_init` (step 0) to `lr_final` (step = total). Steps
/// beyond the schedule hold the final rate.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64, lr_final: f64) -> f64 {
    if step == 0 {
        return lr_init; // exact, no float round trip through the formula
    }
    if step >= total_steps {
        return lr_final;
    }
    let ratio = step as f64 / total_steps as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * ratio).cos())
}

/// Scales all gradients by `clip_norm / g` when their joint L2 norm `g`
/// exceeds the bound. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], clip_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > clip_norm {
        let s = clip_norm / norm;
        for t in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// First and second moment estimates, one pair per parameter, plus the count
/// of completed optimizer steps.
pub struct AdamState {
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(weights: &ModelWeights) -> AdamState {
        let zeros: Vec<Tensor> =
            weights.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One AdamW update over all trainable parameters. `grads` must parallel
/// `params`; frozen parameters are skipped. The learning rate comes from the
/// cosine schedule at the state's current step count. Updated parameters and
/// moments are rounded through f32 so they serialize bit-exactly.
pub fn adamw_step(
    params: &mut [Parameter],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Data(format!(
            "{} gradients and {} moment pairs for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    let lr = cosine_lr(state.t, config.steps, config.lr_init, config.lr_final);
    let t = state.t + 1;
    let bc1 = 1.0 - config.adam_beta1.powi(t as i32);
    let bc2 = 1.0 - config.adam_beta2.powi(t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        if grads[i].shape() != p.value.shape() {
            return Err(TrainError::Data(format!(
                "gradient shape {:?} for parameter {} of shape {:?}",
                grads[i].shape(),
                p.name,
                p.value.shape()
            )));
        }
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = p.value.data_mut();
        for j in 0..g.len() {
            m[j] = config.adam_beta1 * m[j] + (1.0 - config.adam_beta1) * g[j];
            v[j] = config.adam_beta2 * v[j] + (1.0 - config.adam_beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            theta[j] -= lr * config.weight_decay * theta[j] + lr * mhat / (vhat.sqrt() + config.adam_eps);
        }
        p.value.round_to_f32();
        state.m[i].round_to_f32();
        state.v[i].round_to_f32();
    }
    state.t = t;
    Ok(())
}

/// One training example: an image, its query points, and the `[n, k, 3]`
/// normalized target groups aligned with the queries.
pub struct TrainScene {
    pub image: Tensor,
    pub queries: Vec<Point3>,
    pub groups: Tensor,
}

/// Splits extracted query/group pairs into the query list and the `[n, k, 3]`
/// target tensor the training loop consumes.
pub fn pairs_to_training_data(
    pairs: &[QueryGroupPair],
) -> Result<(Vec<Point3>, Tensor), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Data("no query/group pairs".into()));
    }
    let k = pairs[0].group.len();
    if k == 0 {
        return Err(TrainError::Data("empty groups".into()));
    }
    let mut queries = Vec::with_capacity(pairs.len());
    let mut data = Vec::with_capacity(pairs.len() * k * 3);
    for pair in pairs {
        if pair.group.len() != k {
            return Err(TrainError::Data(format!(
                "group sizes differ: {} and {}",
                k,
                pair.group.len()
            )));
        }
        queries.push(pair.query);
        for p in &pair.group {
            data.extend_from_slice(&[p.x, p.y, p.z]);
        }
    }
    Ok((queries, Tensor::new(vec![pairs.len(), k, 3], data)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Writes a loss curve as `step,lr,loss` CSV. Values print in shortest
/// round-trip form, so parsing the file back recovers them exactly.
pub fn write_loss_csv(path: &Path, records: &[TrainRecord]) -> Result<(), TrainError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "step,lr,loss")?;
    for r in records {
        writeln!(out, "{},{},{}", r.step, r.lr, r.loss)?;
    }
    out.flush()?;
    Ok(())
}

/// Dropout randomness for one step, derived from the run seed so a resumed
/// run replays the exact stream of the uninterrupted one.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(step)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the training loop from the state's current step to `config.steps`.
/// Scenes are visited round-robin, one scene per step. Returns one record per
/// executed step.
pub fn train(
    scenes: &[TrainScene],
    weights: &mut ModelWeights,
    adam: &mut AdamState,
    config: &TrainConfig,
) -> Result<Vec<TrainRecord>, TrainError> {
    train_until(scenes, weights, adam, config, config.steps)
}

/// `train`, stopping after step `until` (exclusive) even if the schedule has
/// more steps left. Checkpointing mid-run and resuming with the same config
/// reproduces the uninterrupted trajectory bit-exactly.
pub fn train_until(
    scenes: &[TrainScene],
    weights: &mut ModelWeights,
    adam: &mut AdamState,
    config: &TrainConfig,
    until: u64,
) -> Result<Vec<TrainRecord>, TrainError> {
    config.validate()?;
    validate_scenes(scenes, weights)?;
    let stop = until.min(config.steps);
    let mut records = Vec::new();
    while adam.t < stop {
        let step = adam.t;
        let scene = &scenes[(step % scenes.len() as u64) as usize];
        let lr = cosine_lr(step, config.steps, config.lr_init, config.lr_final);

        let mut tape = Tape::new();
        let vars = stage(weights, &mut tape);
        let mut rng = step_rng(config.seed, step);
        let pred = forward_on_tape(
            &mut tape,
            weights,
            &vars,
            &scene.image,
            &scene.queries,
            true,
            &mut rng,
            None,
        )?;
        let (loss, dpred) = batch_loss_with_grad(tape.value(pred), &scene.groups)?;
        if !loss.is_finite() {
            return Err(TrainError::Numeric(format!(
                "loss {loss} at step {step}; aborting before the update"
            )));
        }
        let grad_map = tape.backward(pred, Some(dpred))?;
        let mut grads = Vec::with_capacity(weights.params().len());
        for p in weights.params() {
            let g = if p.trainable {
                vars.get(&p.name)
                    .ok()
                    .and_then(|v| grad_map.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            } else {
                Tensor::zeros(p.value.shape())
            };
            grads.push(g);
        }
        let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(TrainError::Numeric(format!(
                "gradient norm {grad_norm} at step {step}; aborting before the update"
            )));
        }
        adamw_step(weights.params_mut(), &grads, adam, config)?;

        if step % 100 == 0 {
            log::info!("step {step}: loss {loss:.6}, lr {lr:.3e}, grad norm {grad_norm:.4}");
        } else {
            log::debug!("step {step}: loss {loss:.6}, lr {lr:.3e}, grad norm {grad_norm:.4}");
        }
        records.push(TrainRecord { step, lr, loss });
    }
    Ok(records)
}

fn validate_scenes(scenes: &[TrainScene], weights: &ModelWeights) -> Result<(), TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::Data("training needs at least one scene".into()));
    }
    let k = weights.config.k_out;
    for (i, s) in scenes.iter().enumerate() {
        let want = [s.queries.len(), k, 3];
        if s.groups.shape() != &want[..] {
            return Err(TrainError::Data(format!(
                "scene {i}: groups shaped {:?}, want {want:?} ({} queries, k_out {k})",
                s.groups.shape(),
                s.queries.len()
            )));
        }
        if s.queries.is_empty() {
            return Err(TrainError::Data(format!("scene {i} has no queries")));
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PDNS";
const CHECKPOINT_VERSION: u32 = 1;

/// Weights plus optional optimizer state, as written to disk. Tensor data is
/// stored as little-endian f32; in-memory values are f32-rounded at every
/// update, so save/load round-trips are bit-exact.
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub adam: Option<AdamState>,
    pub step: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let config_json = serde_json::to_vec(&self.weights.config)
            .map_err(|e| TrainError::Format(format!("config serialization: {e}")))?;
        out.write_all(&(config_json.len() as u32).to_le_bytes())?;
        out.write_all(&config_json)?;
        out.write_all(&self.step.to_le_bytes())?;
        out.write_all(&(self.weights.params().len() as u32).to_le_bytes())?;
        for p in self.weights.params() {
            let name = p.name.as_bytes();
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name)?;
            out.write_all(&[p.trainable as u8])?;
            out.write_all(&[p.value.rank() as u8])?;
            for &d in p.value.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            write_f32_data(&mut out, &p.value)?;
        }
        match &self.adam {
            None => out.write_all(&[0u8])?,
            Some(state) => {
                if state.m.len() != self.weights.params().len() {
                    return Err(TrainError::Format(
                        "optimizer state does not match the parameter list".into(),
                    ));
                }
                out.write_all(&[1u8])?;
                for i in 0..state.m.len() {
                    write_f32_data(&mut out, &state.m[i])?;
                    write_f32_data(&mut out, &state.v[i])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Format(format!("unsupported version {version}")));
        }
        let config_len = read_u32(&mut r, "config length")? as usize;
        if config_len > 1 << 20 {
            return Err(TrainError::Format(format!("config length {config_len} is implausible")));
        }
        let mut config_json = vec![0u8; config_len];
        read_exact(&mut r, &mut config_json, "config")?;
        let config: crate::model::ModelConfig = serde_json::from_slice(&config_json)
            .map_err(|e| TrainError::Format(format!("config parse: {e}")))?;
        let step = read_u64(&mut r, "step")?;
        let n_params = read_u32(&mut r, "parameter count")? as usize;
        if n_params > 1 << 20 {
            return Err(TrainError::Format(format!("{n_params} parameters is implausible")));
        }
        let mut parts = Vec::with_capacity(n_params);
        let mut shapes = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = read_u32(&mut r, "name length")? as usize;
            if name_len > 4096 {
                return Err(TrainError::Format(format!("name length {name_len} is implausible")));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| TrainError::Format("parameter name is not UTF-8".into()))?;
            let mut flags = [0u8; 2];
            read_exact(&mut r, &mut flags, "flags")?;
            let trainable = match flags[0] {
                0 => false,
                1 => true,
                b => return Err(TrainError::Format(format!("trainable byte {b}"))),
            };
            let ndim = flags[1] as usize;
            if ndim > 8 {
                return Err(TrainError::Format(format!("rank {ndim} is implausible")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r, "dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > 1 << 28 {
                return Err(TrainError::Format(format!("{numel} elements is implausible")));
            }
            let data = read_f32_data(&mut r, numel, &name)?;
            shapes.push(shape.clone());
            parts.push((name, Tensor::new(shape, data)?, trainable));
        }
        let adam_flag = {
            let mut b = [0u8; 1];
            read_exact(&mut r, &mut b, "optimizer flag")?;
            b[0]
        };
        let adam = match adam_flag {
            0 => None,
            1 => {
                let mut m = Vec::with_capacity(n_params);
                let mut v = Vec::with_capacity(n_params);
                for (i, shape) in shapes.iter().enumerate() {
                    let numel: usize = shape.iter().product();
                    let name = &parts[i].0;
                    m.push(Tensor::new(shape.clone(), read_f32_data(&mut r, numel, name)?)?);
                    v.push(Tensor::new(shape.clone(), read_f32_data(&mut r, numel, name)?)?);
                }
                Some(AdamState { t: step, m, v })
            }
            b => return Err(TrainError::Format(format!("optimizer flag {b}"))),
        };
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(TrainError::Format("trailing bytes after checkpoint".into()));
        }
        let weights = ModelWeights::from_parts(config, parts)?;
        Ok(Checkpoint { weights, adam, step })
    }
}

fn write_f32_data<W: Write>(out: &mut W, t: &Tensor) -> Result<(), TrainError> {
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_f32_data<R: Read>(r: &mut R, numel: usize, name: &str) -> Result<Vec<f64>, TrainError> {
    let mut buf = vec![0u8; numel * 4];
    read_exact(r, &mut buf, name)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), TrainError> {
    r.read_exact(buf)
        .map_err(|e| TrainError::Format(format!("truncated reading {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}
