//! Forward pass: image to patches to tokens, then decoder queries to point
//! groups. Every step records onto a tape so one backward call yields all
//! parameter gradients.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, ModelWeights, CNN_STAGES};
use crate::geometry::Point3;
use crate::nn::{Tape, Tensor, Var};

/// Tape variables for the staged parameters, by name.
pub struct ModelVars {
    map: HashMap<String, Var>,
}

impl ModelVars {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }
}

/// Copies every trainable parameter onto the tape as a leaf. After a
/// backward pass, the gradient for parameter `p` lives at `vars[p.name]`.
pub fn stage(weights: &ModelWeights, tape: &mut Tape) -> ModelVars {
    let mut map = HashMap::new();
    for p in weights.params() {
        if p.trainable {
            map.insert(p.name.clone(), tape.leaf(p.value.clone()));
        }
    }
    ModelVars { map }
}

/// Captured attention distributions (softmax outputs, one tensor per head
/// per layer, in execution order). Rows sum to one.
#[derive(Default)]
pub struct ForwardTrace {
    pub attention_rows: Vec<Tensor>,
}

/// Splits `[C, H, W]` into `[P, C, ps, ps]` patches, zero-padding the bottom
/// and right edges up to a multiple of the patch size. Patches are row-major
/// over the padded grid.
pub fn pad_and_patch(
    image: &Tensor,
    patch_size: usize,
) -> Result<(Tensor, usize, usize), ModelError> {
    if patch_size == 0 {
        return Err(ModelError::BadInput("patch size must be positive".into()));
    }
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(ModelError::BadInput(format!(
                "image must be [channels, height, width], got {s:?}"
            )))
        }
    };
    if c == 0 || h == 0 || w == 0 {
        return Err(ModelError::BadInput(format!("empty image {:?}", image.shape())));
    }
    let grid_h = (h + patch_size - 1) / patch_size;
    let grid_w = (w + patch_size - 1) / patch_size;
    let n_patches = grid_h * grid_w;
    let mut out = vec![0.0f64; n_patches * c * patch_size * patch_size];
    let img = image.data();
    for pr in 0..grid_h {
        for pc in 0..grid_w {
            let p = pr * grid_w + pc;
            for ch in 0..c {
                for py in 0..patch_size {
                    let sy = pr * patch_size + py;
                    if sy >= h {
                        break; // rest of the patch rows stay zero
                    }
                    let dst_base = ((p * c + ch) * patch_size + py) * patch_size;
                    let src_base = (ch * h + sy) * w;
                    let sx0 = pc * patch_size;
                    let copy_w = patch_size.min(w.saturating_sub(sx0));
                    out[dst_base..dst_base + copy_w]
                        .copy_from_slice(&img[src_base + sx0..src_base + sx0 + copy_w]);
                }
            }
        }
    }
    let t = Tensor::new(vec![n_patches, c, patch_size, patch_size], out)?;
    Ok((t, grid_h, grid_w))
}

/// Patch centers in normalized grid coordinates: x across columns, y down
/// rows, both in (0, 1); z fixed at 0.
pub fn patch_centers(grid_h: usize, grid_w: usize) -> Vec<Point3> {
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for r in 0..grid_h {
        for c in 0..grid_w {
            out.push(Point3::new(
                (c as f64 + 0.5) / grid_w as f64,
                (r as f64 + 0.5) / grid_h as f64,
                0.0,
            ));
        }
    }
    out
}

/// Random-feature embedding: for frequency matrix `b` of shape `[3, bands]`,
/// row `i` is `[sin(2 pi b^T p_i), cos(2 pi b^T p_i)]`, width `2 * bands`.
pub fn fourier_features(points: &[Point3], b: &Tensor) -> Result<Tensor, ModelError> {
    let bands = match b.shape() {
        [3, bands] => *bands,
        s => return Err(ModelError::BadInput(format!("frequency matrix {s:?}, want [3, bands]"))),
    };
    let bd = b.data();
    let mut out = vec![0.0f64; points.len() * 2 * bands];
    for (i, p) in points.iter().enumerate() {
        let row = &mut out[i * 2 * bands..(i + 1) * 2 * bands];
        for j in 0..bands {
            let phase = std::f64::consts::TAU
                * (bd[j] * p.x + bd[bands + j] * p.y + bd[2 * bands + j] * p.z);
            row[j] = phase.sin();
            row[bands + j] = phase.cos();
        }
    }
    Ok(Tensor::new(vec![points.len(), 2 * bands], out)?)
}

fn linear(tape: &mut Tape, vars: &ModelVars, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let w = vars.get(&format!("{prefix}.w"))?;
    let b = vars.get(&format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w)?;
    Ok(tape.add_row(xw, b)?)
}

fn layer_norm(tape: &mut Tape, vars: &ModelVars, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let g = vars.get(&format!("{prefix}.g"))?;
    let b = vars.get(&format!("{prefix}.b"))?;
    Ok(tape.layer_norm_rows(x, g, b)?)
}

/// Multi-head attention of `xq` over `xkv`, post-projection. Dropout acts on
/// the attention weights.
#[allow(clippy::too_many_arguments)]
fn attention(
    tape: &mut Tape,
    vars: &ModelVars,
    prefix: &str,
    xq: Var,
    xkv: Var,
    cfg: &ModelConfig,
    drop: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
    trace: &mut Option<&mut ForwardTrace>,
) -> Result<Var, ModelError> {
    let q0 = tape.matmul(xq, vars.get(&format!("{prefix}.wq"))?)?;
    let q = tape.add_row(q0, vars.get(&format!("{prefix}.bq"))?)?;
    let k0 = tape.matmul(xkv, vars.get(&format!("{prefix}.wk"))?)?;
    let k = tape.add_row(k0, vars.get(&format!("{prefix}.bk"))?)?;
    let v0 = tape.matmul(xkv, vars.get(&format!("{prefix}.wv"))?)?;
    let v = tape.add_row(v0, vars.get(&format!("{prefix}.bv"))?)?;
    let head_dim = cfg.token_dim / cfg.n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose2(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled, 1)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.attention_rows.push(tape.value(attn).clone());
        }
        let attn = tape.dropout(attn, drop, train, rng)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let o = tape.matmul(cat, vars.get(&format!("{prefix}.wo"))?)?;
    Ok(tape.add_row(o, vars.get(&format!("{prefix}.bo"))?)?)
}

#[allow(clippy::too_many_arguments)]
fn encoder_layer(
    tape: &mut Tape,
    vars: &ModelVars,
    prefix: &str,
    x: Var,
    cfg: &ModelConfig,
    train: bool,
    rng: &mut ChaCha8Rng,
    trace: &mut Option<&mut ForwardTrace>,
) -> Result<Var, ModelError> {
    let at = attention(
        tape,
        vars,
        &format!("{prefix}.attn"),
        x,
        x,
        cfg,
        cfg.enc_dropout,
        train,
        rng,
        trace,
    )?;
    let at = tape.dropout(at, cfg.enc_dropout, train, rng)?;
    let sum = tape.add(x, at)?;
    let x = layer_norm(tape, vars, &format!("{prefix}.norm1"), sum)?;
    let f0 = linear(tape, vars, &format!("{prefix}.ffn.w0"), x)?;
    let fr = tape.relu(f0);
    let f1 = linear(tape, vars, &format!("{prefix}.ffn.w1"), fr)?;
    let f1 = tape.dropout(f1, cfg.enc_dropout, train, rng)?;
    let sum = tape.add(x, f1)?;
    layer_norm(tape, vars, &format!("{prefix}.norm2"), sum)
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer(
    tape: &mut Tape,
    vars: &ModelVars,
    prefix: &str,
    x: Var,
    memory: Var,
    cfg: &ModelConfig,
    train: bool,
    rng: &mut ChaCha8Rng,
    trace: &mut Option<&mut ForwardTrace>,
) -> Result<Var, ModelError> {
    let at = attention(
        tape,
        vars,
        &format!("{prefix}.self"),
        x,
        x,
        cfg,
        cfg.dec_dropout,
        train,
        rng,
        trace,
    )?;
    let at = tape.dropout(at, cfg.dec_dropout, train, rng)?;
    let sum = tape.add(x, at)?;
    let x = layer_norm(tape, vars, &format!("{prefix}.norm1"), sum)?;
    let cr = attention(
        tape,
        vars,
        &format!("{prefix}.cross"),
        x,
        memory,
        cfg,
        cfg.dec_dropout,
        train,
        rng,
        trace,
    )?;
    let cr = tape.dropout(cr, cfg.dec_dropout, train, rng)?;
    let sum = tape.add(x, cr)?;
    let x = layer_norm(tape, vars, &format!("{prefix}.norm2"), sum)?;
    let f0 = linear(tape, vars, &format!("{prefix}.ffn.w0"), x)?;
    let fr = tape.relu(f0);
    let f1 = linear(tape, vars, &format!("{prefix}.ffn.w1"), fr)?;
    let f1 = tape.dropout(f1, cfg.dec_dropout, train, rng)?;
    let sum = tape.add(x, f1)?;
    layer_norm(tape, vars, &format!("{prefix}.norm3"), sum)
}

/// Conv stages with skip pooling: each stage is conv-relu-conv-relu-pool;
/// its pooled map is averaged over space and projected to `token_dim / 4`.
/// The four projections concatenate into one token per patch.
fn patch_features(
    tape: &mut Tape,
    vars: &ModelVars,
    patches: Var,
) -> Result<Var, ModelError> {
    let mut x = patches;
    let mut skips = Vec::with_capacity(CNN_STAGES);
    for s in 0..CNN_STAGES {
        let c0 = tape.conv2d(
            x,
            vars.get(&format!("cnn.{s}.conv0.w"))?,
            vars.get(&format!("cnn.{s}.conv0.b"))?,
            1,
            1,
        )?;
        let r0 = tape.relu(c0);
        let c1 = tape.conv2d(
            r0,
            vars.get(&format!("cnn.{s}.conv1.w"))?,
            vars.get(&format!("cnn.{s}.conv1.b"))?,
            1,
            1,
        )?;
        let r1 = tape.relu(c1);
        x = tape.maxpool2(r1)?;
        let g = tape.global_avg_pool(x)?;
        let s0 = linear(tape, vars, &format!("cnn.{s}.skip0"), g)?;
        let sr = tape.relu(s0);
        let s1 = linear(tape, vars, &format!("cnn.{s}.skip1"), sr)?;
        skips.push(s1);
    }
    Ok(tape.concat_cols(&skips)?)
}

fn generate_points(
    tape: &mut Tape,
    vars: &ModelVars,
    cfg: &ModelConfig,
    tokens: Var,
) -> Result<Var, ModelError> {
    let n = tape.value(tokens).shape()[0];
    let h0 = linear(tape, vars, "gen.fc0", tokens)?;
    let h0 = tape.relu(h0);
    let h1 = linear(tape, vars, "gen.fc1", h0)?;
    let h1 = tape.relu(h1);
    let h2 = linear(tape, vars, "gen.fc2", h1)?;
    let h2 = tape.relu(h2);
    let out = linear(tape, vars, "gen.out", h2)?;
    let bounded = tape.tanh(out);
    Ok(tape.reshape(bounded, vec![n, cfg.k_out, 3])?)
}

/// Full forward pass on an existing tape. Returns the `[n, k_out, 3]`
/// prediction variable; every coordinate is in (-1, 1) from the final tanh.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape(
    tape: &mut Tape,
    weights: &ModelWeights,
    vars: &ModelVars,
    image: &Tensor,
    queries: &[Point3],
    train: bool,
    rng: &mut ChaCha8Rng,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<Var, ModelError> {
    let cfg = &weights.config;
    if queries.is_empty() {
        return Err(ModelError::BadInput("at least one query point is required".into()));
    }
    if image.rank() != 3 || image.shape()[0] != cfg.in_channels {
        return Err(ModelError::BadInput(format!(
            "image shape {:?} does not match in_channels {}",
            image.shape(),
            cfg.in_channels
        )));
    }
    let fourier_b = &weights
        .get("fourier.b")
        .ok_or_else(|| ModelError::MissingParam("fourier.b".into()))?
        .value;

    let (patches, grid_h, grid_w) = pad_and_patch(image, cfg.patch_size)?;
    let patches = tape.leaf(patches);
    let tokens = patch_features(tape, vars, patches)?;

    let centers = patch_centers(grid_h, grid_w);
    let cemb = fourier_features(&centers, fourier_b)?;
    let cemb = tape.leaf(cemb);
    let pos = linear(tape, vars, "pos", cemb)?;
    let mut x = tape.add(tokens, pos)?;
    for l in 0..cfg.enc_layers {
        x = encoder_layer(tape, vars, &format!("enc.{l}"), x, cfg, train, rng, &mut trace)?;
    }
    let memory = x;

    let qemb = fourier_features(queries, fourier_b)?;
    let mut y = tape.leaf(qemb);
    for l in 0..cfg.dec_layers {
        y = decoder_layer(tape, vars, &format!("dec.{l}"), y, memory, cfg, train, rng, &mut trace)?;
    }
    generate_points(tape, vars, cfg, y)
}

/// Evaluation-mode forward pass; dropout off, output detached from any tape.
pub fn forward(
    weights: &ModelWeights,
    image: &Tensor,
    queries: &[Point3],
) -> Result<Tensor, ModelError> {
    use rand::SeedableRng;
    let mut tape = Tape::new();
    let vars = stage(weights, &mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0); // dropout disabled, never drawn
    let out = forward_on_tape(&mut tape, weights, &vars, image, queries, false, &mut rng, None)?;
    Ok(tape.value(out).clone())
}
