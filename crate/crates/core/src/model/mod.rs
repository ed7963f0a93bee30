//! Patch-transformer model: a convolutional patch encoder feeds a
//! transformer encoder; a decoder attends over the encoded patches from
//! query-point embeddings and emits one normalized point group per query.

mod forward;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, Parameter, Tensor};

pub use forward::{
    forward, forward_on_tape, fourier_features, pad_and_patch, patch_centers, stage,
    ForwardTrace, ModelVars,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Number of conv stages in the patch encoder; each halves the resolution.
pub const CNN_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    /// Output channels of the four conv stages.
    pub cnn_channels: [usize; CNN_STAGES],
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Points generated per query.
    pub k_out: usize,
    pub enc_dropout: f64,
    pub dec_dropout: f64,
    /// Random frequency rows per coordinate; embeddings are sin/cos pairs,
    /// so the embedding width is `2 * fourier_bands = token_dim`.
    pub fourier_bands: usize,
    pub fourier_sigma: f64,
    pub fourier_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            patch_size: 32,
            token_dim: 256,
            cnn_channels: [32, 64, 128, 256],
            enc_layers: 4,
            dec_layers: 4,
            n_heads: 8,
            ffn_dim: 1024,
            k_out: 32,
            enc_dropout: 0.1,
            dec_dropout: 0.3,
            fourier_bands: 128,
            fourier_sigma: 1.0,
            fourier_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.in_channels == 0 {
            return err("in_channels must be positive".into());
        }
        if self.patch_size == 0 || self.patch_size % (1 << CNN_STAGES) != 0 {
            return err(format!(
                "patch_size {} must be a positive multiple of {}",
                self.patch_size,
                1 << CNN_STAGES
            ));
        }
        if self.token_dim == 0 || self.n_heads == 0 || self.token_dim % self.n_heads != 0 {
            return err(format!(
                "token_dim {} must be divisible by n_heads {}",
                self.token_dim, self.n_heads
            ));
        }
        if self.token_dim % 4 != 0 {
            return err(format!(
                "token_dim {} must be divisible by the {} skip branches",
                self.token_dim, CNN_STAGES
            ));
        }
        if self.cnn_channels.iter().any(|&c| c == 0) {
            return err("cnn_channels must be positive".into());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return err("encoder and decoder need at least one layer".into());
        }
        if self.ffn_dim == 0 {
            return err("ffn_dim must be positive".into());
        }
        if self.k_out == 0 {
            return err("k_out must be positive".into());
        }
        for (name, d) in [("enc_dropout", self.enc_dropout), ("dec_dropout", self.dec_dropout)] {
            if !(0.0..1.0).contains(&d) {
                return err(format!("{name} {d} outside [0, 1)"));
            }
        }
        if self.fourier_bands * 2 != self.token_dim {
            return err(format!(
                "fourier_bands {} must be token_dim / 2 so query embeddings match tokens",
                self.fourier_bands
            ));
        }
        if !(self.fourier_sigma > 0.0) {
            return err(format!("fourier_sigma must be positive, got {}", self.fourier_sigma));
        }
        Ok(())
    }

    /// Small configuration used by the gradient-check command: the same
    /// architecture at toy width so a full finite-difference sweep stays
    /// inside a minute.
    pub fn gradcheck_reduced() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            patch_size: 16,
            token_dim: 32,
            cnn_channels: [2, 4, 8, 16],
            enc_layers: 1,
            dec_layers: 1,
            n_heads: 2,
            ffn_dim: 64,
            k_out: 4,
            enc_dropout: 0.0,
            dec_dropout: 0.0,
            fourier_bands: 16,
            fourier_sigma: 1.0,
            fourier_seed: 0,
        }
    }
}

/// All parameters of one model instance, in a stable creation order.
pub struct ModelWeights {
    pub config: ModelConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ModelWeights {
    /// Fresh weights: Xavier-uniform for matrices and kernels, zero biases,
    /// unit gains. The fourier frequency matrix is drawn from its own seed
    /// and frozen. Every value is rounded through f32 so the in-memory state
    /// matches its serialized form exactly.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelWeights, ModelError> {
        config.validate()?;
        let mut w = ModelWeights { config: config.clone(), params: Vec::new(), index: HashMap::new() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.token_dim;
        let skip_dim = d / 4;

        let mut c_in = config.in_channels;
        for (s, &c_out) in config.cnn_channels.iter().enumerate() {
            w.add_conv(&mut rng, &format!("cnn.{s}.conv0"), c_out, c_in, 3)?;
            w.add_conv(&mut rng, &format!("cnn.{s}.conv1"), c_out, c_out, 3)?;
            w.add_linear(&mut rng, &format!("cnn.{s}.skip0"), c_out, skip_dim)?;
            w.add_linear(&mut rng, &format!("cnn.{s}.skip1"), skip_dim, skip_dim)?;
            c_in = c_out;
        }
        w.add_linear(&mut rng, "pos", d, d)?;
        for l in 0..config.enc_layers {
            w.add_attention(&mut rng, &format!("enc.{l}.attn"), d)?;
            w.add_norm(&format!("enc.{l}.norm1"), d)?;
            w.add_linear(&mut rng, &format!("enc.{l}.ffn.w0"), d, config.ffn_dim)?;
            w.add_linear(&mut rng, &format!("enc.{l}.ffn.w1"), config.ffn_dim, d)?;
            w.add_norm(&format!("enc.{l}.norm2"), d)?;
        }
        for l in 0..config.dec_layers {
            w.add_attention(&mut rng, &format!("dec.{l}.self"), d)?;
            w.add_norm(&format!("dec.{l}.norm1"), d)?;
            w.add_attention(&mut rng, &format!("dec.{l}.cross"), d)?;
            w.add_norm(&format!("dec.{l}.norm2"), d)?;
            w.add_linear(&mut rng, &format!("dec.{l}.ffn.w0"), d, config.ffn_dim)?;
            w.add_linear(&mut rng, &format!("dec.{l}.ffn.w1"), config.ffn_dim, d)?;
            w.add_norm(&format!("dec.{l}.norm3"), d)?;
        }
        w.add_linear(&mut rng, "gen.fc0", d, d)?;
        w.add_linear(&mut rng, "gen.fc1", d, d)?;
        w.add_linear(&mut rng, "gen.fc2", d, d)?;
        w.add_linear(&mut rng, "gen.out", d, config.k_out * 3)?;

        let mut frng = ChaCha8Rng::seed_from_u64(config.fourier_seed);
        let mut fb = Tensor::rand_normal(&mut frng, &[3, config.fourier_bands], 0.0, config.fourier_sigma);
        fb.round_to_f32();
        w.push("fourier.b", fb, false)?;
        Ok(w)
    }

    /// Rebuilds weights from named tensors, verifying the set matches what
    /// `init` would create for this config.
    pub fn from_parts(
        config: ModelConfig,
        parts: Vec<(String, Tensor, bool)>,
    ) -> Result<ModelWeights, ModelError> {
        let reference = ModelWeights::init(config.clone(), 0)?;
        if parts.len() != reference.params.len() {
            return Err(ModelError::Config(format!(
                "{} tensors for a model with {} parameters",
                parts.len(),
                reference.params.len()
            )));
        }
        let mut by_name: HashMap<String, (Tensor, bool)> = HashMap::new();
        for (name, tensor, trainable) in parts {
            if by_name.insert(name.clone(), (tensor, trainable)).is_some() {
                return Err(ModelError::Config(format!("duplicate parameter {name}")));
            }
        }
        let mut w = ModelWeights { config, params: Vec::new(), index: HashMap::new() };
        for p in &reference.params {
            let (tensor, trainable) = by_name.remove(&p.name).ok_or_else(|| {
                ModelError::Config(format!("missing parameter {}", p.name))
            })?;
            if tensor.shape() != p.value.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    tensor.shape(),
                    p.value.shape()
                )));
            }
            if trainable != p.trainable {
                return Err(ModelError::Config(format!(
                    "parameter {} trainable flag {} does not match the architecture",
                    p.name, trainable
                )));
            }
            w.push(&p.name, tensor, trainable)?;
        }
        Ok(w)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    fn push(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<(), ModelError> {
        if self.index.contains_key(name) {
            return Err(ModelError::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter::new(name, value, trainable));
        Ok(())
    }

    fn add_weight(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Result<(), ModelError> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut t = Tensor::rand_uniform(rng, shape, -limit, limit);
        t.round_to_f32();
        self.push(name, t, true)
    }

    fn add_linear(
        &mut self,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<(), ModelError> {
        self.add_weight(rng, &format!("{prefix}.w"), &[d_in, d_out], d_in, d_out)?;
        self.push(&format!("{prefix}.b"), Tensor::zeros(&[d_out]), true)
    }

    fn add_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
    ) -> Result<(), ModelError> {
        self.add_weight(
            rng,
            &format!("{prefix}.w"),
            &[c_out, c_in, k, k],
            c_in * k * k,
            c_out * k * k,
        )?;
        self.push(&format!("{prefix}.b"), Tensor::zeros(&[c_out]), true)
    }

    fn add_attention(&mut self, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> Result<(), ModelError> {
        for part in ["wq", "wk", "wv", "wo"] {
            self.add_weight(rng, &format!("{prefix}.{part}"), &[d, d], d, d)?;
        }
        for part in ["bq", "bk", "bv", "bo"] {
            self.push(&format!("{prefix}.{part}"), Tensor::zeros(&[d]), true)?;
        }
        Ok(())
    }

    fn add_norm(&mut self, prefix: &str, d: usize) -> Result<(), ModelError> {
        self.push(&format!("{prefix}.g"), Tensor::full(&[d], 1.0), true)?;
        self.push(&format!("{prefix}.b"), Tensor::zeros(&[d]), true)
    }
}
