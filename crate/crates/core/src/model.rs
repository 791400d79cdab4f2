//! Teacher and student networks.
//!
//! Two families share one parameter container: an MLP classifier and a
//! small causal sequence model built from gated MLP blocks over a running
//! (causal) mean of the previous layer. Both expose the last hidden
//! activation, which feeds nothing except the output head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Gelu,
    Relu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Widths of the hidden layers; the last entry is the model's hidden size.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinySeqConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub context_len: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelConfig {
    Mlp(MlpConfig),
    Seq(TinySeqConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Mlp(c) => {
                if c.hidden_dims.is_empty() {
                    return Err(Error::config("MLP needs at least one hidden layer"));
                }
                if c.input_dim == 0 || c.num_classes == 0 || c.hidden_dims.contains(&0) {
                    return Err(Error::config("MLP dimensions must all be >= 1"));
                }
            }
            ModelConfig::Seq(c) => {
                if c.vocab_size == 0
                    || c.embed_dim == 0
                    || c.num_layers == 0
                    || c.hidden_dim == 0
                    || c.context_len == 0
                    || c.num_classes == 0
                {
                    return Err(Error::config("sequence model dimensions must all be >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Width of the last hidden layer.
    pub fn hidden_size(&self) -> usize {
        match self {
            ModelConfig::Mlp(c) => *c.hidden_dims.last().unwrap_or(&0),
            ModelConfig::Seq(c) => c.hidden_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::Mlp(c) => c.num_classes,
            ModelConfig::Seq(c) => c.num_classes,
        }
    }

    pub fn num_hidden_layers(&self) -> usize {
        match self {
            ModelConfig::Mlp(c) => c.hidden_dims.len(),
            ModelConfig::Seq(c) => c.num_layers,
        }
    }

    /// (name, shape, fan_in) of every parameter, in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let linear = |out: &mut Vec<_>, name: &str, fan_in: usize, width: usize| {
            out.push((format!("{name}.weight"), vec![fan_in, width], fan_in));
            out.push((format!("{name}.bias"), vec![width], fan_in));
        };
        match self {
            ModelConfig::Mlp(c) => {
                let mut prev = c.input_dim;
                for (l, &w) in c.hidden_dims.iter().enumerate() {
                    linear(&mut out, &format!("hidden.{l}"), prev, w);
                    prev = w;
                }
                linear(&mut out, "head", prev, c.num_classes);
            }
            ModelConfig::Seq(c) => {
                // one-hot input has a single active entry
                out.push(("embed".to_string(), vec![c.vocab_size, c.embed_dim], 1));
                let mut prev = c.embed_dim;
                for l in 0..c.num_layers {
                    linear(&mut out, &format!("block.{l}.mix"), prev, c.hidden_dim);
                    linear(&mut out, &format!("block.{l}.gate"), prev, c.hidden_dim);
                    prev = c.hidden_dim;
                }
                linear(&mut out, "head", prev, c.num_classes);
            }
        }
        out
    }
}

/// Input batch for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchInput {
    /// `batch x input_dim` feature matrix.
    Features(Tensor),
    /// Token sequences, each `1..=context_len` long.
    Tokens(Vec<Vec<usize>>),
}

impl BatchInput {
    pub fn batch_size(&self) -> usize {
        match self {
            BatchInput::Features(t) => t.rows(),
            BatchInput::Tokens(s) => s.len(),
        }
    }
}

/// How rows of `logits` / `last_hidden` map back to samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowLayout {
    /// One row per sample.
    Samples,
    /// Sequences padded to `seq_len`, flattened sample-major. `valid_rows`
    /// lists the non-padding rows in order.
    Positions {
        seq_len: usize,
        valid_rows: Vec<usize>,
    },
}

impl RowLayout {
    /// Rows that carry real data.
    pub fn valid_rows(&self, total_rows: usize) -> Vec<usize> {
        match self {
            RowLayout::Samples => (0..total_rows).collect(),
            RowLayout::Positions { valid_rows, .. } => valid_rows.clone(),
        }
    }
}

/// Output of [`Model::forward`]. All handles live on the caller's tape.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Var,
    pub last_hidden: Var,
    /// Every hidden activation, input side first; the last entry is
    /// `last_hidden`.
    pub hidden: Vec<Var>,
    /// Parameter leaves, in [`Model::params`] order.
    pub params: Vec<Var>,
    pub layout: RowLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<NamedParam>,
}

impl Model {
    /// Scaled-uniform initialisation: every tensor drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` in parameter order.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                NamedParam {
                    name,
                    value: Tensor::from_parts(shape, data),
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<NamedParam>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::config(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size()
    }

    /// SHA-256 over the config and the exact bits of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Runs the network on `tape`. With `trainable`, parameters are tracked
    /// leaves; otherwise they are constants and no gradient reaches them.
    pub fn forward(&self, tape: &mut Tape, input: &BatchInput, trainable: bool) -> Result<ForwardResult> {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        match (&self.config, input) {
            (ModelConfig::Mlp(c), BatchInput::Features(x)) => self.forward_mlp(c, tape, x, params),
            (ModelConfig::Seq(c), BatchInput::Tokens(seqs)) => self.forward_seq(c, tape, seqs, params),
            (ModelConfig::Mlp(_), BatchInput::Tokens(_)) => {
                Err(Error::data("MLP model given token input"))
            }
            (ModelConfig::Seq(_), BatchInput::Features(_)) => {
                Err(Error::data("sequence model given feature input"))
            }
        }
    }

    fn forward_mlp(
        &self,
        c: &MlpConfig,
        tape: &mut Tape,
        x: &Tensor,
        params: Vec<Var>,
    ) -> Result<ForwardResult> {
        let (_, d) = x.require_matrix("MLP input")?;
        if d != c.input_dim {
            return Err(Error::data(format!(
                "MLP expects {} input features, batch has {d}",
                c.input_dim
            )));
        }
        let mut h = tape.constant(x.clone())?;
        let mut hidden = Vec::with_capacity(c.hidden_dims.len());
        for l in 0..c.hidden_dims.len() {
            let z = tape.matmul(h, params[2 * l])?;
            let z = tape.bias_add(z, params[2 * l + 1])?;
            h = c.activation.apply(tape, z)?;
            hidden.push(h);
        }
        let k = 2 * c.hidden_dims.len();
        let logits = tape.matmul(h, params[k])?;
        let logits = tape.bias_add(logits, params[k + 1])?;
        Ok(ForwardResult {
            logits,
            last_hidden: h,
            hidden,
            params,
            layout: RowLayout::Samples,
        })
    }

    fn forward_seq(
        &self,
        c: &TinySeqConfig,
        tape: &mut Tape,
        seqs: &[Vec<usize>],
        params: Vec<Var>,
    ) -> Result<ForwardResult> {
        if seqs.is_empty() {
            return Err(Error::data("empty token batch"));
        }
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seq_len == 0 || seq_len > c.context_len {
            return Err(Error::data(format!(
                "sequence lengths must be in 1..={}, got {seq_len}",
                c.context_len
            )));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        let mut valid_rows = Vec::new();
        for (b, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::data(format!("sequence {b} is empty")));
            }
            for t in 0..seq_len {
                match s.get(t) {
                    Some(&tok) if tok >= c.vocab_size => {
                        return Err(Error::data(format!(
                            "token {tok} outside vocabulary of {}",
                            c.vocab_size
                        )))
                    }
                    Some(&tok) => {
                        tokens.push(tok);
                        valid_rows.push(b * seq_len + t);
                    }
                    // padding sits after the real tokens, so causality keeps
                    // it out of every valid position
                    None => tokens.push(0),
                }
            }
        }
        let mut h = tape.gather_rows(params[0], &tokens)?;
        let mut hidden = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let base = 1 + 4 * l;
            let pooled = tape.causal_cummean(h, seq_len)?;
            let mix = tape.matmul(pooled, params[base])?;
            let mix = tape.bias_add(mix, params[base + 1])?;
            let mix = c.activation.apply(tape, mix)?;
            let gate = tape.matmul(h, params[base + 2])?;
            let gate = tape.bias_add(gate, params[base + 3])?;
            let gate = tape.tanh(gate)?;
            h = tape.mul(mix, gate)?;
            hidden.push(h);
        }
        let k = 1 + 4 * c.num_layers;
        let logits = tape.matmul(h, params[k])?;
        let logits = tape.bias_add(logits, params[k + 1])?;
        Ok(ForwardResult {
            logits,
            last_hidden: h,
            hidden,
            params,
            layout: RowLayout::Positions { seq_len, valid_rows },
        })
    }

    /// Forward pass without gradients; returns `(logits, hidden stack, layout)`
    /// as plain tensors.
    pub fn infer(&self, input: &BatchInput) -> Result<(Tensor, Vec<Tensor>, RowLayout)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, false)?;
        let hidden = out.hidden.iter().map(|&h| tape.value(h).clone()).collect();
        Ok((tape.value(out.logits).clone(), hidden, out.layout))
    }

    /// All hidden activations for `input`, input side first.
    pub fn hidden_layer_stack(&self, input: &BatchInput) -> Result<Vec<Tensor>> {
        Ok(self.infer(input)?.1)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub steps: u64,
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    /// Big-endian IEEE-754 bits of each value, 16 hex digits per value.
    data: String,
}

/// JSON checkpoint with exact (hex-encoded) parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    params: Vec<StoredParam>,
    pub metadata: TrainingMetadata,
    pub checksum: String,
}

fn encode_values(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 16);
    for v in values {
        s.push_str(&format!("{:016x}", v.to_bits()));
    }
    s
}

fn decode_values(s: &str) -> Result<Vec<f64>> {
    if s.len() % 16 != 0 {
        return Err(Error::data("parameter data is not a multiple of 16 hex digits"));
    }
    (0..s.len() / 16)
        .map(|i| {
            u64::from_str_radix(&s[i * 16..(i + 1) * 16], 16)
                .map(f64::from_bits)
                .map_err(|e| Error::data(format!("bad hex in parameter data: {e}")))
        })
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: TrainingMetadata) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params: model
                .params
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: encode_values(p.value.data()),
                })
                .collect(),
            metadata,
            checksum: model.checksum(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let params = self
            .params
            .iter()
            .map(|p| {
                Ok(NamedParam {
                    name: p.name.clone(),
                    value: Tensor::new(p.shape.clone(), decode_values(&p.data)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Model::from_params(self.config.clone(), params)?;
        if model.checksum() != self.checksum {
            return Err(Error::data("checkpoint checksum does not match its parameters"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}
