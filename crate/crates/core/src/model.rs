//! Toy LLaMa-style decoder: configuration, weights, deterministic
//! initialisation, the weight file format and the forward pass.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{clustered_forward, mha_forward, AttentionPath, KVCache, TraceTarget};
use crate::error::{ChaiError, Result};
use crate::plan::ClusterPlan;
use crate::tensor::{self, Matrix};

pub const WEIGHT_MAGIC: &[u8; 8] = b"CHAIWGT1";
pub const NORM_EPS: f32 = 1e-5;

/// Byte-level fallback vocabulary size.
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Builds a config with `head_dim = model_dim / num_heads`.
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        model_dim: usize,
        ffn_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        if num_heads == 0 || model_dim % num_heads != 0 {
            return Err(ChaiError::Config(format!(
                "model_dim {model_dim} is not divisible by num_heads {num_heads}"
            )));
        }
        let config = ModelConfig {
            num_layers,
            num_heads,
            model_dim,
            head_dim: model_dim / num_heads,
            ffn_dim,
            vocab_size,
            max_seq_len,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ChaiError::Config(format!("{name} must be at least 1")));
        }
        if self.model_dim != self.num_heads * self.head_dim {
            return Err(ChaiError::Config(format!(
                "model_dim {} != num_heads {} x head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(ChaiError::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding of the config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Ordered `(name, rows, cols)` manifest of every tensor in a weight file.
    pub fn manifest(&self) -> Vec<TensorEntry> {
        let (d, f, v) = (self.model_dim, self.ffn_dim, self.vocab_size);
        let mut out = vec![TensorEntry::new("token_embedding", v, d)];
        for l in 0..self.num_layers {
            for (name, rows, cols) in [
                ("wq", d, d),
                ("wk", d, d),
                ("wv", d, d),
                ("wo", d, d),
                ("attn_norm", 1, d),
                ("mlp_norm", 1, d),
                ("w_gate", d, f),
                ("w_up", d, f),
                ("w_down", f, d),
            ] {
                out.push(TensorEntry::new(format!("layers.{l}.{name}"), rows, cols));
            }
        }
        out.push(TensorEntry::new("final_norm", 1, d));
        out.push(TensorEntry::new("output", d, v));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl TensorEntry {
    fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        TensorEntry {
            name: name.into(),
            rows,
            cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `d x d`, column block `h * d_h .. (h + 1) * d_h` belongs to head `h`.
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub attn_norm: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub output: Matrix,
}

/// SplitMix64, the generator behind [`init_random`].
///
/// `next` advances the state by `0x9E3779B97F4A7C15` and returns the usual
/// SplitMix64 finaliser of the new state. Weight values are
/// `((next >> 40) / 2^24 * 2 - 1) / sqrt(model_dim)`, i.e. uniform on
/// `[-1, 1)` scaled by `1/sqrt(d)`, drawn tensor by tensor in manifest order
/// and row-major within a tensor. Norm gains are not drawn; they are all 1.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on `[-1, 1)` with 24 bits of resolution.
    pub fn next_symmetric(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    }
}

pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Weights> {
    config.validate()?;
    let scale = 1.0 / (config.model_dim as f32).sqrt();
    let mut rng = SplitMix64::new(seed);
    let mut tensors = Vec::new();
    for entry in config.manifest() {
        let n = entry.rows * entry.cols;
        let data = if is_norm(&entry.name) {
            vec![1.0; n]
        } else {
            (0..n).map(|_| rng.next_symmetric() * scale).collect()
        };
        tensors.push(data);
    }
    Weights::from_tensors(*config, tensors)
}

fn is_norm(name: &str) -> bool {
    name.ends_with("norm")
}

impl Weights {
    /// Assembles weights from flat tensors listed in manifest order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let manifest = config.manifest();
        if tensors.len() != manifest.len() {
            return Err(ChaiError::Shape(format!(
                "expected {} tensors, got {}",
                manifest.len(),
                tensors.len()
            )));
        }
        let mut it = manifest.into_iter().zip(tensors);
        let mut next = || -> Result<Matrix> {
            let (entry, data) = it.next().expect("length checked");
            Matrix::from_vec(entry.rows, entry.cols, data)
                .map_err(|e| ChaiError::Shape(format!("{}: {e}", entry.name)))
        };
        let token_embedding = next()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                wq: next()?,
                wk: next()?,
                wv: next()?,
                wo: next()?,
                attn_norm: next()?.into_data(),
                mlp_norm: next()?.into_data(),
                w_gate: next()?,
                w_up: next()?,
                w_down: next()?,
            });
        }
        let final_norm = next()?.into_data();
        let output = next()?;
        Ok(Weights {
            config,
            token_embedding,
            layers,
            final_norm,
            output,
        })
    }

    /// Flat tensors in manifest order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.token_embedding.data()];
        for l in &self.layers {
            out.extend([
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                &l.attn_norm[..],
                &l.mlp_norm[..],
                l.w_gate.data(),
                l.w_up.data(),
                l.w_down.data(),
            ]);
        }
        out.push(&self.final_norm);
        out.push(self.output.data());
        out
    }

    /// True when every value has the same bit pattern.
    pub fn bit_identical(&self, other: &Weights) -> bool {
        self.config == other.config
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let d = self.config.model_dim;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= self.config.vocab_size {
                return Err(ChaiError::Argument(format!(
                    "token id {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            x.row_mut(i).copy_from_slice(self.token_embedding.row(t));
        }
        Ok(x)
    }

    /// Gated MLP: `(silu(x W_gate) * (x W_up)) W_down`.
    pub fn mlp(&self, layer: usize, x: &Matrix) -> Result<Matrix> {
        let lw = &self.layers[layer];
        let gate = tensor::matmul(x, &lw.w_gate)?;
        let mut up = tensor::matmul(x, &lw.w_up)?;
        for (u, g) in up.data_mut().iter_mut().zip(gate.data()) {
            *u *= tensor::silu(*g);
        }
        tensor::matmul(&up, &lw.w_down)
    }

    /// Final norm and output projection of one hidden row.
    pub fn logits(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let normed = tensor::rms_norm(hidden, &self.final_norm, NORM_EPS)?;
        let x = Matrix::from_vec(1, normed.len(), normed)?;
        Ok(tensor::matmul(&x, &self.output)?.into_data())
    }

    /// Runs `tokens` through every layer at the next free cache positions
    /// and returns the logits of the last position.
    pub fn forward(
        &self,
        tokens: &[u32],
        cache: &mut KVCache,
        path: AttentionPath<'_>,
        mut trace: Option<TraceTarget<'_>>,
    ) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(ChaiError::Argument("forward called with no tokens".into()));
        }
        let mut x = self.embed(tokens)?;
        for (l, lw) in self.layers.iter().enumerate() {
            let h = tensor::rms_norm_rows(&x, &lw.attn_norm, NORM_EPS)?;
            let attn = match path {
                AttentionPath::Mha => mha_forward(&h, lw, cache, l, trace.as_mut())?,
                AttentionPath::Clustered { plan, reuse_values } => {
                    clustered_forward(&h, lw, cache, l, plan, reuse_values)?
                }
            };
            x.add_assign(&attn)?;
            let h = tensor::rms_norm_rows(&x, &lw.mlp_norm, NORM_EPS)?;
            let m = self.mlp(l, &h)?;
            x.add_assign(&m)?;
        }
        self.logits(x.row(x.rows() - 1))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = WeightHeader {
            config: self.config,
            tensors: self.config.manifest(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.param_count());
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < WEIGHT_MAGIC.len() {
            return Err(ChaiError::Truncated(format!(
                "{} bytes is shorter than the magic",
                bytes.len()
            )));
        }
        if &bytes[..8] != WEIGHT_MAGIC {
            return Err(ChaiError::BadMagic {
                found: bytes[..8].to_vec(),
            });
        }
        let len_bytes = bytes
            .get(8..16)
            .ok_or_else(|| ChaiError::Truncated("missing header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        let header_bytes = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| {
                ChaiError::Truncated(format!("header declares {header_len} bytes"))
            })?;
        let header: WeightHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| ChaiError::HeaderMismatch(format!("unreadable header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| ChaiError::HeaderMismatch(e.to_string()))?;
        let expected = header.config.manifest();
        if header.tensors != expected {
            return Err(ChaiError::HeaderMismatch(
                "tensor manifest does not match the declared config".into(),
            ));
        }
        let payload = &bytes[16 + header_len..];
        let want: usize = expected.iter().map(|e| e.rows * e.cols).sum();
        if payload.len() != want * 4 {
            return Err(ChaiError::Shape(format!(
                "header declares {want} floats ({} bytes) but payload has {} bytes",
                want * 4,
                payload.len()
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let tensors = expected
            .iter()
            .map(|e| floats.by_ref().take(e.rows * e.cols).collect())
            .collect();
        Weights::from_tensors(header.config, tensors)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_weights(weights: &Weights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, weights.to_bytes()).map_err(|e| ChaiError::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Weights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ChaiError::io(path, e))?;
    Weights::from_bytes(&bytes)
}

/// Copies each cluster representative's `W_Q` and `W_K` head blocks over
/// every member of its cluster. Other tensors are untouched.
pub fn make_redundant(weights: &Weights, plan: &ClusterPlan) -> Result<Weights> {
    plan.validate_for(&weights.config)?;
    let dh = weights.config.head_dim;
    let mut out = weights.clone();
    for (lw, lp) in out.layers.iter_mut().zip(&plan.layers) {
        for (head, &cluster) in lp.assignment.iter().enumerate() {
            let rep = lp.representatives[cluster];
            if rep == head {
                continue;
            }
            let q = lw.wq.col_block(rep * dh, dh);
            lw.wq.set_col_block(head * dh, &q);
            let k = lw.wk.col_block(rep * dh, dh);
            lw.wk.set_col_block(head * dh, &k);
        }
    }
    Ok(out)
}

/// Maps bytes to token ids one to one.
pub fn byte_tokens(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}
