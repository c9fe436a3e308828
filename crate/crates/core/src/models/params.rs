use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, Matrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Linear,
    Softmax,
}

/// Architecture of a toy model.
///
/// Discrete models (`vocab_size` set) embed token ids, run pre-norm attention
/// blocks and read out next-token logits. Continuous models consume stacked
/// `(x; y)` columns of height `d_x + d_y` and read the prediction from the query
/// token's `y` slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub attention: AttentionKind,
    pub causal: bool,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Model width. Ignored for continuous models, whose width is `d_x + d_y`.
    pub width: usize,
    /// Feed-forward hidden size; 0 disables the feed-forward sublayer.
    pub ffn_hidden: usize,
    pub layer_norm: bool,
    pub vocab_size: Option<usize>,
    pub max_len: usize,
    pub regression_dims: Option<(usize, usize)>,
    pub init_std: f64,
}

impl ArchSpec {
    /// 4 layers, width 64, 2 heads, causal softmax attention over a 32-token vocabulary.
    pub fn discrete_default() -> Self {
        ArchSpec {
            attention: AttentionKind::Softmax,
            causal: true,
            n_layers: 4,
            n_heads: 2,
            width: 64,
            ffn_hidden: 0,
            layer_norm: true,
            vocab_size: Some(32),
            max_len: 32,
            regression_dims: None,
            init_std: 0.1,
        }
    }

    /// Stack of linear self-attention layers without softmax.
    pub fn linear_regression(n_layers: usize, d_x: usize, d_y: usize) -> Self {
        ArchSpec {
            attention: AttentionKind::Linear,
            causal: false,
            n_layers,
            n_heads: 1,
            width: d_x + d_y,
            ffn_hidden: 0,
            layer_norm: false,
            vocab_size: None,
            max_len: usize::MAX,
            regression_dims: Some((d_x, d_y)),
            init_std: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("model needs at least one layer and one head".into()));
        }
        match (self.vocab_size, self.regression_dims) {
            (Some(v), None) => {
                if v == 0 || self.width == 0 || self.max_len == 0 {
                    return Err(Error::Config("discrete model needs vocab, width and max_len >= 1".into()));
                }
                if self.width % self.n_heads != 0 {
                    return Err(Error::Config(format!(
                        "width {} is not divisible by {} heads",
                        self.width, self.n_heads
                    )));
                }
            }
            (None, Some((dx, dy))) => {
                if dx == 0 || dy == 0 {
                    return Err(Error::Config("regression dims must be >= 1".into()));
                }
                if self.attention != AttentionKind::Linear || self.ffn_hidden != 0 || self.layer_norm {
                    return Err(Error::Config("continuous models are plain linear self-attention stacks".into()));
                }
            }
            _ => return Err(Error::Config("set exactly one of vocab_size or regression_dims".into())),
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm { gain: Matrix::filled(1, d, 1.0), bias: Matrix::zeros(1, d) }
    }
}

/// `h = gelu(x W_in + b_in)`, `out = h W_out + b_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub norm: Option<LayerNorm>,
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

/// One attention block.
///
/// Discrete models use the row-vector convention (`Q = X W_q` for tokens stacked
/// as rows). Continuous models use the column convention of the hand
/// construction (`K = W_K E` for tokens stacked as columns), and `proj` plays the
/// role of the projection `P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub proj: Matrix,
    pub norm: Option<LayerNorm>,
    pub ffn: Option<FeedForward>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenIo {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub final_norm: Option<LayerNorm>,
    /// One row per vocabulary token; logits are `x_final · row`.
    pub unembedding: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelIo {
    Tokens(TokenIo),
    Regression { d_x: usize, d_y: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub attention: AttentionKind,
    pub causal: bool,
    pub n_heads: usize,
    pub width: usize,
    pub layers: Vec<Layer>,
    pub io: ModelIo,
}

/// Identifies a parameter tensor by layer (if any) and role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub layer: Option<usize>,
    pub name: &'static str,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layers.{l}.{}", self.name),
            None => f.write_str(self.name),
        }
    }
}

/// Which parameters an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    Full,
    /// Only the value matrix of the given (0-based) layer.
    ValueMatrixOfLayer(usize),
}

impl UpdateScope {
    pub fn contains(&self, key: &ParamKey) -> bool {
        match *self {
            UpdateScope::Full => true,
            UpdateScope::ValueMatrixOfLayer(l) => key.layer == Some(l) && key.name == "w_v",
        }
    }
}

fn key(layer: Option<usize>, name: &'static str) -> ParamKey {
    ParamKey { layer, name }
}

impl TransformerParams {
    pub fn init(arch: &ArchSpec, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let std = arch.init_std;
        let (width, io) = match (arch.vocab_size, arch.regression_dims) {
            (Some(v), _) => {
                let d = arch.width;
                let io = TokenIo {
                    token_embedding: sample_gaussian(rng, v, d, 0.0, std)?,
                    position_embedding: sample_gaussian(rng, arch.max_len, d, 0.0, std)?,
                    final_norm: arch.layer_norm.then(|| LayerNorm::new(d)),
                    unembedding: sample_gaussian(rng, v, d, 0.0, std)?,
                };
                (d, ModelIo::Tokens(io))
            }
            (None, Some((d_x, d_y))) => (d_x + d_y, ModelIo::Regression { d_x, d_y }),
            _ => unreachable!("validated"),
        };
        let proj_std = std / ((2 * arch.n_layers) as f64).sqrt();
        let mut layers = Vec::with_capacity(arch.n_layers);
        for _ in 0..arch.n_layers {
            let ffn = if arch.ffn_hidden > 0 {
                let f = arch.ffn_hidden;
                Some(FeedForward {
                    norm: arch.layer_norm.then(|| LayerNorm::new(width)),
                    w_in: sample_gaussian(rng, width, f, 0.0, std)?,
                    b_in: Matrix::zeros(1, f),
                    w_out: sample_gaussian(rng, f, width, 0.0, proj_std)?,
                    b_out: Matrix::zeros(1, width),
                })
            } else {
                None
            };
            layers.push(Layer {
                w_q: sample_gaussian(rng, width, width, 0.0, std)?,
                w_k: sample_gaussian(rng, width, width, 0.0, std)?,
                w_v: sample_gaussian(rng, width, width, 0.0, std)?,
                proj: sample_gaussian(rng, width, width, 0.0, proj_std)?,
                norm: arch.layer_norm.then(|| LayerNorm::new(width)),
                ffn,
            });
        }
        Ok(TransformerParams { attention: arch.attention, causal: arch.causal, n_heads: arch.n_heads, width, layers, io })
    }

    pub fn token_io(&self) -> Option<&TokenIo> {
        match &self.io {
            ModelIo::Tokens(io) => Some(io),
            ModelIo::Regression { .. } => None,
        }
    }

    pub fn vocab_size(&self) -> Option<usize> {
        self.token_io().map(|io| io.token_embedding.rows())
    }

    pub fn max_len(&self) -> Option<usize> {
        self.token_io().map(|io| io.position_embedding.rows())
    }

    /// Every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(ParamKey, &Matrix)> {
        let mut out = Vec::new();
        if let ModelIo::Tokens(io) = &self.io {
            out.push((key(None, "token_embedding"), &io.token_embedding));
            out.push((key(None, "position_embedding"), &io.position_embedding));
            if let Some(n) = &io.final_norm {
                out.push((key(None, "final_norm.gain"), &n.gain));
                out.push((key(None, "final_norm.bias"), &n.bias));
            }
            out.push((key(None, "unembedding"), &io.unembedding));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let l = Some(l);
            out.push((key(l, "w_q"), &layer.w_q));
            out.push((key(l, "w_k"), &layer.w_k));
            out.push((key(l, "w_v"), &layer.w_v));
            out.push((key(l, "proj"), &layer.proj));
            if let Some(n) = &layer.norm {
                out.push((key(l, "norm.gain"), &n.gain));
                out.push((key(l, "norm.bias"), &n.bias));
            }
            if let Some(f) = &layer.ffn {
                if let Some(n) = &f.norm {
                    out.push((key(l, "ffn.norm.gain"), &n.gain));
                    out.push((key(l, "ffn.norm.bias"), &n.bias));
                }
                out.push((key(l, "ffn.w_in"), &f.w_in));
                out.push((key(l, "ffn.b_in"), &f.b_in));
                out.push((key(l, "ffn.w_out"), &f.w_out));
                out.push((key(l, "ffn.b_out"), &f.b_out));
            }
        }
        out
    }

    /// Same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<(ParamKey, &mut Matrix)> {
        let mut out = Vec::new();
        if let ModelIo::Tokens(io) = &mut self.io {
            let TokenIo { token_embedding, position_embedding, final_norm, unembedding } = io;
            out.push((key(None, "token_embedding"), token_embedding));
            out.push((key(None, "position_embedding"), position_embedding));
            if let Some(LayerNorm { gain, bias }) = final_norm {
                out.push((key(None, "final_norm.gain"), gain));
                out.push((key(None, "final_norm.bias"), bias));
            }
            out.push((key(None, "unembedding"), unembedding));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let l = Some(l);
            let Layer { w_q, w_k, w_v, proj, norm, ffn } = layer;
            out.push((key(l, "w_q"), w_q));
            out.push((key(l, "w_k"), w_k));
            out.push((key(l, "w_v"), w_v));
            out.push((key(l, "proj"), proj));
            if let Some(LayerNorm { gain, bias }) = norm {
                out.push((key(l, "norm.gain"), gain));
                out.push((key(l, "norm.bias"), bias));
            }
            if let Some(FeedForward { norm, w_in, b_in, w_out, b_out }) = ffn {
                if let Some(LayerNorm { gain, bias }) = norm {
                    out.push((key(l, "ffn.norm.gain"), gain));
                    out.push((key(l, "ffn.norm.bias"), bias));
                }
                out.push((key(l, "ffn.w_in"), w_in));
                out.push((key(l, "ffn.b_in"), b_in));
                out.push((key(l, "ffn.w_out"), w_out));
                out.push((key(l, "ffn.b_out"), b_out));
            }
        }
        out
    }

    /// Same architecture, every entry zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for (_, m) in self.tensors_mut() {
            m.fill(value);
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// `self += s * other` for tensors inside `scope`.
    pub fn add_scaled(&mut self, other: &TransformerParams, s: f64, scope: UpdateScope) {
        for ((k, m), (_, g)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            if scope.contains(&k) {
                m.add_scaled(g, s);
            }
        }
    }

    pub fn same_architecture(&self, other: &TransformerParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|((ka, ma), (kb, mb))| ka == kb && ma.shape() == mb.shape())
    }
}

/// Parameter snapshot taken during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean loss on the run's evaluation data at this step, when measured.
    pub loss: Option<f64>,
    pub params: TransformerParams,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
