use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{linear_f32, qlinear, KernelConfig};
use crate::quant::{quantize_tensor, QuantRecipe};
use crate::runtime::config::{ActivationKind, ModelConfig, NormKind};
use crate::tensor::Matrix;

/// Weight of a linear layer, `out_features x in_features`.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(Matrix),
    Quantized(crate::quant::QuantizedTensor),
}

impl Linear {
    pub fn out_features(&self) -> usize {
        match self {
            Linear::Dense(m) => m.rows(),
            Linear::Quantized(q) => q.rows(),
        }
    }

    pub fn in_features(&self) -> usize {
        match self {
            Linear::Dense(m) => m.cols(),
            Linear::Quantized(q) => q.cols(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Linear::Quantized(_))
    }

    /// `x * W^T` through the kernel matching the weight's storage.
    pub fn forward(&self, x: &Matrix, cfg: &KernelConfig) -> Result<Matrix> {
        match self {
            Linear::Dense(w) => linear_f32(x, w, None, cfg),
            Linear::Quantized(q) => qlinear(x, q, None, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub weight: Vec<f32>,
    /// Present for layer norm only.
    pub bias: Option<Vec<f32>>,
}

impl Norm {
    pub fn identity(kind: NormKind, dim: usize) -> Self {
        Self {
            weight: vec![1.0; dim],
            bias: match kind {
                NormKind::LayerNorm => Some(vec![0.0; dim]),
                NormKind::RmsNorm => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    Gelu { up: Linear, down: Linear },
    SiluGated { gate: Linear, up: Linear, down: Linear },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
}

impl LayerWeights {
    pub fn linears(&self) -> Vec<(&'static str, &Linear)> {
        let mut out = vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ];
        match &self.ffn {
            FeedForward::Gelu { up, down } => {
                out.push(("w_up", up));
                out.push(("w_down", down));
            }
            FeedForward::SiluGated { gate, up, down } => {
                out.push(("w_gate", gate));
                out.push(("w_up", up));
                out.push(("w_down", down));
            }
        }
        out
    }

    pub fn linears_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let mut out = vec![
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ];
        match &mut self.ffn {
            FeedForward::Gelu { up, down } => {
                out.push(("w_up", up));
                out.push(("w_down", down));
            }
            FeedForward::SiluGated { gate, up, down } => {
                out.push(("w_gate", gate));
                out.push(("w_up", up));
                out.push(("w_down", down));
            }
        }
        out
    }
}

/// All parameters of a model. Norms and embeddings are always FP32.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `vocab_size x hidden_dim`
    pub tok_embeddings: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Norm,
    /// `vocab_size x hidden_dim`
    pub lm_head: Linear,
}

/// Options for turning an FP32 model into an INT4 one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeOptions {
    pub recipe: QuantRecipe,
    pub quantize_lm_head: bool,
}

impl From<QuantRecipe> for QuantizeOptions {
    fn from(recipe: QuantRecipe) -> Self {
        Self {
            recipe,
            quantize_lm_head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    /// Tiling/threading used by every linear layer; not serialized.
    pub kernel: KernelConfig,
}

fn check_norm(name: &str, norm: &Norm, kind: NormKind, dim: usize) -> Result<()> {
    if norm.weight.len() != dim {
        return Err(Error::Shape(format!(
            "{name}.weight has {} values, expected {dim}",
            norm.weight.len()
        )));
    }
    match (kind, &norm.bias) {
        (NormKind::LayerNorm, Some(b)) if b.len() == dim => Ok(()),
        (NormKind::RmsNorm, None) => Ok(()),
        _ => Err(Error::Shape(format!("{name}: bias does not match {kind:?}"))),
    }
}

fn check_linear(name: &str, l: &Linear, out: usize, inp: usize) -> Result<()> {
    if l.out_features() != out || l.in_features() != inp {
        return Err(Error::Shape(format!(
            "{name} is {}x{}, expected {out}x{inp}",
            l.out_features(),
            l.in_features()
        )));
    }
    Ok(())
}

impl Model {
    /// Validates that `weights` match `config`.
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let e = &weights.tok_embeddings;
        if e.rows() != config.vocab_size || e.cols() != d {
            return Err(Error::Shape(format!(
                "tok_embeddings is {}x{}, expected {}x{d}",
                e.rows(),
                e.cols(),
                config.vocab_size
            )));
        }
        if weights.layers.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "{} layers present, config says {}",
                weights.layers.len(),
                config.n_layers
            )));
        }
        for (i, layer) in weights.layers.iter().enumerate() {
            check_norm(&format!("layers.{i}.attn_norm"), &layer.attn_norm, config.norm_kind, d)?;
            check_norm(&format!("layers.{i}.ffn_norm"), &layer.ffn_norm, config.norm_kind, d)?;
            for (name, l) in [("wq", &layer.wq), ("wk", &layer.wk), ("wv", &layer.wv), ("wo", &layer.wo)] {
                check_linear(&format!("layers.{i}.{name}"), l, d, d)?;
            }
            match (&layer.ffn, config.activation_kind) {
                (FeedForward::Gelu { up, down }, ActivationKind::Gelu) => {
                    check_linear(&format!("layers.{i}.w_up"), up, config.ffn_dim, d)?;
                    check_linear(&format!("layers.{i}.w_down"), down, d, config.ffn_dim)?;
                }
                (FeedForward::SiluGated { gate, up, down }, ActivationKind::SiluGated) => {
                    check_linear(&format!("layers.{i}.w_gate"), gate, config.ffn_dim, d)?;
                    check_linear(&format!("layers.{i}.w_up"), up, config.ffn_dim, d)?;
                    check_linear(&format!("layers.{i}.w_down"), down, d, config.ffn_dim)?;
                }
                _ => {
                    return Err(Error::Shape(format!(
                        "layers.{i}: feed-forward weights do not match {:?}",
                        config.activation_kind
                    )))
                }
            }
        }
        check_norm("norm", &weights.final_norm, config.norm_kind, d)?;
        check_linear("lm_head", &weights.lm_head, config.vocab_size, d)?;
        Ok(Self {
            config,
            weights,
            kernel: KernelConfig::default(),
        })
    }

    /// Randomly initialised FP32 model, deterministic in `seed`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let mut dense = |rows: usize, cols: usize| {
            let lim = (3.0 / cols as f32).sqrt();
            Linear::Dense(Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-lim..lim)))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let (wq, wk, wv, wo) = (dense(d, d), dense(d, d), dense(d, d), dense(d, d));
            let ffn = match config.activation_kind {
                ActivationKind::Gelu => FeedForward::Gelu {
                    up: dense(f, d),
                    down: dense(d, f),
                },
                ActivationKind::SiluGated => FeedForward::SiluGated {
                    gate: dense(f, d),
                    up: dense(f, d),
                    down: dense(d, f),
                },
            };
            layers.push(LayerWeights {
                attn_norm: Norm::identity(config.norm_kind, d),
                wq,
                wk,
                wv,
                wo,
                ffn_norm: Norm::identity(config.norm_kind, d),
                ffn,
            });
        }
        let lm_head = dense(config.vocab_size, d);
        let tok_embeddings =
            Matrix::from_fn(config.vocab_size, d, |_, _| rng.gen_range(-1.0f32..1.0));
        Model::new(
            config,
            ModelWeights {
                tok_embeddings,
                layers,
                final_norm: Norm::identity(config.norm_kind, d),
                lm_head,
            },
        )
    }

    /// Returns an INT4 copy of this model. Dense linear layers are quantized
    /// with the recipe; already-quantized layers are left as they are.
    pub fn quantize(&self, opts: impl Into<QuantizeOptions>) -> Result<Model> {
        let opts = opts.into();
        let quant = |name: String, l: &mut Linear| -> Result<()> {
            if let Linear::Dense(w) = l {
                let q = quantize_tensor(w, opts.recipe).map_err(|e| match e {
                    Error::Shape(msg) => Error::Shape(format!("{name}: {msg}")),
                    other => other,
                })?;
                *l = Linear::Quantized(q);
            }
            Ok(())
        };
        let mut out = self.clone();
        for (i, layer) in out.weights.layers.iter_mut().enumerate() {
            for (name, l) in layer.linears_mut() {
                quant(format!("layers.{i}.{name}"), l)?;
            }
        }
        if opts.quantize_lm_head {
            quant("lm_head".into(), &mut out.weights.lm_head)?;
        }
        Ok(out)
    }

    /// Recipe of the first quantized linear layer, if any.
    pub fn recipe(&self) -> Option<QuantRecipe> {
        self.weights
            .layers
            .iter()
            .flat_map(|l| l.linears())
            .map(|(_, l)| l)
            .chain(std::iter::once(&self.weights.lm_head))
            .find_map(|l| match l {
                Linear::Quantized(q) => Some(q.recipe()),
                Linear::Dense(_) => None,
            })
    }
}
