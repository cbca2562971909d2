//! Model serialization: the NQF container, the plain-text config format, and
//! the analytic memory report.
//!
//! Tensor names used by models:
//! `tok_embeddings`, `layers.{i}.attn_norm.weight` (+`.bias` for layer norm),
//! `layers.{i}.{wq,wk,wv,wo}`, `layers.{i}.ffn_norm.weight` (+`.bias`),
//! `layers.{i}.{w_gate,w_up,w_down}` (no `w_gate` for GELU), `norm.weight`
//! (+`.bias`), `lm_head`.

pub mod config_text;
pub mod memory;
pub mod nqf;

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::runtime::{ActivationKind, FeedForward, LayerWeights, Linear, Model, ModelWeights, Norm};
use crate::tensor::Matrix;

pub use config_text::{format_config, parse_config};
pub use memory::{int4_bytes, memory_report, MemoryReport, TensorMemory};
pub use nqf::{NamedTensor, NqfFile, TensorData};

fn linear_tensor(name: String, l: &Linear) -> NamedTensor {
    let data = match l {
        Linear::Dense(m) => TensorData::F32 {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        },
        Linear::Quantized(q) => TensorData::Int4(q.clone()),
    };
    NamedTensor { name, data }
}

fn vector_tensor(name: String, v: &[f32]) -> NamedTensor {
    NamedTensor {
        name,
        data: TensorData::F32 {
            dims: vec![v.len()],
            data: v.to_vec(),
        },
    }
}

fn norm_tensors(prefix: &str, n: &Norm, out: &mut Vec<NamedTensor>) {
    out.push(vector_tensor(format!("{prefix}.weight"), &n.weight));
    if let Some(b) = &n.bias {
        out.push(vector_tensor(format!("{prefix}.bias"), b));
    }
}

/// The model's parameters as an ordered, named tensor list.
pub fn model_tensors(model: &Model) -> Vec<NamedTensor> {
    let w = &model.weights;
    let mut out = vec![NamedTensor {
        name: "tok_embeddings".into(),
        data: TensorData::F32 {
            dims: vec![w.tok_embeddings.rows(), w.tok_embeddings.cols()],
            data: w.tok_embeddings.as_slice().to_vec(),
        },
    }];
    for (i, layer) in w.layers.iter().enumerate() {
        norm_tensors(&format!("layers.{i}.attn_norm"), &layer.attn_norm, &mut out);
        norm_tensors(&format!("layers.{i}.ffn_norm"), &layer.ffn_norm, &mut out);
        for (name, l) in layer.linears() {
            out.push(linear_tensor(format!("layers.{i}.{name}"), l));
        }
    }
    norm_tensors("norm", &w.final_norm, &mut out);
    out.push(linear_tensor("lm_head".into(), &w.lm_head));
    out
}

struct TensorMap(HashMap<String, TensorData>);

impl TensorMap {
    fn take(&mut self, name: &str) -> Result<TensorData> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    fn vector(&mut self, name: &str) -> Result<Vec<f32>> {
        match self.take(name)? {
            TensorData::F32 { dims, data } if dims.len() == 1 => Ok(data),
            _ => Err(Error::Format(format!("tensor {name:?} must be an fp32 vector"))),
        }
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix> {
        match self.take(name)? {
            TensorData::F32 { dims, data } if dims.len() == 2 => Matrix::from_vec(dims[0], dims[1], data),
            _ => Err(Error::Format(format!("tensor {name:?} must be an fp32 matrix"))),
        }
    }

    fn linear(&mut self, name: &str) -> Result<Linear> {
        match self.take(name)? {
            TensorData::F32 { dims, data } if dims.len() == 2 => {
                Ok(Linear::Dense(Matrix::from_vec(dims[0], dims[1], data)?))
            }
            TensorData::Int4(q) => Ok(Linear::Quantized(q)),
            _ => Err(Error::Format(format!("tensor {name:?} must be a matrix"))),
        }
    }

    fn norm(&mut self, prefix: &str, with_bias: bool) -> Result<Norm> {
        Ok(Norm {
            weight: self.vector(&format!("{prefix}.weight"))?,
            bias: if with_bias {
                Some(self.vector(&format!("{prefix}.bias"))?)
            } else {
                None
            },
        })
    }
}

/// Rebuilds a model from named tensors; every expected tensor must be present
/// and no others.
pub fn model_from_tensors(config: crate::runtime::ModelConfig, tensors: Vec<NamedTensor>) -> Result<Model> {
    config.validate()?;
    let mut map = TensorMap(HashMap::with_capacity(tensors.len()));
    for t in tensors {
        if map.0.insert(t.name.clone(), t.data).is_some() {
            return Err(Error::Format(format!("duplicate tensor {:?}", t.name)));
        }
    }
    let bias = config.norm_kind == crate::runtime::NormKind::LayerNorm;
    let tok_embeddings = map.matrix("tok_embeddings")?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = format!("layers.{i}");
        let ffn = match config.activation_kind {
            ActivationKind::Gelu => FeedForward::Gelu {
                up: map.linear(&format!("{p}.w_up"))?,
                down: map.linear(&format!("{p}.w_down"))?,
            },
            ActivationKind::SiluGated => FeedForward::SiluGated {
                gate: map.linear(&format!("{p}.w_gate"))?,
                up: map.linear(&format!("{p}.w_up"))?,
                down: map.linear(&format!("{p}.w_down"))?,
            },
        };
        layers.push(LayerWeights {
            attn_norm: map.norm(&format!("{p}.attn_norm"), bias)?,
            wq: map.linear(&format!("{p}.wq"))?,
            wk: map.linear(&format!("{p}.wk"))?,
            wv: map.linear(&format!("{p}.wv"))?,
            wo: map.linear(&format!("{p}.wo"))?,
            ffn_norm: map.norm(&format!("{p}.ffn_norm"), bias)?,
            ffn,
        });
    }
    let final_norm = map.norm("norm", bias)?;
    let lm_head = map.linear("lm_head")?;
    if let Some(extra) = map.0.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra:?}")));
    }
    Model::new(
        config,
        ModelWeights {
            tok_embeddings,
            layers,
            final_norm,
            lm_head,
        },
    )
    .map_err(|e| match e {
        Error::Shape(m) => Error::Format(m),
        other => other,
    })
}

impl NqfFile {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config: model.config,
            tensors: model_tensors(model),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        model_from_tensors(self.config, self.tensors)
    }
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    NqfFile::from_model(model).save(path)
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    NqfFile::load(path)?.into_model()
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    NqfFile::from_model(model).to_bytes()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    NqfFile::from_bytes(bytes)?.into_model()
}
