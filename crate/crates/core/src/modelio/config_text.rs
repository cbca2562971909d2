//! Plain-text model config: one `key = value` per line, `#` starts a comment.
//!
//! ```text
//! vocab_size = 256
//! n_layers = 2
//! n_heads = 4
//! head_dim = 32
//! ffn_dim = 256
//! max_seq_len = 128
//! norm = rmsnorm          # or layernorm
//! activation = silu_gated # or gelu
//! rope_theta = 10000
//! ```
//! `hidden_dim` may be given; it must equal `n_heads * head_dim`.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::runtime::{ActivationKind, ModelConfig, NormKind, DEFAULT_ROPE_THETA};

const KEYS: [&str; 10] = [
    "vocab_size",
    "n_layers",
    "n_heads",
    "head_dim",
    "hidden_dim",
    "ffn_dim",
    "max_seq_len",
    "norm",
    "activation",
    "rope_theta",
];

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut kv: HashMap<&str, (usize, &str)> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::InvalidInput(format!("line {}: unknown key {k:?}", i + 1)));
        }
        if kv.insert(k, (i + 1, v)).is_some() {
            return Err(Error::InvalidInput(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    let count = |key: &str| -> Result<Option<usize>> {
        kv.get(key)
            .map(|(line, v)| {
                v.parse::<usize>()
                    .map_err(|_| Error::InvalidInput(format!("line {line}: {key} must be an integer")))
            })
            .transpose()
    };
    let required = |key: &str| -> Result<usize> {
        count(key)?.ok_or_else(|| Error::InvalidInput(format!("missing key {key:?}")))
    };
    let n_heads = required("n_heads")?;
    let head_dim = required("head_dim")?;
    let mut cfg = ModelConfig::new(
        required("vocab_size")?,
        required("n_layers")?,
        n_heads,
        head_dim,
        required("ffn_dim")?,
        required("max_seq_len")?,
    );
    if let Some(h) = count("hidden_dim")? {
        cfg.hidden_dim = h;
    }
    if let Some((line, v)) = kv.get("norm") {
        cfg.norm_kind = match v.to_ascii_lowercase().as_str() {
            "rmsnorm" => NormKind::RmsNorm,
            "layernorm" => NormKind::LayerNorm,
            _ => return Err(Error::InvalidInput(format!("line {line}: unknown norm {v:?}"))),
        };
    }
    if let Some((line, v)) = kv.get("activation") {
        cfg.activation_kind = match v.to_ascii_lowercase().as_str() {
            "silu_gated" => ActivationKind::SiluGated,
            "gelu" => ActivationKind::Gelu,
            _ => return Err(Error::InvalidInput(format!("line {line}: unknown activation {v:?}"))),
        };
    }
    cfg.rope_theta = match kv.get("rope_theta") {
        Some((line, v)) => v
            .parse()
            .map_err(|_| Error::InvalidInput(format!("line {line}: rope_theta must be a number")))?,
        None => DEFAULT_ROPE_THETA,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn format_config(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let norm = match cfg.norm_kind {
        NormKind::RmsNorm => "rmsnorm",
        NormKind::LayerNorm => "layernorm",
    };
    let act = match cfg.activation_kind {
        ActivationKind::SiluGated => "silu_gated",
        ActivationKind::Gelu => "gelu",
    };
    // writing to a String cannot fail
    let _ = write!(
        s,
        "vocab_size = {}\nn_layers = {}\nn_heads = {}\nhead_dim = {}\nhidden_dim = {}\nffn_dim = {}\nmax_seq_len = {}\nnorm = {norm}\nactivation = {act}\nrope_theta = {}\n",
        cfg.vocab_size,
        cfg.n_layers,
        cfg.n_heads,
        cfg.head_dim,
        cfg.hidden_dim,
        cfg.ffn_dim,
        cfg.max_seq_len,
        cfg.rope_theta
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_format_round_trip() {
        let text = "# tiny\nvocab_size = 256\nn_layers=2\nn_heads = 4\nhead_dim = 32 # per head\nffn_dim = 256\nmax_seq_len = 128\nnorm = layernorm\nactivation = gelu\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.hidden_dim, 128);
        assert_eq!(cfg.norm_kind, NormKind::LayerNorm);
        assert_eq!(cfg.activation_kind, ActivationKind::Gelu);
        assert_eq!(cfg.rope_theta, DEFAULT_ROPE_THETA);
        assert_eq!(parse_config(&format_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        let base = "vocab_size = 16\nn_layers = 1\nn_heads = 2\nhead_dim = 4\nffn_dim = 8\nmax_seq_len = 4\n";
        assert!(parse_config(base).is_ok());
        for extra in ["colour = blue\n", "n_layers = 3\n", "norm = batchnorm\n", "hidden_dim = 9\n", "oops\n"] {
            let text = format!("{base}{extra}");
            assert!(parse_config(&text).is_err(), "{extra}");
        }
        assert!(parse_config("vocab_size = 16\n").is_err());
        assert!(parse_config(&base.replace("ffn_dim = 8", "ffn_dim = x")).is_err());
    }
}
