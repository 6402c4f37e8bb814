//! Pre-norm transformer encoder over point tokens, with an optional task
//! token in front.
//!
//! Sequences are batched as `[n, t, d]`: `n` candidates, `t` tokens each.
//! No positional information is added, so the encoder is equivariant to
//! permutations of the point tokens.

use alloc::format;
use alloc::string::String;

use crate::autodiff::{Graph, Init, NodeId, ParameterStore};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Number of blocks.
    pub layers: usize,
    /// Model width `d`.
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// Which learnable token, if any, is prepended to the point tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Class,
    Iou,
    Visibility,
    None,
}

impl TokenKind {
    /// Parameter path of the embedding.
    pub fn path(self) -> Option<&'static str> {
        match self {
            TokenKind::Class => Some("token.cls"),
            TokenKind::Iou => Some("token.iou"),
            TokenKind::Visibility => Some("token.vis"),
            TokenKind::None => None,
        }
    }
}

/// Declares `{prefix}.w` (`[fan_in, fan_out]`, uniform ±1/√fan_in) and a zero
/// `{prefix}.b`.
pub fn declare_dense(store: &mut ParameterStore, prefix: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<()> {
    let bound = 1.0 / math::sqrt(fan_in as f64);
    store.declare(
        &format!("{prefix}.w"),
        &[fan_in, fan_out],
        Init::Uniform {
            low: -bound,
            high: bound,
            seed,
        },
    )?;
    store.declare(&format!("{prefix}.b"), &[fan_out], Init::Zero)
}

/// Affine layer `{prefix}` over the last axis of `x`, any rank ≥ 2.
pub fn dense(g: &mut Graph, store: &ParameterStore, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let shape = g.shape(x).to_vec();
    let fan_in = *shape.last().expect("rank >= 1");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let fan_out = g.shape(w)[1];
    let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, fan_in])? };
    let y = g.linear(flat, w, b)?;
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out = shape;
    *out.last_mut().expect("rank >= 1") = fan_out;
    g.reshape(y, &out)
}

/// Declares every parameter of a `cfg.layers`-block encoder under `prefix`.
pub fn declare_encoder(store: &mut ParameterStore, prefix: &str, cfg: &EncoderConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.blocks.{l}");
        for ln in ["ln1", "ln2"] {
            store.declare(&format!("{p}.{ln}.gamma"), &[d], Init::Constant(1.0))?;
            store.declare(&format!("{p}.{ln}.beta"), &[d], Init::Zero)?;
        }
        let bound = 1.0 / math::sqrt(d as f64);
        store.declare(
            &format!("{p}.attn.qkv.w"),
            &[d, 3 * d],
            Init::Uniform {
                low: -bound,
                high: bound,
                seed,
            },
        )?;
        // no key bias: it shifts every score of a query equally
        store.declare(&format!("{p}.attn.qkv.bq"), &[d], Init::Zero)?;
        store.declare(&format!("{p}.attn.qkv.bv"), &[d], Init::Zero)?;
        declare_dense(store, &format!("{p}.attn.out"), d, d, seed)?;
        declare_dense(store, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, seed)?;
        declare_dense(store, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, seed)?;
    }
    Ok(())
}

/// Prepends the task embedding to `[n, k, d]` point features.
pub fn attach_task_token(g: &mut Graph, store: &ParameterStore, features: NodeId, kind: TokenKind) -> Result<NodeId> {
    let Some(path) = kind.path() else {
        return Ok(features);
    };
    let shape = g.shape(features).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("attach_task_token", format!("features {shape:?} must be [n,k,d]")));
    }
    let tok = g.param(store, path)?;
    if g.shape(tok) != [shape[2]] {
        return Err(Error::shape(
            "attach_task_token",
            format!("token `{path}` has shape {:?}, features have width {}", g.shape(tok), shape[2]),
        ));
    }
    let tok = g.reshape(tok, &[1, 1, shape[2]])?;
    let tok = g.expand(tok, 0, shape[0])?;
    g.concat(&[tok, features], 1)
}

/// Runs `cfg.layers` pre-norm blocks over `[n, t, d]` tokens.
pub fn encode(g: &mut Graph, store: &ParameterStore, z: NodeId, cfg: &EncoderConfig, prefix: &str) -> Result<NodeId> {
    cfg.validate()?;
    let shape = g.shape(z).to_vec();
    if shape.len() != 3 || shape[2] != cfg.width {
        return Err(Error::shape(
            "encode",
            format!("tokens {shape:?} must be [n,t,{}]", cfg.width),
        ));
    }
    let mut x = z;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.blocks.{l}");
        let h = layer_norm(g, store, x, &format!("{p}.ln1"))?;
        let a = attention(g, store, h, cfg, &p)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, store, x, &format!("{p}.ln2"))?;
        let h = dense(g, store, h, &format!("{p}.mlp.fc1"))?;
        let h = g.gelu(h)?;
        let h = dense(g, store, h, &format!("{p}.mlp.fc2"))?;
        x = g.add(x, h)?;
    }
    Ok(x)
}

fn layer_norm(g: &mut Graph, store: &ParameterStore, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layernorm(x, gamma, beta)
}

fn attention(g: &mut Graph, store: &ParameterStore, h: NodeId, cfg: &EncoderConfig, block: &str) -> Result<NodeId> {
    let (n, t) = {
        let s = g.shape(h);
        (s[0], s[1])
    };
    let (d, heads) = (cfg.width, cfg.heads);
    let dh = d / heads;
    let w = g.param(store, &format!("{block}.attn.qkv.w"))?;
    let bq = g.param(store, &format!("{block}.attn.qkv.bq"))?;
    let bk = g.input(Tensor::zeros(&[d]));
    let bv = g.param(store, &format!("{block}.attn.qkv.bv"))?;
    let b = g.concat(&[bq, bk, bv], 0)?;
    let flat = g.reshape(h, &[n * t, d])?;
    let qkv = g.linear(flat, w, b)?;
    // [n, t, 3, heads, dh] → [3, n, heads, t, dh]
    let qkv = g.reshape(qkv, &[n, t, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut split = [NodeId::default(); 3];
    for (i, s) in split.iter_mut().enumerate() {
        let part = g.slice(qkv, 0, i, i + 1)?;
        *s = g.reshape(part, &[n * heads, t, dh])?;
    }
    let [q, k, v] = split;
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / math::sqrt(dh as f64))?;
    let attn = g.softmax(scores, 2)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[n, heads, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n, t, d])?;
    dense(g, store, ctx, &format!("{block}.attn.out"))
}

/// Parameter paths of one encoder, in declaration order.
pub fn encoder_paths<'a>(prefix: &'a str, cfg: &EncoderConfig) -> impl Iterator<Item = String> + 'a {
    const LEAVES: [&str; 13] = [
        "ln1.gamma",
        "ln1.beta",
        "ln2.gamma",
        "ln2.beta",
        "attn.qkv.w",
        "attn.qkv.bq",
        "attn.qkv.bv",
        "attn.out.w",
        "attn.out.b",
        "mlp.fc1.w",
        "mlp.fc1.b",
        "mlp.fc2.w",
        "mlp.fc2.b",
    ];
    (0..cfg.layers).flat_map(move |l| LEAVES.iter().map(move |leaf| format!("{prefix}.blocks.{l}.{leaf}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn cfg(layers: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn tokens(n: usize, t: usize, d: usize) -> Tensor {
        Tensor::new(&[n, t, d], (0..n * t * d).map(|i| math::sin(i as f64 * 0.37)).collect()).unwrap()
    }

    #[test]
    fn zero_layers_is_identity() {
        let store = ParameterStore::new();
        let mut g = Graph::new();
        let z = g.input(tokens(2, 3, 8));
        let out = encode(&mut g, &store, z, &cfg(0), "enc").unwrap();
        assert_eq!(g.value(out), g.value(z));
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let mut store = ParameterStore::new();
        declare_encoder(&mut store, "enc", &cfg(2), 1).unwrap();
        for l in 0..2 {
            for leaf in ["attn.out.w", "mlp.fc2.w"] {
                let path = format!("enc.blocks.{l}.{leaf}");
                let shape = store.get(&path).unwrap().shape().to_vec();
                store.set(&path, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut g = Graph::new();
        let z = g.input(tokens(2, 5, 8));
        let out = encode(&mut g, &store, z, &cfg(2), "enc").unwrap();
        assert_eq!(g.value(out), g.value(z));
    }

    #[test]
    fn task_token_goes_first() {
        let mut store = ParameterStore::new();
        store
            .declare("token.iou", &[8], Init::Uniform { low: -1.0, high: 1.0, seed: 2 })
            .unwrap();
        let mut g = Graph::new();
        let f = g.input(tokens(2, 16, 8));
        let z = attach_task_token(&mut g, &store, f, TokenKind::Iou).unwrap();
        assert_eq!(g.shape(z), &[2, 17, 8]);
        let tok = store.get("token.iou").unwrap().data();
        for n in 0..2 {
            assert_eq!(&g.value(z).data()[n * 17 * 8..n * 17 * 8 + 8], tok);
        }
        let rest = g.slice(z, 1, 1, 17).unwrap();
        assert_eq!(g.value(rest), g.value(f));
        let same = attach_task_token(&mut g, &store, f, TokenKind::None).unwrap();
        assert_eq!(same, f);
        assert!(matches!(
            attach_task_token(&mut g, &store, f, TokenKind::Class),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_parameters_are_config_errors() {
        let store = ParameterStore::new();
        let mut g = Graph::new();
        let z = g.input(tokens(1, 2, 8));
        assert!(matches!(encode(&mut g, &store, z, &cfg(1), "enc"), Err(Error::Config(_))));
    }

    #[test]
    fn paths_match_declarations() {
        let mut store = ParameterStore::new();
        declare_encoder(&mut store, "enc", &cfg(2), 1).unwrap();
        let mut listed: Vec<String> = encoder_paths("enc", &cfg(2)).collect();
        listed.sort();
        let declared: Vec<String> = store.paths().map(String::from).collect();
        assert_eq!(listed, declared);
    }
}
