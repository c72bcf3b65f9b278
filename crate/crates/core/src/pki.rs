//! Part knowledge aggregation: a learnable class token cross-attends over the
//! foreground part tokens; the attention of the final block, averaged over
//! heads, is reported as each part's contribution.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Init, LayerNorm, Linear, Mlp, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkiConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for PkiConfig {
    fn default() -> Self {
        Self { dim: 128, heads: 4, depth: 1, mlp_ratio: 2 }
    }
}

/// Class token is the only query; part tokens are keys and values.
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub attn: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &PkiConfig) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), cfg.dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads)?,
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), cfg.dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.dim, cfg.dim * cfg.mlp_ratio)?,
        })
    }

    /// `query: [B, 1, C]`, `parts: [B, K, C]` -> (updated query, head-averaged attention `[B, K]`).
    fn forward(&self, query: &Tensor, parts: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mixed, attn) = self.attn.forward(&self.norm_q.forward(query)?, parts)?;
        let x = (query + mixed)?;
        let x = (&x + self.mlp.forward(&self.norm_mlp.forward(&x)?)?)?;
        let scores = attn.mean(1)?.squeeze(1)?;
        Ok((x, scores))
    }
}

pub struct Pki {
    class_token: Tensor,
    pub blocks: Vec<CrossBlock>,
}

impl Pki {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &PkiConfig) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config("aggregation needs at least one cross-attention block".into()));
        }
        let class_token = store.param(&format!("{name}.class_token"), &[cfg.dim], Init::Normal(1.0))?;
        let blocks = (0..cfg.depth)
            .map(|i| CrossBlock::new(store, &format!("{name}.block{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { class_token, blocks })
    }

    pub fn class_token(&self) -> &Tensor {
        &self.class_token
    }

    /// `parts: [B, K, C]` foreground tokens -> (`f_cls: [B, C]`, `P^att: [B, K]`).
    pub fn forward(&self, parts: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, k, c) = parts.dims3()?;
        if k == 0 {
            return Err(Error::Shape("aggregation needs K >= 1 part tokens".into()));
        }
        let mut query = self.class_token.reshape((1, 1, c))?.broadcast_as((b, 1, c))?.contiguous()?;
        let mut scores = None;
        for block in &self.blocks {
            let (q, s) = block.forward(&query, parts)?;
            query = q;
            scores = Some(s);
        }
        Ok((query.squeeze(1)?, scores.expect("depth >= 1")))
    }
}

/// Single linear head.
pub struct Classifier {
    pub head: Linear,
    num_classes: usize,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(Self { head: Linear::new(store, name, dim, num_classes)?, num_classes })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.head.forward(features)
    }
}

/// Per-image prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub label: usize,
    /// Contribution of each foreground part; empty when aggregation is disabled.
    pub part_scores: Vec<f64>,
}

pub fn argmax(values: &[f64]) -> usize {
    values.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

/// Mean cross-entropy of `logits: [B, n]` against `labels`.
pub fn cls_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, n) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::LabelOutOfRange { label, num_classes: n });
    }
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), (b, 1), logits.device())?;
    let picked = log_probs.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}
