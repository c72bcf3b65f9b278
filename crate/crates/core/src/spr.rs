//! Scattering part representation: a transformer over `K + 1` learnable part
//! prototypes and `N` patch tokens.
//!
//! Prototype 0 is the background. Prototypes carry no positional term, so the
//! encoder is equivariant to permutations of them. The part probability map
//! `V` is a per-location softmax over the similarities between the final patch
//! embeddings and the emitted part tokens.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, Init, LayerNorm, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SptConfig {
    /// Number of foreground parts `K`.
    pub parts: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Softmax temperature of the part probability map.
    pub tau: f64,
}

impl Default for SptConfig {
    fn default() -> Self {
        Self { parts: 5, dim: 128, depth: 4, heads: 4, mlp_ratio: 2, tau: 1.0 }
    }
}

/// 2-D sine/cosine position encodings, `[H' * W', C]` row-major.
///
/// The first half of the channels encodes the row, the second half the column.
pub fn sincos_position_encoding(rows: usize, cols: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(4) {
        return Err(Error::Config(format!("position encoding width {dim} must be divisible by 4")));
    }
    let quarter = dim / 4;
    let freqs: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                out.extend(freqs.iter().map(|f| (pos * f).sin()));
                out.extend(freqs.iter().map(|f| (pos * f).cos()));
            }
        }
    }
    Ok(out)
}

/// Flattens a `[B, H', W', C]` feature map into `[B, N, C]` tokens in row-major
/// order and adds position encodings.
pub fn patchify(feature_map: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = feature_map.dims4()?;
    let pe = sincos_position_encoding(h, w, c)?;
    let pe = Tensor::from_vec(pe, (1, h * w, c), feature_map.device())?;
    Ok(feature_map.reshape((b, h * w, c))?.broadcast_add(&pe)?)
}

/// Output of the part transformer for a batch.
pub struct SptOutput {
    /// `[B, K + 1, C]`, index 0 is the background token.
    pub part_tokens: Tensor,
    /// Final patch embeddings `[B, N, C]`.
    pub patch_tokens: Tensor,
    /// Part probability map `[B, N, K + 1]`, a simplex at every location.
    pub part_map: Tensor,
}

pub struct Spt {
    config: SptConfig,
    prototypes: Tensor,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

impl Spt {
    pub fn new(store: &mut ParamStore, name: &str, config: &SptConfig) -> Result<Self> {
        if config.parts == 0 {
            return Err(Error::Config("part transformer needs K >= 1".into()));
        }
        if !(config.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", config.tau)));
        }
        let prototypes =
            store.param(&format!("{name}.prototypes"), &[config.parts + 1, config.dim], Init::Normal(1.0))?;
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), config.dim, config.heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), config.dim)?;
        Ok(Self { config: config.clone(), prototypes, blocks, norm })
    }

    pub fn config(&self) -> &SptConfig {
        &self.config
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    /// `patches: [B, N, C]` (position encodings already added).
    pub fn forward(&self, patches: &Tensor) -> Result<SptOutput> {
        self.forward_with_prototypes(&self.prototypes, patches)
    }

    /// Runs the encoder with explicit prototypes `[K + 1, C]`.
    pub fn forward_with_prototypes(&self, prototypes: &Tensor, patches: &Tensor) -> Result<SptOutput> {
        let (b, n, c) = patches.dims3()?;
        if c != self.config.dim {
            return Err(Error::Shape(format!("patch width {c} != model width {}", self.config.dim)));
        }
        let k1 = prototypes.dim(0)?;
        let protos = prototypes.unsqueeze(0)?.broadcast_as((b, k1, c))?;
        let mut x = Tensor::cat(&[&protos, patches], 1)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.norm.forward(&x)?;
        let part_tokens = x.narrow(1, 0, k1)?;
        let patch_tokens = x.narrow(1, k1, n)?;
        let part_map = part_probability_map(&patch_tokens, &part_tokens, self.config.tau)?;
        Ok(SptOutput { part_tokens, patch_tokens, part_map })
    }
}

/// `softmax_k(patch . part_k / (tau * sqrt(C)))` for every location.
pub fn part_probability_map(patch_tokens: &Tensor, part_tokens: &Tensor, tau: f64) -> Result<Tensor> {
    let c = patch_tokens.dim(D::Minus1)?;
    let logits = (patch_tokens.matmul(&part_tokens.transpose(1, 2)?.contiguous()?)? / (tau * (c as f64).sqrt()))?;
    Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
}

pub const POOL_EPS: f64 = 1e-6;

/// Mass-weighted mean of the patch tokens under each part channel:
/// `[B, N, K + 1] x [B, N, C] -> [B, K + 1, C]`.
pub fn masked_part_pool(part_map: &Tensor, patches: &Tensor) -> Result<Tensor> {
    let weighted = part_map.transpose(1, 2)?.contiguous()?.matmul(patches)?;
    let mass = (part_map.sum(1)? + POOL_EPS)?.unsqueeze(2)?;
    Ok(weighted.broadcast_div(&mass)?)
}
