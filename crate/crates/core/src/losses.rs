//! Part-learning objectives and the weighted total loss.
//!
//! All tensor losses take a batch and return the batch mean.
//!
//! * IPC: spatial variance of every foreground part channel of `V`.
//! * MPB: `sum_k 1 / (1 + z_k / alpha)` over all `K + 1` channel masses.
//! * GDC: cosine distance between frozen features of a view and a linear
//!   decoding of the other view's parts warped into it, both directions.
//! * PSO: additive angular margin softmax of part tokens against shared anchors.

use candle_core::{Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conv::Plane;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pso: f64,
    pub lambda_ipc: f64,
    pub lambda_mpd: f64,
    /// Minimum-area scale in token counts; `0.05 * N` when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub epsilon: f64,
    /// Angular margin `m` in radians.
    pub margin: f64,
    /// Logit scale `s`.
    pub scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_pso: 0.1, lambda_ipc: 1.0, lambda_mpd: 1.0, alpha: None, epsilon: 1e-6, margin: 0.5, scale: 16.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_pso", self.lambda_pso),
            ("lambda_ipc", self.lambda_ipc),
            ("lambda_mpd", self.lambda_mpd),
            ("margin", self.margin),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return Err(Error::Config(format!("alpha must be > 0, got {a}")));
            }
        }
        Ok(())
    }

    pub fn alpha_for(&self, tokens: usize) -> f64 {
        self.alpha.unwrap_or(0.05 * tokens as f64)
    }
}

/// Token coordinates `(x, y)` = (column, row) of a row-major `rows x cols` grid.
fn grid_xy(rows: usize, cols: usize, like: &Tensor) -> Result<(Tensor, Tensor)> {
    let xs: Vec<f64> = (0..rows * cols).map(|i| (i % cols) as f64).collect();
    let ys: Vec<f64> = (0..rows * cols).map(|i| (i / cols) as f64).collect();
    let n = rows * cols;
    Ok((Tensor::from_vec(xs, (1, n, 1), like.device())?, Tensor::from_vec(ys, (1, n, 1), like.device())?))
}

/// Compactness of the foreground part channels of `v: [B, H', W', K + 1]`.
pub fn ipc_loss(v: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (b, rows, cols, k1) = v.dims4()?;
    if k1 < 2 {
        return Err(Error::Shape("part map needs at least one foreground channel".into()));
    }
    let k = k1 - 1;
    let fg = v.reshape((b, rows * cols, k1))?.narrow(2, 1, k)?;
    let z = (fg.sum_keepdim(1)? + epsilon)?; // [B, 1, K]
    let w = fg.broadcast_div(&z)?;
    let (xs, ys) = grid_xy(rows, cols, v)?;
    let variance = |coord: &Tensor| -> Result<Tensor> {
        let mean = w.broadcast_mul(coord)?.sum_keepdim(1)?;
        Ok(w.mul(&coord.broadcast_sub(&mean)?.sqr()?)?.sum(1)?) // [B, K]
    };
    let per_part = (variance(&xs)? + variance(&ys)?)?;
    Ok((per_part.sum(1)? / k as f64)?.mean(0)?)
}

/// Area floor on every channel (background included) of `v: [B, N, K + 1]`.
pub fn mpb_loss(v: &Tensor, alpha: f64, epsilon: f64) -> Result<Tensor> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    let v = flatten_map(v)?;
    let z = (v.sum(1)? + epsilon)?; // [B, K + 1]
    let terms = ((z / alpha)? + 1.0)?.recip()?;
    Ok(terms.sum(1)?.mean(0)?)
}

fn flatten_map(v: &Tensor) -> Result<Tensor> {
    match v.rank() {
        3 => Ok(v.clone()),
        4 => {
            let (b, h, w, k1) = v.dims4()?;
            Ok(v.reshape((b, h * w, k1))?)
        }
        r => Err(Error::Shape(format!("part map must be rank 3 or 4, got rank {r}"))),
    }
}

fn row_norms_nonzero(t: &Tensor, what: &str) -> Result<()> {
    let norms = t.sqr()?.sum(D::Minus1)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ParameterDomain(format!("{what} row {i} has zero norm")));
    }
    Ok(())
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    Ok(t.broadcast_div(&t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)?)
}

/// Cosine clamp keeping `acos` differentiable on the margin path.
const COS_CLAMP: f64 = 1e-9;

/// Angular-margin part orthogonality for `parts: [B, K, C]` and anchors `[K, C]`.
pub fn pso_loss(parts: &Tensor, anchors: &Tensor, margin: f64, scale: f64) -> Result<Tensor> {
    let (_, k, c) = parts.dims3()?;
    if anchors.dims() != [k, c] {
        return Err(Error::Shape(format!("anchors {:?} do not match parts [{k}, {c}]", anchors.dims())));
    }
    row_norms_nonzero(parts, "part token")?;
    row_norms_nonzero(anchors, "anchor")?;
    // cos[b, k, t] = cos theta(t, k)
    let cos = unit_rows(parts)?.broadcast_matmul(&unit_rows(anchors)?.t()?)?;
    let eye = Tensor::eye(k, cos.dtype(), cos.device())?;
    let diag = cos.broadcast_mul(&eye)?.sum_keepdim(D::Minus1)?; // [B, K, 1]
    let c_k = diag.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)?;
    let sin_k = (1.0 - c_k.sqr()?)?.sqrt()?;
    let (sin_m, cos_m) = margin.sin_cos();
    let shifted = ((&c_k * cos_m)? - (&sin_k * sin_m)?)?;
    // theta + m clamped into [0, pi]
    let shifted = if margin > 0.0 {
        let past_pi = diag.lt(-cos_m)?;
        past_pi.where_cond(&shifted.ones_like()?.neg()?, &shifted)?
    } else if margin < 0.0 {
        let below_zero = diag.gt(cos_m)?;
        below_zero.where_cond(&shifted.ones_like()?, &shifted)?
    } else {
        shifted
    };
    let off = (1.0 - &eye)?;
    let logits = (cos.broadcast_mul(&off)? + shifted.broadcast_mul(&eye)?)? * scale;
    let log_probs = candle_nn::ops::log_softmax(&logits?, D::Minus1)?;
    let target = log_probs.broadcast_mul(&eye)?.sum(D::Minus1)?; // [B, K]
    Ok((target.mean(1)?.mean(0)? * -1.0)?)
}

/// Cosine distance `1 - a.b / max(|a||b|, eps)` row by row, `[B, F] -> [B]`.
pub fn cosine_distance(a: &Tensor, b: &Tensor, epsilon: f64) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    let denom = (na * nb)?.maximum(epsilon)?;
    Ok((1.0 - dot.div(&denom)?)?)
}

/// Learned linear map from part-token width to the frozen feature width.
pub struct GdcDecoder {
    linear: Linear,
}

impl GdcDecoder {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, feature_dim: usize) -> Result<Self> {
        Ok(Self { linear: Linear::new(store, name, dim, feature_dim)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.linear.forward(x)
    }
}

/// One direction of the cross-view reconstruction.
pub struct GdcView<'a> {
    /// Pooled frozen features of the target view, `[B, F]`.
    pub target_features: &'a Tensor,
    /// Part map of the source view, `[B, N_src, K + 1]`.
    pub source_map: &'a Tensor,
    /// Part tokens of the source view, `[B, K + 1, C]`.
    pub source_parts: &'a Tensor,
    /// Pooling weights of the source map in target coordinates, `[B, 1, N_src]`:
    /// the column means of the target-from-source bilinear sampling matrix.
    pub pooling: &'a Tensor,
}

/// Reconstruction `Dec(sum_k warp(V_src)^k * parts_src_k)` averaged over target locations, `[B, F]`.
pub fn reconstruct_pooled(view: &GdcView<'_>, decoder: &GdcDecoder) -> Result<Tensor> {
    let src = flatten_map(view.source_map)?;
    let mass = view.pooling.matmul(&src)?; // [B, 1, K + 1]
    let feature = mass.matmul(view.source_parts)?.squeeze(1)?; // [B, C]
    decoder.forward(&feature)
}

/// Sum of the two directional cosine distances, batch mean.
pub fn gdc_loss(to_view1: &GdcView<'_>, to_view2: &GdcView<'_>, decoder: &GdcDecoder, epsilon: f64) -> Result<Tensor> {
    let t1 = cosine_distance(to_view1.target_features, &reconstruct_pooled(to_view1, decoder)?, epsilon)?;
    let t2 = cosine_distance(to_view2.target_features, &reconstruct_pooled(to_view2, decoder)?, epsilon)?;
    Ok((t1 + t2)?.mean(0)?)
}

/// Small strided convolutional network with frozen random weights.
///
/// Four 3x3 stride-2 layers with zero padding 1 and ReLU, followed by global
/// average pooling.
#[derive(Debug, Clone)]
pub struct FrozenFeatureExtractor {
    layers: Vec<ConvLayer>,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    in_ch: usize,
    out_ch: usize,
    /// `[out, in, 3, 3]`
    weight: Vec<f64>,
}

impl ConvLayer {
    fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; self.out_ch * oh * ow];
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                let wk = &self.weight[(o * self.in_ch + i) * 9..(o * self.in_ch + i + 1) * 9];
                let plane = &x[i * h * w..(i + 1) * h * w];
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = 0.0;
                        for kr in 0..3 {
                            let sr = (2 * r + kr) as isize - 1;
                            if sr < 0 || sr >= h as isize {
                                continue;
                            }
                            for kc in 0..3 {
                                let sc = (2 * c + kc) as isize - 1;
                                if sc < 0 || sc >= w as isize {
                                    continue;
                                }
                                acc += wk[kr * 3 + kc] * plane[sr as usize * w + sc as usize];
                            }
                        }
                        out[(o * oh + r) * ow + c] += acc;
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        (out, oh, ow)
    }
}

pub const FEATURE_CHANNELS: [usize; 4] = [8, 16, 32, 64];
pub const FEATURE_DIM: usize = FEATURE_CHANNELS[3];

impl FrozenFeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 1;
        let layers = FEATURE_CHANNELS
            .iter()
            .map(|&out_ch| {
                let std = (2.0 / (in_ch * 9) as f64).sqrt();
                let weight = (0..out_ch * in_ch * 9)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                let layer = ConvLayer { in_ch, out_ch, weight };
                in_ch = out_ch;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_ch).unwrap_or(1)
    }

    /// Globally pooled features of one image.
    pub fn pooled(&self, image: &Plane) -> Vec<f64> {
        let (mut x, mut h, mut w) = (image.data.clone(), image.height, image.width);
        for layer in &self.layers {
            let (y, oh, ow) = layer.forward(&x, h, w);
            x = y;
            h = oh;
            w = ow;
        }
        let per = h * w;
        x.chunks(per).map(|ch| ch.iter().sum::<f64>() / per as f64).collect()
    }
}

/// Scalar values of each component, as logged per step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub ipc: f64,
    pub mpb: f64,
    pub gdc: f64,
    pub pso: f64,
    pub total: f64,
}

/// Component tensors; `None` marks a disabled term.
pub struct LossTerms {
    pub cls: Tensor,
    pub ipc: Option<Tensor>,
    pub mpb: Option<Tensor>,
    pub gdc: Option<Tensor>,
    pub pso: Option<Tensor>,
}

fn scalar(name: &str, t: Option<&Tensor>, step: usize) -> Result<f64> {
    let v = match t {
        Some(t) => t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?,
        None => 0.0,
    };
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss { component: name.to_string(), step });
    }
    Ok(v)
}

/// `gdc + lambda_pso * pso + lambda_ipc * ipc + lambda_mpd * mpb + cls`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, step: usize) -> Result<(Tensor, LossComponents)> {
    let mut comps = LossComponents {
        cls: scalar("cls", Some(&terms.cls), step)?,
        ipc: scalar("ipc", terms.ipc.as_ref(), step)?,
        mpb: scalar("mpb", terms.mpb.as_ref(), step)?,
        gdc: scalar("gdc", terms.gdc.as_ref(), step)?,
        pso: scalar("pso", terms.pso.as_ref(), step)?,
        total: 0.0,
    };
    let mut total = terms.cls.clone();
    let weighted = [
        (&terms.gdc, 1.0),
        (&terms.pso, weights.lambda_pso),
        (&terms.ipc, weights.lambda_ipc),
        (&terms.mpb, weights.lambda_mpd),
    ];
    for (term, w) in weighted {
        if let Some(t) = term {
            total = (total + (t * w)?)?;
        }
    }
    comps.total = comps.combine(weights);
    Ok((total, comps))
}

impl LossComponents {
    pub fn combine(&self, w: &LossWeights) -> f64 {
        self.gdc + w.lambda_pso * self.pso + w.lambda_ipc * self.ipc + w.lambda_mpd * self.mpb + self.cls
    }
}

/// Learnable part anchors `W: [K, C]`.
pub fn part_anchors(store: &mut ParamStore, name: &str, parts: usize, dim: usize) -> Result<Tensor> {
    store.param(name, &[parts, dim], Init::Normal(1.0))
}
