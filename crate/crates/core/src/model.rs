//! Run configuration and the composed classifier:
//! front-end -> part transformer -> part aggregation -> linear head.

use std::f64::consts::PI;
use std::path::PathBuf;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentRanges;
use crate::conv::Plane;
use crate::error::{Error, Result};
use crate::losses::{part_anchors, GdcDecoder, LossWeights, FEATURE_DIM};
use crate::morlet::FilterBankConfig;
use crate::nn::{Linear, ParamStore, DTYPE};
use crate::pki::{Classifier, Pki, PkiConfig};
use crate::scattering::{Lsp, LspConfig, ScatterOrder};
use crate::spr::{patchify, Spt, SptConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side; images are resized to it on load.
    pub image_size: usize,
    /// Pixels per token side.
    pub patch: usize,
    pub scales: usize,
    pub orientations: usize,
    pub order: ScatterOrder,
    pub base_sigma: f64,
    pub base_xi: f64,
    pub gamma: f64,
    #[serde(default)]
    pub grid_size: Option<usize>,
    /// Token width `C`.
    pub dim: usize,
    /// Part transformer depth `D`.
    pub depth: usize,
    /// Foreground parts `K`.
    pub parts: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tau: f64,
    pub pki_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            scales: 3,
            orientations: 4,
            order: ScatterOrder::Second,
            base_sigma: 0.8,
            base_xi: 3.0 * PI / 4.0,
            gamma: 1.0,
            grid_size: None,
            dim: 128,
            depth: 4,
            parts: 5,
            heads: 4,
            mlp_ratio: 2,
            tau: 1.0,
            pki_depth: 1,
        }
    }
}

impl ModelConfig {
    pub fn bank(&self) -> FilterBankConfig {
        FilterBankConfig {
            scales: self.scales,
            orientations: self.orientations,
            base_sigma: self.base_sigma,
            base_xi: self.base_xi,
            gamma: self.gamma,
            grid_size: self.grid_size,
        }
    }

    pub fn lsp(&self) -> LspConfig {
        LspConfig { bank: self.bank(), order: self.order, embed_dim: self.dim, patch: self.patch }
    }

    pub fn spt(&self) -> SptConfig {
        SptConfig {
            parts: self.parts,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            tau: self.tau,
        }
    }

    pub fn pki(&self) -> PkiConfig {
        PkiConfig { dim: self.dim, heads: self.heads, depth: self.pki_depth, mlp_ratio: self.mlp_ratio }
    }

    /// Token grid side `H / P`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!("image size {} not divisible by patch {}", self.image_size, self.patch)));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!("width {} must be divisible by 4", self.dim)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.parts == 0 {
            return Err(Error::Config("need K >= 1 parts".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.scales == 0 || self.orientations == 0 {
            return Err(Error::Config("filter bank needs J >= 1 and L >= 1".into()));
        }
        Ok(())
    }
}

/// Module switches; a disabled front-end is replaced by a linear embedding of
/// raw pixel patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_lsp: bool,
    pub use_spr: bool,
    pub use_pki: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_lsp: true, use_spr: true, use_pki: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub ipc: bool,
    pub mpb: bool,
    pub gdc: bool,
    pub pso: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self { ipc: true, mpb: true, gdc: true, pso: true }
    }
}

impl LossSwitches {
    pub fn none() -> Self {
        Self { ipc: false, mpb: false, gdc: false, pso: false }
    }

    pub fn any(&self) -> bool {
        self.ipc || self.mpb || self.gdc || self.pso
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 3e-4, weight_decay: 1e-4, epochs: 30, batch_size: 32, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid moment settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Manifest split used for training; all images when absent.
    #[serde(default)]
    pub train_split: Option<String>,
    /// Manifest split used for the per-epoch evaluation; none when absent.
    #[serde(default)]
    pub eval_split: Option<String>,
}

/// Everything a training run depends on, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub loss_switches: LossSwitches,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub augment: AugmentRanges,
    /// Parameter initialization, shuffling and augmentation.
    pub seed: u64,
    /// Frozen feature extractor weights.
    #[serde(default = "default_feature_seed")]
    pub feature_seed: u64,
    pub data: DataConfig,
    /// Checkpoint directory.
    pub output: PathBuf,
}

fn default_feature_seed() -> u64 {
    0x5eed
}

impl RunConfig {
    pub fn new(data_root: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            model: ModelConfig::default(),
            ablation: Ablation::default(),
            loss: LossWeights::default(),
            loss_switches: LossSwitches::default(),
            optim: OptimConfig::default(),
            augment: AugmentRanges::default(),
            seed: 0,
            feature_seed: default_feature_seed(),
            data: DataConfig { root: data_root.into(), train_split: None, eval_split: None },
            output: output.into(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        if self.ablation.use_pki && !self.ablation.use_spr {
            return Err(Error::Config("aggregation consumes part tokens: use_pki requires use_spr".into()));
        }
        Ok(())
    }

    /// Part losses that can actually be computed under the current ablation.
    pub fn active_losses(&self) -> LossSwitches {
        if self.ablation.use_spr {
            self.loss_switches
        } else {
            LossSwitches::none()
        }
    }
}

/// Token front-end.
pub enum FrontEnd {
    Scattering(Lsp),
    /// Linear embedding of raw `P x P` pixel patches.
    Pixels(Linear),
}

impl FrontEnd {
    /// `x: [B, 1, H, W]` -> `[B, N, C]`, row-major tokens.
    fn forward(&self, x: &Tensor, patch: usize, train: bool) -> Result<Tensor> {
        match self {
            FrontEnd::Scattering(lsp) => lsp.forward(x, train),
            FrontEnd::Pixels(embed) => embed.forward(&unfold_patches(x, patch)?),
        }
    }
}

/// `[B, 1, H, W]` -> `[B, (H/P)(W/P), P*P]`.
pub fn unfold_patches(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c != 1 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("cannot cut {p}x{p} patches from {:?}", x.dims())));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(x.reshape((b, gh, p, gw, p))?.permute((0, 1, 3, 2, 4))?.contiguous()?.reshape((b, gh * gw, p * p))?)
}

/// Model outputs for one batch.
pub struct ForwardOutput {
    pub logits: Tensor,
    /// `[B, N, K + 1]` when the part transformer is enabled.
    pub part_map: Option<Tensor>,
    /// `[B, K + 1, C]`.
    pub part_tokens: Option<Tensor>,
    /// `P^att: [B, K]` when aggregation is enabled.
    pub part_scores: Option<Tensor>,
}

pub struct Model {
    config: ModelConfig,
    ablation: Ablation,
    num_classes: usize,
    pub store: ParamStore,
    front: FrontEnd,
    spt: Option<Spt>,
    pki: Option<Pki>,
    classifier: Classifier,
    anchors: Option<Tensor>,
    decoder: Option<GdcDecoder>,
}

impl Model {
    pub fn new(run: &RunConfig, num_classes: usize) -> Result<Self> {
        run.validate()?;
        let cfg = &run.model;
        let mut store = ParamStore::new(run.seed);
        let front = if run.ablation.use_lsp {
            FrontEnd::Scattering(Lsp::new(&mut store, "lsp", &cfg.lsp())?)
        } else {
            FrontEnd::Pixels(Linear::new(&mut store, "pixel_embed", cfg.patch * cfg.patch, cfg.dim)?)
        };
        let spt = if run.ablation.use_spr { Some(Spt::new(&mut store, "spt", &cfg.spt())?) } else { None };
        let pki = if run.ablation.use_pki { Some(Pki::new(&mut store, "pki", &cfg.pki())?) } else { None };
        let classifier = Classifier::new(&mut store, "head", cfg.dim, num_classes)?;
        let losses = run.active_losses();
        let anchors =
            if losses.pso { Some(part_anchors(&mut store, "pso.anchors", cfg.parts, cfg.dim)?) } else { None };
        let decoder =
            if losses.gdc { Some(GdcDecoder::new(&mut store, "gdc.decoder", cfg.dim, FEATURE_DIM)?) } else { None };
        Ok(Self {
            config: cfg.clone(),
            ablation: run.ablation,
            num_classes,
            store,
            front,
            spt,
            pki,
            classifier,
            anchors,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn lsp(&self) -> Option<&Lsp> {
        match &self.front {
            FrontEnd::Scattering(l) => Some(l),
            FrontEnd::Pixels(_) => None,
        }
    }

    pub fn spt(&self) -> Option<&Spt> {
        self.spt.as_ref()
    }

    pub fn pki(&self) -> Option<&Pki> {
        self.pki.as_ref()
    }

    pub fn anchors(&self) -> Option<&Tensor> {
        self.anchors.as_ref()
    }

    pub fn decoder(&self) -> Option<&GdcDecoder> {
        self.decoder.as_ref()
    }

    /// Stacks equally sized planes into `[B, 1, H, W]`.
    pub fn batch_tensor(&self, images: &[&Plane]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.height != s || img.width != s {
                return Err(Error::Shape(format!("image is {}x{}, model expects {s}x{s}", img.height, img.width)));
            }
            if img.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput("image contains NaN or infinite pixels".into()));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 1, s, s), self.store.device())?.to_dtype(DTYPE)?)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<ForwardOutput> {
        let tokens = self.front.forward(x, self.config.patch, train)?; // [B, N, C]
        let Some(spt) = &self.spt else {
            let pooled = tokens.mean(1)?;
            return Ok(ForwardOutput {
                logits: self.classifier.forward(&pooled)?,
                part_map: None,
                part_tokens: None,
                part_scores: None,
            });
        };
        let (b, n, c) = tokens.dims3()?;
        let g = self.config.grid();
        debug_assert_eq!(n, g * g);
        let patches = patchify(&tokens.reshape((b, g, g, c))?)?;
        let out = spt.forward(&patches)?;
        let k = self.config.parts;
        let fg = out.part_tokens.narrow(1, 1, k)?;
        let (features, scores) = match &self.pki {
            Some(pki) => {
                let (f, s) = pki.forward(&fg)?;
                (f, Some(s))
            }
            None => (fg.mean(1)?, None),
        };
        Ok(ForwardOutput {
            logits: self.classifier.forward(&features)?,
            part_map: Some(out.part_map),
            part_tokens: Some(out.part_tokens),
            part_scores: scores,
        })
    }

    /// Class probabilities are not needed anywhere, so predictions expose logits.
    pub fn predict(&self, images: &[&Plane]) -> Result<Vec<crate::pki::Prediction>> {
        let x = self.batch_tensor(images)?;
        let out = self.forward(&x, false)?;
        let logits = out.logits.to_vec2::<f64>()?;
        let scores = match &out.part_scores {
            Some(s) => s.to_vec2::<f64>()?,
            None => vec![Vec::new(); logits.len()],
        };
        Ok(logits
            .into_iter()
            .zip(scores)
            .map(|(l, s)| crate::pki::Prediction { label: crate::pki::argmax(&l), logits: l, part_scores: s })
            .collect())
    }
}

/// Fraction of part-map mass on the background channel, batch mean.
pub fn background_fraction(part_map: &Tensor) -> Result<f64> {
    let total = part_map.sum_all()?.to_scalar::<f64>()?;
    let bg = part_map.narrow(D::Minus1, 0, 1)?.sum_all()?.to_scalar::<f64>()?;
    Ok(if total > 0.0 { bg / total } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_run() -> RunConfig {
        let mut run = RunConfig::new("data", "out");
        run.model = ModelConfig {
            image_size: 32,
            patch: 8,
            scales: 2,
            orientations: 2,
            order: ScatterOrder::First,
            dim: 16,
            depth: 1,
            parts: 3,
            heads: 2,
            ..ModelConfig::default()
        };
        run
    }

    fn image(seed: usize) -> Plane {
        let data = (0..32 * 32).map(|i| (((i * 37 + seed * 11) % 101) as f64) / 100.0).collect();
        Plane::new(32, 32, data).unwrap()
    }

    #[test]
    fn config_json_round_trip() {
        let run = tiny_run();
        let back = RunConfig::from_json(&run.to_json().unwrap()).unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn pki_without_spr_is_rejected() {
        let mut run = tiny_run();
        run.ablation = Ablation { use_lsp: true, use_spr: false, use_pki: true };
        assert!(matches!(run.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn every_module_pattern_produces_logits() {
        for (lsp, spr, pki) in [
            (false, false, false),
            (false, true, false),
            (false, true, true),
            (true, false, false),
            (true, true, false),
            (true, true, true),
        ] {
            let mut run = tiny_run();
            run.ablation = Ablation { use_lsp: lsp, use_spr: spr, use_pki: pki };
            let model = Model::new(&run, 3).unwrap();
            let imgs = [image(0), image(1)];
            let x = model.batch_tensor(&imgs.iter().collect::<Vec<_>>()).unwrap();
            let out = model.forward(&x, true).unwrap();
            assert_eq!(out.logits.dims(), &[2, 3]);
            assert_eq!(out.part_map.is_some(), spr);
            assert_eq!(out.part_scores.is_some(), pki);
            assert_eq!(model.anchors().is_some(), spr);
        }
    }

    #[test]
    fn unfold_orders_patches_row_major() {
        let x = Tensor::arange(0f64, 16.0, &candle_core::Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let p = unfold_patches(&x, 2).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(p[0][0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p[0][1], vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p[0][2], vec![8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let model = Model::new(&tiny_run(), 2).unwrap();
        let bad = Plane::zeros(16, 16);
        assert!(matches!(model.batch_tensor(&[&bad]), Err(Error::Shape(_))));
    }
}
