//! Non-downsampled wavelet scattering and the local scattering perceptron.
//!
//! Channel layout is order 0, then order-1 paths `(j, l)` in `j * L + l`
//! order, then order-2 paths `((j1, l1), (j2, l2))` with `j2 > j1` in
//! lexicographic order. Every channel keeps the input's spatial size.

use candle_core::{Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::conv::{modulus, CircularConv, Plane};
use crate::error::{Error, Result};
use crate::morlet::{
    inverse_softplus, make_lowpass, morlet_kernels_tensor, softplus, softplus_tensor, FilterBank, FilterBankConfig,
    MorletParams,
};
use crate::nn::{Init, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ScatterOrder {
    First,
    Second,
}

impl TryFrom<u8> for ScatterOrder {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::First),
            2 => Ok(Self::Second),
            other => Err(Error::Config(format!("scattering order must be 1 or 2, got {other}"))),
        }
    }
}

impl From<ScatterOrder> for u8 {
    fn from(o: ScatterOrder) -> u8 {
        match o {
            ScatterOrder::First => 1,
            ScatterOrder::Second => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "order", rename_all = "snake_case")]
pub enum ScatterPath {
    Zero,
    First { j: usize, l: usize },
    Second { j1: usize, l1: usize, j2: usize, l2: usize },
}

pub fn scattering_paths(scales: usize, orientations: usize, order: ScatterOrder) -> Vec<ScatterPath> {
    let mut paths = vec![ScatterPath::Zero];
    for j in 0..scales {
        for l in 0..orientations {
            paths.push(ScatterPath::First { j, l });
        }
    }
    if order == ScatterOrder::Second {
        for j1 in 0..scales {
            for l1 in 0..orientations {
                for j2 in j1 + 1..scales {
                    for l2 in 0..orientations {
                        paths.push(ScatterPath::Second { j1, l1, j2, l2 });
                    }
                }
            }
        }
    }
    paths
}

/// `1 + J*L (+ C(J, 2) * L^2 for order 2)`.
pub fn channel_count(scales: usize, orientations: usize, order: ScatterOrder) -> usize {
    let first = 1 + scales * orientations;
    match order {
        ScatterOrder::First => first,
        ScatterOrder::Second => first + scales * scales.saturating_sub(1) / 2 * orientations * orientations,
    }
}

/// Scattering coefficients of one image, stored `H x W x Cs` (channel fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringFeatureMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub paths: Vec<ScatterPath>,
}

impl ScatteringFeatureMap {
    pub fn channels(&self) -> usize {
        self.paths.len()
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[(row * self.width + col) * self.paths.len() + channel]
    }

    /// One channel as a plane.
    pub fn channel(&self, channel: usize) -> Plane {
        let cs = self.paths.len();
        Plane {
            height: self.height,
            width: self.width,
            data: self.values.iter().skip(channel).step_by(cs).copied().collect(),
        }
    }

    fn from_chw(t: &Tensor, paths: Vec<ScatterPath>) -> Result<Self> {
        let (cs, h, w) = t.dims3()?;
        let values = t.permute((1, 2, 0))?.flatten_all()?.to_vec1::<f64>()?;
        debug_assert_eq!(cs, paths.len());
        Ok(Self { height: h, width: w, values, paths })
    }
}

/// Wavelet index pairs `(m1, m2)` of the order-2 paths, matching [`scattering_paths`].
fn second_order_pairs(scales: usize, orientations: usize) -> Vec<(usize, usize)> {
    scattering_paths(scales, orientations, ScatterOrder::Second)
        .into_iter()
        .filter_map(|p| match p {
            ScatterPath::Second { j1, l1, j2, l2 } => Some((j1 * orientations + l1, j2 * orientations + l2)),
            _ => None,
        })
        .collect()
}

/// Scattering of a batch `x: [B, 1, H, W]` with wavelets `re, im: [M, S, S]`
/// and low-pass `[1, S, S]`. Returns `[B, Cs, H, W]`.
pub fn scatter_tensor(
    x: &Tensor,
    wavelets_re: &Tensor,
    wavelets_im: &Tensor,
    lowpass: &Tensor,
    scales: usize,
    orientations: usize,
    order: ScatterOrder,
) -> Result<Tensor> {
    let m = scales * orientations;
    if wavelets_re.dim(0)? != m {
        return Err(Error::Shape(format!("expected {m} wavelets, got {}", wavelets_re.dim(0)?)));
    }
    let kernels = Tensor::cat(&[wavelets_re, wavelets_im], 0)?;
    let first = CircularConv::new((0..2 * m).map(|k| (0, k)).collect()).apply(x, &kernels)?;
    let u1 = modulus(&first.narrow(1, 0, m)?, &first.narrow(1, m, m)?)?;
    let mut layers = vec![x.clone(), u1.clone()];
    if order == ScatterOrder::Second && scales > 1 {
        let pairs = second_order_pairs(scales, orientations);
        let q = pairs.len();
        let conv_pairs =
            pairs.iter().map(|&(m1, m2)| (m1, m2)).chain(pairs.iter().map(|&(m1, m2)| (m1, m + m2))).collect();
        let second = CircularConv::new(conv_pairs).apply(&u1, &kernels)?;
        layers.push(modulus(&second.narrow(1, 0, q)?, &second.narrow(1, q, q)?)?);
    }
    let stacked = Tensor::cat(&layers, 1)?;
    let cs = stacked.dim(1)?;
    CircularConv::new((0..cs).map(|c| (c, 0)).collect()).apply(&stacked, lowpass)
}

fn bank_tensors(bank: &FilterBank, device: &Device) -> Result<(Tensor, Tensor, Tensor)> {
    let s = bank.grid_size();
    let m = bank.wavelets().len();
    let re: Vec<f64> = bank.wavelets().iter().flat_map(|w| w.re()).collect();
    let im: Vec<f64> = bank.wavelets().iter().flat_map(|w| w.im()).collect();
    Ok((
        Tensor::from_vec(re, (m, s, s), device)?,
        Tensor::from_vec(im, (m, s, s), device)?,
        Tensor::from_vec(bank.lowpass().to_vec(), (1, s, s), device)?,
    ))
}

/// Scattering transform of one image with a fixed bank.
pub fn scatter(image: &Plane, bank: &FilterBank, order: ScatterOrder) -> Result<ScatteringFeatureMap> {
    if let Some(bad) = image.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("image contains {bad}")));
    }
    let device = Device::Cpu;
    let x = Tensor::from_vec(image.data.clone(), (1, 1, image.height, image.width), &device)?;
    let (re, im, lp) = bank_tensors(bank, &device)?;
    let out = scatter_tensor(&x, &re, &im, &lp, bank.scales(), bank.orientations(), order)?;
    ScatteringFeatureMap::from_chw(&out.get(0)?, scattering_paths(bank.scales(), bank.orientations(), order))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LspConfig {
    pub bank: FilterBankConfig,
    pub order: ScatterOrder,
    /// Token width `C`.
    pub embed_dim: usize,
    /// Pooling stride `P` from pixels to tokens.
    pub patch: usize,
}

impl Default for LspConfig {
    fn default() -> Self {
        Self { bank: FilterBankConfig::default(), order: ScatterOrder::Second, embed_dim: 128, patch: 8 }
    }
}

const STANDARDIZE_EPS: f64 = 1e-5;
const MIN_MOMENTUM: f64 = 0.1;

/// Learnable scattering front-end: scatter, pool to token resolution,
/// standardize with running statistics, project to `C` channels.
pub struct Lsp {
    config: LspConfig,
    grid_size: usize,
    sigma_raw: Tensor,
    theta: Tensor,
    xi_raw: Tensor,
    gamma_raw: Tensor,
    lowpass: Tensor,
    running_mean: Var,
    running_var: Var,
    updates: Var,
    proj: Linear,
}

impl Lsp {
    pub fn new(store: &mut ParamStore, name: &str, config: &LspConfig) -> Result<Self> {
        let bank = crate::morlet::make_filterbank(&config.bank)?;
        let grid_size = bank.grid_size();
        let column = |f: &dyn Fn(&MorletParams) -> f64| bank.params().iter().map(f).collect::<Vec<_>>();
        let m = bank.params().len();
        let sigma_raw = store.param(
            &format!("{name}.morlet.sigma_raw"),
            &[m],
            Init::Values(column(&|p| inverse_softplus(p.sigma()))),
        )?;
        let theta = store.param(&format!("{name}.morlet.theta"), &[m], Init::Values(column(&|p| p.theta())))?;
        let xi_raw = store.param(
            &format!("{name}.morlet.xi_raw"),
            &[m],
            Init::Values(column(&|p| inverse_softplus(p.xi().max(1e-6)))),
        )?;
        let gamma_raw = store.param(
            &format!("{name}.morlet.gamma_raw"),
            &[m],
            Init::Values(column(&|p| inverse_softplus(p.gamma()))),
        )?;
        let lowpass = Tensor::from_vec(
            make_lowpass(bank.lowpass_sigma(), grid_size)?,
            (1, grid_size, grid_size),
            store.device(),
        )?;
        let cs = channel_count(config.bank.scales, config.bank.orientations, config.order);
        let running_mean = store.buffer(&format!("{name}.running_mean"), &[cs], Init::Zeros)?;
        let running_var = store.buffer(&format!("{name}.running_var"), &[cs], Init::Ones)?;
        let updates = store.buffer(&format!("{name}.updates"), &[1], Init::Zeros)?;
        let proj = Linear::new(store, &format!("{name}.proj"), cs, config.embed_dim)?;
        Ok(Self {
            config: config.clone(),
            grid_size,
            sigma_raw,
            theta,
            xi_raw,
            gamma_raw,
            lowpass,
            running_mean,
            running_var,
            updates,
            proj,
        })
    }

    pub fn config(&self) -> &LspConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        channel_count(self.config.bank.scales, self.config.bank.orientations, self.config.order)
    }

    /// Current wavelet kernels `(re, im)`, each `[M, S, S]`.
    pub fn kernels(&self) -> Result<(Tensor, Tensor)> {
        morlet_kernels_tensor(
            &softplus_tensor(&self.sigma_raw)?,
            &self.theta,
            &softplus_tensor(&self.xi_raw)?,
            &softplus_tensor(&self.gamma_raw)?,
            self.grid_size,
        )
    }

    /// Snapshot of the current (trained) filter bank.
    pub fn filter_bank(&self) -> Result<FilterBank> {
        let get = |t: &Tensor| t.to_vec1::<f64>();
        let (s, th, x, g) = (get(&self.sigma_raw)?, get(&self.theta)?, get(&self.xi_raw)?, get(&self.gamma_raw)?);
        let params = (0..s.len())
            .map(|i| MorletParams::new(softplus(s[i]), th[i], softplus(x[i]), softplus(g[i])))
            .collect::<Result<Vec<_>>>()?;
        FilterBank::from_params(
            self.config.bank.scales,
            self.config.bank.orientations,
            self.grid_size,
            params,
            self.config.bank.coarsest_sigma(),
        )
    }

    /// Full-resolution scattering `[B, Cs, H, W]` of `x: [B, 1, H, W]`.
    pub fn scatter(&self, x: &Tensor) -> Result<Tensor> {
        let (re, im) = self.kernels()?;
        scatter_tensor(
            x,
            &re,
            &im,
            &self.lowpass,
            self.config.bank.scales,
            self.config.bank.orientations,
            self.config.order,
        )
    }

    /// `x: [B, 1, H, W]` to tokens `[B, H/P * W/P, C]` (row-major token order).
    ///
    /// In training mode the running statistics absorb the batch statistics
    /// before they are applied.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let p = self.config.patch;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("image {h}x{w} not divisible by patch stride {p}")));
        }
        let s = self.scatter(x)?;
        let cs = s.dim(1)?;
        let pooled = avg_pool(&s, p)?; // [B, Cs, H', W']
        let n = (h / p) * (w / p);
        let tokens = pooled.reshape((b, cs, n))?.transpose(1, 2)?; // [B, N, Cs]
        if train {
            self.update_statistics(&tokens)?;
        }
        let mean = self.running_mean.as_tensor().detach();
        let std = (self.running_var.as_tensor().detach() + STANDARDIZE_EPS)?.sqrt()?;
        let normed = tokens.broadcast_sub(&mean)?.broadcast_div(&std)?;
        self.proj.forward(&normed)
    }

    fn update_statistics(&self, tokens: &Tensor) -> Result<()> {
        let cs = tokens.dim(2)?;
        let flat = tokens.detach().reshape(((), cs))?;
        let mean = flat.mean(0)?;
        let var = flat.broadcast_sub(&mean)?.sqr()?.mean(0)?;
        let count = self.updates.as_tensor().to_vec1::<f64>()?[0];
        let momentum = (1.0 / (count + 1.0)).max(MIN_MOMENTUM);
        let blend = |old: &Var, new: &Tensor| -> Result<()> {
            let v = ((old.as_tensor() * (1.0 - momentum))? + (new * momentum)?)?;
            old.set(&v)?;
            Ok(())
        };
        blend(&self.running_mean, &mean)?;
        blend(&self.running_var, &var)?;
        self.updates.set(&Tensor::new(&[count + 1.0], tokens.device())?)?;
        Ok(())
    }
}

/// Non-overlapping `p x p` mean pooling of `[B, C, H, W]`.
pub fn avg_pool(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if p == 1 {
        return Ok(x.clone());
    }
    let t = x.reshape((b * c * h, w / p, p))?.sum(D::Minus1)?; // [B C H, W']
    let t = t.reshape((b * c, h / p, p, w / p))?.sum(2)?; // [B C, H', W']
    Ok((t.reshape((b, c, h / p, w / p))? / (p * p) as f64)?)
}
