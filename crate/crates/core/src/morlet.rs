//! Parametric 2-D Morlet wavelets and multi-scale, multi-orientation filter banks.
//!
//! A wavelet is
//!
//! ```text
//! psi(u) = exp(-|D_gamma R_theta u|^2 / (2 sigma^2)) * (exp(i xi u') - beta)
//! ```
//!
//! with `u' = u1 cos(theta) + u2 sin(theta)` and `D_gamma = diag(1, gamma)`.
//! `beta` is recomputed from the current parameters on the discrete grid so
//! that the kernel sums to zero.
//!
//! Grids are odd-sized with unit spacing and the origin at the center sample.
//! Values are stored row-major; column offset is `u1`, row offset is `u2`.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor, Var};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape parameters of one wavelet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMorletParams")]
pub struct MorletParams {
    sigma: f64,
    theta: f64,
    xi: f64,
    gamma: f64,
}

#[derive(Deserialize)]
struct RawMorletParams {
    sigma: f64,
    theta: f64,
    xi: f64,
    gamma: f64,
}

impl TryFrom<RawMorletParams> for MorletParams {
    type Error = Error;

    fn try_from(raw: RawMorletParams) -> Result<Self> {
        MorletParams::new(raw.sigma, raw.theta, raw.xi, raw.gamma)
    }
}

impl MorletParams {
    pub fn new(sigma: f64, theta: f64, xi: f64, gamma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::ParameterDomain(format!("sigma must be > 0, got {sigma}")));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::ParameterDomain(format!("gamma must be > 0, got {gamma}")));
        }
        if !(xi.is_finite() && xi >= 0.0) {
            return Err(Error::ParameterDomain(format!("xi must be >= 0, got {xi}")));
        }
        if !theta.is_finite() {
            return Err(Error::ParameterDomain(format!("theta must be finite, got {theta}")));
        }
        Ok(Self { sigma, theta, xi, gamma })
    }

    /// Gaussian envelope size in pixels.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Orientation in radians.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Center angular frequency in radians per pixel.
    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// Envelope aspect ratio.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.sigma, self.theta, self.xi, self.gamma]
    }
}

/// Complex S x S kernel, row-major, centered at `(S/2, S/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexKernel {
    size: usize,
    values: Vec<Complex64>,
    beta: f64,
}

impl ComplexKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Value at signed offset `(du1, du2)` from the center.
    pub fn at(&self, du1: isize, du2: isize) -> Complex64 {
        let half = (self.size / 2) as isize;
        let row = (du2 + half) as usize;
        let col = (du1 + half) as usize;
        self.values[row * self.size + col]
    }

    pub fn sum(&self) -> Complex64 {
        self.values.iter().sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).sum()
    }

    pub fn re(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.im).collect()
    }

    #[cfg(test)]
    pub(crate) fn from_parts(size: usize, values: Vec<Complex64>, beta: f64) -> Self {
        Self { size, values, beta }
    }
}

fn check_grid(grid_size: usize) -> Result<()> {
    if grid_size.is_multiple_of(2) || grid_size == 0 {
        return Err(Error::Config(format!("kernel grid size must be odd, got {grid_size}")));
    }
    Ok(())
}

/// Signed `(u1, u2)` coordinates of every grid sample, row-major.
pub fn grid_coords(grid_size: usize) -> (Vec<f64>, Vec<f64>) {
    let half = (grid_size / 2) as f64;
    let mut u1 = Vec::with_capacity(grid_size * grid_size);
    let mut u2 = Vec::with_capacity(grid_size * grid_size);
    for row in 0..grid_size {
        for col in 0..grid_size {
            u1.push(col as f64 - half);
            u2.push(row as f64 - half);
        }
    }
    (u1, u2)
}

/// Envelope and phase samples: `(g(u), xi * u')`.
fn envelope_and_phase(params: &MorletParams, grid_size: usize) -> (Vec<f64>, Vec<f64>) {
    let (u1, u2) = grid_coords(grid_size);
    let (s, c) = params.theta.sin_cos();
    let two_sigma2 = 2.0 * params.sigma * params.sigma;
    let gamma2 = params.gamma * params.gamma;
    u1.iter()
        .zip(&u2)
        .map(|(&x, &y)| {
            let along = c * x + s * y;
            let across = -s * x + c * y;
            let q = along * along + gamma2 * across * across;
            ((-q / two_sigma2).exp(), params.xi * along)
        })
        .unzip()
}

/// The `beta` that makes the discrete kernel zero-mean.
pub fn normalization_beta(params: &MorletParams, grid_size: usize) -> Result<f64> {
    check_grid(grid_size)?;
    let (g, phase) = envelope_and_phase(params, grid_size);
    let num: f64 = g.iter().zip(&phase).map(|(g, p)| g * p.cos()).sum();
    let den: f64 = g.iter().sum();
    Ok(num / den)
}

pub fn make_morlet(params: &MorletParams, grid_size: usize) -> Result<ComplexKernel> {
    check_grid(grid_size)?;
    let (g, phase) = envelope_and_phase(params, grid_size);
    let num: f64 = g.iter().zip(&phase).map(|(g, p)| g * p.cos()).sum();
    let den: f64 = g.iter().sum();
    let beta = num / den;
    let values = g
        .iter()
        .zip(&phase)
        .map(|(&g, &p)| {
            let (s, c) = p.sin_cos();
            Complex64::new(g * (c - beta), g * s)
        })
        .collect();
    Ok(ComplexKernel { size: grid_size, values, beta })
}

/// Isotropic Gaussian normalized to unit sum.
pub fn make_lowpass(sigma: f64, grid_size: usize) -> Result<Vec<f64>> {
    check_grid(grid_size)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::ParameterDomain(format!("low-pass sigma must be > 0, got {sigma}")));
    }
    let (u1, u2) = grid_coords(grid_size);
    let two_sigma2 = 2.0 * sigma * sigma;
    let mut g: Vec<f64> = u1.iter().zip(&u2).map(|(x, y)| (-(x * x + y * y) / two_sigma2).exp()).collect();
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBankConfig {
    /// Number of dyadic scales `J`.
    pub scales: usize,
    /// Number of orientations `L`.
    pub orientations: usize,
    pub base_sigma: f64,
    pub base_xi: f64,
    pub gamma: f64,
    /// Odd kernel grid size; derived from the coarsest scale when absent.
    #[serde(default)]
    pub grid_size: Option<usize>,
}

impl Default for FilterBankConfig {
    fn default() -> Self {
        Self { scales: 3, orientations: 4, base_sigma: 0.8, base_xi: 3.0 * PI / 4.0, gamma: 1.0, grid_size: None }
    }
}

impl FilterBankConfig {
    pub fn coarsest_sigma(&self) -> f64 {
        self.base_sigma * 2f64.powi(self.scales.saturating_sub(1) as i32)
    }

    /// `2 * ceil(4 * sigma_max) + 1` unless overridden.
    pub fn resolved_grid_size(&self) -> usize {
        self.grid_size.unwrap_or_else(|| 2 * (4.0 * self.coarsest_sigma()).ceil() as usize + 1)
    }
}

#[derive(Debug, Clone)]
pub struct FilterBank {
    scales: usize,
    orientations: usize,
    grid_size: usize,
    params: Vec<MorletParams>,
    wavelets: Vec<ComplexKernel>,
    lowpass_sigma: f64,
    lowpass: Vec<f64>,
    warnings: Vec<String>,
}

pub fn make_filterbank(config: &FilterBankConfig) -> Result<FilterBank> {
    if config.scales == 0 || config.orientations == 0 {
        return Err(Error::Config(format!(
            "filter bank needs J >= 1 and L >= 1, got J={} L={}",
            config.scales, config.orientations
        )));
    }
    let mut params = Vec::with_capacity(config.scales * config.orientations);
    for j in 0..config.scales {
        let scale = 2f64.powi(j as i32);
        for l in 0..config.orientations {
            let theta = PI * l as f64 / config.orientations as f64;
            params.push(MorletParams::new(config.base_sigma * scale, theta, config.base_xi / scale, config.gamma)?);
        }
    }
    FilterBank::from_params(
        config.scales,
        config.orientations,
        config.resolved_grid_size(),
        params,
        config.coarsest_sigma(),
    )
}

impl FilterBank {
    /// Rebuilds a bank from explicit (possibly trained) parameters, ordered `j * L + l`.
    pub fn from_params(
        scales: usize,
        orientations: usize,
        grid_size: usize,
        params: Vec<MorletParams>,
        lowpass_sigma: f64,
    ) -> Result<Self> {
        if params.len() != scales * orientations {
            return Err(Error::Config(format!(
                "expected {} wavelet parameter sets, got {}",
                scales * orientations,
                params.len()
            )));
        }
        let wavelets = params.iter().map(|p| make_morlet(p, grid_size)).collect::<Result<Vec<_>>>()?;
        let lowpass = make_lowpass(lowpass_sigma, grid_size)?;
        let mut warnings = Vec::new();
        let coarsest = params.iter().map(|p| p.sigma).fold(lowpass_sigma, f64::max);
        if (grid_size as f64) < 4.0 * coarsest {
            let msg = format!(
                "kernel grid {grid_size} is smaller than 4 sigma of the coarsest filter ({:.2})",
                4.0 * coarsest
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        Ok(Self { scales, orientations, grid_size, params, wavelets, lowpass_sigma, lowpass, warnings })
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn params(&self) -> &[MorletParams] {
        &self.params
    }

    pub fn wavelets(&self) -> &[ComplexKernel] {
        &self.wavelets
    }

    pub fn wavelet(&self, j: usize, l: usize) -> &ComplexKernel {
        &self.wavelets[j * self.orientations + l]
    }

    pub fn lowpass(&self) -> &[f64] {
        &self.lowpass
    }

    pub fn lowpass_sigma(&self) -> f64 {
        self.lowpass_sigma
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn manifest(&self) -> BankManifest {
        BankManifest {
            scales: self.scales,
            orientations: self.orientations,
            grid_size: self.grid_size,
            lowpass_sigma: self.lowpass_sigma,
            params: self.params.clone(),
        }
    }

    pub fn from_manifest(manifest: &BankManifest) -> Result<Self> {
        Self::from_params(
            manifest.scales,
            manifest.orientations,
            manifest.grid_size,
            manifest.params.clone(),
            manifest.lowpass_sigma,
        )
    }

    /// Kernels as one `[J*L + 1, 2, S, S]` float32 block: wavelets (re, im) then the low-pass (im = 0).
    pub fn dump_tensor(&self) -> (Vec<usize>, Vec<f32>) {
        let s2 = self.grid_size * self.grid_size;
        let mut data = Vec::with_capacity((self.wavelets.len() + 1) * 2 * s2);
        for w in &self.wavelets {
            data.extend(w.values.iter().map(|v| v.re as f32));
            data.extend(w.values.iter().map(|v| v.im as f32));
        }
        data.extend(self.lowpass.iter().map(|&v| v as f32));
        data.extend(std::iter::repeat_n(0f32, s2));
        (vec![self.wavelets.len() + 1, 2, self.grid_size, self.grid_size], data)
    }
}

/// JSON description of a filter bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub scales: usize,
    pub orientations: usize,
    pub grid_size: usize,
    pub lowpass_sigma: f64,
    pub params: Vec<MorletParams>,
}

/// Smooth map from an unconstrained value to a strictly positive one.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

pub(crate) fn softplus_tensor(x: &Tensor) -> candle_core::Result<Tensor> {
    let neg_abs = x.abs()?.neg()?;
    x.relu()? + (neg_abs.exp()? + 1.0)?.log()?
}

/// Differentiable kernel construction for `M` wavelets at once.
///
/// Inputs are `[M]` tensors of constrained parameters; outputs are the real and
/// imaginary parts, each `[M, S, S]`.
pub fn morlet_kernels_tensor(
    sigma: &Tensor,
    theta: &Tensor,
    xi: &Tensor,
    gamma: &Tensor,
    grid_size: usize,
) -> Result<(Tensor, Tensor)> {
    check_grid(grid_size)?;
    let m = sigma.dim(0)?;
    let device = sigma.device();
    let dtype = sigma.dtype();
    let (u1, u2) = grid_coords(grid_size);
    let n = u1.len();
    let u1 = Tensor::from_vec(u1, (1, n), device)?.to_dtype(dtype)?;
    let u2 = Tensor::from_vec(u2, (1, n), device)?.to_dtype(dtype)?;
    let col = |t: &Tensor| t.reshape((m, 1));
    let (sigma, theta, xi, gamma) = (col(sigma)?, col(theta)?, col(xi)?, col(gamma)?);
    let (c, s) = (theta.cos()?, theta.sin()?);
    let along = (c.broadcast_mul(&u1)? + s.broadcast_mul(&u2)?)?;
    let across = (c.broadcast_mul(&u2)? - s.broadcast_mul(&u1)?)?;
    let q = (along.sqr()? + across.sqr()?.broadcast_mul(&gamma.sqr()?)?)?;
    let g = q.broadcast_div(&(sigma.sqr()? * 2.0)?)?.neg()?.exp()?;
    let phase = along.broadcast_mul(&xi)?;
    let (cos_p, sin_p) = (phase.cos()?, phase.sin()?);
    let beta = (&g * &cos_p)?.sum_keepdim(1)?.broadcast_div(&g.sum_keepdim(1)?)?;
    let re = (&g * cos_p.broadcast_sub(&beta)?)?;
    let im = (&g * sin_p)?;
    Ok((re.reshape((m, grid_size, grid_size))?, im.reshape((m, grid_size, grid_size))?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Autodiff gradient w.r.t. (sigma, theta, xi, gamma).
    pub analytic: [f64; 4],
    /// Central finite differences of the same functional.
    pub numeric: [f64; 4],
    pub max_rel_error: f64,
}

/// Denominator floor for relative errors of near-zero gradient components.
pub const GRADCHECK_FLOOR: f64 = 1e-6;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// `sum |psi|^2`; no domain check on `xi` so that `xi = 0` can be differenced centrally.
fn energy(params: [f64; 4], grid_size: usize) -> f64 {
    let p = MorletParams { sigma: params[0], theta: params[1], xi: params[2], gamma: params[3] };
    let (g, phase) = envelope_and_phase(&p, grid_size);
    let num: f64 = g.iter().zip(&phase).map(|(g, p)| g * p.cos()).sum();
    let beta = num / g.iter().sum::<f64>();
    g.iter().zip(&phase).map(|(g, p)| g * g * ((p.cos() - beta).powi(2) + p.sin().powi(2))).sum()
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADCHECK_FLOOR)
}

/// Compares the autodiff gradient of `sum |psi|^2` with central differences.
pub fn kernel_gradcheck(params: &MorletParams, grid_size: usize) -> Result<GradCheckReport> {
    check_grid(grid_size)?;
    let device = Device::Cpu;
    let vars = params
        .as_array()
        .iter()
        .map(|&v| Var::from_vec(vec![v], 1, &device))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let (re, im) = morlet_kernels_tensor(&vars[0], &vars[1], &vars[2], &vars[3], grid_size)?;
    let functional = (re.sqr()?.sum_all()? + im.sqr()?.sum_all()?)?;
    let grads = functional.backward()?;
    let mut analytic = [0.0; 4];
    for (slot, var) in analytic.iter_mut().zip(&vars) {
        *slot = match grads.get(var) {
            Some(g) => g.to_dtype(DType::F64)?.to_vec1::<f64>()?[0],
            None => 0.0,
        };
    }
    let base = params.as_array();
    let mut numeric = [0.0; 4];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = base;
        let mut minus = base;
        plus[i] += GRADCHECK_STEP;
        minus[i] -= GRADCHECK_STEP;
        *slot = (energy(plus, grid_size) - energy(minus, grid_size)) / (2.0 * GRADCHECK_STEP);
    }
    let max_rel_error = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
    Ok(GradCheckReport { analytic, numeric, max_rel_error })
}
