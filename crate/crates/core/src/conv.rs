//! Circular 2-D convolution in the frequency domain.
//!
//! [`CircularConv`] is a candle custom op so that scattering stays
//! differentiable with respect to both the image and the kernels. Kernels are
//! small centered `S x S` grids that get wrapped into the periodic `H x W` frame.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::morlet::ComplexKernel;

/// Row-major `H x W` real plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Circular shift: output `(r, c)` takes input `(r - dr, c - dc)`.
    pub fn roll(&self, dr: isize, dc: isize) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut data = vec![0.0; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                let sr = (r - dr).rem_euclid(h) as usize;
                let sc = (c - dc).rem_euclid(w) as usize;
                data[(r * w + c) as usize] = self.data[sr * self.width + sc];
            }
        }
        Self { height: self.height, width: self.width, data }
    }
}

pub(crate) struct Fft2d {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static SCRATCH: RefCell<Vec<Complex64>> = const { RefCell::new(Vec::new()) };
    static PLANS: RefCell<HashMap<(usize, usize), Arc<Fft2d>>> = RefCell::new(HashMap::new());
}

impl Fft2d {
    pub(crate) fn get(height: usize, width: usize) -> Arc<Fft2d> {
        PLANS.with(|plans| {
            plans
                .borrow_mut()
                .entry((height, width))
                .or_insert_with(|| {
                    let mut planner = FftPlanner::new();
                    Arc::new(Fft2d {
                        height,
                        width,
                        row_fwd: planner.plan_fft_forward(width),
                        row_inv: planner.plan_fft_inverse(width),
                        col_fwd: planner.plan_fft_forward(height),
                        col_inv: planner.plan_fft_inverse(height),
                    })
                })
                .clone()
        })
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        row.process(buf);
        SCRATCH.with(|scratch| {
            let mut t = scratch.borrow_mut();
            t.clear();
            let src: &[Complex64] = buf;
            t.extend((0..w).flat_map(|c| (0..h).map(move |r| src[r * w + c])));
            col.process(&mut t);
            let scale = if inverse { 1.0 / (h * w) as f64 } else { 1.0 };
            for c in 0..w {
                for r in 0..h {
                    buf[r * w + c] = t[c * h + r] * scale;
                }
            }
        });
    }

    pub(crate) fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut buf, false);
        buf
    }

    pub(crate) fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, false);
    }

    /// Normalized inverse transform.
    pub(crate) fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, true);
    }

    /// Spectra of two real planes from one complex transform.
    fn forward_real_pair(&self, a: &[f64], b: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let (h, w) = (self.height, self.width);
        let mut z: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect();
        self.run(&mut z, false);
        let mut fa = Vec::with_capacity(h * w);
        let mut fb = Vec::with_capacity(h * w);
        for r in 0..h {
            let nr = (h - r) % h;
            for c in 0..w {
                let zk = z[r * w + c];
                let zn = z[nr * w + (w - c) % w].conj();
                fa.push((zk + zn) * 0.5);
                // (zk - zn) / 2i
                let d = (zk - zn) * 0.5;
                fb.push(Complex64::new(d.im, -d.re));
            }
        }
        (fa, fb)
    }

    /// Spectra of real planes, transformed two at a time.
    fn forward_real_many<'a>(&self, planes: impl ExactSizeIterator<Item = &'a [f64]>) -> Vec<Vec<Complex64>> {
        let planes: Vec<&[f64]> = planes.collect();
        let mut out = Vec::with_capacity(planes.len());
        for chunk in planes.chunks(2) {
            match chunk {
                [a, b] => {
                    let (fa, fb) = self.forward_real_pair(a, b);
                    out.push(fa);
                    out.push(fb);
                }
                [a] => out.push(self.forward_real(a)),
                _ => unreachable!(),
            }
        }
        out
    }

    /// Inverse transforms of spectra known to belong to real planes: `a + i b`
    /// is transformed once and split into its real and imaginary parts.
    fn inverse_real_pair(&self, a: &[Complex64], b: Option<&[Complex64]>) -> (Vec<f64>, Option<Vec<f64>>) {
        let mut buf: Vec<Complex64> = match b {
            Some(b) => a.iter().zip(b).map(|(x, y)| x + Complex64::new(-y.im, y.re)).collect(),
            None => a.to_vec(),
        };
        self.run(&mut buf, true);
        let re = buf.iter().map(|v| v.re).collect();
        (re, b.map(|_| buf.iter().map(|v| v.im).collect()))
    }
}

/// Position of centered kernel offset `(du2, du1)` in the periodic frame.
fn wrap(du2: isize, du1: isize, height: usize, width: usize) -> usize {
    let r = du2.rem_euclid(height as isize) as usize;
    let c = du1.rem_euclid(width as isize) as usize;
    r * width + c
}

fn embed_kernel(kernel: &[f64], size: usize, height: usize, width: usize) -> Vec<Complex64> {
    let half = (size / 2) as isize;
    let mut frame = vec![Complex64::default(); height * width];
    for r in 0..size {
        for c in 0..size {
            let idx = wrap(r as isize - half, c as isize - half, height, width);
            frame[idx] += kernel[r * size + c];
        }
    }
    frame
}

fn check_kernel_fits(size: usize, height: usize, width: usize) -> Result<()> {
    if size > height || size > width {
        return Err(Error::Shape(format!("kernel grid {size} larger than image {height}x{width}")));
    }
    Ok(())
}

/// Circular convolution of a real image with a complex kernel.
pub fn conv2d_circular(image: &Plane, kernel: &ComplexKernel) -> Result<Vec<Complex64>> {
    let (h, w) = (image.height, image.width);
    let s = kernel.size();
    check_kernel_fits(s, h, w)?;
    let half = (s / 2) as isize;
    let mut frame = vec![Complex64::default(); h * w];
    for r in 0..s {
        for c in 0..s {
            frame[wrap(r as isize - half, c as isize - half, h, w)] += kernel.values()[r * s + c];
        }
    }
    let fft = Fft2d::get(h, w);
    fft.forward(&mut frame);
    let mut out = fft.forward_real(&image.data);
    out.iter_mut().zip(&frame).for_each(|(o, k)| *o *= k);
    fft.inverse(&mut out);
    Ok(out)
}

/// Which `(input channel, kernel)` pair produces each output channel.
pub type ConvPairs = Arc<Vec<(usize, usize)>>;

/// Convolves `x: [B, Cin, H, W]` with kernels `k: [M, S, S]`, producing
/// `[B, P, H, W]` where output channel `p` is `x[:, pairs[p].0] * k[pairs[p].1]`.
#[derive(Debug, Clone)]
pub struct CircularConv {
    pairs: ConvPairs,
}

impl CircularConv {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Self { pairs: Arc::new(pairs) }
    }

    pub fn apply(&self, x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
        let (_, cin, h, w) = x.dims4()?;
        let (m, s, s2) = kernels.dims3()?;
        if s != s2 {
            return Err(Error::Shape(format!("kernels must be square, got {s}x{s2}")));
        }
        check_kernel_fits(s, h, w)?;
        if let Some(&(c, k)) = self.pairs.iter().find(|(c, k)| *c >= cin || *k >= m) {
            return Err(Error::Shape(format!("conv pair ({c}, {k}) out of range for {cin} channels and {m} kernels")));
        }
        Ok(x.contiguous()?.apply_op2(&kernels.contiguous()?, self.clone())?)
    }
}

fn f64_slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f64]> {
    let data = s.as_slice::<f64>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("circular conv expects contiguous f64 input"),
    }
}

impl CustomOp2 for CircularConv {
    fn name(&self) -> &'static str {
        "circular-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, cin, h, w) = l1.shape().dims4()?;
        let (m, s, _) = l2.shape().dims3()?;
        let x = f64_slice(s1, l1)?;
        let k = f64_slice(s2, l2)?;
        let hw = h * w;
        let fft = Fft2d::get(h, w);
        let kernel_hat: Vec<Vec<Complex64>> = (0..m)
            .map(|i| {
                let mut frame = embed_kernel(&k[i * s * s..(i + 1) * s * s], s, h, w);
                fft.forward(&mut frame);
                frame
            })
            .collect();
        let p = self.pairs.len();
        let mut out = vec![0.0; b * p * hw];
        for bi in 0..b {
            let x_hat = fft.forward_real_many((0..cin).map(|c| &x[(bi * cin + c) * hw..(bi * cin + c + 1) * hw]));
            let product = |&(c, ki): &(usize, usize)| -> Vec<Complex64> {
                x_hat[c].iter().zip(&kernel_hat[ki]).map(|(xv, kv)| xv * kv).collect()
            };
            for (chunk_idx, chunk) in self.pairs.chunks(2).enumerate() {
                let first = product(&chunk[0]);
                let second = chunk.get(1).map(product);
                let (re, im) = fft.inverse_real_pair(&first, second.as_deref());
                let pi = 2 * chunk_idx;
                out[(bi * p + pi) * hw..(bi * p + pi + 1) * hw].copy_from_slice(&re);
                if let Some(im) = im {
                    out[(bi * p + pi + 1) * hw..(bi * p + pi + 2) * hw].copy_from_slice(&im);
                }
            }
        }
        Ok((CpuStorage::F64(out), Shape::from((b, p, h, w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grads = x.apply_op3_no_bwd(k, &grad.contiguous()?, &CircularConvBackward { pairs: self.pairs.clone() })?;
        let nx = x.elem_count();
        let gx = grads.narrow(0, 0, nx)?.reshape(x.shape())?;
        let gk = grads.narrow(0, nx, k.elem_count())?.reshape(k.shape())?;
        Ok((Some(gx), Some(gk)))
    }
}

/// Gradients of [`CircularConv`] w.r.t. input and kernels, packed into one flat vector.
struct CircularConvBackward {
    pairs: ConvPairs,
}

impl CustomOp3 for CircularConvBackward {
    fn name(&self) -> &'static str {
        "circular-conv2d-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, cin, h, w) = l1.shape().dims4()?;
        let (m, s, _) = l2.shape().dims3()?;
        let x = f64_slice(s1, l1)?;
        let k = f64_slice(s2, l2)?;
        let g = f64_slice(s3, l3)?;
        let hw = h * w;
        let p = self.pairs.len();
        let fft = Fft2d::get(h, w);
        let kernel_hat: Vec<Vec<Complex64>> = (0..m)
            .map(|i| {
                let mut frame = embed_kernel(&k[i * s * s..(i + 1) * s * s], s, h, w);
                fft.forward(&mut frame);
                frame
            })
            .collect();
        let mut kernel_acc = vec![vec![Complex64::default(); hw]; m];
        let mut grad_x = vec![0.0; b * cin * hw];
        for bi in 0..b {
            let x_hat = fft.forward_real_many((0..cin).map(|c| &x[(bi * cin + c) * hw..(bi * cin + c + 1) * hw]));
            let g_hat = fft.forward_real_many((0..p).map(|pi| &g[(bi * p + pi) * hw..(bi * p + pi + 1) * hw]));
            let mut input_acc = vec![vec![Complex64::default(); hw]; cin];
            for (&(c, ki), gh) in self.pairs.iter().zip(&g_hat) {
                for (((ia, ka), gv), (xv, kv)) in input_acc[c]
                    .iter_mut()
                    .zip(kernel_acc[ki].iter_mut())
                    .zip(gh)
                    .zip(x_hat[c].iter().zip(&kernel_hat[ki]))
                {
                    *ia += gv * kv.conj();
                    *ka += gv * xv.conj();
                }
            }
            for (pair_idx, chunk) in input_acc.chunks(2).enumerate() {
                let (re, im) = fft.inverse_real_pair(&chunk[0], chunk.get(1).map(|v| v.as_slice()));
                let c = 2 * pair_idx;
                grad_x[(bi * cin + c) * hw..(bi * cin + c + 1) * hw].copy_from_slice(&re);
                if let Some(im) = im {
                    grad_x[(bi * cin + c + 1) * hw..(bi * cin + c + 2) * hw].copy_from_slice(&im);
                }
            }
        }
        let half = (s / 2) as isize;
        let mut grad_k = vec![0.0; m * s * s];
        for (pair_idx, chunk) in kernel_acc.chunks(2).enumerate() {
            let (re, im) = fft.inverse_real_pair(&chunk[0], chunk.get(1).map(|v| v.as_slice()));
            for (offset, plane) in std::iter::once(re).chain(im).enumerate() {
                let ki = 2 * pair_idx + offset;
                for r in 0..s {
                    for c in 0..s {
                        grad_k[ki * s * s + r * s + c] = plane[wrap(r as isize - half, c as isize - half, h, w)];
                    }
                }
            }
        }
        grad_x.extend(grad_k);
        let n = grad_x.len();
        Ok((CpuStorage::F64(grad_x), Shape::from(n)))
    }
}

/// Complex modulus `sqrt(re^2 + im^2)` whose gradient at 0 is 0.
pub struct Modulus;

pub fn modulus(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    Ok(re.contiguous()?.apply_op2(&im.contiguous()?, Modulus)?)
}

impl CustomOp2 for Modulus {
    fn name(&self) -> &'static str {
        "complex-modulus"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            candle_core::bail!("modulus operands differ: {:?} vs {:?}", l1.shape(), l2.shape());
        }
        let re = f64_slice(s1, l1)?;
        let im = f64_slice(s2, l2)?;
        let out = re.iter().zip(im).map(|(a, b)| a.hypot(*b)).collect();
        Ok((CpuStorage::F64(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        re: &Tensor,
        im: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let positive = res.gt(0.0)?;
        let denom = positive.where_cond(res, &res.ones_like()?)?;
        let zeros = res.zeros_like()?;
        let scale = grad.div(&denom)?;
        let g_re = positive.where_cond(&re.mul(&scale)?, &zeros)?;
        let g_im = positive.where_cond(&im.mul(&scale)?, &zeros)?;
        Ok((Some(g_re), Some(g_im)))
    }
}
