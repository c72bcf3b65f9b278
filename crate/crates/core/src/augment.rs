//! Two-view geometric augmentation with exact affine bookkeeping.
//!
//! Coordinates are `(x, y)` = (column, row) in pixel units measured from the
//! image center `((W - 1) / 2, (H - 1) / 2)`. A view's affine `A` maps canonical
//! coordinates to view coordinates; the view image is `I_v(q) = I(A^-1 q)`,
//! sampled bilinearly with zero padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Plane;
use crate::error::{Error, Result};

/// 2x3 affine map `p -> M p + t`, rows `[m00 m01 t0; m10 m11 t1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub fn identity() -> Self {
        Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    /// `p -> scale * R(angle) * F * p + shift`, `F` mirroring x when `flip`.
    pub fn from_parts(angle: f64, scale: f64, flip: bool, shift: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let f = if flip { -1.0 } else { 1.0 };
        Affine([[scale * c * f, -scale * s, shift[0]], [scale * s * f, scale * c, shift[1]]])
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.0;
        [m[0][0] * p[0] + m[0][1] * p[1] + m[0][2], m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]]
    }

    pub fn determinant(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::ParameterDomain(format!("affine map is singular (det {det})")));
        }
        let m = &self.0;
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        let (tx, ty) = (m[0][2], m[1][2]);
        Ok(Affine([[a, b, -(a * tx + b * ty)], [c, d, -(c * tx + d * ty)]]))
    }

    /// `self o other`: apply `other` first.
    pub fn compose(&self, other: &Affine) -> Self {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..2 {
                out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            out[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    /// Fraction of the image size.
    pub max_translation: f64,
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self { max_rotation_deg: 30.0, max_translation: 0.1, flip_prob: 0.5, scale_min: 0.9, scale_max: 1.1 }
    }
}

impl AugmentRanges {
    /// Every draw is the identity.
    pub fn none() -> Self {
        Self { max_rotation_deg: 0.0, max_translation: 0.0, flip_prob: 0.0, scale_min: 1.0, scale_max: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_rotation_deg >= 0.0
            && self.max_translation >= 0.0
            && (0.0..=1.0).contains(&self.flip_prob)
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation ranges {self:?}")))
        }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R, height: usize, width: usize) -> Affine {
        let sym = |rng: &mut R, bound: f64| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
        let angle = sym(rng, self.max_rotation_deg).to_radians();
        let tx = sym(rng, self.max_translation * width as f64);
        let ty = sym(rng, self.max_translation * height as f64);
        let flip = self.flip_prob > 0.0 && rng.random::<f64>() < self.flip_prob;
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        Affine::from_parts(angle, scale, flip, [tx, ty])
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub view1: Plane,
    pub view2: Plane,
    pub a1: Affine,
    pub a2: Affine,
    pub label: usize,
}

impl AugmentedPair {
    /// Map from view-2 coordinates to view-1 coordinates, `A1 o A2^-1`.
    pub fn warp2to1(&self) -> Result<Affine> {
        Ok(self.a1.compose(&self.a2.inverse()?))
    }

    pub fn warp1to2(&self) -> Result<Affine> {
        Ok(self.a2.compose(&self.a1.inverse()?))
    }
}

fn center(n: usize) -> f64 {
    (n as f64 - 1.0) / 2.0
}

/// Bilinear sample at fractional `(x, y)` in array coordinates; zero outside.
pub fn sample_bilinear(plane: &Plane, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (r, c) = (y0 + dy, x0 + dx);
            if wy * wx != 0.0 && r >= 0.0 && c >= 0.0 && (r as usize) < plane.height && (c as usize) < plane.width {
                acc += wy * wx * plane.get(r as usize, c as usize);
            }
        }
    }
    acc
}

/// Resamples `image` into the frame of `a`: `out(q) = image(a^-1 q)`.
pub fn warp_image(image: &Plane, a: &Affine) -> Result<Plane> {
    let inv = a.inverse()?;
    let (cx, cy) = (center(image.width), center(image.height));
    let mut data = Vec::with_capacity(image.data.len());
    for r in 0..image.height {
        for c in 0..image.width {
            let p = inv.apply([c as f64 - cx, r as f64 - cy]);
            data.push(sample_bilinear(image, p[0] + cx, p[1] + cy));
        }
    }
    Plane::new(image.height, image.width, data)
}

/// Independent draws for the two views, seeded.
pub fn two_view_augment(image: &Plane, label: usize, seed: u64, ranges: &AugmentRanges) -> Result<AugmentedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    two_view_augment_with(image, label, &mut rng, ranges)
}

pub fn two_view_augment_with<R: Rng>(
    image: &Plane,
    label: usize,
    rng: &mut R,
    ranges: &AugmentRanges,
) -> Result<AugmentedPair> {
    let a1 = ranges.draw(rng, image.height, image.width);
    let a2 = ranges.draw(rng, image.height, image.width);
    Ok(AugmentedPair { view1: warp_image(image, &a1)?, view2: warp_image(image, &a2)?, a1, a2, label })
}

/// Token-grid bilinear resampling of a source view's token map into a target
/// view's token grid.
///
/// Returns the row-major sampling matrix `S: [N_tgt, N_src]` such that the
/// warped map is `S @ V_src`. Token `(r, c)` has center pixel coordinates
/// `P * (c - (W' - 1) / 2, r - (H' - 1) / 2)` relative to the image center.
pub fn token_sampling_matrix(src: &Affine, tgt: &Affine, rows: usize, cols: usize, patch: usize) -> Result<Vec<f64>> {
    let tgt_to_src = src.compose(&tgt.inverse()?);
    let n = rows * cols;
    let p = patch as f64;
    let (cx, cy) = (center(cols), center(rows));
    let mut s = vec![0.0; n * n];
    for r in 0..rows {
        for c in 0..cols {
            let q = [(c as f64 - cx) * p, (r as f64 - cy) * p];
            let m = tgt_to_src.apply(q);
            let (x, y) = (m[0] / p + cx, m[1] / p + cy);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let row = &mut s[(r * cols + c) * n..(r * cols + c + 1) * n];
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let (sr, sc) = (y0 + dy, x0 + dx);
                    if wy * wx != 0.0 && sr >= 0.0 && sc >= 0.0 && (sr as usize) < rows && (sc as usize) < cols {
                        row[sr as usize * cols + sc as usize] += wy * wx;
                    }
                }
            }
        }
    }
    Ok(s)
}

/// Column means of [`token_sampling_matrix`]: the weights that average the
/// warped source map over the target grid, `[N_src]`.
pub fn token_pooling_weights(src: &Affine, tgt: &Affine, rows: usize, cols: usize, patch: usize) -> Result<Vec<f64>> {
    let s = token_sampling_matrix(src, tgt, rows, cols, patch)?;
    let n = rows * cols;
    let mut w = vec![0.0; n];
    for row in s.chunks(n) {
        for (acc, v) in w.iter_mut().zip(row) {
            *acc += v;
        }
    }
    w.iter_mut().for_each(|v| *v /= n as f64);
    Ok(w)
}
