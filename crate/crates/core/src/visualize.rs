//! Part-map overlays and per-part statistics for a single image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::Plane;
use crate::error::{Error, Result};
use crate::imageio::{resize, write_rgb};
use crate::model::Model;

pub const OVERLAY_ALPHA: f64 = 0.55;

/// Fixed palette for foreground part `k` (1-based); evenly spaced hues.
pub fn palette(parts: usize) -> Vec<[u8; 3]> {
    (0..parts)
        .map(|k| {
            let h = k as f64 / parts as f64 * 6.0;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSummary {
    pub predicted: usize,
    pub predicted_class: String,
    /// `P^att` over foreground parts; `None` without aggregation.
    pub part_attention: Option<Vec<f64>>,
    /// Mass `z_k` of every channel, background first.
    pub part_mass: Vec<f64>,
    /// RGB of foreground parts `1..=K`; the background is left uncolored.
    pub palette: Vec<[u8; 3]>,
    /// Row-major argmax channel per token.
    pub token_argmax: Vec<usize>,
    pub grid: [usize; 2],
}

/// Writes an overlay PNG the size of `image` and returns the summary.
pub fn visualize(model: &Model, classes: &[String], image: &Plane, out: &Path) -> Result<PartSummary> {
    let cfg = model.config();
    if model.spt().is_none() {
        return Err(Error::Config("model has no part transformer; nothing to visualize".into()));
    }
    let input = resize(image, cfg.image_size, cfg.image_size);
    let x = model.batch_tensor(&[&input])?;
    let fwd = model.forward(&x, false)?;
    let map = fwd.part_map.expect("part transformer is enabled").squeeze(0)?.to_vec2::<f64>()?; // [N, K + 1]
    let k1 = cfg.parts + 1;
    let mut part_mass = vec![0.0; k1];
    let token_argmax: Vec<usize> = map
        .iter()
        .map(|row| {
            for (m, v) in part_mass.iter_mut().zip(row) {
                *m += v;
            }
            crate::pki::argmax(row)
        })
        .collect();
    let logits = fwd.logits.squeeze(0)?.to_vec1::<f64>()?;
    let predicted = crate::pki::argmax(&logits);
    let part_attention = fwd.part_scores.map(|s| s.squeeze(0)?.to_vec1::<f64>()).transpose()?;
    let colors = palette(cfg.parts);
    let g = cfg.grid();
    let (h, w) = (image.height, image.width);
    let mut rgb = Vec::with_capacity(h * w);
    for r in 0..h {
        let tr = (r * g / h).min(g - 1);
        for c in 0..w {
            let tc = (c * g / w).min(g - 1);
            let v = image.get(r, c).clamp(0.0, 1.0);
            let k = token_argmax[tr * g + tc];
            if k == 0 {
                rgb.push([v, v, v]);
            } else {
                let col = colors[k - 1];
                let mix = |ch: u8| (1.0 - OVERLAY_ALPHA) * v + OVERLAY_ALPHA * ch as f64 / 255.0;
                rgb.push([mix(col[0]), mix(col[1]), mix(col[2])]);
            }
        }
    }
    write_rgb(out, w, h, &rgb)?;
    Ok(PartSummary {
        predicted,
        predicted_class: classes.get(predicted).cloned().unwrap_or_default(),
        part_attention,
        part_mass,
        palette: colors,
        token_argmax,
        grid: [g, g],
    })
}
