//! SSIM, MS-SSIM and PSNR, both as differentiable graph costs and as plain
//! evaluation metrics on [`Grid2D`] images.
//!
//! Local statistics use an 11×11 Gaussian window (σ = 1.5) applied as two
//! separable valid-region passes, so border pixels without a full window do
//! not contribute. Images smaller than the window fall back to one global
//! window covering the whole image.

use crate::diffgraph::{Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, Tensor};

/// Standard five-scale MS-SSIM exponents.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Lower bound applied to per-scale terms before the fractional power.
const MSSSIM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub weights: Vec<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            weights: MSSSIM_WEIGHTS.to_vec(),
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn gaussian_taps(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    /// Number of MS-SSIM scales usable on an image whose short side is `min_side`.
    pub fn usable_scales(&self, min_side: usize, requested: usize) -> usize {
        let mut s = requested.clamp(1, self.weights.len());
        while s > 1 && min_side < self.window << (s - 1) {
            s -= 1;
        }
        s
    }

    /// The first `scales` weights renormalised to sum to one.
    pub fn scale_weights(&self, scales: usize) -> Vec<f64> {
        let w = &self.weights[..scales];
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    }
}

struct LocalStats {
    /// Mean of the luminance·contrast-structure map (the SSIM value).
    ssim: NodeId,
    /// Mean of the contrast-structure map.
    cs: NodeId,
}

fn gaussian_filter(g: &mut Graph, x: NodeId, taps: &[f64]) -> Result<NodeId> {
    let n = taps.len();
    let kh = g.constant(Tensor::new(vec![1, 1, 1, n], taps.to_vec())?);
    let kv = g.constant(Tensor::new(vec![1, 1, n, 1], taps.to_vec())?);
    let t = g.conv2d(x, kh, None, 1, Padding::Valid)?;
    g.conv2d(t, kv, None, 1, Padding::Valid)
}

/// SSIM statistics of two single-channel `[1, H, W]` nodes.
fn local_stats(g: &mut Graph, a: NodeId, b: NodeId, p: &SsimParams) -> Result<LocalStats> {
    let (_, h, w) = g.value(a).chw()?;
    let (c1, c2) = (p.c1(), p.c2());
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;

    let (mu_a, mu_b, e_aa, e_bb, e_ab) = if h >= p.window && w >= p.window {
        let taps = p.gaussian_taps();
        (
            gaussian_filter(g, a, &taps)?,
            gaussian_filter(g, b, &taps)?,
            gaussian_filter(g, aa, &taps)?,
            gaussian_filter(g, bb, &taps)?,
            gaussian_filter(g, ab, &taps)?,
        )
    } else {
        (g.mean(a), g.mean(b), g.mean(aa), g.mean(bb), g.mean(ab))
    };

    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let lum_num = g.scalar_mul(mu_ab, 2.0);
    let lum_num = g.add_scalar(lum_num, c1);
    let lum_den = g.add(mu_aa, mu_bb)?;
    let lum_den = g.add_scalar(lum_den, c1);
    let cs_num = g.scalar_mul(cov, 2.0);
    let cs_num = g.add_scalar(cs_num, c2);
    let cs_den = g.add(var_a, var_b)?;
    let cs_den = g.add_scalar(cs_den, c2);

    let num = g.mul(lum_num, cs_num)?;
    let den = g.mul(lum_den, cs_den)?;
    let ssim_map = g.div(num, den)?;
    let cs_map = g.div(cs_num, cs_den)?;
    Ok(LocalStats {
        ssim: g.mean(ssim_map),
        cs: g.mean(cs_map),
    })
}

fn check_pair(g: &Graph, a: NodeId, b: NodeId) -> Result<usize> {
    let sa = g.value(a).shape();
    if sa != g.value(b).shape() {
        return Err(Error::Dimension(format!(
            "SSIM inputs differ in shape: {:?} vs {:?}",
            sa,
            g.value(b).shape()
        )));
    }
    Ok(g.value(a).chw()?.0)
}

/// Mean of `f` over channels of two `[C, H, W]` nodes.
fn per_channel(
    g: &mut Graph,
    a: NodeId,
    b: NodeId,
    mut f: impl FnMut(&mut Graph, NodeId, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let c = check_pair(g, a, b)?;
    if c == 1 {
        return f(g, a, b);
    }
    let mut acc: Option<NodeId> = None;
    for ch in 0..c {
        let ac = g.slice_channels(a, ch, 1)?;
        let bc = g.slice_channels(b, ch, 1)?;
        let v = f(g, ac, bc)?;
        acc = Some(match acc {
            None => v,
            Some(s) => g.add(s, v)?,
        });
    }
    Ok(g.scalar_mul(acc.expect("at least one channel"), 1.0 / c as f64))
}

/// Differentiable SSIM of two `[C, H, W]` nodes.
pub fn ssim_node(g: &mut Graph, a: NodeId, b: NodeId, p: &SsimParams) -> Result<NodeId> {
    per_channel(g, a, b, |g, a, b| Ok(local_stats(g, a, b, p)?.ssim))
}

/// Differentiable `1 - SSIM`.
pub fn ssim_cost_node(g: &mut Graph, a: NodeId, b: NodeId, p: &SsimParams) -> Result<NodeId> {
    let s = ssim_node(g, a, b, p)?;
    let n = g.neg(s);
    Ok(g.add_scalar(n, 1.0))
}

fn msssim_single(
    g: &mut Graph,
    a: NodeId,
    b: NodeId,
    scales: usize,
    p: &SsimParams,
) -> Result<NodeId> {
    let (_, h, w) = g.value(a).chw()?;
    let m = p.usable_scales(h.min(w), scales);
    let weights = p.scale_weights(m);
    let (mut a, mut b) = (a, b);
    let mut prod: Option<NodeId> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let st = local_stats(g, a, b, p)?;
        let term = if j + 1 == m { st.ssim } else { st.cs };
        let floored = g.max_scalar(term, MSSSIM_FLOOR);
        let powed = g.powf(floored, wj);
        prod = Some(match prod {
            None => powed,
            Some(acc) => g.mul(acc, powed)?,
        });
        if j + 1 < m {
            a = g.downsample2(a)?;
            b = g.downsample2(b)?;
        }
    }
    let ms = prod.expect("at least one scale");
    let n = g.neg(ms);
    Ok(g.add_scalar(n, 1.0))
}

/// Differentiable `1 - MS-SSIM`, scales reduced to what the image supports.
pub fn msssim_cost_node(
    g: &mut Graph,
    a: NodeId,
    b: NodeId,
    scales: usize,
    p: &SsimParams,
) -> Result<NodeId> {
    per_channel(g, a, b, |g, a, b| msssim_single(g, a, b, scales, p))
}

fn eval_pair(
    a: &Grid2D,
    b: &Grid2D,
    f: impl FnOnce(&mut Graph, NodeId, NodeId) -> Result<NodeId>,
) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "images differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut g = Graph::new();
    let an = g.constant(a.to_tensor());
    let bn = g.constant(b.to_tensor());
    let out = f(&mut g, an, bn)?;
    Ok(g.scalar_value(out))
}

pub fn ssim(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    let p = SsimParams::default();
    eval_pair(a, b, |g, x, y| ssim_node(g, x, y, &p))
}

pub fn msssim_cost(a: &Grid2D, b: &Grid2D, scales: usize) -> Result<f64> {
    let p = SsimParams::default();
    eval_pair(a, b, |g, x, y| msssim_cost_node(g, x, y, scales, &p))
}

/// `10 · log10(1 / MSE)` for images in [0, 1], capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "images differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let n = a.values().len() as f64;
    let mse = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}
