//! Structure-preserving regularizers: the skeleton-overlap cost between two
//! segmentations and the windowed SSIM cost around vessel endpoints.

use std::collections::BTreeMap;

use rand::seq::index;

use crate::diffgraph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::morphology::{binarize, hard_skeletonize, soft_skeleton, BinaryMask, SoftMask};
use crate::perceptual::{ssim_cost_node, SsimParams};
use crate::rng;

/// Default window side around each endpoint.
pub const DEFAULT_WINDOW: usize = 64;
/// Default cap on anchors per image.
pub const DEFAULT_M_MAX: usize = 128;
/// Default stabilizer for the overlap ratios.
pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointSource {
    Input,
    Enhanced,
    Union,
}

/// Row-major, duplicate-free list of pixel positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointSet {
    points: Vec<(usize, usize)>,
    source: EndpointSource,
}

impl EndpointSet {
    /// Sorts and deduplicates `points`.
    pub fn new(mut points: Vec<(usize, usize)>, source: EndpointSource) -> Self {
        points.sort_unstable();
        points.dedup();
        Self { points, source }
    }

    pub fn empty(source: EndpointSource) -> Self {
        Self { points: Vec::new(), source }
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn source(&self) -> EndpointSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn union(&self, other: &EndpointSet) -> EndpointSet {
        let mut pts = self.points.clone();
        pts.extend_from_slice(&other.points);
        EndpointSet::new(pts, EndpointSource::Union)
    }

    /// Keeps `m_max` points chosen uniformly with a stream keyed by `seed`.
    pub fn subsample(&self, m_max: usize, seed: u64) -> EndpointSet {
        if self.points.len() <= m_max {
            return self.clone();
        }
        let mut s = rng::stream(seed);
        let mut picked = index::sample(&mut s, self.points.len(), m_max).into_vec();
        picked.sort_unstable();
        EndpointSet {
            points: picked.into_iter().map(|i| self.points[i]).collect(),
            source: self.source,
        }
    }
}

/// Square windows of side `l` around a set of centers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSpec {
    pub l: usize,
    pub centers: EndpointSet,
}

impl WindowSpec {
    /// Distinct clamped top-left corners with their multiplicity.
    pub fn corners(&self, h: usize, w: usize) -> Result<Vec<((usize, usize), usize)>> {
        let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for &c in self.centers.points() {
            *counts.entry(clamp_window(c, self.l, h, w)?).or_insert(0) += 1;
        }
        Ok(counts.into_iter().collect())
    }
}

/// Skeleton pixels with at most one 8-connected skeleton neighbour.
pub fn detect_endpoints(skel: &BinaryMask, source: EndpointSource) -> EndpointSet {
    let (h, w) = skel.dims();
    let mut pts = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !skel.is_set(r, c) {
                continue;
            }
            let mut n = 0;
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    if (rr, cc) != (r, c) && skel.is_set(rr, cc) {
                        n += 1;
                    }
                }
            }
            if n <= 1 {
                pts.push((r, c));
            }
        }
    }
    EndpointSet { points: pts, source }
}

/// Top-left corner of the `l`×`l` window centred on `center`, shifted inside
/// the image when it would cross a border.
pub fn clamp_window(center: (usize, usize), l: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    if l == 0 || l > h.min(w) {
        return Err(Error::Config(format!(
            "window side {l} does not fit a {h}x{w} image"
        )));
    }
    let half = l / 2;
    let clamp = |v: usize, dim: usize| v.saturating_sub(half).min(dim - l);
    Ok((clamp(center.0, h), clamp(center.1, w)))
}

fn overlap_ratio(g: &mut Graph, skel: NodeId, other: NodeId, eps: f64) -> Result<NodeId> {
    let prod = g.mul(skel, other)?;
    let num = g.sum(prod);
    let num = g.add_scalar(num, eps);
    let den = g.sum(skel);
    let den = g.add_scalar(den, eps);
    g.div(num, den)
}

/// Skeleton-overlap cost between two `[1, H, W]` probability maps.
pub fn sga_loss_node(
    g: &mut Graph,
    seg_input: NodeId,
    seg_enhanced: NodeId,
    k: usize,
    eps: f64,
) -> Result<NodeId> {
    if g.value(seg_input).shape() != g.value(seg_enhanced).shape() {
        return Err(Error::Dimension(format!(
            "segmentations differ in shape: {:?} vs {:?}",
            g.value(seg_input).shape(),
            g.value(seg_enhanced).shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    let sk_enh = soft_skeleton(g, seg_enhanced, k)?;
    let sk_in = soft_skeleton(g, seg_input, k)?;
    let tp = overlap_ratio(g, sk_enh, seg_input, eps)?;
    let ts = overlap_ratio(g, sk_in, seg_enhanced, eps)?;
    let prod = g.mul(tp, ts)?;
    let num = g.scalar_mul(prod, 2.0);
    let den = g.add(tp, ts)?;
    let f = g.div(num, den)?;
    let n = g.neg(f);
    Ok(g.add_scalar(n, 1.0))
}

pub fn sga_loss(seg_input: &SoftMask, seg_enhanced: &SoftMask, k: usize, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(seg_input.grid().to_tensor());
    let b = g.constant(seg_enhanced.grid().to_tensor());
    let out = sga_loss_node(&mut g, a, b, k, eps)?;
    Ok(g.scalar_value(out))
}

/// Mean windowed `1 - SSIM` between two `[C, H, W]` images. Anchors that clamp
/// to the same corner share one window evaluation weighted by their count.
pub fn evp_loss_node(
    g: &mut Graph,
    x: NodeId,
    x_hat: NodeId,
    anchors: &EndpointSet,
    l: usize,
) -> Result<NodeId> {
    let (_, h, w) = g.value(x).chw()?;
    if g.value(x).shape() != g.value(x_hat).shape() {
        return Err(Error::Dimension(format!(
            "images differ in shape: {:?} vs {:?}",
            g.value(x).shape(),
            g.value(x_hat).shape()
        )));
    }
    if l == 0 || l > h.min(w) {
        return Err(Error::Config(format!("window side {l} does not fit a {h}x{w} image")));
    }
    if anchors.is_empty() {
        return Ok(g.scalar_const(0.0));
    }
    let spec = WindowSpec { l, centers: anchors.clone() };
    let m = anchors.len() as f64;
    let p = SsimParams::default();
    let mut acc: Option<NodeId> = None;
    for ((top, left), count) in spec.corners(h, w)? {
        let (wx, wy) = if (l, l) == (h, w) {
            (x, x_hat)
        } else {
            (g.crop(x, top, left, l, l)?, g.crop(x_hat, top, left, l, l)?)
        };
        let c = ssim_cost_node(g, wx, wy, &p)?;
        let c = g.scalar_mul(c, count as f64 / m);
        acc = Some(match acc {
            None => c,
            Some(a) => g.add(a, c)?,
        });
    }
    Ok(acc.expect("non-empty anchors"))
}

pub fn evp_loss(
    x: &Grid2D,
    x_hat: &Grid2D,
    anchors: &EndpointSet,
    l: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(x.to_tensor());
    let b = g.constant(x_hat.to_tensor());
    let out = evp_loss_node(&mut g, a, b, anchors, l)?;
    Ok(g.scalar_value(out))
}

/// Endpoints of the thresholded skeletons of both segmentations, merged and
/// capped at `m_max` with a subsample keyed by `seed`.
pub fn anchor_pipeline(
    seg_input: &SoftMask,
    seg_enhanced: &SoftMask,
    k: usize,
    tau: f64,
    m_max: usize,
    seed: u64,
) -> EndpointSet {
    let ends = |m: &SoftMask, src| detect_endpoints(&hard_skeletonize(&binarize(m, tau), k), src);
    let a = ends(seg_input, EndpointSource::Input);
    let b = ends(seg_enhanced, EndpointSource::Enhanced);
    a.union(&b).subsample(m_max, seed)
}
