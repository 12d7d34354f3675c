use crate::diffgraph::{Graph, NodeId};
use crate::error::Result;
use crate::grid::{Grid2D, Tensor};
use crate::morphology::SoftMask;
use crate::nets::{Critic, Generator, Segmenter};
use crate::perceptual::{msssim_cost_node, SsimParams};
use crate::topo::{anchor_pipeline, evp_loss_node, sga_loss_node, EndpointSet};

use super::TrainConfig;

/// Number of MS-SSIM scales requested; reduced automatically on small images.
pub const MSSSIM_SCALES: usize = 5;
/// Threshold used to binarize segmentations for anchor detection.
pub const ANCHOR_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// Scalar parts of one critic objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticTerms {
    pub total: f64,
    /// Mean penalty, before the λ_gp weight.
    pub gp: f64,
    /// `mean D(y) - mean D(G(x))`.
    pub w1: f64,
}

/// `mean D(fake) - mean D(real) + λ_gp · mean (‖∇D(x̃)‖ - 1)²` with
/// `x̃ = u·real + (1 - u)·fake`.
///
/// The penalty's parameter gradient is obtained from the critic's tangent
/// pass: for `v = ∇D(x̃)` held fixed, `∂/∂β (v · ∇D)` equals `gᵀ ∂g/∂β`, so
/// `c · (tangent - const)` with `c = 2(‖g‖ - 1)/‖g‖` has the penalty's exact
/// gradient and the added constant restores its value.
pub fn critic_loss<C: Critic>(
    g: &mut Graph,
    critic: &C,
    params: &[NodeId],
    fakes: &[Tensor],
    reals: &[Tensor],
    us: &[f64],
    lambda_gp: f64,
) -> Result<(NodeId, CriticTerms)> {
    let n = fakes.len() as f64;
    let mut fake_sum = g.scalar_const(0.0);
    let mut real_sum = g.scalar_const(0.0);
    for (f, r) in fakes.iter().zip(reals) {
        let fnode = g.constant(f.clone());
        let d = critic.forward(g, params, fnode)?;
        fake_sum = g.add(fake_sum, d)?;
        let rnode = g.constant(r.clone());
        let d = critic.forward(g, params, rnode)?;
        real_sum = g.add(real_sum, d)?;
    }
    let w1 = (g.scalar_value(real_sum) - g.scalar_value(fake_sum)) / n;
    let diff = g.sub(fake_sum, real_sum)?;
    let mut total = g.scalar_mul(diff, 1.0 / n);

    let values: Vec<Tensor> = params.iter().map(|&id| g.value(id).clone()).collect();
    let mut gp_sum = 0.0;
    let mut gp_nodes = g.scalar_const(0.0);
    for ((f, r), &u) in fakes.iter().zip(reals).zip(us) {
        let data = f.data().iter().zip(r.data()).map(|(a, b)| u * b + (1.0 - u) * a).collect();
        let xt = Tensor::new(f.shape().to_vec(), data)?;
        let (_, grad) = critic.input_gradient(&values, &xt)?;
        let sq: f64 = grad.data().iter().map(|v| v * v).sum();
        let norm = sq.sqrt();
        let gp = (norm - 1.0).powi(2);
        gp_sum += gp;
        let surrogate = if norm > 0.0 {
            let t = critic.tangent(g, params, &xt, &grad)?;
            let t = g.add_scalar(t, -sq);
            let t = g.scalar_mul(t, 2.0 * (norm - 1.0) / norm);
            g.add_scalar(t, gp)
        } else {
            g.scalar_const(gp)
        };
        gp_nodes = g.add(gp_nodes, surrogate)?;
    }
    let gp_mean = g.scalar_mul(gp_nodes, lambda_gp / n);
    total = g.add(total, gp_mean)?;
    let terms = CriticTerms {
        total: g.scalar_value(total),
        gp: gp_sum / n,
        w1,
    };
    Ok((total, terms))
}

/// Per-term record of a generator objective. Weighted terms plus the
/// adversarial term add up to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GenTerms {
    pub total: f64,
    /// Unweighted batch means.
    pub c_id: f64,
    pub c_idy: f64,
    pub c_s: f64,
    pub c_e: f64,
    /// `-mean D(G(x))`.
    pub adv: f64,
    /// The weights applied to `c_id`, `c_idy`, `c_s`, `c_e` (0 for skipped terms).
    pub weights: [f64; 4],
}

impl GenTerms {
    pub fn weighted_sum(&self) -> f64 {
        let w = self.weights;
        w[0] * self.c_id + w[1] * self.c_idy + w[2] * self.c_s + w[3] * self.c_e + self.adv
    }
}

fn grid(t: &Tensor) -> Result<Grid2D> {
    Grid2D::from_tensor(t)
}

/// EVP anchors for each `(x, G(x))` pair, from plain segmentations.
pub fn compute_anchors(
    seg: &Segmenter,
    xs: &[Tensor],
    enhanced: &[Tensor],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<EndpointSet>> {
    let mut out = Vec::with_capacity(xs.len());
    for ((x, e), &s) in xs.iter().zip(enhanced).zip(seeds) {
        let sx: SoftMask = seg.segment(&grid(x)?);
        let se: SoftMask = seg.segment(&grid(e)?);
        out.push(anchor_pipeline(&sx, &se, cfg.k, ANCHOR_TAU, cfg.m_max, s));
    }
    Ok(out)
}

fn batch_mean(g: &mut Graph, nodes: Vec<NodeId>) -> Result<NodeId> {
    let n = nodes.len() as f64;
    let mut acc = g.scalar_const(0.0);
    for v in nodes {
        acc = g.add(acc, v)?;
    }
    Ok(g.scalar_mul(acc, 1.0 / n))
}

/// Generator objective for one batch. Phase 1 uses both identity costs and
/// the adversarial term. Phase 2 swaps the clean-image identity term (unless
/// `keep_identity_phase2`) for the skeleton and endpoint-window costs, using
/// precomputed `anchors`. Terms whose weight is zero are not built.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<G: Generator, C: Critic>(
    g: &mut Graph,
    gen: &G,
    gen_params: &[NodeId],
    critic: &C,
    critic_params: &[NodeId],
    seg: &Segmenter,
    xs: &[Tensor],
    ys: &[Tensor],
    anchors: &[EndpointSet],
    phase: Phase,
    cfg: &TrainConfig,
) -> Result<(NodeId, GenTerms)> {
    let p = SsimParams::default();
    let mut terms = GenTerms::default();
    let mut parts: Vec<NodeId> = Vec::new();

    let mut fakes = Vec::with_capacity(xs.len());
    let mut x_nodes = Vec::with_capacity(xs.len());
    for x in xs {
        let xn = g.constant(x.clone());
        fakes.push(gen.forward(g, gen_params, xn)?);
        x_nodes.push(xn);
    }

    let mut add_term = |g: &mut Graph, idx: usize, weight: f64, node: NodeId| -> Result<f64> {
        terms.weights[idx] = weight;
        let v = g.scalar_value(node);
        parts.push(g.scalar_mul(node, weight));
        Ok(v)
    };

    if cfg.lambda1 > 0.0 {
        let mut cs = Vec::new();
        for (&xn, &f) in x_nodes.iter().zip(&fakes) {
            cs.push(msssim_cost_node(g, xn, f, MSSSIM_SCALES, &p)?);
        }
        let m = batch_mean(g, cs)?;
        terms.c_id = add_term(g, 0, cfg.lambda1, m)?;
    }
    let identity_y = phase == Phase::One || cfg.keep_identity_phase2;
    if identity_y && cfg.lambda2 > 0.0 {
        let mut cs = Vec::new();
        for y in ys {
            let yn = g.constant(y.clone());
            let gy = gen.forward(g, gen_params, yn)?;
            cs.push(msssim_cost_node(g, yn, gy, MSSSIM_SCALES, &p)?);
        }
        let m = batch_mean(g, cs)?;
        terms.c_idy = add_term(g, 1, cfg.lambda2, m)?;
    }
    if phase == Phase::Two && cfg.lambda_s > 0.0 {
        let mut cs = Vec::new();
        for (&xn, &f) in x_nodes.iter().zip(&fakes) {
            let sx = seg.forward(g, xn)?;
            let sf = seg.forward(g, f)?;
            cs.push(sga_loss_node(g, sx, sf, cfg.k, cfg.epsilon)?);
        }
        let m = batch_mean(g, cs)?;
        terms.c_s = add_term(g, 2, cfg.lambda_s, m)?;
    }
    if phase == Phase::Two && cfg.lambda_e > 0.0 {
        let mut cs = Vec::new();
        for ((&xn, &f), a) in x_nodes.iter().zip(&fakes).zip(anchors) {
            let (_, h, w) = g.value(xn).chw()?;
            cs.push(evp_loss_node(g, xn, f, a, cfg.effective_window(h, w))?);
        }
        let m = batch_mean(g, cs)?;
        terms.c_e = add_term(g, 3, cfg.lambda_e, m)?;
    }

    let mut ds = Vec::new();
    for &f in &fakes {
        ds.push(critic.forward(g, critic_params, f)?);
    }
    let d_mean = batch_mean(g, ds)?;
    let adv = g.neg(d_mean);
    terms.adv = g.scalar_value(adv);

    let mut total = adv;
    for node in parts {
        total = g.add(total, node)?;
    }
    terms.total = g.scalar_value(total);
    Ok((total, terms))
}
