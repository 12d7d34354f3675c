//! Named finite-difference suites over the differentiable surface of the
//! crate, shared by the command line and the test suites.
//!
//! | suite        | covers                                        | tolerance |
//! |--------------|-----------------------------------------------|-----------|
//! | `primitives` | every graph op, conv input/kernel/bias        | 1e-6      |
//! | `msssim`     | MS-SSIM cost                                  | 1e-4      |
//! | `sga`        | skeleton-overlap cost through the segmenter   | 1e-4      |
//! | `evp`        | endpoint-window cost                          | 1e-4      |
//! | `generator`  | full phase-2 generator objective, 5 weights   | 1e-3      |
//!
//! Inputs are seeded and spread out so that pooling windows and kinks never
//! sit within the step size.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffgraph::{grad_check, grad_check_subset, GradCheckReport, Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::grid::Tensor;
use crate::nets::{enhance, ConvCritic, Critic, Generator, ResidualGenerator, Segmenter};
use crate::perceptual::{msssim_cost_node, SsimParams};
use crate::rng;
use crate::synthdata::{DegradeParams, SyntheticSample};
use crate::topo::{evp_loss_node, sga_loss_node, EndpointSet, EndpointSource};
use crate::trainer::{compute_anchors, generator_loss, Phase, TrainConfig};

pub const SUITES: [&str; 5] = ["primitives", "msssim", "sga", "evp", "generator"];

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const FULL_LOSS_TOL: f64 = 1e-3;

const H: f64 = 1e-6;
/// Composite costs sum thousands of terms, so their rounding noise is far
/// above machine epsilon and a wider step balances it against truncation.
const COMPOSITE_H: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn new(suite: &'static str, name: impl Into<String>, r: &GradCheckReport, tol: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            max_rel_error: r.max_rel_error,
            tol,
            pass: r.pass,
        }
    }
}

/// Runs one suite by name, or every suite for `all`.
pub fn run_suite(name: &str) -> Result<Vec<CheckOutcome>> {
    match name {
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s)?);
            }
            Ok(out)
        }
        "primitives" => primitives(),
        "msssim" => msssim(),
        "sga" => sga(),
        "evp" => evp(),
        "generator" => generator(),
        other => Err(Error::Config(format!(
            "unknown gradient suite `{other}` (expected all, {})",
            SUITES.join(", ")
        ))),
    }
}

/// Pairwise separated values, so no pooling window holds a near-tie.
fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut r = rng::stream(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let data = perm
        .iter()
        .map(|&p| (p as f64 + 0.3 + 0.4 * r.random::<f64>()) / n as f64)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut r = rng::stream(seed);
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(&mut r, lo, hi)).collect()).expect("sized")
}

/// Reduces to a scalar with distinct per-cell weights.
fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let w = random(g.value(y).shape(), seed, 0.5, 1.5);
    let wn = g.constant(w);
    let m = g.mul(y, wn)?;
    Ok(g.sum(m))
}

type Op = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;

fn binary(other: &Tensor, f: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>) -> Op {
    let o = other.clone();
    Box::new(move |g, x| {
        let c = g.constant(o.clone());
        f(g, x, c)
    })
}

fn primitives() -> Result<Vec<CheckOutcome>> {
    let p = distinct(&[2, 6, 6], 5);
    let signed = random(&[2, 6, 6], 6, -2.0, 2.0);
    let pos = random(&[2, 6, 6], 7, 0.5, 1.5);
    let narrow = random(&[3, 6, 6], 16, -0.2, 0.2);
    let q = distinct(&[2, 6, 6], 8);
    let cases: Vec<(&str, &Tensor, Op)> = vec![
        ("relu", &signed, Box::new(|g, x| Ok(g.relu(x)))),
        ("leaky_relu", &signed, Box::new(|g, x| Ok(g.leaky_relu(x, 0.2)))),
        ("sigmoid", &signed, Box::new(|g, x| Ok(g.sigmoid(x)))),
        ("tanh01", &signed, Box::new(|g, x| Ok(g.tanh01(x)))),
        ("exp", &signed, Box::new(|g, x| Ok(g.exp(x)))),
        ("ln", &pos, Box::new(|g, x| Ok(g.ln(x)))),
        ("powf", &pos, Box::new(|g, x| Ok(g.powf(x, 0.37)))),
        ("clamp01", &signed, Box::new(|g, x| Ok(g.clamp01(x)))),
        ("clamp", &signed, Box::new(|g, x| Ok(g.clamp(x, -0.5, 0.7)))),
        ("neg", &signed, Box::new(|g, x| Ok(g.neg(x)))),
        ("scalar_mul", &signed, Box::new(|g, x| Ok(g.scalar_mul(x, -1.7)))),
        ("add_scalar", &signed, Box::new(|g, x| Ok(g.add_scalar(x, 0.3)))),
        ("max_scalar", &signed, Box::new(|g, x| Ok(g.max_scalar(x, 0.1)))),
        ("sum", &signed, Box::new(|g, x| Ok(g.sum(x)))),
        ("mean", &signed, Box::new(|g, x| Ok(g.mean(x)))),
        ("minpool3", &p, Box::new(|g, x| g.minpool3(x))),
        ("maxpool3", &p, Box::new(|g, x| g.maxpool3(x))),
        ("downsample2", &p, Box::new(|g, x| g.downsample2(x))),
        ("upsample2", &p, Box::new(|g, x| g.upsample2(x))),
        ("instance_norm", &signed, Box::new(|g, x| g.instance_norm(x, 1e-5))),
        ("crop", &p, Box::new(|g, x| g.crop(x, 1, 2, 3, 4))),
        ("pad_replicate", &p, Box::new(|g, x| g.pad_replicate(x, 2))),
        ("slice_channels", &p, Box::new(|g, x| g.slice_channels(x, 1, 1))),
        ("channel_mean", &p, Box::new(|g, x| g.channel_mean(x))),
        ("channel_logsumexp", &narrow, Box::new(|g, x| g.channel_logsumexp(x, 10.0))),
        ("add", &signed, binary(&pos, |g, x, c| g.add(x, c))),
        ("sub", &signed, binary(&pos, |g, x, c| g.sub(c, x))),
        ("mul", &signed, binary(&pos, |g, x, c| g.mul(x, c))),
        ("div", &pos, binary(&pos, |g, x, c| {
            let a = g.div(c, x)?;
            let b = g.div(x, c)?;
            g.add(a, b)
        })),
        ("max", &p, binary(&q, |g, x, c| g.max(x, c))),
    ];
    let mut out = Vec::new();
    for (name, point, op) in cases {
        let r = grad_check(
            |g, x| {
                let y = op(g, x)?;
                weighted_sum(g, y, 77)
            },
            point,
            H,
            PRIMITIVE_TOL,
        )?;
        out.push(CheckOutcome::new("primitives", name, &r, PRIMITIVE_TOL));
    }

    let xt = random(&[2, 7, 7], 21, -1.0, 1.0);
    let kt = random(&[3, 2, 3, 3], 22, -1.0, 1.0);
    let bt = random(&[3], 23, -1.0, 1.0);
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
        // `slot` picks the differentiated operand: input, kernel or bias.
        for (slot, point) in [(0usize, &xt), (1, &kt), (2, &bt)] {
            let r = grad_check(
                |g, v| {
                    let mut ops = [None, None, None];
                    ops[slot] = Some(v);
                    for (i, t) in [&xt, &kt, &bt].into_iter().enumerate() {
                        if ops[i].is_none() {
                            ops[i] = Some(g.constant(t.clone()));
                        }
                    }
                    let [x, k, b] = ops.map(|o| o.expect("filled"));
                    let y = g.conv2d(x, k, Some(b), stride, padding)?;
                    weighted_sum(g, y, 31)
                },
                point,
                H,
                PRIMITIVE_TOL,
            )?;
            let operand = ["input", "kernel", "bias"][slot];
            let name = format!("conv2d {operand} stride {stride} {padding:?}");
            out.push(CheckOutcome::new("primitives", name, &r, PRIMITIVE_TOL));
        }
    }
    Ok(out)
}

/// Evenly spread probe indices.
fn probes(n: usize, count: usize, offset: usize) -> Vec<usize> {
    (0..count).map(|i| (offset + i * n / count) % n).collect()
}

fn phantom(seed: u64, size: usize) -> Result<SyntheticSample> {
    SyntheticSample::generate(seed, size, size, &DegradeParams::default())
}

fn msssim() -> Result<Vec<CheckOutcome>> {
    let s = phantom(11, 48)?;
    let a = s.clean.to_tensor();
    let b = s.degraded.to_tensor();
    let p = SsimParams::default();
    let r = grad_check_subset(
        |g, x| {
            let c = g.constant(a.clone());
            msssim_cost_node(g, c, x, 5, &p)
        },
        &b,
        &probes(b.len(), 16, 7),
        COMPOSITE_H,
        COMPOSITE_TOL,
    )?;
    Ok(vec![CheckOutcome::new("msssim", "msssim_cost", &r, COMPOSITE_TOL)])
}

fn sga() -> Result<Vec<CheckOutcome>> {
    // Segmentations of phantoms saturate into plateaus whose values differ
    // by less than any usable step, so the pooling stages would see ties.
    // Mid-grey noise keeps the segmenter in its graded range.
    let seg = Segmenter::default();
    let x = random(&[1, 32, 32], 41, 0.4, 0.6);
    let y = random(&[1, 32, 32], 42, 0.4, 0.6);
    let r = grad_check_subset(
        |g, v| {
            let xn = g.constant(x.clone());
            let sx = seg.forward(g, xn)?;
            let sv = seg.forward(g, v)?;
            sga_loss_node(g, sx, sv, 5, 1e-3)
        },
        &y,
        &probes(y.len(), 32, 5),
        H,
        COMPOSITE_TOL,
    )?;
    Ok(vec![CheckOutcome::new("sga", "sga_loss through segmenter", &r, COMPOSITE_TOL)])
}

fn evp() -> Result<Vec<CheckOutcome>> {
    let s = phantom(13, 32)?;
    let x = s.degraded.to_tensor();
    let xh = s.clean.to_tensor();
    let anchors = EndpointSet::new(vec![(3, 4), (16, 20), (30, 31), (16, 20), (9, 25)], EndpointSource::Union);
    let r = grad_check_subset(
        |g, v| {
            let xn = g.constant(x.clone());
            evp_loss_node(g, xn, v, &anchors, 12)
        },
        &xh,
        &probes(xh.len(), 16, 3),
        COMPOSITE_H,
        COMPOSITE_TOL,
    )?;
    Ok(vec![CheckOutcome::new("evp", "evp_loss", &r, COMPOSITE_TOL)])
}

fn generator() -> Result<Vec<CheckOutcome>> {
    let smp = phantom(5, 32)?;
    // 16x16 crops keep the check fast; the window then covers the image.
    let x = smp.degraded.crop(8, 8, 16, 16)?.to_tensor();
    let y = smp.clean.crop(8, 8, 16, 16)?.to_tensor();
    let gen = ResidualGenerator::default();
    let p = gen.init_params(6);
    let critic = ConvCritic::default();
    let cp = critic.init_params(8);
    let seg = Segmenter::default();
    let cfg = TrainConfig { image_size: 16, window_l: 16, k: 5, ..Default::default() };
    let enhanced = vec![enhance(&gen, &p, &x)?];
    let anchors = compute_anchors(&seg, std::slice::from_ref(&x), &enhanced, &cfg, &[2])?;
    let mut out = Vec::new();
    // Biases feeding an instance norm have zero gradient, so probe weights
    // and the unnormalised head.
    for (name, idx) in [("stem.w", 3usize), ("head.b", 0), ("res1.a.w", 40), ("up2.w", 7), ("head.w", 2)] {
        let pi = p
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("generator has no tensor `{name}`")))?;
        let r = grad_check_subset(
            |g, t| {
                let mut ids = p.bind(g, false);
                ids[pi] = t;
                let cids = cp.bind(g, false);
                let (l, _) = generator_loss(
                    g,
                    &gen,
                    &ids,
                    &critic,
                    &cids,
                    &seg,
                    std::slice::from_ref(&x),
                    std::slice::from_ref(&y),
                    &anchors,
                    Phase::Two,
                    &cfg,
                )?;
                Ok(l)
            },
            &p.tensors()[pi],
            &[idx],
            H,
            FULL_LOSS_TOL,
        )?;
        out.push(CheckOutcome::new("generator", format!("{name}[{idx}]"), &r, FULL_LOSS_TOL));
    }
    Ok(out)
}
