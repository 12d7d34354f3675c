use super::{push_conv, Cursor, ParamSet};
use crate::diffgraph::{Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::grid::Tensor;
use crate::rng;

const IN_EPS: f64 = 1e-5;
/// Input clamp before the inverse of `tanh01` in the residual path.
const RESIDUAL_CLAMP: f64 = 1e-3;

/// A trainable image-to-image map on `[1, H, W]` images in [0, 1].
pub trait Generator {
    fn init_params(&self, seed: u64) -> ParamSet;
    fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub stem_channels: usize,
    pub mid_channels: usize,
    pub res_blocks: usize,
    /// Adds `atanh(2x - 1)` to the head pre-activation, so a zero head maps
    /// the input to itself.
    pub residual_input: bool,
    /// Multiplier on the He scale of the head conv.
    pub head_gain: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            mid_channels: 24,
            res_blocks: 4,
            residual_input: true,
            head_gain: 0.1,
        }
    }
}

/// Encoder / residual trunk / decoder with two stride-2 stages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualGenerator {
    pub spec: GeneratorSpec,
}

impl ResidualGenerator {
    pub fn new(spec: GeneratorSpec) -> Self {
        Self { spec }
    }
}

fn conv_in_relu(
    g: &mut Graph,
    c: &mut Cursor,
    x: NodeId,
    stride: usize,
    relu: bool,
) -> Result<NodeId> {
    let (w, b) = c.pair()?;
    let y = g.conv2d(x, w, Some(b), stride, Padding::Same)?;
    let y = g.instance_norm(y, IN_EPS)?;
    Ok(if relu { g.relu(y) } else { y })
}

impl Generator for ResidualGenerator {
    fn init_params(&self, seed: u64) -> ParamSet {
        let s = &self.spec;
        let mut r = rng::stream(seed);
        let mut p = ParamSet::new();
        let (c0, c1) = (s.stem_channels, s.mid_channels);
        push_conv(&mut p, &mut r, "stem", c0, 1, 3, 1.0);
        push_conv(&mut p, &mut r, "down1", c1, c0, 3, 1.0);
        push_conv(&mut p, &mut r, "down2", c1, c1, 3, 1.0);
        for i in 0..s.res_blocks {
            push_conv(&mut p, &mut r, &format!("res{i}.a"), c1, c1, 3, 1.0);
            push_conv(&mut p, &mut r, &format!("res{i}.b"), c1, c1, 3, 1.0);
        }
        push_conv(&mut p, &mut r, "up1", c1, c1, 3, 1.0);
        push_conv(&mut p, &mut r, "up2", c0, c1, 3, 1.0);
        push_conv(&mut p, &mut r, "head", 1, c0, 3, s.head_gain);
        p
    }

    fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let (ch, h, w) = g.value(x).chw()?;
        if ch != 1 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Dimension(format!(
                "generator needs a [1, H, W] input with H, W divisible by 4, got {:?}",
                g.value(x).shape()
            )));
        }
        let mut c = Cursor::new(params);
        let mut y = conv_in_relu(g, &mut c, x, 1, true)?;
        y = conv_in_relu(g, &mut c, y, 2, true)?;
        y = conv_in_relu(g, &mut c, y, 2, true)?;
        for _ in 0..self.spec.res_blocks {
            let t = conv_in_relu(g, &mut c, y, 1, true)?;
            let t = conv_in_relu(g, &mut c, t, 1, false)?;
            y = g.add(y, t)?;
        }
        y = g.upsample2(y)?;
        y = conv_in_relu(g, &mut c, y, 1, true)?;
        y = g.upsample2(y)?;
        y = conv_in_relu(g, &mut c, y, 1, true)?;
        let (hw, hb) = c.pair()?;
        c.finish()?;
        let mut z = g.conv2d(y, hw, Some(hb), 1, Padding::Same)?;
        if self.spec.residual_input {
            let skip = g.value(x).map(|v| {
                let v = v.clamp(RESIDUAL_CLAMP, 1.0 - RESIDUAL_CLAMP);
                (2.0 * v - 1.0).atanh()
            });
            let skip = g.constant(skip);
            z = g.add(z, skip)?;
        }
        Ok(g.tanh01(z))
    }
}

/// `clamp01(a * x + b)` with scalar `a`, `b`; starts at the identity. Used
/// where a tiny, analysable generator is enough.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineGenerator;

impl Generator for AffineGenerator {
    fn init_params(&self, _seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("affine.w", Tensor::filled(&[1, 1, 1, 1], 1.0));
        p.push("affine.b", Tensor::zeros(&[1]));
        p
    }

    fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut c = Cursor::new(params);
        let (w, b) = c.pair()?;
        c.finish()?;
        let y = g.conv2d(x, w, Some(b), 1, Padding::Valid)?;
        Ok(g.clamp01(y))
    }
}
