use super::{push_conv, Cursor, ParamSet};
use crate::diffgraph::{Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::grid::Tensor;
use crate::rng;

/// Scalar-valued network on `[1, H, W]` images.
///
/// `tangent` records the directional input derivative `v · ∇ₓD(x)` as a
/// function of the parameters, with `x` and `v` held fixed. For piecewise
/// linear critics this is exact, and its parameter gradient is what the
/// gradient penalty needs without differentiating through a backward pass.
pub trait Critic {
    fn init_params(&self, seed: u64) -> ParamSet;
    fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId>;
    fn tangent(&self, g: &mut Graph, params: &[NodeId], x: &Tensor, v: &Tensor) -> Result<NodeId>;

    /// `D(x)` and `∇ₓD(x)` at fixed parameter values.
    fn input_gradient(&self, params: &[Tensor], x: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|t| g.constant(t.clone())).collect();
        let xn = g.leaf(x.clone(), true);
        let d = self.forward(&mut g, &ids, xn)?;
        g.backward(d)?;
        Ok((g.scalar_value(d), g.grad_or_zeros(xn)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    LeakyRelu,
    ChannelMean,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticSpec {
    /// Output channels of the stride-2 conv stack.
    pub channels: Vec<usize>,
    pub slope: f64,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
            slope: 0.2,
        }
    }
}

/// Stride-2 conv stack with leaky ReLU, spatial mean and a linear head.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvCritic {
    pub spec: CriticSpec,
}

impl ConvCritic {
    pub fn new(spec: CriticSpec) -> Self {
        Self { spec }
    }

    pub fn layers(&self) -> Vec<LayerKind> {
        let mut out = Vec::new();
        for _ in &self.spec.channels {
            out.push(LayerKind::Conv);
            out.push(LayerKind::LeakyRelu);
        }
        out.push(LayerKind::ChannelMean);
        out.push(LayerKind::Linear);
        out
    }

    /// Pre-activation values of every conv layer.
    pub fn preactivations(&self, params: &[Tensor], x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|t| g.constant(t.clone())).collect();
        let mut c = Cursor::new(&ids);
        let mut a = g.constant(x.clone());
        let mut out = Vec::new();
        for _ in &self.spec.channels {
            let (w, b) = c.pair()?;
            let y = g.conv2d(a, w, Some(b), 2, Padding::Same)?;
            out.push(g.value(y).clone());
            a = g.leaky_relu(y, self.spec.slope);
        }
        Ok(out)
    }
}

impl Critic for ConvCritic {
    fn init_params(&self, seed: u64) -> ParamSet {
        let mut r = rng::stream(seed);
        let mut p = ParamSet::new();
        let mut ci = 1;
        for (i, &co) in self.spec.channels.iter().enumerate() {
            push_conv(&mut p, &mut r, &format!("conv{i}"), co, ci, 3, 1.0);
            ci = co;
        }
        let std = (1.0 / ci as f64).sqrt();
        let w = (0..ci).map(|_| std * rng::normal(&mut r)).collect();
        p.push("head.w", Tensor::new(vec![ci], w).expect("sized"));
        p.push("head.b", Tensor::scalar(0.0));
        p
    }

    fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut c = Cursor::new(params);
        let mut a = x;
        for _ in &self.spec.channels {
            let (w, b) = c.pair()?;
            let y = g.conv2d(a, w, Some(b), 2, Padding::Same)?;
            a = g.leaky_relu(y, self.spec.slope);
        }
        let (hw, hb) = c.pair()?;
        c.finish()?;
        let feat = g.channel_mean(a)?;
        let prod = g.mul(feat, hw)?;
        let s = g.sum(prod);
        g.add(s, hb)
    }

    fn tangent(&self, g: &mut Graph, params: &[NodeId], x: &Tensor, v: &Tensor) -> Result<NodeId> {
        if x.shape() != v.shape() {
            return Err(Error::Dimension(format!(
                "tangent direction {:?} does not match input {:?}",
                v.shape(),
                x.shape()
            )));
        }
        let values: Vec<Tensor> = params.iter().map(|&id| g.value(id).clone()).collect();
        let pre = self.preactivations(&values, x)?;
        let mut c = Cursor::new(params);
        let mut t = g.constant(v.clone());
        for y in &pre {
            let (w, _) = c.pair()?;
            t = g.conv2d(t, w, None, 2, Padding::Same)?;
            let slope = g.constant(y.map(|u| if u > 0.0 { 1.0 } else { self.spec.slope }));
            t = g.mul(t, slope)?;
        }
        let (hw, _) = c.pair()?;
        c.finish()?;
        let feat = g.channel_mean(t)?;
        let prod = g.mul(feat, hw)?;
        Ok(g.sum(prod))
    }
}

/// `D(x) = <w, x> + b` over a fixed image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCritic {
    pub shape: Vec<usize>,
}

impl LinearCritic {
    pub fn new(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec() }
    }
}

impl Critic for LinearCritic {
    fn init_params(&self, seed: u64) -> ParamSet {
        let mut r = rng::stream(seed);
        let n: usize = self.shape.iter().product();
        let std = (1.0 / n as f64).sqrt();
        let w = (0..n).map(|_| std * rng::normal(&mut r)).collect();
        let mut p = ParamSet::new();
        p.push("lin.w", Tensor::new(self.shape.clone(), w).expect("sized"));
        p.push("lin.b", Tensor::scalar(0.0));
        p
    }

    fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut c = Cursor::new(params);
        let (w, b) = c.pair()?;
        c.finish()?;
        let prod = g.mul(x, w)?;
        let s = g.sum(prod);
        g.add(s, b)
    }

    fn tangent(&self, g: &mut Graph, params: &[NodeId], _x: &Tensor, v: &Tensor) -> Result<NodeId> {
        let mut c = Cursor::new(params);
        let (w, _) = c.pair()?;
        c.finish()?;
        let vn = g.constant(v.clone());
        let prod = g.mul(vn, w)?;
        Ok(g.sum(prod))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::{grad_check, grad_check_subset};

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut s = rng::stream(seed);
        Tensor::new(vec![1, h, w], (0..h * w).map(|_| rng::uniform(&mut s, 0.0, 1.0)).collect()).unwrap()
    }

    fn eval<C: Critic>(c: &C, p: &ParamSet, x: &Tensor) -> f64 {
        let mut g = Graph::new();
        let ids = p.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let d = c.forward(&mut g, &ids, xn).unwrap();
        g.scalar_value(d)
    }

    #[test]
    fn zero_weights_give_zero() {
        let c = ConvCritic::default();
        let mut p = c.init_params(1);
        for t in p.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        assert_eq!(eval(&c, &p, &image(2, 32, 32)), 0.0);
    }

    #[test]
    fn linear_critic_is_linear() {
        let c = LinearCritic::new(&[1, 8, 8]);
        let p = c.init_params(3);
        let x = image(4, 8, 8);
        let x2 = x.map(|v| 2.0 * v);
        assert!((eval(&c, &p, &x2) - 2.0 * eval(&c, &p, &x)).abs() < 1e-12);
    }

    #[test]
    fn no_normalization_layers() {
        let c = ConvCritic::default();
        let kinds = c.layers();
        assert_eq!(kinds.iter().filter(|k| **k == LayerKind::Conv).count(), 4);
        assert!(kinds.iter().all(|k| matches!(
            k,
            LayerKind::Conv | LayerKind::LeakyRelu | LayerKind::ChannelMean | LayerKind::Linear
        )));
        let p = c.init_params(0);
        assert_eq!(p.num_scalars(), 97_281);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let c = ConvCritic::default();
        let p = c.init_params(5);
        let x = image(6, 16, 16);
        let r = grad_check(
            |g, xn| {
                let ids = p.bind(g, false);
                c.forward(g, &ids, xn)
            },
            &x,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{}", r.max_rel_error);
        let (_, grad) = c.input_gradient(p.tensors(), &x).unwrap();
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), true);
        let ids = p.bind(&mut g, false);
        let d = c.forward(&mut g, &ids, xn).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad_or_zeros(xn), grad);
    }

    #[test]
    fn tangent_value_is_directional_derivative() {
        let c = ConvCritic::default();
        let p = c.init_params(7);
        let x = image(8, 32, 32);
        let v = image(9, 32, 32).map(|u| u - 0.5);
        let (_, grad) = c.input_gradient(p.tensors(), &x).unwrap();
        let dot: f64 = grad.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let mut g = Graph::new();
        let ids = p.bind(&mut g, true);
        let t = c.tangent(&mut g, &ids, &x, &v).unwrap();
        assert!((g.scalar_value(t) - dot).abs() < 1e-12 * (1.0 + dot.abs()));
    }

    #[test]
    fn tangent_parameter_gradient_matches_finite_differences() {
        // d/dθ [v · ∇ₓD(x; θ)] against central differences of the exact
        // input gradient.
        let c = ConvCritic::default();
        let p = c.init_params(10);
        let x = image(11, 16, 16);
        let v = image(12, 16, 16);
        for (name, idx) in [("conv0.w", 3usize), ("conv2.w", 500), ("head.w", 17)] {
            let pi = p.index_of(name).unwrap();
            let r = grad_check_subset(
                |g, t| {
                    let mut ids = p.bind(g, false);
                    ids[pi] = t;
                    c.tangent(g, &ids, &x, &v)
                },
                &p.tensors()[pi],
                &[idx],
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(r.pass, "{name}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn activation_variance_at_init() {
        let c = ConvCritic::default();
        let p = c.init_params(13);
        let mut s = rng::stream(14);
        let x = Tensor::new(vec![1, 64, 64], (0..4096).map(|_| rng::normal(&mut s)).collect()).unwrap();
        for y in c.preactivations(p.tensors(), &x).unwrap() {
            let n = y.len() as f64;
            let m = y.data().iter().sum::<f64>() / n;
            let var = y.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            assert!((0.25..=4.0).contains(&var), "{var}");
        }
    }

    #[test]
    fn seeded_init() {
        let c = ConvCritic::default();
        assert_eq!(c.init_params(1), c.init_params(1));
        assert_ne!(c.init_params(1), c.init_params(2));
    }
}
