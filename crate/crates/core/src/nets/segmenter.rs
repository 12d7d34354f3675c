use std::f64::consts::PI;

use crate::diffgraph::{Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::grid::{Grid2D, Tensor};
use crate::morphology::SoftMask;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterSpec {
    pub sigmas: Vec<f64>,
    pub orientations: usize,
    /// Odd kernel side.
    pub size: usize,
    /// Smooth-max temperature across the filter bank.
    pub temperature: f64,
    pub gain: f64,
    pub bias: f64,
    /// Field-of-view gate `sigmoid(sharpness * (blur(x) - level))`.
    pub fov_sigma: f64,
    pub fov_level: f64,
    pub fov_sharpness: f64,
}

/// Calibrated on synthetic phantoms by [`Segmenter::calibrate`].
pub const CALIBRATED_GAIN: f64 = 73.62961566190296;
pub const CALIBRATED_BIAS: f64 = 0.027645138030558514;

impl Default for SegmenterSpec {
    fn default() -> Self {
        Self {
            sigmas: vec![1.0, 2.0],
            orientations: 8,
            size: 15,
            temperature: 10.0,
            gain: CALIBRATED_GAIN,
            bias: CALIBRATED_BIAS,
            fov_sigma: 2.0,
            fov_level: 0.25,
            fov_sharpness: 30.0,
        }
    }
}

/// Fixed oriented matched-filter bank responding to thin dark ridges.
///
/// Weights are built once at construction and never exposed mutably.
#[derive(Debug, Clone)]
pub struct Segmenter {
    spec: SegmenterSpec,
    kernels: Tensor,
    fov_taps: Vec<f64>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Self::new(SegmenterSpec::default())
    }
}

/// Negative second derivative of a Gaussian across the ridge, Gaussian along
/// it, made zero-mean and scaled so the negative part sums to -1.
fn ridge_kernel(sigma: f64, theta: f64, size: usize) -> Vec<f64> {
    let half = (size / 2) as f64;
    let sigma_v = 2.0 * sigma;
    let (ct, st) = (theta.cos(), theta.sin());
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (dy, dx) = ((i / size) as f64 - half, (i % size) as f64 - half);
            let u = dx * ct + dy * st;
            let v = -dx * st + dy * ct;
            let across = (1.0 - u * u / (sigma * sigma)) * (-u * u / (2.0 * sigma * sigma)).exp();
            let along = (-v * v / (2.0 * sigma_v * sigma_v)).exp();
            -across * along
        })
        .collect();
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    let neg: f64 = k.iter().filter(|v| **v < 0.0).sum();
    k.iter_mut().for_each(|v| *v /= -neg);
    k
}

impl Segmenter {
    pub fn new(spec: SegmenterSpec) -> Self {
        let n = spec.sigmas.len() * spec.orientations;
        let mut data = Vec::with_capacity(n * spec.size * spec.size);
        for &sigma in &spec.sigmas {
            for j in 0..spec.orientations {
                let theta = j as f64 * PI / spec.orientations as f64;
                data.extend(ridge_kernel(sigma, theta, spec.size));
            }
        }
        let kernels = Tensor::new(vec![n, 1, spec.size, spec.size], data).expect("sized");
        let fov_taps = crate::synthdata::gaussian_kernel(spec.fov_sigma);
        Self { spec, kernels, fov_taps }
    }

    pub fn spec(&self) -> &SegmenterSpec {
        &self.spec
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    fn gray(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match g.value(x).chw()?.0 {
            1 => Ok(x),
            3 => g.slice_channels(x, 1, 1),
            c => Err(Error::Dimension(format!("segmenter takes 1 or 3 channels, got {c}"))),
        }
    }

    /// Smooth-max filter-bank response before the output sigmoid. The
    /// log-sum-exp is shifted by `ln(n) / T`, so a flat image responds 0.
    pub fn response(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let x = self.gray(g, x)?;
        let pad = g.pad_replicate(x, self.spec.size / 2)?;
        let k = g.constant(self.kernels.clone());
        let r = g.conv2d(pad, k, None, 1, Padding::Valid)?;
        let lse = g.channel_logsumexp(r, self.spec.temperature)?;
        let n = self.kernels.shape()[0] as f64;
        Ok(g.add_scalar(lse, -n.ln() / self.spec.temperature))
    }

    /// Soft field-of-view gate from a blurred copy of the input.
    pub fn fov_gate(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let x = self.gray(g, x)?;
        let n = self.fov_taps.len();
        let pad = g.pad_replicate(x, n / 2)?;
        let kh = g.constant(Tensor::new(vec![1, 1, 1, n], self.fov_taps.clone())?);
        let kv = g.constant(Tensor::new(vec![1, 1, n, 1], self.fov_taps.clone())?);
        let b = g.conv2d(pad, kh, None, 1, Padding::Valid)?;
        let b = g.conv2d(b, kv, None, 1, Padding::Valid)?;
        let z = g.add_scalar(b, -self.spec.fov_level);
        let z = g.scalar_mul(z, self.spec.fov_sharpness);
        Ok(g.sigmoid(z))
    }

    /// Differentiable vessel probability map `[1, H, W]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let r = self.response(g, x)?;
        let z = g.add_scalar(r, -self.spec.bias);
        let z = g.scalar_mul(z, self.spec.gain);
        let p = g.sigmoid(z);
        let gate = self.fov_gate(g, x)?;
        g.mul(p, gate)
    }

    pub fn segment(&self, img: &Grid2D) -> SoftMask {
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor());
        let y = self.forward(&mut g, x).expect("single-channel raster");
        let grid = Grid2D::from_tensor(g.value(y)).expect("raster shape");
        SoftMask::new(grid.map(|v| v.clamp(0.0, 1.0))).expect("sigmoid output lies in [0, 1]")
    }

    /// Raw response and gate values on a plain image.
    fn response_and_gate(&self, img: &Grid2D) -> (Grid2D, Grid2D) {
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor());
        let r = self.response(&mut g, x).expect("single-channel raster");
        let m = self.fov_gate(&mut g, x).expect("single-channel raster");
        (
            Grid2D::from_tensor(g.value(r)).expect("raster"),
            Grid2D::from_tensor(g.value(m)).expect("raster"),
        )
    }

    /// Fits `(gain, bias)` on clean and degraded phantoms: `bias` is the
    /// response threshold with the best pixel F1 inside the field of view,
    /// and `gain` puts the median vessel response at probability 0.9.
    pub fn calibrate(&self, seeds: &[u64], size: usize) -> Result<(f64, f64)> {
        use crate::synthdata::{DegradeParams, SyntheticSample};
        let mut samples: Vec<(f64, bool)> = Vec::new();
        for &seed in seeds {
            let s = SyntheticSample::generate(seed, size, size, &DegradeParams::default())?;
            for img in [&s.clean, &s.degraded] {
                let (r, gate) = self.response_and_gate(img);
                for i in 0..r.values().len() {
                    if gate.values()[i] > 0.5 {
                        samples.push((r.values()[i], s.mask.grid().values()[i] > 0.5));
                    }
                }
            }
        }
        let total_pos = samples.iter().filter(|s| s.1).count();
        if total_pos == 0 {
            return Err(Error::Contract("calibration set has no vessel pixels".into()));
        }
        samples.sort_by(|a, b| b.0.total_cmp(&a.0));
        // Sweep thresholds from high to low response.
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut best = (0.0, samples[0].0);
        for (i, &(r, pos)) in samples.iter().enumerate() {
            if pos {
                tp += 1;
            } else {
                fp += 1;
            }
            let next_differs = samples.get(i + 1).is_none_or(|n| n.0 < r);
            if next_differs {
                let f1 = 2.0 * tp as f64 / (2 * tp + fp + (total_pos - tp)) as f64;
                if f1 > best.0 {
                    let below = samples.get(i + 1).map_or(r, |n| n.0);
                    best = (f1, 0.5 * (r + below));
                }
            }
        }
        let bias = best.1;
        let mut vessel: Vec<f64> = samples.iter().filter(|s| s.1).map(|s| s.0).collect();
        vessel.sort_by(f64::total_cmp);
        let median = vessel[vessel.len() / 2];
        if median <= bias {
            return Err(Error::Contract("median vessel response below the threshold".into()));
        }
        Ok(((9.0f64).ln() / (median - bias), bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::grad_check;
    use crate::rng;
    use crate::synthdata::gen_clean;

    #[test]
    fn kernels_are_zero_mean_with_unit_negative_lobe() {
        let s = Segmenter::default();
        let k = s.kernels();
        assert_eq!(k.shape(), &[16, 1, 15, 15]);
        for f in k.data().chunks(225) {
            assert!(f.iter().sum::<f64>().abs() < 1e-12);
            let neg: f64 = f.iter().filter(|v| **v < 0.0).sum();
            assert!((neg + 1.0).abs() < 1e-12);
            // Centre weight is negative so dark ridges respond positively.
            assert!(f[7 * 15 + 7] < 0.0);
        }
    }

    #[test]
    fn constant_image_scores_low() {
        let s = Segmenter::default();
        for v in [0.05, 0.3, 0.8, 1.0] {
            let m = s.segment(&Grid2D::filled(32, 32, v));
            assert!(m.grid().values().iter().all(|p| *p < 0.2), "level {v}");
        }
    }

    #[test]
    fn dark_line_scores_higher_than_background() {
        let s = Segmenter::default();
        let mut img = Grid2D::filled(48, 48, 0.8);
        for c in 4..44 {
            img.set(23, c, 0.45);
            img.set(24, c, 0.45);
        }
        let m = s.segment(&img);
        let (mut on, mut off, mut n_on, mut n_off) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..48 {
            for c in 0..48 {
                let p = m.grid().get(r, c);
                if (r == 23 || r == 24) && (4..44).contains(&c) {
                    on += p;
                    n_on += 1.0;
                } else {
                    off += p;
                    n_off += 1.0;
                }
            }
        }
        assert!(on / n_on > 0.5 && off / n_off < 0.2, "{} {}", on / n_on, off / n_off);
    }

    #[test]
    fn vessels_score_higher_on_phantoms() {
        let s = Segmenter::default();
        for seed in 0..5 {
            let (img, mask) = gen_clean(seed, 64, 64).unwrap();
            let m = s.segment(&img);
            let (mut on, mut off, mut n_on, mut n_off) = (0.0, 0.0, 0.0, 0.0);
            for (p, &t) in m.grid().values().iter().zip(mask.grid().values()) {
                if t > 0.5 {
                    on += p;
                    n_on += 1.0;
                } else {
                    off += p;
                    n_off += 1.0;
                }
            }
            assert!(on / n_on > off / n_off + 0.3);
        }
    }

    #[test]
    fn translation_equivariant_away_from_borders() {
        let s = Segmenter::default();
        let (img, _) = gen_clean(4, 64, 64).unwrap();
        let shifted = Grid2D::from_fn(64, 64, |r, c| img.get(r.saturating_sub(3), c.saturating_sub(5)));
        let a = s.segment(&img);
        let b = s.segment(&shifted);
        for r in 20..44 {
            for c in 20..44 {
                assert!((a.grid().get(r, c) - b.grid().get(r + 3, c + 5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rgb_uses_green_channel() {
        let s = Segmenter::default();
        let (img, _) = gen_clean(1, 32, 32).unwrap();
        let mut data = vec![0.3; 1024];
        data.extend_from_slice(img.values());
        data.extend(vec![0.9; 1024]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 32, 32], data).unwrap());
        let y = s.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), s.segment(&img).grid().values());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = Segmenter::default();
        let mut st = rng::stream(2);
        let x = Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng::uniform(&mut st, 0.2, 0.8)).collect()).unwrap();
        let w = Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng::uniform(&mut st, -1.0, 1.0)).collect()).unwrap();
        let r = grad_check(
            |g, xn| {
                let y = s.forward(g, xn)?;
                let wn = g.constant(w.clone());
                let p = g.mul(y, wn)?;
                Ok(g.sum(p))
            },
            &x,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{}", r.max_rel_error);
    }

    #[test]
    fn shipped_constants_match_calibration() {
        let s = Segmenter::default();
        let seeds: Vec<u64> = (1000..1012).collect();
        let (gain, bias) = s.calibrate(&seeds, 64).unwrap();
        assert!((gain - CALIBRATED_GAIN).abs() < 1e-6 * gain, "gain {gain}");
        assert!((bias - CALIBRATED_BIAS).abs() < 1e-9, "bias {bias}");
    }
}
