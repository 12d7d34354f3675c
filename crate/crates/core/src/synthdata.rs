//! Synthetic fundus-like phantoms with exact vessel masks, and a degradation
//! pipeline (illumination, spots, blur) producing low-quality counterparts.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::io::{write_image, Manifest, ManifestEntry, Role};
use crate::morphology::BinaryMask;
use crate::perceptual::ssim;
use crate::rng::{self, derive_seed, uniform, uniform_int, Stream};

const DISK_VALUE: f64 = 0.8;
const FIELD_VALUE: f64 = 0.05;
const RADIAL_FALLOFF: f64 = 0.15;
const VESSEL_CONTRAST: f64 = 0.35;
const BRANCH_PROB: f64 = 0.15;
const STEP: f64 = 2.0;
const MAX_SEGMENTS: usize = 24;

const TAG_LOW: u64 = 1;
const TAG_HIGH: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_DEGRADE: u64 = 4;

/// Clean image, its degraded counterpart and the vessel mask they share.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub clean: Grid2D,
    pub degraded: Grid2D,
    pub mask: BinaryMask,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn generate(seed: u64, h: usize, w: usize, params: &DegradeParams) -> Result<Self> {
        let (clean, mask) = gen_clean(seed, h, w)?;
        let degraded = degrade(&clean, params, derive_seed(seed, TAG_DEGRADE, 0));
        Ok(Self { clean, degraded, mask, seed })
    }
}

/// Inclusive sampling ranges for each degradation.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradeParams {
    pub spot_count: (usize, usize),
    pub spot_radius: (f64, f64),
    /// Magnitude range; the sign is drawn per spot.
    pub spot_intensity: (f64, f64),
    /// Range of the multiplicative illumination field.
    pub illumination: (f64, f64),
    pub blur_sigma: (f64, f64),
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            spot_count: (1, 4),
            spot_radius: (2.0, 6.0),
            spot_intensity: (0.1, 0.3),
            illumination: (0.6, 1.0),
            blur_sigma: (0.5, 1.5),
        }
    }
}

impl DegradeParams {
    /// No spots, unit illumination, no blur.
    pub fn identity() -> Self {
        Self {
            spot_count: (0, 0),
            spot_radius: (1.0, 1.0),
            spot_intensity: (0.0, 0.0),
            illumination: (1.0, 1.0),
            blur_sigma: (0.0, 0.0),
        }
    }
}

/// Disk geometry shared by the generator and its tests.
pub fn disk_geometry(h: usize, w: usize) -> (f64, f64, f64) {
    ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0, 0.45 * h.min(w) as f64)
}

struct Walker {
    y: f64,
    x: f64,
    heading: f64,
    width: f64,
    steps: usize,
}

/// Phantom image and its exact vessel mask.
pub fn gen_clean(seed: u64, h: usize, w: usize) -> Result<(Grid2D, BinaryMask)> {
    if h < 32 || w < 32 {
        return Err(Error::Config(format!("phantoms need at least 32x32, got {h}x{w}")));
    }
    let mut s = rng::stream(seed);
    let (cy, cx, radius) = disk_geometry(h, w);
    let background = |r: usize, c: usize| {
        let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
        if d <= radius {
            DISK_VALUE * (1.0 - RADIAL_FALLOFF * (d / radius).powi(2))
        } else {
            FIELD_VALUE
        }
    };

    let mut bits = vec![false; h * w];
    let inner = radius - 1.0;
    let mut stamp = |y: f64, x: f64, width: f64| {
        let rad = width / 2.0;
        let (r0, r1) = ((y - rad).floor().max(0.0) as usize, (y + rad).ceil() as usize);
        let (c0, c1) = ((x - rad).floor().max(0.0) as usize, (x + rad).ceil() as usize);
        for r in r0..=r1.min(h - 1) {
            for c in c0..=c1.min(w - 1) {
                let (dr, dc) = (r as f64 - y, c as f64 - x);
                let dd = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                if dr * dr + dc * dc <= rad * rad && dd < inner {
                    bits[r * w + c] = true;
                }
            }
        }
    };

    let trunk_steps = (1.0 * radius / STEP) as usize;
    let n_trees = uniform_int(&mut s, 2, 4);
    let mut queue: Vec<Walker> = Vec::new();
    for _ in 0..n_trees {
        let phi = uniform(&mut s, 0.0, 2.0 * PI);
        queue.push(Walker {
            y: cy + 0.95 * radius * phi.sin(),
            x: cx + 0.95 * radius * phi.cos(),
            heading: phi + PI + uniform(&mut s, -0.4, 0.4),
            width: 3.0,
            steps: trunk_steps,
        });
    }
    let mut segments = 0;
    while let Some(mut wk) = queue.pop() {
        segments += 1;
        let total = wk.steps.max(1) as f64;
        let start_width = wk.width;
        for i in 0..wk.steps {
            let width = (start_width - (start_width - 1.0) * i as f64 / total).max(1.0);
            // Dense sub-steps keep thin vessels 8-connected.
            for j in 0..4 {
                let f = j as f64 / 4.0;
                stamp(wk.y + f * STEP * wk.heading.sin(), wk.x + f * STEP * wk.heading.cos(), width);
            }
            wk.y += STEP * wk.heading.sin();
            wk.x += STEP * wk.heading.cos();
            wk.heading += 0.25 * rng::normal(&mut s);
            if ((wk.y - cy).powi(2) + (wk.x - cx).powi(2)).sqrt() >= inner {
                break;
            }
            let remaining = wk.steps - i - 1;
            if remaining > 2 && segments + queue.len() < MAX_SEGMENTS && s_bool(&mut s, BRANCH_PROB) {
                let side = if s_bool(&mut s, 0.5) { 1.0 } else { -1.0 };
                queue.push(Walker {
                    y: wk.y,
                    x: wk.x,
                    heading: wk.heading + side * uniform(&mut s, 0.4, 1.0),
                    width: (width - 1.0).max(1.0),
                    steps: remaining * 2 / 3,
                });
            }
        }
    }

    let mut img = Grid2D::from_fn(h, w, background);
    for (v, &b) in img.values_mut().iter_mut().zip(&bits) {
        if b {
            *v = (*v - VESSEL_CONTRAST).max(0.0);
        }
    }
    Ok((img, BinaryMask::from_bools(h, w, &bits)?))
}

fn s_bool(s: &mut Stream, p: f64) -> bool {
    uniform(s, 0.0, 1.0) < p
}

/// Normalised Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders. `sigma` near zero is a
/// no-op.
pub fn gaussian_blur(img: &Grid2D, sigma: f64) -> Grid2D {
    if sigma < 1e-9 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = img.dims();
    let at = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let rows = Grid2D::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * img.get(y, at(x as i64 + i as i64 - r, w)))
            .sum()
    });
    Grid2D::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * rows.get(at(y as i64 + i as i64 - r, h), x))
            .sum()
    })
}

/// Illumination field, then spots, then blur, then clamp to [0, 1].
pub fn degrade(clean: &Grid2D, params: &DegradeParams, seed: u64) -> Grid2D {
    let mut s = rng::stream(seed);
    let (h, w) = clean.dims();
    let (cy, cx, radius) = disk_geometry(h, w);

    // Planar ramp plus an off-centre radial term, rescaled into the range.
    let (lo, hi) = params.illumination;
    let theta = uniform(&mut s, 0.0, 2.0 * PI);
    let radial_weight = uniform(&mut s, 0.0, 1.0);
    let (oy, ox) = (uniform(&mut s, -0.3, 0.3) * radius, uniform(&mut s, -0.3, 0.3) * radius);
    let raw = Grid2D::from_fn(h, w, |r, c| {
        let (dy, dx) = ((r as f64 - cy) / radius, (c as f64 - cx) / radius);
        let planar = dx * theta.cos() + dy * theta.sin();
        let rr = ((r as f64 - cy - oy).powi(2) + (c as f64 - cx - ox).powi(2)).sqrt() / radius;
        planar - radial_weight * rr * rr
    });
    let (mn, mx) = raw
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = mx - mn;
    let mut out = Grid2D::from_fn(h, w, |r, c| {
        let t = if span > 0.0 { (raw.get(r, c) - mn) / span } else { 1.0 };
        clean.get(r, c) * (lo + (hi - lo) * t)
    });

    let n_spots = uniform_int(&mut s, params.spot_count.0, params.spot_count.1);
    for _ in 0..n_spots {
        let (sy, sx) = (uniform(&mut s, 0.0, h as f64 - 1.0), uniform(&mut s, 0.0, w as f64 - 1.0));
        let rad = uniform(&mut s, params.spot_radius.0, params.spot_radius.1);
        let mut amp = uniform(&mut s, params.spot_intensity.0, params.spot_intensity.1);
        if s_bool(&mut s, 0.5) {
            amp = -amp;
        }
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - sy).powi(2) + (c as f64 - sx).powi(2);
                let v = out.get(r, c) + amp * (-d2 / (2.0 * rad * rad)).exp();
                out.set(r, c, v);
            }
        }
    }

    let sigma = uniform(&mut s, params.blur_sigma.0, params.blur_sigma.1);
    gaussian_blur(&out, sigma).map(|v| v.clamp(0.0, 1.0))
}

/// Rounds through `f32` so in-memory values equal what the files hold.
fn as_stored(g: &Grid2D) -> Grid2D {
    g.map(|v| v as f32 as f64)
}

/// Writes unpaired training images and paired evaluation triples under
/// `out_dir`, returning the manifest (also saved as `manifest.tsv`).
///
/// Training images go to `low_NNNN.{pgm,vt}` and `high_NNNN.{pgm,vt}`;
/// evaluation triples go to `eval/`.
pub fn make_dataset(
    n_low: usize,
    n_high: usize,
    n_eval: usize,
    seed: u64,
    size: (usize, usize),
    out_dir: &Path,
) -> Result<Manifest> {
    if n_low == 0 || n_high == 0 {
        return Err(Error::Config("n_low and n_high must be at least 1".into()));
    }
    let (h, w) = size;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let params = DegradeParams::default();
    let mut m = Manifest {
        base: out_dir.to_path_buf(),
        ..Default::default()
    };
    let put = |m: &mut Manifest, role, s: u64, name: String, img: &Grid2D| -> Result<()> {
        write_image(&out_dir.join(format!("{name}.pgm")), img)?;
        write_image(&out_dir.join(format!("{name}.vt")), img)?;
        m.entries.push(ManifestEntry { role, seed: s, path: format!("{name}.vt").into() });
        Ok(())
    };
    for i in 0..n_low {
        let s = derive_seed(seed, TAG_LOW, i as u64);
        let sample = SyntheticSample::generate(s, h, w, &params)?;
        put(&mut m, Role::Low, s, format!("low_{i:04}"), &sample.degraded)?;
    }
    for i in 0..n_high {
        let s = derive_seed(seed, TAG_HIGH, i as u64);
        let (clean, _) = gen_clean(s, h, w)?;
        put(&mut m, Role::High, s, format!("high_{i:04}"), &clean)?;
    }
    if n_eval > 0 {
        let eval_dir = out_dir.join("eval");
        std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    }
    for i in 0..n_eval {
        let s = derive_seed(seed, TAG_EVAL, i as u64);
        let sample = SyntheticSample::generate(s, h, w, &params)?;
        put(&mut m, Role::EvalClean, s, format!("eval/clean_{i:04}"), &sample.clean)?;
        put(&mut m, Role::EvalDegraded, s, format!("eval/degraded_{i:04}"), &sample.degraded)?;
        put(&mut m, Role::EvalMask, s, format!("eval/mask_{i:04}"), sample.mask.grid())?;
        let v = ssim(&as_stored(&sample.clean), &as_stored(&sample.degraded))?;
        m.eval_ssim.insert(s, v);
    }
    m.write(&out_dir.join("manifest.tsv"))?;
    Ok(m)
}
