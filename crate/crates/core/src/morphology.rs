//! Soft (min/max-pool) and exact (set) morphological skeletons.
//!
//! Both follow the same truncated Lantuéjoul recurrence with a 3×3 square
//! structuring element restricted to in-bounds cells:
//!
//! ```text
//! R_0 = mask
//! E_i = erode(R_i),  O_i = dilate(E_i),  SK_i = R_i - O_i,  R_{i+1} = E_i
//! SK  = max_i SK_i   (i = 0..=k)
//! ```
//!
//! On {0,1} inputs the soft pooling operators reduce to exact set operations,
//! which is what the exact variant is used to verify.

use crate::diffgraph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Default skeleton depth.
pub const DEFAULT_K: usize = 20;

/// Probability map with every value in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask(Grid2D);

impl SoftMask {
    pub fn new(grid: Grid2D) -> Result<Self> {
        if !grid.is_unit_range() {
            return Err(Error::Contract("soft mask values must lie in [0, 1]".into()));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid2D {
        &self.0
    }

    pub fn into_grid(self) -> Grid2D {
        self.0
    }
}

/// Grid whose values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(Grid2D);

impl BinaryMask {
    pub fn new(grid: Grid2D) -> Result<Self> {
        if grid.values().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("binary mask values must be 0 or 1".into()));
        }
        Ok(Self(grid))
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        let values = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self(Grid2D::new(height, width, values)?))
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self(Grid2D::zeros(height, width))
    }

    pub fn grid(&self) -> &Grid2D {
        &self.0
    }

    pub fn into_grid(self) -> Grid2D {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn is_set(&self, r: usize, c: usize) -> bool {
        self.0.get(r, c) != 0.0
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.0.values().iter().map(|&v| v != 0.0).collect()
    }

    pub fn count(&self) -> usize {
        self.0.values().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn as_soft(&self) -> SoftMask {
        SoftMask(self.0.clone())
    }
}

/// Per-depth skeleton layers and their elementwise-max union.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonStack {
    pub layers: Vec<Grid2D>,
    pub union: Grid2D,
}

fn run_unary(mask: &SoftMask, f: impl Fn(&mut Graph, NodeId) -> Result<NodeId>) -> SoftMask {
    let mut g = Graph::new();
    let x = g.constant(mask.grid().to_tensor());
    let y = f(&mut g, x).expect("pooling a valid raster cannot fail");
    let grid = Grid2D::from_tensor(g.value(y)).expect("pooling keeps the raster shape");
    SoftMask(grid)
}

/// 3×3 min-pool erosion.
pub fn soft_erode(mask: &SoftMask) -> SoftMask {
    run_unary(mask, |g, x| g.minpool3(x))
}

/// Erosion followed by 3×3 max-pool dilation.
pub fn soft_open(mask: &SoftMask) -> SoftMask {
    run_unary(mask, |g, x| {
        let e = g.minpool3(x)?;
        g.maxpool3(e)
    })
}

/// Records the skeleton recurrence on `g` and returns the layer nodes
/// `SK_0..=SK_k` followed by the union node.
pub fn soft_skeleton_layers(g: &mut Graph, mask: NodeId, k: usize) -> Result<(Vec<NodeId>, NodeId)> {
    let mut layers = Vec::with_capacity(k + 1);
    let mut r = mask;
    let mut union: Option<NodeId> = None;
    for _ in 0..=k {
        let e = g.minpool3(r)?;
        let o = g.maxpool3(e)?;
        let d = g.sub(r, o)?;
        let sk = g.relu(d);
        layers.push(sk);
        union = Some(match union {
            None => sk,
            Some(u) => g.max(u, sk)?,
        });
        r = e;
    }
    Ok((layers, union.expect("at least one layer")))
}

/// Differentiable soft skeleton (union node only).
pub fn soft_skeleton(g: &mut Graph, mask: NodeId, k: usize) -> Result<NodeId> {
    soft_skeleton_layers(g, mask, k).map(|(_, u)| u)
}

pub fn soft_skeletonize(mask: &SoftMask, k: usize) -> SkeletonStack {
    let mut g = Graph::new();
    let x = g.constant(mask.grid().to_tensor());
    let (layers, union) = soft_skeleton_layers(&mut g, x, k).expect("valid raster");
    let to_grid = |id: NodeId| Grid2D::from_tensor(g.value(id)).expect("raster shape");
    SkeletonStack {
        layers: layers.into_iter().map(to_grid).collect(),
        union: to_grid(union),
    }
}

fn set_erode(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut all = true;
            'win: for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    if !bits[rr * w + cc] {
                        all = false;
                        break 'win;
                    }
                }
            }
            out[r * w + c] = all;
        }
    }
    out
}

fn set_dilate(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if !bits[r * w + c] {
                continue;
            }
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    out[rr * w + cc] = true;
                }
            }
        }
    }
    out
}

/// Exact set-morphology skeleton truncated at depth `k`.
pub fn hard_skeletonize(mask: &BinaryMask, k: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut r = mask.to_bools();
    let mut union = vec![false; h * w];
    for _ in 0..=k {
        let e = set_erode(&r, h, w);
        let o = set_dilate(&e, h, w);
        for i in 0..h * w {
            if r[i] && !o[i] {
                union[i] = true;
            }
        }
        if !e.iter().any(|&b| b) {
            break;
        }
        r = e;
    }
    BinaryMask::from_bools(h, w, &union).expect("dims come from a valid mask")
}

/// `v >= tau -> 1`, else 0.
pub fn binarize(mask: &SoftMask, tau: f64) -> BinaryMask {
    BinaryMask(mask.grid().map(|v| if v >= tau { 1.0 } else { 0.0 }))
}
