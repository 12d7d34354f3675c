//! Evaluation battery: full-reference quality, skeleton agreement and
//! fixed-threshold mask scores for enhanced images.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::io::{read_image, Manifest};
use crate::morphology::{binarize, hard_skeletonize, BinaryMask};
use crate::nets::{enhance, Generator, ParamSet, Segmenter};
use crate::perceptual::{psnr, ssim};
use crate::topo::{detect_endpoints, EndpointSource};

/// Segmentation threshold used for every binary score.
pub const EVAL_TAU: f64 = 0.5;

fn same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "masks differ in size: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.grid()
        .values()
        .iter()
        .zip(b.grid().values())
        .filter(|(&x, &y)| x > 0.5 && y > 0.5)
        .count()
}

/// Harmonic mean of skeleton precision `|SK(pred) ∩ gt| / |SK(pred)|` and
/// skeleton sensitivity `|SK(gt) ∩ pred| / |SK(gt)|`, on hard skeletons.
///
/// If either skeleton is empty the score is 1 when both masks are empty and
/// 0 otherwise.
pub fn cldice_metric(pred: &BinaryMask, gt: &BinaryMask, k: usize) -> Result<f64> {
    same_dims(pred, gt)?;
    let sp = hard_skeletonize(pred, k);
    let sg = hard_skeletonize(gt, k);
    if sp.count() == 0 || sg.count() == 0 {
        return Ok(if pred.count() == 0 && gt.count() == 0 { 1.0 } else { 0.0 });
    }
    let tprec = overlap(&sp, gt) as f64 / sp.count() as f64;
    let tsens = overlap(&sg, pred) as f64 / sg.count() as f64;
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionScores {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

/// Pixelwise scores. Empty denominators score 1, so two empty masks agree
/// perfectly.
pub fn confusion_scores(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionScores> {
    same_dims(pred, gt)?;
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.grid().values().iter().zip(gt.grid().values()) {
        match (p > 0.5, g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(ConfusionScores {
        dice: ratio(2 * tp, 2 * tp + fp + fneg),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        specificity: ratio(tn, tn + fp),
    })
}

/// One held-out example.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub id: u64,
    pub clean: Grid2D,
    pub degraded: Grid2D,
    pub mask: BinaryMask,
}

/// Reads the evaluation triples listed in a manifest.
pub fn load_eval_samples(m: &Manifest) -> Result<Vec<EvalSample>> {
    m.eval_triples()?
        .into_iter()
        .map(|(id, c, d, k)| {
            let mask = read_image(&k)?;
            let mask = BinaryMask::new(mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))?;
            Ok(EvalSample { id, clean: read_image(&c)?, degraded: read_image(&d)?, mask })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: u64,
    pub ssim: f64,
    pub psnr: f64,
    pub cldice: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub endpoint_delta: usize,
}

impl EvalRow {
    fn values(&self) -> [f64; 8] {
        [
            self.ssim,
            self.psnr,
            self.cldice,
            self.dice,
            self.precision,
            self.recall,
            self.specificity,
            self.endpoint_delta as f64,
        ]
    }
}

pub const REPORT_HEADER: &str =
    "id\tssim\tpsnr\tclDice\tdice\tprecision\trecall\tspecificity\tendpoint_delta";

/// Per-image rows plus their column means and population standard
/// deviations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean(&self) -> [f64; 8] {
        let n = self.rows.len().max(1) as f64;
        let mut out = [0.0; 8];
        for r in &self.rows {
            for (o, v) in out.iter_mut().zip(r.values()) {
                *o += v;
            }
        }
        out.map(|s| s / n)
    }

    pub fn std(&self) -> [f64; 8] {
        let n = self.rows.len().max(1) as f64;
        let mean = self.mean();
        let mut out = [0.0; 8];
        for r in &self.rows {
            for ((o, v), m) in out.iter_mut().zip(r.values()).zip(mean) {
                *o += (v - m) * (v - m);
            }
        }
        out.map(|s| (s / n).sqrt())
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean()[0]
    }

    pub fn mean_cldice(&self) -> f64 {
        self.mean()[2]
    }

    /// Header, one line per row, then `mean` and `std` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id, r.ssim, r.psnr, r.cldice, r.dice, r.precision, r.recall, r.specificity, r.endpoint_delta
            );
        }
        for (label, v) in [("mean", self.mean()), ("std", self.std())] {
            let cols: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{label}\t{}", cols.join("\t"));
        }
        s
    }

    /// Inverse of [`EvalReport::to_tsv`]. Aggregate lines are recomputed, not
    /// trusted.
    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let bad = |n: usize, why: &str| Error::format(path, format!("line {n}: {why}"));
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(bad(1, "unexpected header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 9 {
                return Err(bad(n, "expected 9 columns"));
            }
            if f[0] == "mean" || f[0] == "std" {
                continue;
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
            rows.push(EvalRow {
                id: f[0].parse().map_err(|_| bad(n, "bad id"))?,
                ssim: num(f[1])?,
                psnr: num(f[2])?,
                cldice: num(f[3])?,
                dice: num(f[4])?,
                precision: num(f[5])?,
                recall: num(f[6])?,
                specificity: num(f[7])?,
                endpoint_delta: f[8].parse().map_err(|_| bad(n, "bad endpoint delta"))?,
            });
        }
        Ok(Self { rows })
    }
}

/// Scores an already enhanced image against its clean reference and mask.
pub fn score_enhanced(
    id: u64,
    clean: &Grid2D,
    enhanced: &Grid2D,
    mask: &BinaryMask,
    seg: &Segmenter,
    k: usize,
) -> Result<EvalRow> {
    let pred = binarize(&seg.segment(enhanced), EVAL_TAU);
    let conf = confusion_scores(&pred, mask)?;
    let ep = |m: &BinaryMask| detect_endpoints(&hard_skeletonize(m, k), EndpointSource::Enhanced).len();
    Ok(EvalRow {
        id,
        ssim: ssim(clean, enhanced)?,
        psnr: psnr(clean, enhanced)?,
        cldice: cldice_metric(&pred, mask, k)?,
        dice: conf.dice,
        precision: conf.precision,
        recall: conf.recall,
        specificity: conf.specificity,
        endpoint_delta: ep(&pred).abs_diff(ep(mask)),
    })
}

/// Runs `gen` on every degraded image and scores the result.
pub fn evaluate<G: Generator>(
    gen: &G,
    params: &ParamSet,
    seg: &Segmenter,
    samples: &[EvalSample],
    k: usize,
) -> Result<EvalReport> {
    let rows = samples
        .iter()
        .map(|s| {
            let out = enhance(gen, params, &s.degraded.to_tensor())?;
            score_enhanced(s.id, &s.clean, &Grid2D::from_tensor(&out)?, &s.mask, seg, k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows })
}
