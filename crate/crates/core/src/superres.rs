//! Classical RGB-guided super-resolution of dToF frames.
//!
//! Low-resolution samples sit at dToF cell centers: cell `(i, j)` of an
//! `s`-times downsampled grid is centered at high-resolution pixel
//! `((i + 0.5)·s − 0.5, (j + 0.5)·s − 0.5)`. Depth 0 marks an invalid sample.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::histogram::{depth_patch_to_histogram, wasserstein_distance, CompressedHistogram};
use crate::metrics::forward_warp_zbuffer;
use crate::raster::{ConfidenceMap, DepthFrame, FlowField, Raster, RgbFrame};
use crate::sensor::DToFFrame;

/// Default confidence scale for the histogram matching error, in bins.
pub const DEFAULT_SIGMA_D: f64 = 2.0;

/// Support-color refinement passes in [`candidate_select_upsample`].
const REFINEMENT_PASSES: usize = 2;

/// Weight sums below this fall back to nearest-neighbor sampling.
const DEGENERATE_WEIGHT: f64 = 1e-12;

/// Joint bilateral kernel parameters, all in high-resolution pixels except
/// `range_sigma` which is in RGB units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilateralParams {
    pub spatial_sigma: f64,
    pub range_sigma: f64,
    pub window_radius: f64,
}

impl BilateralParams {
    /// Defaults scaled to the downsampling factor.
    pub fn for_factor(s: usize) -> Self {
        Self {
            spatial_sigma: s as f64 / 2.0,
            range_sigma: 0.1,
            window_radius: 1.5 * s as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.spatial_sigma > 0.0
            && self.range_sigma > 0.0
            && self.window_radius > 0.0
            && self.window_radius >= self.spatial_sigma
            && !self.spatial_sigma.is_nan()
            && !self.range_sigma.is_nan()
            && !self.window_radius.is_nan();
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "bilateral params {self:?} must be positive with window_radius >= spatial_sigma"
            )));
        }
        Ok(())
    }

    #[inline]
    fn spatial(&self, dist2: f64) -> f64 {
        (-dist2 / (2.0 * self.spatial_sigma * self.spatial_sigma)).exp()
    }

    #[inline]
    fn range(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        (-color_dist2(a, b) / (2.0 * self.range_sigma * self.range_sigma)).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMethod {
    Nearest,
    Bilinear,
}

#[inline]
fn color_dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[inline]
fn is_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

#[inline]
fn cell_center(index: usize, s: usize) -> f64 {
    (index as f64 + 0.5) * s as f64 - 0.5
}

fn check_factor(lowres: (usize, usize), highres: (usize, usize), s: usize) -> Result<()> {
    if s == 0 || lowres.0 * s != highres.0 || lowres.1 * s != highres.1 {
        return Err(Error::ShapeMismatch(format!(
            "low-res {}x{} times {s} does not give {}x{}",
            lowres.0, lowres.1, highres.0, highres.1
        )));
    }
    Ok(())
}

/// Mean RGB of every `s×s` block.
pub fn cell_mean_colors(rgb: &RgbFrame, s: usize) -> Result<Raster<[f64; 3]>> {
    rgb.ensure_divisible(s)?;
    let (cols, rows) = (rgb.width() / s, rgb.height() / s);
    let n = (s * s) as f64;
    Ok(Raster::from_fn(cols, rows, |i, j| {
        let mut acc = [0.0; 3];
        for c in rgb.block(i * s, j * s, s) {
            acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
        }
        acc.map(|a| a / n)
    }))
}

/// Nearest or bilinear interpolation of cell-centered samples.
///
/// Invalid samples are excluded and the remaining bilinear weights
/// renormalized; pixels with no valid neighbor get depth 0.
pub fn upsample_baseline(
    lowres: &DepthFrame,
    s: usize,
    method: UpsampleMethod,
) -> Result<DepthFrame> {
    if s == 0 {
        return Err(Error::InvalidParameter("factor must be >= 1".into()));
    }
    let (w, h) = lowres.dims();
    Ok(DepthFrame::from_fn(w * s, h * s, |x, y| match method {
        UpsampleMethod::Nearest => {
            let d = *lowres.get(x / s, y / s);
            if is_valid(d) {
                d
            } else {
                0.0
            }
        }
        UpsampleMethod::Bilinear => {
            let coord = |p: usize, n: usize| {
                let u = ((p as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = u.floor() as usize;
                (i0, (i0 + 1).min(n - 1), u - i0 as f64)
            };
            let (x0, x1, fx) = coord(x, w);
            let (y0, y1, fy) = coord(y, h);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (xi, yi, wt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ] {
                let d = *lowres.get(xi, yi);
                if wt > 0.0 && is_valid(d) {
                    acc += wt * d;
                    wsum += wt;
                }
            }
            if wsum > 0.0 {
                acc / wsum
            } else {
                0.0
            }
        }
    }))
}

/// Range of low-resolution indices whose centers may lie within `radius` of `p`.
fn cell_range(p: usize, radius: f64, s: usize, n: usize) -> std::ops::RangeInclusive<usize> {
    let lo = ((p as f64 + 0.5 - radius) / s as f64 - 0.5)
        .floor()
        .max(0.0) as usize;
    let hi = (((p as f64 + 0.5 + radius) / s as f64).ceil() as usize).min(n - 1);
    lo..=hi
}

/// Joint bilateral upsampling guided by `rgb`.
///
/// Each output pixel is the normalized weighted average of valid low-res
/// samples whose cell center lies within `window_radius`, weighted by
/// spatial distance to the center and RGB distance to the cell's mean color.
pub fn guided_bilateral_upsample(
    lowres: &DepthFrame,
    rgb: &RgbFrame,
    params: &BilateralParams,
    s: usize,
) -> Result<DepthFrame> {
    params.validate()?;
    check_factor(lowres.dims(), rgb.dims(), s)?;
    let guide = cell_mean_colors(rgb, s)?;
    let (lw, lh) = lowres.dims();
    let (w, h) = rgb.dims();
    let r2 = params.window_radius * params.window_radius;

    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let (x, y) = (idx % w, idx / w);
            let color = rgb.get(x, y);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for j in cell_range(y, params.window_radius, s, lh) {
                let dy = cell_center(j, s) - y as f64;
                for i in cell_range(x, params.window_radius, s, lw) {
                    let d = *lowres.get(i, j);
                    if !is_valid(d) {
                        continue;
                    }
                    let dx = cell_center(i, s) - x as f64;
                    let dist2 = dx * dx + dy * dy;
                    if dist2 > r2 {
                        continue;
                    }
                    let wt = params.spatial(dist2) * params.range(color, guide.get(i, j));
                    acc += wt * d;
                    wsum += wt;
                }
            }
            if wsum >= DEGENERATE_WEIGHT {
                acc / wsum
            } else {
                let d = *lowres.get(x / s, y / s);
                if is_valid(d) {
                    d
                } else {
                    0.0
                }
            }
        })
        .collect();
    Raster::from_vec(w, h, data)
}

/// One depth hypothesis contributed by a dToF cell.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    depth: f64,
    /// Peak mass as a fraction of the cell's total peak mass.
    weight: f64,
    /// Mean RGB of the pixels currently explained by this candidate.
    color: [f64; 3],
}

fn cell_candidates(c: &CompressedHistogram, fallback_color: [f64; 3]) -> Vec<Candidate> {
    let total: f64 = c.peak_masses.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    c.peak_depths
        .iter()
        .zip(&c.peak_masses)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&depth, &m)| Candidate {
            depth,
            weight: m / total,
            color: fallback_color,
        })
        .collect()
}

/// Index of the candidate nearest in depth to `estimate` (lowest index on ties).
fn nearest_candidate(cands: &[Candidate], estimate: f64) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in cands.iter().enumerate() {
        let e = (c.depth - estimate).abs();
        if e < best.1 {
            best = (k, e);
        }
    }
    best.0
}

/// Picks, for every high-resolution pixel, one of the section-peak depths of
/// its own or the 8 neighboring dToF cells.
///
/// Each candidate is scored by its cell's peak-mass fraction, a spatial
/// Gaussian on the distance to its cell center, and a range Gaussian on the
/// RGB distance to the mean color of the pixels the candidate explains in
/// its own cell. Support colors start from a per-cell color clustering and
/// are then refined from the selected depths.
///
/// Candidates with identical depth pool their scores. Confidence is the
/// winning depth's score over the sum of all scores. Pixels with no
/// candidate get depth 0 and confidence 0.
pub fn candidate_select_upsample(
    compressed: &Raster<CompressedHistogram>,
    rgb: &RgbFrame,
    params: &BilateralParams,
) -> Result<(DepthFrame, ConfidenceMap)> {
    params.validate()?;
    let (cols, rows) = compressed.dims();
    if cols == 0 || rows == 0 || !rgb.width().is_multiple_of(cols) {
        return Err(Error::ShapeMismatch("empty or misaligned dToF grid".into()));
    }
    let s = rgb.width() / cols;
    check_factor((cols, rows), rgb.dims(), s)?;
    let mean_colors = cell_mean_colors(rgb, s)?;

    let mut cells: Vec<Vec<Candidate>> = compressed
        .data()
        .iter()
        .zip(mean_colors.data())
        .map(|(c, &color)| cell_candidates(c, color))
        .collect();

    init_support_colors(&mut cells, rgb, s, cols);
    let (mut estimate, mut confidence) = select(&cells, rgb, params, s, (cols, rows));
    for _ in 1..REFINEMENT_PASSES {
        update_support_colors(&mut cells, &estimate, rgb, s, cols);
        (estimate, confidence) = select(&cells, rgb, params, s, (cols, rows));
    }
    Ok((estimate, confidence))
}

const KMEANS_ITERATIONS: usize = 10;

/// Clusters the cell's pixel colors into one group per candidate and hands
/// the clusters to candidates by rank: the cluster with the largest share of
/// gray radiance goes to the candidate with the largest share of peak mass.
fn init_support_colors(cells: &mut [Vec<Candidate>], rgb: &RgbFrame, s: usize, cols: usize) {
    cells.par_iter_mut().enumerate().for_each(|(idx, cands)| {
        if cands.len() < 2 {
            return;
        }
        let (i, j) = (idx % cols, idx / cols);
        let pixels = rgb.block(i * s, j * s, s);
        let clusters = kmeans_colors(&pixels, cands.len());
        let total: f64 = clusters.iter().map(|c| c.1).sum();
        if total <= 0.0 {
            return;
        }
        let mut by_radiance: Vec<usize> = (0..clusters.len()).collect();
        by_radiance.sort_by(|&a, &b| clusters[b].1.total_cmp(&clusters[a].1).then(a.cmp(&b)));
        let mut by_mass: Vec<usize> = (0..cands.len()).collect();
        by_mass.sort_by(|&a, &b| cands[b].weight.total_cmp(&cands[a].weight).then(a.cmp(&b)));
        for (&k, &c) in by_mass.iter().zip(&by_radiance) {
            cands[k].color = clusters[c].0;
        }
    });
}

/// Lloyd iterations with farthest-point seeding. Returns each centroid and
/// the summed gray radiance of its members.
fn kmeans_colors(pixels: &[[f64; 3]], k: usize) -> Vec<([f64; 3], f64)> {
    let mut centers = Vec::with_capacity(k);
    let mut seed = pixels[0];
    let mean = pixels
        .iter()
        .fold([0.0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]])
        .map(|v| v / pixels.len() as f64);
    // first seed: farthest from the mean
    let mut far = -1.0;
    for p in pixels {
        let d = color_dist2(p, &mean);
        if d > far {
            far = d;
            seed = *p;
        }
    }
    centers.push(seed);
    while centers.len() < k {
        let (mut best, mut far) = (mean, -1.0);
        for p in pixels {
            let d = centers
                .iter()
                .map(|c| color_dist2(p, c))
                .fold(f64::INFINITY, f64::min);
            if d > far {
                far = d;
                best = *p;
            }
        }
        centers.push(best);
    }
    let assign = |centers: &[[f64; 3]], p: &[f64; 3]| {
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let d = color_dist2(p, center);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    };
    for _ in 0..KMEANS_ITERATIONS {
        let mut sums = vec![([0.0; 3], 0usize); k];
        for p in pixels {
            let c = assign(&centers, p);
            sums[c].0.iter_mut().zip(p).for_each(|(a, v)| *a += v);
            sums[c].1 += 1;
        }
        for (center, (sum, n)) in centers.iter_mut().zip(&sums) {
            if *n > 0 {
                *center = sum.map(|v| v / *n as f64);
            }
        }
    }
    let mut radiance = vec![0.0; k];
    for p in pixels {
        radiance[assign(&centers, p)] += (p[0] + p[1] + p[2]) / 3.0;
    }
    centers.into_iter().zip(radiance).collect()
}

/// Re-estimates each candidate's color from the pixels of its cell whose
/// current depth is closest to it. Candidates left without pixels keep their
/// previous color.
fn update_support_colors(
    cells: &mut [Vec<Candidate>],
    estimate: &DepthFrame,
    rgb: &RgbFrame,
    s: usize,
    cols: usize,
) {
    cells.par_iter_mut().enumerate().for_each(|(idx, cands)| {
        if cands.len() < 2 {
            return;
        }
        let (i, j) = (idx % cols, idx / cols);
        let mut sums = vec![([0.0; 3], 0usize); cands.len()];
        for y in j * s..(j + 1) * s {
            for x in i * s..(i + 1) * s {
                let e = *estimate.get(x, y);
                if !is_valid(e) {
                    continue;
                }
                let k = nearest_candidate(cands, e);
                let c = rgb.get(x, y);
                sums[k].0.iter_mut().zip(c).for_each(|(a, v)| *a += v);
                sums[k].1 += 1;
            }
        }
        for (cand, (sum, n)) in cands.iter_mut().zip(sums) {
            if n > 0 {
                cand.color = sum.map(|v| v / n as f64);
            }
        }
    });
}

fn select(
    cells: &[Vec<Candidate>],
    rgb: &RgbFrame,
    params: &BilateralParams,
    s: usize,
    (cols, rows): (usize, usize),
) -> (DepthFrame, ConfidenceMap) {
    let (w, h) = rgb.dims();
    let out: Vec<(f64, f64)> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let (x, y) = (idx % w, idx / w);
            let (ci, cj) = (x / s, y / s);
            let color = rgb.get(x, y);
            // candidates from different cells that share a depth pool their scores
            let mut votes: Vec<(f64, f64)> = Vec::with_capacity(9 * 4);
            for j in cj.saturating_sub(1)..=(cj + 1).min(rows - 1) {
                let dy = cell_center(j, s) - y as f64;
                for i in ci.saturating_sub(1)..=(ci + 1).min(cols - 1) {
                    let dx = cell_center(i, s) - x as f64;
                    let spatial = params.spatial(dx * dx + dy * dy);
                    for cand in &cells[j * cols + i] {
                        let score = cand.weight * spatial * params.range(color, &cand.color);
                        match votes.iter_mut().find(|v| v.0 == cand.depth) {
                            Some(v) => v.1 += score,
                            None => votes.push((cand.depth, score)),
                        }
                    }
                }
            }
            let total: f64 = votes.iter().map(|v| v.1).sum();
            let best = votes
                .iter()
                .fold((0.0, 0.0), |b, v| if v.1 > b.1 { *v } else { b });
            if total > 0.0 {
                (best.0, best.1 / total)
            } else {
                (0.0, 0.0)
            }
        })
        .collect();
    let depth = out.iter().map(|p| p.0).collect();
    let conf = out.iter().map(|p| p.1).collect();
    (
        Raster::from_vec(w, h, depth).expect("sized"),
        Raster::from_vec(w, h, conf).expect("sized"),
    )
}

/// Per-cell Wasserstein distance (bins) between the input histogram and the
/// histogram re-rendered from the predicted patch with uniform radiance.
/// `None` marks cells whose input or prediction carries no signal.
pub fn histogram_matching_error(
    pred: &DepthFrame,
    dtof: &DToFFrame,
) -> Result<Raster<Option<f64>>> {
    let grid = dtof.histograms()?;
    let s = dtof.config.downsample_factor;
    check_factor(grid.dims(), pred.dims(), s)?;
    let axis = dtof.config.axis;
    let top = axis.max_depth() * (1.0 - 1e-12);
    let cols = grid.width();
    let errs = grid
        .data()
        .par_iter()
        .enumerate()
        .map(|(idx, h)| {
            if h.total_mass() <= 0.0 {
                return Ok(None);
            }
            let (i, j) = (idx % cols, idx / cols);
            let patch = pred.block(i * s, j * s, s);
            let radiance: Vec<f64> = patch
                .iter()
                .map(|&d| if is_valid(d) { 1.0 } else { 0.0 })
                .collect();
            let depth: Vec<f64> = patch
                .iter()
                .map(|&d| if is_valid(d) { d.min(top) } else { 0.0 })
                .collect();
            let rendered =
                depth_patch_to_histogram(&depth, &radiance, &dtof.config.pulse, h.axis())?;
            if rendered.total_mass() <= 0.0 {
                return Ok(None);
            }
            wasserstein_distance(h, &rendered).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    Raster::from_vec(grid.width(), grid.height(), errs)
}

/// Confidence `exp(−err/sigma_d)` from the histogram matching error,
/// broadcast over each `s×s` patch. Cells without signal get 0.
pub fn confidence_from_histogram(
    pred: &DepthFrame,
    dtof: &DToFFrame,
    sigma_d: f64,
) -> Result<ConfidenceMap> {
    if !(sigma_d > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma_d must be positive, got {sigma_d}"
        )));
    }
    let errs = histogram_matching_error(pred, dtof)?;
    let s = dtof.config.downsample_factor;
    Ok(ConfidenceMap::from_fn(
        pred.width(),
        pred.height(),
        |x, y| errs.get(x / s, y / s).map_or(0.0, |e| (-e / sigma_d).exp()),
    ))
}

/// Reassigns depths inside each patch so the patch reproduces its input
/// histogram. Valid pixels are ranked by `pred` (ties broken by `tie_break`)
/// and mapped through the inverse of the histogram's cumulative mass, each
/// pixel claiming a share proportional to its `weight`; within a bin the
/// depth is interpolated linearly. Invalid pixels and empty cells keep `pred`.
pub fn histogram_rank_refine(
    pred: &DepthFrame,
    tie_break: &DepthFrame,
    weight: &Raster<f64>,
    dtof: &DToFFrame,
) -> Result<DepthFrame> {
    let grid = dtof.histograms()?;
    let s = dtof.config.downsample_factor;
    check_factor(grid.dims(), pred.dims(), s)?;
    pred.ensure_same_dims(tie_break, "pred vs tie_break")?;
    pred.ensure_same_dims(weight, "pred vs weight")?;
    let dpb = dtof.config.axis.depth_per_bin();
    let cols = grid.width();
    let patches: Vec<Vec<(usize, usize, f64)>> = grid
        .data()
        .par_iter()
        .enumerate()
        .map(|(idx, h)| {
            let total = h.total_mass();
            if total <= 0.0 {
                return Vec::new();
            }
            let (i, j) = (idx % cols, idx / cols);
            let mut px: Vec<(usize, usize, f64, f64, f64)> = Vec::with_capacity(s * s);
            for y in j * s..(j + 1) * s {
                for x in i * s..(i + 1) * s {
                    let d = *pred.get(x, y);
                    if is_valid(d) {
                        px.push((x, y, d, *tie_break.get(x, y), weight.get(x, y).max(0.0)));
                    }
                }
            }
            let wsum: f64 = px.iter().map(|p| p.4).sum();
            if wsum <= 0.0 {
                return Vec::new();
            }
            px.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.3.total_cmp(&b.3)));
            let cdf: Vec<f64> = h
                .mass()
                .iter()
                .scan(0.0, |acc, m| {
                    *acc += m / total;
                    Some(*acc)
                })
                .collect();
            let mut claimed = 0.0;
            px.into_iter()
                .map(|(x, y, _, _, w)| {
                    let q = (claimed + w / 2.0) / wsum;
                    claimed += w;
                    let k = cdf.partition_point(|&c| c < q).min(cdf.len() - 1);
                    let lo = if k == 0 { 0.0 } else { cdf[k - 1] };
                    let frac = if cdf[k] > lo {
                        ((q - lo) / (cdf[k] - lo)).clamp(0.0, 1.0)
                    } else {
                        0.5
                    };
                    (x, y, (k as f64 + frac) * dpb)
                })
                .collect()
        })
        .collect();
    let mut out = pred.clone();
    for (x, y, d) in patches.into_iter().flatten() {
        *out.get_mut(x, y) = d;
    }
    Ok(out)
}

/// Confidence-weighted mean of two depth maps; output confidence is the
/// larger of the two. Pixels with negligible total confidence keep `d1`
/// with confidence 0.
pub fn confidence_fuse(
    d1: &DepthFrame,
    c1: &ConfidenceMap,
    d2: &DepthFrame,
    c2: &ConfidenceMap,
) -> Result<(DepthFrame, ConfidenceMap)> {
    d1.ensure_same_dims(c1, "d1 vs c1")?;
    d1.ensure_same_dims(d2, "d1 vs d2")?;
    d1.ensure_same_dims(c2, "d1 vs c2")?;
    let n = d1.len();
    let mut depth = Vec::with_capacity(n);
    let mut conf = Vec::with_capacity(n);
    for i in 0..n {
        let (a, wa) = (d1.data()[i], c1.data()[i]);
        let (b, wb) = (d2.data()[i], c2.data()[i]);
        let (d, c) = fuse_pixel(a, wa, b, wb);
        depth.push(d);
        conf.push(c);
    }
    Ok((
        Raster::from_vec(d1.width(), d1.height(), depth)?,
        Raster::from_vec(d1.width(), d1.height(), conf)?,
    ))
}

#[inline]
fn fuse_pixel(a: f64, wa: f64, b: f64, wb: f64) -> (f64, f64) {
    if wa + wb < 1e-9 {
        (a, 0.0)
    } else if wb == 0.0 {
        (a, wa)
    } else if wa == 0.0 {
        (b, wb)
    } else if a == b {
        (a, wa.max(wb))
    } else {
        ((wa * a + wb * b) / (wa + wb), wa.max(wb))
    }
}

/// Fuses the previous frame's estimate, forward-warped along
/// `flow_prev_to_cur`, into the current one. The warped confidence is scaled
/// by `decay`; pixels the warp does not reach keep the current estimate.
pub fn temporal_fuse(
    prev_d: &DepthFrame,
    prev_c: &ConfidenceMap,
    flow_prev_to_cur: &FlowField,
    cur_d: &DepthFrame,
    cur_c: &ConfidenceMap,
    decay: f64,
) -> Result<(DepthFrame, ConfidenceMap)> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidParameter(format!(
            "decay {decay} outside [0, 1]"
        )));
    }
    cur_d.ensure_same_dims(cur_c, "cur depth vs confidence")?;
    cur_d.ensure_same_dims(prev_d, "cur vs prev depth")?;
    let (warped_d, valid) = forward_warp_zbuffer(prev_d, prev_d, flow_prev_to_cur)?;
    let (warped_c, _) = forward_warp_zbuffer(prev_c, prev_d, flow_prev_to_cur)?;
    let scaled_c = Raster::from_vec(
        cur_d.width(),
        cur_d.height(),
        warped_c
            .data()
            .iter()
            .zip(valid.data())
            .map(|(&c, &v)| if v { c * decay } else { 0.0 })
            .collect(),
    )?;
    confidence_fuse(cur_d, cur_c, &warped_d, &scaled_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histogram::{compress, TimeAxis};
    use crate::sensor::{grayscale_radiance, simulate_frame, SensorConfig};

    fn rgb_const(w: usize, h: usize, c: [f64; 3]) -> RgbFrame {
        RgbFrame::filled(w, h, c)
    }

    #[test]
    fn baseline_constant_and_identity() {
        let low = DepthFrame::filled(3, 2, 1.7);
        for m in [UpsampleMethod::Nearest, UpsampleMethod::Bilinear] {
            let up = upsample_baseline(&low, 4, m).unwrap();
            assert_eq!(up.dims(), (12, 8));
            assert!(up.data().iter().all(|&v| (v - 1.7).abs() < 1e-12));
        }
        let low = DepthFrame::from_fn(3, 2, |x, y| (x + 3 * y) as f64 + 1.0);
        for m in [UpsampleMethod::Nearest, UpsampleMethod::Bilinear] {
            assert_eq!(upsample_baseline(&low, 1, m).unwrap(), low);
        }
    }

    #[test]
    fn bilinear_hand_example() {
        let low = DepthFrame::from_vec(2, 2, vec![1.0, 3.0, 1.0, 3.0]).unwrap();
        let up = upsample_baseline(&low, 2, UpsampleMethod::Bilinear).unwrap();
        for y in 0..4 {
            let row: Vec<f64> = (0..4).map(|x| *up.get(x, y)).collect();
            assert_eq!(row, vec![1.0, 1.5, 2.5, 3.0]);
        }
    }

    #[test]
    fn bilinear_skips_invalid_samples() {
        let low = DepthFrame::from_vec(2, 1, vec![2.0, 0.0]).unwrap();
        let up = upsample_baseline(&low, 4, UpsampleMethod::Bilinear).unwrap();
        // pixels clamped onto the invalid sample have no valid neighbor
        for y in 0..4 {
            let row: Vec<f64> = (0..8).map(|x| *up.get(x, y)).collect();
            assert_eq!(row, vec![2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 0.0, 0.0]);
        }
    }

    /// Bilateral weights evaluated over every low-res cell.
    fn bilateral_oracle(
        low: &DepthFrame,
        rgb: &RgbFrame,
        p: &BilateralParams,
        s: usize,
    ) -> DepthFrame {
        let guide = cell_mean_colors(rgb, s).unwrap();
        DepthFrame::from_fn(rgb.width(), rgb.height(), |x, y| {
            let mut acc = 0.0;
            let mut ws = 0.0;
            for j in 0..low.height() {
                for i in 0..low.width() {
                    let dx = (i as f64 + 0.5) * s as f64 - 0.5 - x as f64;
                    let dy = (j as f64 + 0.5) * s as f64 - 0.5 - y as f64;
                    let dist2 = dx * dx + dy * dy;
                    if dist2 > p.window_radius * p.window_radius {
                        continue;
                    }
                    let g = guide.get(i, j);
                    let c = rgb.get(x, y);
                    let cd = (0..3).map(|k| (c[k] - g[k]).powi(2)).sum::<f64>();
                    let wt = (-dist2 / (2.0 * p.spatial_sigma.powi(2))).exp()
                        * (-cd / (2.0 * p.range_sigma.powi(2))).exp();
                    acc += wt * low.get(i, j);
                    ws += wt;
                }
            }
            acc / ws
        })
    }

    fn step_scene() -> (DepthFrame, RgbFrame) {
        let low = DepthFrame::from_fn(4, 4, |i, _| if i < 2 { 1.0 } else { 3.0 });
        let rgb = RgbFrame::from_fn(32, 32, |x, _| {
            if x < 16 {
                [0.9, 0.2, 0.1]
            } else {
                [0.1, 0.3, 0.8]
            }
        });
        (low, rgb)
    }

    #[test]
    fn bilateral_constant_scene() {
        let low = DepthFrame::filled(4, 4, 2.5);
        let up = guided_bilateral_upsample(
            &low,
            &rgb_const(32, 32, [0.5; 3]),
            &BilateralParams::for_factor(8),
            8,
        )
        .unwrap();
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn bilateral_matches_brute_force_and_keeps_step() {
        let (low, rgb) = step_scene();
        let params = BilateralParams::for_factor(8);
        let up = guided_bilateral_upsample(&low, &rgb, &params, 8).unwrap();
        let oracle = bilateral_oracle(&low, &rgb, &params, 8);
        for (a, b) in up.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for y in 0..32 {
            // midpoint crossing within one pixel of the true edge at x = 16
            let crossing = (0..32).find(|&x| *up.get(x, y) > 2.0).unwrap();
            assert!((15..=17).contains(&crossing), "row {y}: {crossing}");
        }
    }

    #[test]
    fn bilateral_infinite_range_is_spatial_only() {
        let (low, rgb) = step_scene();
        let params = BilateralParams {
            range_sigma: f64::INFINITY,
            ..BilateralParams::for_factor(8)
        };
        let up = guided_bilateral_upsample(&low, &rgb, &params, 8).unwrap();
        // spatial-only oracle: ignores color entirely
        let flat = rgb_const(32, 32, [0.0; 3]);
        let oracle = bilateral_oracle(
            &low,
            &flat,
            &BilateralParams {
                range_sigma: 1.0,
                ..params
            },
            8,
        );
        for (a, b) in up.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilateral_rejects_bad_params() {
        let (low, rgb) = step_scene();
        let bad = BilateralParams {
            window_radius: 1.0,
            spatial_sigma: 4.0,
            range_sigma: 0.1,
        };
        assert!(guided_bilateral_upsample(&low, &rgb, &bad, 8).is_err());
        assert!(guided_bilateral_upsample(&low, &rgb, &BilateralParams::for_factor(8), 4).is_err());
    }

    fn config(s: usize) -> SensorConfig {
        SensorConfig {
            downsample_factor: s,
            axis: TimeAxis::new(256, 0.5e-9).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn candidate_uniform_patch() {
        let cfg = config(8);
        let depth = DepthFrame::filled(16, 16, 2.0);
        let rgb = rgb_const(16, 16, [0.4; 3]);
        let f = simulate_frame(&depth, &grayscale_radiance(&rgb), &cfg, 0).unwrap();
        let comp = f.compress(4, 0.0).unwrap();
        let (out, conf) =
            candidate_select_upsample(&comp, &rgb, &BilateralParams::for_factor(8)).unwrap();
        let expect = cfg
            .axis
            .bin_center_depth(cfg.axis.bin_of_depth(2.0).unwrap());
        assert!(out.data().iter().all(|&d| d == expect));
        assert!(conf.data().iter().all(|&c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn candidate_empty_cells_are_masked() {
        let cfg = config(8);
        let depth = DepthFrame::filled(8, 8, 2.0);
        let rgb = rgb_const(8, 8, [0.0; 3]);
        let f = simulate_frame(&depth, &grayscale_radiance(&rgb), &cfg, 0).unwrap();
        let comp = f.compress(4, 0.0).unwrap();
        let (out, conf) =
            candidate_select_upsample(&comp, &rgb, &BilateralParams::for_factor(8)).unwrap();
        assert!(out.data().iter().all(|&d| d == 0.0));
        assert!(conf.data().iter().all(|&c| c == 0.0));
    }

    /// 2-cell toy: left cell split red/near | blue/far, right cell all blue/far.
    #[test]
    fn candidate_two_patch_toy_matches_exhaustive_scoring() {
        let s = 8;
        let cfg = config(s);
        let (near, far) = (2.0, 7.0);
        let red = [0.9, 0.1, 0.1];
        let blue = [0.1, 0.2, 0.9];
        let depth = DepthFrame::from_fn(16, 8, |x, _| if x < 4 { near } else { far });
        let rgb = RgbFrame::from_fn(16, 8, |x, _| if x < 4 { red } else { blue });
        let f = simulate_frame(&depth, &grayscale_radiance(&rgb), &cfg, 0).unwrap();
        let comp = f.compress(4, 0.0).unwrap();
        let params = BilateralParams::for_factor(s);
        let (out, _) = candidate_select_upsample(&comp, &rgb, &params).unwrap();

        let snap = |d: f64| cfg.axis.bin_center_depth(cfg.axis.bin_of_depth(d).unwrap());
        // exhaustive oracle: every peak of every cell, support colors from the
        // known surface split
        let mut cands = Vec::new();
        for i in 0..2 {
            let c = comp.get(i, 0);
            let total: f64 = c.peak_masses.iter().sum();
            for (&d, &m) in c.peak_depths.iter().zip(&c.peak_masses) {
                if m > 0.0 {
                    let color = if (d - snap(near)).abs() < 1e-9 {
                        red
                    } else {
                        blue
                    };
                    cands.push((i, d, m / total, color));
                }
            }
        }
        assert_eq!(cands.len(), 3);
        for y in 0..8 {
            for x in 0..16 {
                let c = rgb.get(x, y);
                let mut votes: Vec<(f64, f64)> = Vec::new();
                for (d, score) in cands.iter().map(|&(i, d, wt, col)| {
                    let dx = (i as f64 + 0.5) * s as f64 - 0.5 - x as f64;
                    let dy = 0.5 * s as f64 - 0.5 - y as f64;
                    let cd: f64 = (0..3).map(|k| (c[k] - col[k]).powi(2)).sum();
                    let score = wt
                        * (-(dx * dx + dy * dy) / (2.0 * params.spatial_sigma.powi(2))).exp()
                        * (-cd / (2.0 * params.range_sigma.powi(2))).exp();
                    (d, score)
                }) {
                    match votes.iter_mut().find(|v| v.0 == d) {
                        Some(v) => v.1 += score,
                        None => votes.push((d, score)),
                    }
                }
                let best = votes
                    .iter()
                    .fold((0.0, -1.0), |b, v| if v.1 > b.1 { *v } else { b });
                assert_eq!(*out.get(x, y), best.0, "pixel {x},{y}");
            }
        }
        for y in 0..8 {
            for x in 0..16 {
                let expect = if x < 4 { snap(near) } else { snap(far) };
                assert_eq!(*out.get(x, y), expect);
            }
        }
    }

    #[test]
    fn candidate_output_within_candidate_range() {
        let s = 8;
        let cfg = config(s);
        let depth = DepthFrame::from_fn(32, 32, |x, y| 1.0 + ((x / 5 + y / 7) % 4) as f64 * 0.6);
        let rgb = RgbFrame::from_fn(32, 32, |x, y| {
            let k = ((x / 5 + y / 7) % 4) as f64;
            [0.2 + 0.2 * k, 0.8 - 0.15 * k, 0.5]
        });
        let f = simulate_frame(&depth, &grayscale_radiance(&rgb), &cfg, 0).unwrap();
        let comp = f.compress(4, 0.0).unwrap();
        let (out, conf) =
            candidate_select_upsample(&comp, &rgb, &BilateralParams::for_factor(s)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let (ci, cj) = (x / s, y / s);
                let mut pool = Vec::new();
                for j in cj.saturating_sub(1)..=(cj + 1).min(3) {
                    for i in ci.saturating_sub(1)..=(ci + 1).min(3) {
                        let c = comp.get(i, j);
                        pool.extend(
                            c.peak_depths
                                .iter()
                                .zip(&c.peak_masses)
                                .filter(|p| *p.1 > 0.0)
                                .map(|p| *p.0),
                        );
                    }
                }
                let lo = pool.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = pool.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let d = *out.get(x, y);
                assert!(d >= lo && d <= hi);
                let c = *conf.get(x, y);
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn histogram_confidence_round_trip_and_shift() {
        let s = 8;
        let cfg = config(s);
        let axis = cfg.axis;
        let bin = axis.bin_of_depth(3.0).unwrap();
        let gt = DepthFrame::filled(16, 16, axis.bin_center_depth(bin));
        let rad = Raster::filled(16, 16, 1.0);
        let f = simulate_frame(&gt, &rad, &cfg, 0).unwrap();

        let c = confidence_from_histogram(&gt, &f, DEFAULT_SIGMA_D).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.0));

        let mut prev = 1.0;
        for shift in 1..6 {
            let pred = gt.map(|d| d + shift as f64 * axis.depth_per_bin());
            let c = confidence_from_histogram(&pred, &f, DEFAULT_SIGMA_D).unwrap();
            let expect = (-(shift as f64) / DEFAULT_SIGMA_D).exp();
            assert!(c.data().iter().all(|&v| (v - expect).abs() < 1e-9));
            assert!(expect < prev);
            prev = expect;
        }
    }

    #[test]
    fn histogram_confidence_zero_for_empty_input() {
        let cfg = config(8);
        let gt = DepthFrame::filled(8, 8, 2.0);
        let f = simulate_frame(&gt, &Raster::filled(8, 8, 0.0), &cfg, 0).unwrap();
        let c = confidence_from_histogram(&gt, &f, 2.0).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn histogram_confidence_needs_histograms() {
        let cfg = SensorConfig {
            mode: crate::sensor::SensorMode::Peak,
            ..config(8)
        };
        let gt = DepthFrame::filled(8, 8, 2.0);
        let f = simulate_frame(&gt, &Raster::filled(8, 8, 1.0), &cfg, 0).unwrap();
        assert!(matches!(
            confidence_from_histogram(&gt, &f, 2.0),
            Err(Error::WrongMode { .. })
        ));
    }

    #[test]
    fn rank_refine_hand_example() {
        // 2x2 cell, two pixels in bin 3 and two in bin 7, uniform weight.
        let cfg = config(2);
        let dpb = cfg.axis.depth_per_bin();
        let gt =
            DepthFrame::from_vec(2, 2, vec![3.5 * dpb, 7.5 * dpb, 7.5 * dpb, 3.5 * dpb]).unwrap();
        let w = Raster::filled(2, 2, 1.0);
        let f = simulate_frame(&gt, &w, &cfg, 0).unwrap();
        let pred = DepthFrame::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = histogram_rank_refine(&pred, &pred, &w, &f).unwrap();
        let expect = [3.25, 3.75, 7.25, 7.75].map(|b| b * dpb);
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rank_refine_ties_follow_tie_break() {
        let cfg = config(2);
        let dpb = cfg.axis.depth_per_bin();
        let gt =
            DepthFrame::from_vec(2, 2, vec![3.5 * dpb, 3.5 * dpb, 9.5 * dpb, 9.5 * dpb]).unwrap();
        let w = Raster::filled(2, 2, 1.0);
        let f = simulate_frame(&gt, &w, &cfg, 0).unwrap();
        let flat = DepthFrame::filled(2, 2, 1.0);
        let tie = DepthFrame::from_vec(2, 2, vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        let out = histogram_rank_refine(&flat, &tie, &w, &f).unwrap();
        let bins: Vec<usize> = out.data().iter().map(|d| (d / dpb) as usize).collect();
        assert_eq!(bins, vec![9, 9, 3, 3]);
    }

    #[test]
    fn rank_refine_keeps_empty_cells_and_invalid_pixels() {
        let cfg = config(2);
        let gt = DepthFrame::filled(4, 2, 2.0);
        let w = Raster::from_fn(4, 2, |x, _| if x < 2 { 0.0 } else { 1.0 });
        let f = simulate_frame(&gt, &w, &cfg, 0).unwrap();
        let pred = DepthFrame::from_fn(4, 2, |x, y| if x == 3 && y == 1 { 0.0 } else { 5.0 });
        let out = histogram_rank_refine(&pred, &pred, &w, &f).unwrap();
        assert!(out.data()[..2].iter().all(|&d| d == 5.0));
        assert_eq!(*out.get(3, 1), 0.0);
        let bin = cfg.axis.bin_of_depth(2.0).unwrap();
        for (x, y) in [(2, 0), (3, 0), (2, 1)] {
            assert_eq!(cfg.axis.bin_of_depth(*out.get(x, y)).unwrap(), bin);
        }
    }

    proptest::proptest! {
        #[test]
        fn rank_refine_reproduces_input_histogram(
            depths in proptest::collection::vec(0.5f64..18.0, 16),
            weights in proptest::collection::vec(0.01f64..2.0, 16),
            order in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let cfg = config(4);
            let gt = DepthFrame::from_vec(4, 4, depths).unwrap();
            let w = Raster::from_vec(4, 4, weights).unwrap();
            let f = simulate_frame(&gt, &w, &cfg, 0).unwrap();
            // Any ranking consistent with the truth reproduces the histogram.
            let pred = gt.map(|d| 3.0 * d + 1.0);
            let out = histogram_rank_refine(&pred, &pred, &w, &f).unwrap();
            let h = &f.histograms().unwrap().data()[0];
            let again = depth_patch_to_histogram(out.data(), w.data(), &cfg.pulse, h.axis()).unwrap();
            proptest::prop_assert!(wasserstein_distance(h, &again).unwrap() < 1e-9);
            // An arbitrary ranking is preserved.
            let pred = DepthFrame::from_vec(4, 4, order).unwrap().map(|v| v + 1.0);
            let out = histogram_rank_refine(&pred, &pred, &w, &f).unwrap();
            let mut idx: Vec<usize> = (0..16).collect();
            idx.sort_by(|&a, &b| pred.data()[a].total_cmp(&pred.data()[b]));
            proptest::prop_assert!(idx.windows(2).all(|p| out.data()[p[0]] <= out.data()[p[1]]));
        }
    }

    #[test]
    fn fuse_examples() {
        let d1 = DepthFrame::filled(2, 2, 1.0);
        let d2 = DepthFrame::filled(2, 2, 2.0);
        let zero = ConfidenceMap::filled(2, 2, 0.0);
        let half = ConfidenceMap::filled(2, 2, 0.5);
        let (d, c) = confidence_fuse(&d1, &half, &d2, &zero).unwrap();
        assert_eq!((d, c), (d1.clone(), half.clone()));

        let (d, _) = confidence_fuse(&d1, &half, &d2, &half).unwrap();
        assert!(d.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));

        let (d, c) = confidence_fuse(
            &d1,
            &ConfidenceMap::filled(2, 2, 0.75),
            &d2,
            &ConfidenceMap::filled(2, 2, 0.25),
        )
        .unwrap();
        assert!(d.data().iter().all(|&v| (v - 1.25).abs() < 1e-12));
        assert!(c.data().iter().all(|&v| v == 0.75));

        let (d, c) = confidence_fuse(&d1, &zero, &d2, &zero).unwrap();
        assert_eq!((d, c), (d1, zero));
    }

    #[test]
    fn temporal_examples() {
        let gt = DepthFrame::filled(4, 4, 2.0);
        let one = ConfidenceMap::filled(4, 4, 1.0);
        let flow = FlowField::zeros(4, 4);

        let (d, _) = temporal_fuse(&gt, &one, &flow, &gt, &one, 0.9).unwrap();
        assert_eq!(d, gt);

        let noisy = gt.map(|v| v + 0.05);
        let half = ConfidenceMap::filled(4, 4, 0.3);
        let (d, c) = temporal_fuse(&gt, &one, &flow, &noisy, &half, 0.0).unwrap();
        assert_eq!((d, c), (noisy.clone(), half));

        let (d, _) = temporal_fuse(&gt, &one, &flow, &noisy, &one, 1.0).unwrap();
        for v in d.data() {
            assert!(((v - 2.0) * 1000.0 - 25.0).abs() < 1e-9);
        }

        assert!(temporal_fuse(&gt, &one, &flow, &gt, &one, 1.5).is_err());
    }

    #[test]
    fn temporal_unreached_pixels_pass_through() {
        let prev = DepthFrame::filled(4, 1, 1.0);
        let cur = DepthFrame::filled(4, 1, 2.0);
        let one = ConfidenceMap::filled(4, 1, 1.0);
        let (d, _) = temporal_fuse(
            &prev,
            &one,
            &FlowField::uniform(4, 1, 2.0, 0.0),
            &cur,
            &one,
            1.0,
        )
        .unwrap();
        assert_eq!(d.data(), &[2.0, 2.0, 1.5, 1.5]);
    }

    #[test]
    fn temporal_idempotent_on_static_sequence() {
        let gt = DepthFrame::from_fn(8, 8, |x, y| 1.0 + (x + y) as f64 * 0.1);
        let one = ConfidenceMap::filled(8, 8, 1.0);
        let flow = FlowField::zeros(8, 8);
        let mut state = (gt.clone(), one.clone());
        for _ in 0..5 {
            state = temporal_fuse(&state.0, &state.1, &flow, &gt, &one, 0.8).unwrap();
            for (a, b) in state.0.data().iter().zip(gt.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compress_grid_helper_agrees() {
        let cfg = config(8);
        let depth = DepthFrame::filled(8, 8, 2.0);
        let f = simulate_frame(&depth, &Raster::filled(8, 8, 1.0), &cfg, 0).unwrap();
        let grid = f.compress(4, 0.0).unwrap();
        let direct = compress(&f.histograms().unwrap().data()[0], 4, 0.0).unwrap();
        assert_eq!(grid.data()[0], direct);
    }
}
