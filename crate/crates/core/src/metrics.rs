//! Depth evaluation: absolute error, δ threshold accuracy, temporal end-point
//! error with occlusion-aware forward warping, and the Charbonnier + gradient
//! training loss.
//!
//! Metric inputs are raw meters; AE and TEPE are reported in millimeters.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::raster::{DepthFrame, FlowField, Mask, Raster};

/// Default δ thresholds: 1.25 and 1.25².
pub const DEFAULT_TAUS: [f64; 2] = [1.25, 1.5625];

/// Charbonnier epsilon used for training.
pub const CHARBONNIER_EPSILON: f64 = 0.01;

fn selected<'a>(
    d: &'a DepthFrame,
    d_hat: &'a DepthFrame,
    mask: Option<&'a Mask>,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    d.ensure_same_dims(d_hat, "ground truth vs prediction")?;
    if let Some(m) = mask {
        d.ensure_same_dims(m, "depth vs mask")?;
    }
    let count = mask.map_or(d.len(), |m| m.data().iter().filter(|&&v| v).count());
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(d.data()
        .iter()
        .zip(d_hat.data())
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m.data()[*i]))
        .map(|(_, (&a, &b))| (a, b)))
}

/// Mean absolute depth difference over the mask, in millimeters.
pub fn abs_error(d: &DepthFrame, d_hat: &DepthFrame, mask: Option<&Mask>) -> Result<f64> {
    let (sum, n) =
        selected(d, d_hat, mask)?.fold((0.0, 0usize), |(s, n), (a, b)| (s + (a - b).abs(), n + 1));
    Ok(sum / n as f64 * 1000.0)
}

/// Fraction of masked pixels with `max(d/d̂, d̂/d) < tau`.
pub fn delta_metric(
    d: &DepthFrame,
    d_hat: &DepthFrame,
    tau: f64,
    mask: Option<&Mask>,
) -> Result<f64> {
    if !(tau > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "tau must exceed 1, got {tau}"
        )));
    }
    let mut hits = 0usize;
    let mut n = 0usize;
    for (index, (a, b)) in selected(d, d_hat, mask)?.enumerate() {
        for depth in [a, b] {
            if !(depth > 0.0) {
                return Err(Error::NonPositiveDepth { index, depth });
            }
        }
        if (a / b).max(b / a) < tau {
            hits += 1;
        }
        n += 1;
    }
    Ok(hits as f64 / n as f64)
}

/// Forward-splats `values` along `flow` to the nearest integer target pixel.
///
/// Collisions keep the source with the smallest `depth_src` (ties keep the
/// first source in row-major order). Sources with invalid flow or
/// non-positive depth are skipped. Returns the warped values and a mask of
/// target pixels that received a source.
pub fn forward_warp_zbuffer<T: Copy + Default>(
    values: &Raster<T>,
    depth_src: &DepthFrame,
    flow: &FlowField,
) -> Result<(Raster<T>, Mask)> {
    values.ensure_same_dims(depth_src, "values vs depth")?;
    values.ensure_same_dims(&flow.vectors, "values vs flow")?;
    let (w, h) = values.dims();
    let mut out = Raster::filled(w, h, T::default());
    let mut zbuf = Raster::filled(w, h, f64::INFINITY);
    let mut hit = Raster::filled(w, h, false);

    for y in 0..h {
        for x in 0..w {
            let z = *depth_src.get(x, y);
            if !*flow.valid.get(x, y) || !(z.is_finite() && z > 0.0) {
                continue;
            }
            let [fx, fy] = *flow.vectors.get(x, y);
            let tx = (x as f64 + fx).round();
            let ty = (y as f64 + fy).round();
            if !(tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64) {
                continue;
            }
            let (tx, ty) = (tx as usize, ty as usize);
            if z < *zbuf.get(tx, ty) {
                *zbuf.get_mut(tx, ty) = z;
                *out.get_mut(tx, ty) = *values.get(x, y);
                *hit.get_mut(tx, ty) = true;
            }
        }
    }
    Ok((out, hit))
}

/// Temporal end-point error in millimeters, with the pixel count it averaged.
///
/// Both `d_t` and `dhat_t` are warped with the z-buffer of `d_t`, so they
/// share one validity mask; pixels also need a valid `d_t1`.
pub fn tepe_with_count(
    d_t: &DepthFrame,
    d_t1: &DepthFrame,
    dhat_t: &DepthFrame,
    dhat_t1: &DepthFrame,
    flow: &FlowField,
) -> Result<(f64, usize)> {
    d_t.ensure_same_dims(d_t1, "d_t vs d_t1")?;
    d_t.ensure_same_dims(dhat_t, "d_t vs dhat_t")?;
    d_t.ensure_same_dims(dhat_t1, "d_t vs dhat_t1")?;
    let (warped_gt, valid) = forward_warp_zbuffer(d_t, d_t, flow)?;
    let (warped_pred, _) = forward_warp_zbuffer(dhat_t, d_t, flow)?;

    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..d_t.len() {
        let gt_next = d_t1.data()[i];
        if !valid.data()[i] || !(gt_next.is_finite() && gt_next > 0.0) {
            continue;
        }
        let gt_change = warped_gt.data()[i] - gt_next;
        let pred_change = warped_pred.data()[i] - dhat_t1.data()[i];
        sum += (gt_change - pred_change).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyValidRegion);
    }
    Ok((sum / n as f64 * 1000.0, n))
}

/// Temporal end-point error in millimeters.
pub fn tepe(
    d_t: &DepthFrame,
    d_t1: &DepthFrame,
    dhat_t: &DepthFrame,
    dhat_t1: &DepthFrame,
    flow: &FlowField,
) -> Result<f64> {
    tepe_with_count(d_t, d_t1, dhat_t, dhat_t1, flow).map(|(v, _)| v)
}

/// Forward differences along x and y with replicated right/bottom borders.
fn gradients(d: &DepthFrame) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = d.dims();
    let mut gx = Vec::with_capacity(d.len());
    let mut gy = Vec::with_capacity(d.len());
    for y in 0..h {
        for x in 0..w {
            let c = *d.get(x, y);
            gx.push(d.get((x + 1).min(w - 1), y) - c);
            gy.push(d.get(x, (y + 1).min(h - 1)) - c);
        }
    }
    (gx, gy)
}

/// Charbonnier loss plus L1 gradient loss, averaged over pixels and frames.
///
/// Per frame: `mean(√((d − d̂)² + ε²)) + mean|∂x d − ∂x d̂| + mean|∂y d − ∂y d̂|`.
/// Inputs are expected in normalized depth units.
pub fn charbonnier_gradient_loss(
    d_seq: &[DepthFrame],
    dhat_seq: &[DepthFrame],
    epsilon: f64,
) -> Result<f64> {
    if d_seq.len() != dhat_seq.len() {
        return Err(Error::LengthMismatch {
            left: d_seq.len(),
            right: dhat_seq.len(),
        });
    }
    if d_seq.is_empty() {
        return Err(Error::InvalidParameter("empty sequence".into()));
    }
    let mut total = 0.0;
    for (d, d_hat) in d_seq.iter().zip(dhat_seq) {
        d.ensure_same_dims(d_hat, "loss frame")?;
        let n = d.len() as f64;
        let charb: f64 = d
            .data()
            .iter()
            .zip(d_hat.data())
            .map(|(a, b)| ((a - b).powi(2) + epsilon * epsilon).sqrt())
            .sum();
        let (gx, gy) = gradients(d);
        let (hx, hy) = gradients(d_hat);
        let grad: f64 = gx
            .iter()
            .zip(&hx)
            .chain(gy.iter().zip(&hy))
            .map(|(a, b)| (a - b).abs())
            .sum();
        total += charb / n + grad / n;
    }
    Ok(total / d_seq.len() as f64)
}

/// Metrics of one predicted frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub ae_mm: f64,
    /// δ fractions, in the same order as [`MetricReport::taus`].
    pub delta: Vec<f64>,
    /// TEPE between this frame and the next, if evaluated.
    pub tepe_mm: Option<f64>,
    pub tepe_pixels: usize,
    pub pixels: usize,
}

/// Per-frame metrics plus frame-averaged and pixel-pooled aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub taus: Vec<f64>,
    pub frames: Vec<FrameMetrics>,
}

/// Aggregate row of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub ae_mm: f64,
    pub delta: Vec<f64>,
    pub tepe_mm: Option<f64>,
    pub pixels: usize,
}

/// Column name for a δ threshold.
pub fn tau_label(tau: f64) -> String {
    if (tau - 1.5625).abs() < 1e-12 {
        "delta_1.25^2".to_string()
    } else {
        format!("delta_{tau}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    /// Mean of per-frame values (each frame weighted equally).
    pub fn frame_mean(&self) -> Aggregate {
        let n = self.frames.len().max(1) as f64;
        let tepes: Vec<f64> = self.frames.iter().filter_map(|f| f.tepe_mm).collect();
        Aggregate {
            ae_mm: self.frames.iter().map(|f| f.ae_mm).sum::<f64>() / n,
            delta: (0..self.taus.len())
                .map(|i| self.frames.iter().map(|f| f.delta[i]).sum::<f64>() / n)
                .collect(),
            tepe_mm: (!tepes.is_empty()).then(|| tepes.iter().sum::<f64>() / tepes.len() as f64),
            pixels: self.frames.iter().map(|f| f.pixels).sum(),
        }
    }

    /// Values pooled over all pixels of all frames.
    pub fn pooled(&self) -> Aggregate {
        let pixels: usize = self.frames.iter().map(|f| f.pixels).sum();
        let p = pixels.max(1) as f64;
        let tepe_pixels: usize = self
            .frames
            .iter()
            .filter(|f| f.tepe_mm.is_some())
            .map(|f| f.tepe_pixels)
            .sum();
        Aggregate {
            ae_mm: self
                .frames
                .iter()
                .map(|f| f.ae_mm * f.pixels as f64)
                .sum::<f64>()
                / p,
            delta: (0..self.taus.len())
                .map(|i| {
                    self.frames
                        .iter()
                        .map(|f| f.delta[i] * f.pixels as f64)
                        .sum::<f64>()
                        / p
                })
                .collect(),
            tepe_mm: (tepe_pixels > 0).then(|| {
                self.frames
                    .iter()
                    .filter_map(|f| f.tepe_mm.map(|t| t * f.tepe_pixels as f64))
                    .sum::<f64>()
                    / tepe_pixels as f64
            }),
            pixels,
        }
    }

    /// Tab-separated text: header, one row per frame, then `mean` and `pooled`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("frame\tae_mm");
        for &tau in &self.taus {
            out.push('\t');
            out.push_str(&tau_label(tau));
        }
        out.push_str("\ttepe_mm\tpixels\n");
        let mut row = |label: String, ae: f64, delta: &[f64], tepe: Option<f64>, pixels: usize| {
            let _ = write!(out, "{label}\t{ae:.6}");
            for d in delta {
                let _ = write!(out, "\t{d:.6}");
            }
            let _ = writeln!(out, "\t{}\t{pixels}", fmt_opt(tepe));
        };
        for f in &self.frames {
            row(f.frame.to_string(), f.ae_mm, &f.delta, f.tepe_mm, f.pixels);
        }
        let mean = self.frame_mean();
        row(
            "mean".into(),
            mean.ae_mm,
            &mean.delta,
            mean.tepe_mm,
            mean.pixels,
        );
        let pooled = self.pooled();
        row(
            "pooled".into(),
            pooled.ae_mm,
            &pooled.delta,
            pooled.tepe_mm,
            pooled.pixels,
        );
        out
    }

    /// Reads the row whose first column is `label` back from
    /// [`MetricReport::to_text`] output as (field name, value) pairs.
    /// Missing values are `None`.
    pub fn parse_row(text: &str, label: &str) -> Result<Vec<(String, Option<f64>)>> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::format("report", "empty"))?
            .split('\t')
            .collect();
        let line = lines
            .find(|l| l.split('\t').next() == Some(label))
            .ok_or_else(|| Error::format("report", format!("no row {label:?}")))?;
        header
            .iter()
            .zip(line.split('\t'))
            .skip(1)
            .map(|(k, v)| {
                let value = if v == "-" {
                    None
                } else {
                    Some(
                        v.parse::<f64>()
                            .map_err(|e| Error::format("report", e.to_string()))?,
                    )
                };
                Ok((k.to_string(), value))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(w: usize, h: usize, v: &[f64]) -> DepthFrame {
        DepthFrame::from_vec(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn abs_error_examples() {
        let d = DepthFrame::filled(4, 4, 2.0);
        assert_eq!(abs_error(&d, &d, None).unwrap(), 0.0);
        let off = DepthFrame::filled(4, 4, 2.05);
        assert!((abs_error(&d, &off, None).unwrap() - 50.0).abs() < 1e-9);
        let half = DepthFrame::from_fn(4, 4, |x, _| if x < 2 { 2.0 } else { 2.02 });
        assert!((abs_error(&d, &half, None).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn abs_error_respects_mask() {
        let d = frame(2, 1, &[1.0, 1.0]);
        let p = frame(2, 1, &[1.0, 5.0]);
        let m = Mask::from_vec(2, 1, vec![true, false]).unwrap();
        assert_eq!(abs_error(&d, &p, Some(&m)).unwrap(), 0.0);
        let none = Mask::filled(2, 1, false);
        assert!(matches!(
            abs_error(&d, &p, Some(&none)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn delta_examples() {
        let d = DepthFrame::filled(2, 2, 3.0);
        assert_eq!(delta_metric(&d, &d, 1.25, None).unwrap(), 1.0);
        assert_eq!(
            delta_metric(&frame(1, 1, &[1.0]), &frame(1, 1, &[1.3]), 1.25, None).unwrap(),
            0.0
        );
        let half = frame(2, 1, &[1.0, 2.0]);
        let pred = frame(2, 1, &[1.0, 4.0]);
        assert_eq!(delta_metric(&half, &pred, 1.25, None).unwrap(), 0.5);
        assert!(matches!(
            delta_metric(&frame(1, 1, &[0.0]), &frame(1, 1, &[1.0]), 1.25, None),
            Err(Error::NonPositiveDepth { .. })
        ));
    }

    #[test]
    fn warp_identity_under_zero_flow() {
        let v = DepthFrame::from_fn(4, 3, |x, y| (x + 10 * y) as f64 + 1.0);
        let (w, m) = forward_warp_zbuffer(&v, &v, &FlowField::zeros(4, 3)).unwrap();
        assert_eq!(w, v);
        assert!(m.data().iter().all(|&b| b));
    }

    #[test]
    fn warp_collision_keeps_nearer() {
        let values = frame(2, 1, &[10.0, 20.0]);
        let depth = frame(2, 1, &[2.0, 1.0]);
        let mut flow = FlowField::zeros(2, 1);
        *flow.vectors.get_mut(0, 0) = [1.0, 0.0];
        let (w, m) = forward_warp_zbuffer(&values, &depth, &flow).unwrap();
        assert_eq!(*w.get(1, 0), 20.0);
        assert_eq!(m.data(), &[false, true]);

        // swap depths: the moved source is now nearer
        let depth = frame(2, 1, &[1.0, 2.0]);
        let (w, _) = forward_warp_zbuffer(&values, &depth, &flow).unwrap();
        assert_eq!(*w.get(1, 0), 10.0);
    }

    #[test]
    fn warp_uniform_shift() {
        let v = DepthFrame::from_fn(4, 4, |x, y| (1 + x + 4 * y) as f64);
        let (w, m) = forward_warp_zbuffer(&v, &v, &FlowField::uniform(4, 4, 2.0, 0.0)).unwrap();
        for y in 0..4 {
            assert!(!m.get(0, y) && !m.get(1, y));
            assert!(*m.get(2, y) && *m.get(3, y));
            assert_eq!(*w.get(2, y), *v.get(0, y));
            assert_eq!(*w.get(3, y), *v.get(1, y));
        }
    }

    #[test]
    fn tepe_examples() {
        let gt = DepthFrame::filled(4, 4, 2.0);
        let flow = FlowField::zeros(4, 4);
        assert_eq!(tepe(&gt, &gt, &gt, &gt, &flow).unwrap(), 0.0);

        let biased = DepthFrame::filled(4, 4, 2.3);
        assert_eq!(tepe(&gt, &gt, &biased, &biased, &flow).unwrap(), 0.0);

        let later = DepthFrame::filled(4, 4, 2.01);
        assert!((tepe(&gt, &gt, &gt, &later, &flow).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn tepe_empty_region() {
        let gt = DepthFrame::filled(2, 2, 2.0);
        let flow = FlowField::uniform(2, 2, 5.0, 0.0);
        assert!(matches!(
            tepe(&gt, &gt, &gt, &gt, &flow),
            Err(Error::EmptyValidRegion)
        ));
    }

    #[test]
    fn loss_examples() {
        let d = vec![DepthFrame::filled(4, 4, 0.5); 3];
        let l = charbonnier_gradient_loss(&d, &d, CHARBONNIER_EPSILON).unwrap();
        assert!((l - 0.01).abs() < 1e-15);

        let b = 0.2;
        let off = vec![DepthFrame::filled(4, 4, 0.5 + b); 3];
        let l = charbonnier_gradient_loss(&d, &off, CHARBONNIER_EPSILON).unwrap();
        assert!((l - (b * b + 1e-4f64).sqrt()).abs() < 1e-12);

        assert!(matches!(
            charbonnier_gradient_loss(&d, &off[..2], 0.01),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn loss_gradient_term() {
        // a unit ramp in x vs flat: gradient differs by 1 on all but the last column
        let ramp = vec![DepthFrame::from_fn(4, 2, |x, _| x as f64)];
        let flat = vec![DepthFrame::filled(4, 2, 0.0)];
        let l = charbonnier_gradient_loss(&ramp, &flat, 0.0).unwrap();
        let charb = (0.0 + 1.0 + 2.0 + 3.0) / 4.0;
        let grad = 6.0 / 8.0;
        assert!((l - (charb + grad)).abs() < 1e-12);
    }

    #[test]
    fn report_text_round_trip() {
        let report = MetricReport {
            taus: DEFAULT_TAUS.to_vec(),
            frames: vec![
                FrameMetrics {
                    frame: 0,
                    ae_mm: 10.0,
                    delta: vec![0.9, 1.0],
                    tepe_mm: Some(2.0),
                    tepe_pixels: 10,
                    pixels: 100,
                },
                FrameMetrics {
                    frame: 1,
                    ae_mm: 20.0,
                    delta: vec![0.8, 1.0],
                    tepe_mm: None,
                    tepe_pixels: 0,
                    pixels: 300,
                },
            ],
        };
        let text = report.to_text();
        assert!(text.starts_with("frame\tae_mm\tdelta_1.25\tdelta_1.25^2\ttepe_mm\tpixels\n"));
        let mean = MetricReport::parse_row(&text, "mean").unwrap();
        assert_eq!(mean[0], ("ae_mm".into(), Some(15.0)));
        assert_eq!(mean[3], ("tepe_mm".into(), Some(2.0)));
        let pooled = MetricReport::parse_row(&text, "pooled").unwrap();
        assert_eq!(pooled[0].1, Some(17.5));
        assert_eq!(pooled[4].1, Some(400.0));
        let row1 = MetricReport::parse_row(&text, "1").unwrap();
        assert_eq!(row1[3].1, None);
    }

    fn depth_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0.1f64..40.0, n),
                prop::collection::vec(0.1f64..40.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn delta_scale_invariant((a, b) in depth_pair(), lambda in 0.01f64..100.0) {
            let n = a.len();
            let d = frame(n, 1, &a);
            let p = frame(n, 1, &b);
            let ds = d.map(|v| v * lambda);
            let ps = p.map(|v| v * lambda);
            // ratios are preserved up to rounding; skip knife-edge cases
            let near_edge = a.iter().zip(&b).any(|(x, y)| ((x / y).max(y / x) - 1.25).abs() < 1e-9);
            prop_assume!(!near_edge);
            prop_assert_eq!(
                delta_metric(&d, &p, 1.25, None).unwrap(),
                delta_metric(&ds, &ps, 1.25, None).unwrap()
            );
        }

        #[test]
        fn abs_error_metric_axioms(
            (a, b) in depth_pair(),
            shift in prop::collection::vec(-1.0f64..1.0, 40),
        ) {
            let n = a.len();
            let x = frame(n, 1, &a);
            let y = frame(n, 1, &b);
            let z = DepthFrame::from_fn(n, 1, |i, _| a[i] + shift[i]);
            let xy = abs_error(&x, &y, None).unwrap();
            prop_assert!((xy - abs_error(&y, &x, None).unwrap()).abs() < 1e-9);
            prop_assert!(
                abs_error(&x, &z, None).unwrap()
                    <= xy + abs_error(&y, &z, None).unwrap() + 1e-9
            );
        }

        #[test]
        fn warp_never_invents_values(
            vals in prop::collection::vec(0.5f64..10.0, 36),
            flows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 36),
        ) {
            let v = DepthFrame::from_vec(6, 6, vals.clone()).unwrap();
            let flow = FlowField::new(
                Raster::from_vec(6, 6, flows.iter().map(|&(a, b)| [a, b]).collect()).unwrap(),
            );
            let (w, m) = forward_warp_zbuffer(&v, &v, &flow).unwrap();
            for (val, valid) in w.data().iter().zip(m.data()) {
                if *valid {
                    prop_assert!(vals.contains(val));
                }
            }
        }

        #[test]
        fn tepe_bias_invariant_under_flow(
            vals in prop::collection::vec(0.5f64..10.0, 36),
            next in prop::collection::vec(0.5f64..10.0, 36),
            pred in prop::collection::vec(0.5f64..10.0, 36),
            pred_next in prop::collection::vec(0.5f64..10.0, 36),
            dx in -2i32..=2,
            bias in -0.5f64..0.5,
        ) {
            let d_t = DepthFrame::from_vec(6, 6, vals).unwrap();
            let d_t1 = DepthFrame::from_vec(6, 6, next).unwrap();
            let p_t = DepthFrame::from_vec(6, 6, pred).unwrap();
            let p_t1 = DepthFrame::from_vec(6, 6, pred_next).unwrap();
            let flow = FlowField::uniform(6, 6, dx as f64, 0.0);
            let base = tepe(&d_t, &d_t1, &p_t, &p_t1, &flow).unwrap();
            let shifted = tepe(&d_t, &d_t1, &p_t.map(|v| v + bias), &p_t1.map(|v| v + bias), &flow).unwrap();
            prop_assert!((base - shifted).abs() < 1e-6);
        }
    }
}
