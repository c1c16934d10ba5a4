//! Per-pixel transient histogram math.
//!
//! A dToF pixel time-stamps photon returns into `K` bins of width `t0`.
//! Arrival time maps to depth through `d = Δt·c/2`, so bin `k` covers depths
//! `[k, k+1)·c·t0/2`. Everything here is a pure function of its inputs.

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default number of time bins.
pub const DEFAULT_NUM_BINS: usize = 1024;

/// Default bin width in seconds (~4.05 cm per bin, ~41.4 m range at 1024 bins).
pub const DEFAULT_BIN_WIDTH: f64 = 0.27e-9;

/// Gaussian pulses are truncated at this many standard deviations.
const GAUSSIAN_SUPPORT_SIGMAS: f64 = 3.0;

/// Time discretization of a histogram.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeAxis {
    num_bins: usize,
    bin_width: f64,
}

impl TimeAxis {
    pub fn new(num_bins: usize, bin_width: f64) -> Result<Self> {
        if num_bins < 2 {
            return Err(Error::InvalidParameter(format!(
                "time axis needs at least 2 bins, got {num_bins}"
            )));
        }
        if !(bin_width.is_finite() && bin_width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bin width must be positive, got {bin_width}"
            )));
        }
        Ok(Self {
            num_bins,
            bin_width,
        })
    }

    #[inline]
    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    /// Bin width `t0` in seconds.
    #[inline]
    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    /// Depth covered by one bin, `c·t0/2`.
    #[inline]
    pub fn depth_per_bin(&self) -> f64 {
        SPEED_OF_LIGHT * self.bin_width / 2.0
    }

    /// Exclusive upper bound of representable depth, `K·c·t0/2`.
    #[inline]
    pub fn max_depth(&self) -> f64 {
        self.num_bins as f64 * self.depth_per_bin()
    }

    /// Center depth of bin `k`.
    #[inline]
    pub fn bin_center_depth(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * self.depth_per_bin()
    }

    /// Bin index `floor(2d/(c·t0))`, or an error outside `[0, max_depth)`.
    pub fn bin_of_depth(&self, depth: f64) -> Result<usize> {
        let pos = 2.0 * depth / (SPEED_OF_LIGHT * self.bin_width);
        if !(pos.is_finite() && pos >= 0.0 && pos < self.num_bins as f64) {
            return Err(Error::DepthOutOfRange {
                depth,
                max: self.max_depth(),
            });
        }
        Ok(pos as usize)
    }

    fn describe(&self) -> String {
        format!("K={} t0={:e}s", self.num_bins, self.bin_width)
    }
}

impl Default for TimeAxis {
    fn default() -> Self {
        Self {
            num_bins: DEFAULT_NUM_BINS,
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

/// Temporal shape of the emitted laser pulse. Both shapes integrate to one.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Pulse {
    #[default]
    Delta,
    /// Gaussian with the given full width at half maximum, in seconds.
    Gaussian { fwhm: f64 },
}

impl Pulse {
    pub fn gaussian(fwhm: f64) -> Result<Self> {
        if !(fwhm.is_finite() && fwhm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pulse fwhm must be positive, got {fwhm}"
            )));
        }
        Ok(Pulse::Gaussian { fwhm })
    }

    /// Distributes unit mass returned from `depth` (which falls in bin
    /// `bin`) over the bins of `axis`, calling `deposit(bin, fraction)`. Mass
    /// outside the axis is clamped into the first or last bin.
    fn spread(&self, depth: f64, bin: usize, axis: &TimeAxis, mut deposit: impl FnMut(usize, f64)) {
        match *self {
            Pulse::Delta => deposit(bin, 1.0),
            Pulse::Gaussian { fwhm } => {
                let arrival = 2.0 * depth / SPEED_OF_LIGHT;
                let sigma = fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
                let half = GAUSSIAN_SUPPORT_SIGMAS * sigma;
                let (lo, hi) = (arrival - half, arrival + half);
                let norm = libm::erf(GAUSSIAN_SUPPORT_SIGMAS / std::f64::consts::SQRT_2);
                let cdf = |t: f64| {
                    let z = ((t - arrival) / (sigma * std::f64::consts::SQRT_2)).clamp(
                        -GAUSSIAN_SUPPORT_SIGMAS / std::f64::consts::SQRT_2,
                        GAUSSIAN_SUPPORT_SIGMAS / std::f64::consts::SQRT_2,
                    );
                    0.5 * libm::erf(z)
                };
                let first = (lo / axis.bin_width).floor() as i64;
                let last = (hi / axis.bin_width).floor() as i64;
                for k in first..=last {
                    let a = (k as f64 * axis.bin_width).max(lo);
                    let b = ((k + 1) as f64 * axis.bin_width).min(hi);
                    if b <= a {
                        continue;
                    }
                    let w = (cdf(b) - cdf(a)) / norm;
                    let bin = k.clamp(0, axis.num_bins as i64 - 1) as usize;
                    deposit(bin, w);
                }
            }
        }
    }
}

/// Photon mass per time bin for one dToF pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    axis: TimeAxis,
    mass: Vec<f64>,
}

impl Histogram {
    pub fn new(axis: TimeAxis, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != axis.num_bins {
            return Err(Error::ShapeMismatch(format!(
                "{} masses for {} bins",
                mass.len(),
                axis.num_bins
            )));
        }
        if let Some(bad) = mass.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "histogram bin {bad} holds {}",
                mass[bad]
            )));
        }
        Ok(Self { axis, mass })
    }

    pub fn zeros(axis: TimeAxis) -> Self {
        Self {
            axis,
            mass: vec![0.0; axis.num_bins],
        }
    }

    #[inline]
    pub fn axis(&self) -> &TimeAxis {
        &self.axis
    }

    #[inline]
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn into_mass(self) -> Vec<f64> {
        self.mass
    }
}

/// Location of the strongest return in a histogram.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub bin: usize,
    pub depth: f64,
    pub mass: f64,
}

/// Prefix sums of the histogram masses.
pub fn cumulative(h: &Histogram) -> Vec<f64> {
    h.mass
        .iter()
        .scan(0.0, |acc, m| {
            *acc += m;
            Some(*acc)
        })
        .collect()
}

/// 1-D Wasserstein distance between two histograms on the same axis, in bins.
///
/// Both inputs are normalized to unit mass, then the L1 norm of the difference
/// of their cumulative distributions is returned.
pub fn wasserstein_distance(h: &Histogram, h_hat: &Histogram) -> Result<f64> {
    if h.axis != h_hat.axis {
        return Err(Error::AxisMismatch {
            left: h.axis.describe(),
            right: h_hat.axis.describe(),
        });
    }
    let (total, total_hat) = (h.total_mass(), h_hat.total_mass());
    if total <= 0.0 || total_hat <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let mut acc = 0.0;
    let mut acc_hat = 0.0;
    let mut dist = 0.0;
    for (m, m_hat) in h.mass.iter().zip(&h_hat.mass) {
        acc += m / total;
        acc_hat += m_hat / total_hat;
        dist += (acc - acc_hat).abs();
    }
    Ok(dist)
}

/// Strongest bin; ties resolve to the lowest index (nearest depth).
pub fn peak_detect(h: &Histogram) -> Result<Peak> {
    let (bin, mass) = argmax(&h.mass);
    if mass <= 0.0 {
        return Err(Error::NoSignal);
    }
    Ok(Peak {
        bin,
        depth: h.axis.bin_center_depth(bin),
        mass,
    })
}

fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Zeroes every bin whose mass is not strictly above `noise_floor`.
pub fn threshold_floor(h: &Histogram, noise_floor: f64) -> Histogram {
    Histogram {
        axis: h.axis,
        mass: h
            .mass
            .iter()
            .map(|&m| if m > noise_floor { m } else { 0.0 })
            .collect(),
    }
}

/// Histogram reduced to `2M` variable-width bins plus `M` section peaks.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedHistogram {
    pub axis: TimeAxis,
    /// `2M + 1` non-decreasing bin boundaries into `[0, K]`.
    pub edges: Vec<usize>,
    /// `2M` rebinned masses.
    pub mass: Vec<f64>,
    /// Source bin of each section peak.
    pub peak_bins: Vec<usize>,
    /// Bin-center depth of each section peak, meters.
    pub peak_depths: Vec<f64>,
    /// Source-bin mass at each peak; 0 for sections without signal.
    pub peak_masses: Vec<f64>,
}

impl CompressedHistogram {
    pub fn section_count(&self) -> usize {
        self.peak_depths.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Index of the section peak with the largest mass, if any has signal.
    pub fn dominant_peak(&self) -> Option<usize> {
        let (idx, mass) = argmax(&self.peak_masses);
        (mass > 0.0).then_some(idx)
    }

    /// Expands the rebinned masses back onto the full axis, spreading each
    /// coarse bin uniformly over its source bins.
    pub fn expand(&self) -> Histogram {
        let mut mass = vec![0.0; self.axis.num_bins];
        for (w, m) in self.edges.windows(2).zip(&self.mass) {
            let width = w[1] - w[0];
            if width > 0 {
                let share = m / width as f64;
                mass[w[0]..w[1]].iter_mut().for_each(|v| *v = share);
            }
        }
        Histogram {
            axis: self.axis,
            mass,
        }
    }
}

/// Section boundaries `floor(j·K/M)` for `j = 0..=M`.
fn section_bounds(num_bins: usize, sections: usize) -> Vec<usize> {
    (0..=sections).map(|j| j * num_bins / sections).collect()
}

/// Thresholds `h`, splits it into `sections` equal sections, detects the peak
/// of each, and rebins into `2·sections` bins delimited by section boundaries
/// and peak-bin left edges.
///
/// A peak sitting on its section's left boundary would duplicate that edge;
/// the section midpoint is used as the extra edge instead, so the output always
/// has exactly `2·sections` bins.
pub fn compress(h: &Histogram, sections: usize, noise_floor: f64) -> Result<CompressedHistogram> {
    let num_bins = h.axis.num_bins;
    if sections < 1 || 2 * sections > num_bins {
        return Err(Error::BadSectionCount {
            sections,
            bins: num_bins,
        });
    }
    let clean = threshold_floor(h, noise_floor);
    let bounds = section_bounds(num_bins, sections);

    let mut edges = Vec::with_capacity(2 * sections + 1);
    let mut peak_bins = Vec::with_capacity(sections);
    let mut peak_masses = Vec::with_capacity(sections);
    for w in bounds.windows(2) {
        let (start, end) = (w[0], w[1]);
        let mid = start + (end - start) / 2;
        let (offset, mass) = argmax(&clean.mass[start..end]);
        let (peak, peak_mass) = if mass > 0.0 {
            (start + offset, mass)
        } else {
            (mid, 0.0)
        };
        edges.push(start);
        edges.push(if peak == start { mid } else { peak });
        peak_bins.push(peak);
        peak_masses.push(peak_mass);
    }
    edges.push(num_bins);

    let mass = edges
        .windows(2)
        .map(|w| clean.mass[w[0]..w[1]].iter().sum())
        .collect();
    let peak_depths = peak_bins
        .iter()
        .map(|&b| h.axis.bin_center_depth(b))
        .collect();

    Ok(CompressedHistogram {
        axis: h.axis,
        edges,
        mass,
        peak_bins,
        peak_depths,
        peak_masses,
    })
}

/// Renders a depth/radiance patch into the histogram of the dToF pixel that
/// observes it.
///
/// Each scene point deposits its radiance at round-trip time `2d/c`, spread by
/// the pulse shape. Total mass equals the radiance sum.
pub fn depth_patch_to_histogram(
    depth_patch: &[f64],
    radiance_patch: &[f64],
    pulse: &Pulse,
    axis: &TimeAxis,
) -> Result<Histogram> {
    if depth_patch.len() != radiance_patch.len() {
        return Err(Error::ShapeMismatch(format!(
            "depth patch has {} pixels, radiance patch {}",
            depth_patch.len(),
            radiance_patch.len()
        )));
    }
    let mut mass = vec![0.0; axis.num_bins];
    for (&d, &r) in depth_patch.iter().zip(radiance_patch) {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::InvalidParameter(format!("radiance {r} is not >= 0")));
        }
        let bin = axis.bin_of_depth(d)?;
        if r == 0.0 {
            continue;
        }
        pulse.spread(d, bin, axis, |k, w| mass[k] += r * w);
    }
    Ok(Histogram { axis: *axis, mass })
}
