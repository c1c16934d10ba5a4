//! Low-resolution dToF frame simulation from high-resolution depth and radiance.
//!
//! Every dToF pixel observes one disjoint `s×s` block of the high-resolution
//! frame and records the histogram of that block's returns. Two radiance
//! sources are supported: the grayscale-RGB approximation and the physical
//! rendering relation `r = α·max(⟨n, v⟩, 0)/d²` with co-located emitter and
//! receiver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::histogram::{
    compress, depth_patch_to_histogram, peak_detect, CompressedHistogram, Histogram, Pulse,
    TimeAxis,
};
use crate::raster::{DepthFrame, Mask, Raster, RgbFrame, VectorMap};

/// Default downsampling factor between RGB and dToF resolution.
pub const DEFAULT_DOWNSAMPLE: usize = 16;

/// Unit-length tolerance for normals and view directions.
const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SensorMode {
    #[default]
    Histogram,
    Peak,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RadianceMode {
    #[default]
    GrayscaleApprox,
    PhysicalRendering,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShotNoise {
    /// Expected photon count per dToF pixel.
    pub photon_budget: f64,
    pub rng_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorConfig {
    pub downsample_factor: usize,
    pub axis: TimeAxis,
    pub pulse: Pulse,
    pub mode: SensorMode,
    pub radiance_mode: RadianceMode,
    pub shot_noise: Option<ShotNoise>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            downsample_factor: DEFAULT_DOWNSAMPLE,
            axis: TimeAxis::default(),
            pulse: Pulse::Delta,
            mode: SensorMode::Histogram,
            radiance_mode: RadianceMode::GrayscaleApprox,
            shot_noise: None,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor == 0 {
            return Err(Error::InvalidParameter(
                "downsample factor must be >= 1".into(),
            ));
        }
        if let Some(noise) = &self.shot_noise {
            if !(noise.photon_budget.is_finite() && noise.photon_budget > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "photon budget must be positive, got {}",
                    noise.photon_budget
                )));
            }
        }
        Ok(())
    }
}

/// Output of a peak-detecting dToF pixel. A pixel without signal has
/// depth 0 and mass 0.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PeakSample {
    pub depth: f64,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DToFData {
    Histograms(Raster<Histogram>),
    Peaks(Raster<PeakSample>),
}

/// One low-resolution dToF frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DToFFrame {
    pub config: SensorConfig,
    pub data: DToFData,
}

impl DToFFrame {
    pub fn mode(&self) -> SensorMode {
        match self.data {
            DToFData::Histograms(_) => SensorMode::Histogram,
            DToFData::Peaks(_) => SensorMode::Peak,
        }
    }

    /// Low-resolution grid size as (cols, rows).
    pub fn grid_dims(&self) -> (usize, usize) {
        match &self.data {
            DToFData::Histograms(g) => g.dims(),
            DToFData::Peaks(g) => g.dims(),
        }
    }

    pub fn histograms(&self) -> Result<&Raster<Histogram>> {
        match &self.data {
            DToFData::Histograms(g) => Ok(g),
            DToFData::Peaks(_) => Err(Error::WrongMode {
                expected: "histogram-mode",
            }),
        }
    }

    /// Compresses every histogram into `sections` sections.
    pub fn compress(
        &self,
        sections: usize,
        noise_floor: f64,
    ) -> Result<Raster<CompressedHistogram>> {
        let grid = self.histograms()?;
        let cells = grid
            .data()
            .par_iter()
            .map(|h| compress(h, sections, noise_floor))
            .collect::<Result<Vec<_>>>()?;
        Raster::from_vec(grid.width(), grid.height(), cells)
    }

    /// Low-resolution depth and validity mask in either mode.
    pub fn low_res_depth(&self) -> (DepthFrame, Mask) {
        match &self.data {
            DToFData::Histograms(_) => peak_mode_frame(self).expect("histogram mode"),
            DToFData::Peaks(g) => (g.map(|p| p.depth), g.map(|p| p.mass > 0.0)),
        }
    }
}

/// Physical radiance `α·max(⟨n, v⟩, 0)/d²` per pixel.
///
/// `normal` and `view_dir` must be unit vectors; `view_dir` points from the
/// surface toward the sensor.
pub fn radiance_map(
    albedo: &Raster<f64>,
    normal: &VectorMap,
    view_dir: &VectorMap,
    depth: &DepthFrame,
) -> Result<Raster<f64>> {
    albedo.ensure_same_dims(normal, "albedo vs normal")?;
    albedo.ensure_same_dims(view_dir, "albedo vs view direction")?;
    albedo.ensure_same_dims(depth, "albedo vs depth")?;

    let mut out = Vec::with_capacity(albedo.len());
    for (index, (((&a, n), v), &d)) in albedo
        .data()
        .iter()
        .zip(normal.data())
        .zip(view_dir.data())
        .zip(depth.data())
        .enumerate()
    {
        for vec in [n, v] {
            let norm = (vec[0] * vec[0] + vec[1] * vec[1] + vec[2] * vec[2]).sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(Error::NonUnitVector { index, norm });
            }
        }
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::NonPositiveDepth { index, depth: d });
        }
        let cos = n[0] * v[0] + n[1] * v[1] + n[2] * v[2];
        out.push(a * cos.max(0.0) / (d * d));
    }
    Raster::from_vec(albedo.width(), albedo.height(), out)
}

/// Mean of the three color channels.
pub fn grayscale_radiance(rgb: &RgbFrame) -> Raster<f64> {
    rgb.map(|c| (c[0] + c[1] + c[2]) / 3.0)
}

/// Deterministic per-pixel seed.
fn pixel_seed(seed: u64, frame: u64, pixel: u64) -> u64 {
    // splitmix64 over a combined key
    let mut z = seed
        ^ frame.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ pixel.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Replaces each bin with a Poisson draw whose mean is the bin's share of
/// `noise.photon_budget`.
pub fn apply_shot_noise(h: &Histogram, noise: &ShotNoise, frame: u64, pixel: u64) -> Histogram {
    let total = h.total_mass();
    if total <= 0.0 {
        return h.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed(noise.rng_seed, frame, pixel));
    let counts = h
        .mass()
        .iter()
        .map(|&m| {
            let lambda = m * noise.photon_budget / total;
            if lambda > 0.0 {
                Poisson::new(lambda)
                    .map(|p| p.sample(&mut rng))
                    .unwrap_or(0.0)
            } else {
                0.0
            }
        })
        .collect();
    Histogram::new(*h.axis(), counts).expect("poisson counts are finite and non-negative")
}

/// Simulates the dToF frame observing `depth` with per-pixel `radiance`.
///
/// `frame_index` only feeds the shot-noise seed.
pub fn simulate_frame(
    depth: &DepthFrame,
    radiance: &Raster<f64>,
    config: &SensorConfig,
    frame_index: u64,
) -> Result<DToFFrame> {
    config.validate()?;
    depth.ensure_same_dims(radiance, "depth vs radiance")?;
    let s = config.downsample_factor;
    depth.ensure_divisible(s)?;
    let (cols, rows) = (depth.width() / s, depth.height() / s);

    let cells = (0..rows * cols)
        .into_par_iter()
        .map(|cell| {
            let (cx, cy) = (cell % cols, cell / cols);
            let d = depth.block(cx * s, cy * s, s);
            let r = radiance.block(cx * s, cy * s, s);
            let h = depth_patch_to_histogram(&d, &r, &config.pulse, &config.axis)?;
            Ok(match &config.shot_noise {
                Some(noise) => apply_shot_noise(&h, noise, frame_index, cell as u64),
                None => h,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = Raster::from_vec(cols, rows, cells)?;

    let data = match config.mode {
        SensorMode::Histogram => DToFData::Histograms(grid),
        SensorMode::Peak => DToFData::Peaks(grid.map(|h| {
            peak_detect(h)
                .map(|p| PeakSample {
                    depth: p.depth,
                    mass: p.mass,
                })
                .unwrap_or_default()
        })),
    };
    Ok(DToFFrame {
        config: *config,
        data,
    })
}

/// Peak-detection readout of a histogram-mode frame: low-resolution depth
/// plus a mask that is false where the histogram holds no signal.
pub fn peak_mode_frame(frame: &DToFFrame) -> Result<(DepthFrame, Mask)> {
    let grid = frame.histograms()?;
    let peaks = grid.map(|h| peak_detect(h).ok());
    let depth = peaks.map(|p| p.map_or(0.0, |p| p.depth));
    let mask = peaks.map(|p| p.is_some());
    Ok((depth, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histogram::wasserstein_distance;

    fn config(s: usize) -> SensorConfig {
        SensorConfig {
            downsample_factor: s,
            ..Default::default()
        }
    }

    #[test]
    fn radiance_examples() {
        let one = |v: f64| Raster::filled(1, 1, v);
        let vec = |v: [f64; 3]| Raster::filled(1, 1, v);

        let r = radiance_map(
            &one(1.0),
            &vec([1.0, 0.0, 0.0]),
            &vec([0.0, 0.0, -1.0]),
            &one(1.0),
        )
        .unwrap();
        assert_eq!(*r.get(0, 0), 0.0);

        let r = radiance_map(
            &one(1.0),
            &vec([0.0, 0.0, -1.0]),
            &vec([0.0, 0.0, -1.0]),
            &one(1.0),
        )
        .unwrap();
        assert_eq!(*r.get(0, 0), 1.0);

        // ⟨n, v⟩ = 0.8
        let r = radiance_map(
            &one(0.5),
            &vec([0.6, 0.0, -0.8]),
            &vec([0.0, 0.0, -1.0]),
            &one(2.0),
        )
        .unwrap();
        assert!((r.get(0, 0) - 0.1).abs() < 1e-12);

        // facing away
        let r = radiance_map(
            &one(1.0),
            &vec([0.0, 0.0, 1.0]),
            &vec([0.0, 0.0, -1.0]),
            &one(1.0),
        )
        .unwrap();
        assert_eq!(*r.get(0, 0), 0.0);
    }

    #[test]
    fn radiance_errors() {
        let one = |v: f64| Raster::filled(1, 1, v);
        let vec = |v: [f64; 3]| Raster::filled(1, 1, v);
        assert!(matches!(
            radiance_map(
                &one(1.0),
                &vec([0.0, 0.0, -2.0]),
                &vec([0.0, 0.0, -1.0]),
                &one(1.0)
            ),
            Err(Error::NonUnitVector { .. })
        ));
        assert!(matches!(
            radiance_map(
                &one(1.0),
                &vec([0.0, 0.0, -1.0]),
                &vec([0.0, 0.0, -1.0]),
                &one(0.0)
            ),
            Err(Error::NonPositiveDepth { .. })
        ));
    }

    #[test]
    fn grayscale_examples() {
        let rgb =
            RgbFrame::from_vec(3, 1, vec![[1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0; 3]]).unwrap();
        let g = grayscale_radiance(&rgb);
        assert_eq!(g.data(), &[1.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn grid_dimensions() {
        let depth = DepthFrame::filled(64, 64, 2.0);
        let rad = Raster::filled(64, 64, 1.0);
        let f = simulate_frame(&depth, &rad, &config(16), 0).unwrap();
        assert_eq!(f.grid_dims(), (4, 4));
        let g = f.histograms().unwrap();
        assert!(g.data().iter().all(|h| h.mass().len() == 1024));
        let bin = f.config.axis.bin_of_depth(2.0).unwrap();
        assert!(g.data().iter().all(|h| h.mass()[bin] == 256.0));
    }

    #[test]
    fn rejects_indivisible_dims() {
        let depth = DepthFrame::filled(60, 64, 2.0);
        let rad = Raster::filled(60, 64, 1.0);
        assert!(matches!(
            simulate_frame(&depth, &rad, &config(16), 0),
            Err(Error::DimensionNotDivisible { .. })
        ));
    }

    #[test]
    fn rejects_out_of_range_depth() {
        let depth = DepthFrame::filled(16, 16, 100.0);
        let rad = Raster::filled(16, 16, 1.0);
        assert!(matches!(
            simulate_frame(&depth, &rad, &config(16), 0),
            Err(Error::DepthOutOfRange { .. })
        ));
    }

    #[test]
    fn mass_matches_patch_sums() {
        let (w, h, s) = (32, 32, 8);
        let depth = DepthFrame::from_fn(w, h, |x, y| 0.5 + 0.1 * ((x * 7 + y * 3) % 50) as f64);
        let rad = Raster::from_fn(w, h, |x, y| ((x * 13 + y * 5) % 11) as f64 / 10.0);
        let f = simulate_frame(&depth, &rad, &config(s), 0).unwrap();
        let g = f.histograms().unwrap();
        for cy in 0..h / s {
            for cx in 0..w / s {
                let mut expect = 0.0;
                for y in cy * s..(cy + 1) * s {
                    for x in cx * s..(cx + 1) * s {
                        expect += rad.get(x, y);
                    }
                }
                let got = g.get(cx, cy).total_mass();
                assert!((got - expect).abs() <= 1e-6 * expect);
            }
        }
    }

    #[test]
    fn peak_mode_masks_empty_patches() {
        let depth = DepthFrame::filled(32, 16, 3.0);
        let rad = Raster::from_fn(32, 16, |x, _| if x < 16 { 1.0 } else { 0.0 });
        let f = simulate_frame(&depth, &rad, &config(16), 0).unwrap();
        let (d, mask) = peak_mode_frame(&f).unwrap();
        assert_eq!(mask.data(), &[true, false]);
        assert!((d.get(0, 0) - 3.0).abs() <= f.config.axis.depth_per_bin());
        assert_eq!(*d.get(1, 0), 0.0);
    }

    #[test]
    fn peak_mode_picks_brighter_surface() {
        // left half 1.5 m dim, right half 4 m bright
        let depth = DepthFrame::from_fn(16, 16, |x, _| if x < 8 { 1.5 } else { 4.0 });
        let rad = Raster::from_fn(16, 16, |x, _| if x < 8 { 0.3 } else { 0.9 });
        let f = simulate_frame(&depth, &rad, &config(16), 0).unwrap();
        let (d, _) = peak_mode_frame(&f).unwrap();
        assert!((d.get(0, 0) - 4.0).abs() <= f.config.axis.depth_per_bin());
    }

    #[test]
    fn peak_mode_requires_histograms() {
        let depth = DepthFrame::filled(16, 16, 3.0);
        let rad = Raster::filled(16, 16, 1.0);
        let cfg = SensorConfig {
            mode: SensorMode::Peak,
            ..config(16)
        };
        let f = simulate_frame(&depth, &rad, &cfg, 0).unwrap();
        assert!(matches!(peak_mode_frame(&f), Err(Error::WrongMode { .. })));
        let (d, mask) = f.low_res_depth();
        assert!(mask.data()[0]);
        assert!((d.data()[0] - 3.0).abs() <= f.config.axis.depth_per_bin());
    }

    #[test]
    fn simulate_matches_direct_patch_rendering() {
        let (w, h, s) = (32, 16, 8);
        let depth = DepthFrame::from_fn(w, h, |x, y| 1.0 + 0.37 * x as f64 + 0.11 * y as f64);
        let rad = Raster::from_fn(w, h, |x, _| 0.2 + 0.01 * x as f64);
        let cfg = config(s);
        let f = simulate_frame(&depth, &rad, &cfg, 0).unwrap();
        let g = f.histograms().unwrap();
        for cy in 0..h / s {
            for cx in 0..w / s {
                let direct = depth_patch_to_histogram(
                    &depth.block(cx * s, cy * s, s),
                    &rad.block(cx * s, cy * s, s),
                    &cfg.pulse,
                    &cfg.axis,
                )
                .unwrap();
                assert_eq!(wasserstein_distance(g.get(cx, cy), &direct).unwrap(), 0.0);
            }
        }
    }

    fn two_plane_patch() -> (DepthFrame, Raster<f64>) {
        let depth = DepthFrame::from_fn(16, 16, |x, _| if x < 8 { 1.0 } else { 2.0 });
        let rad = Raster::from_fn(16, 16, |x, _| if x < 8 { 0.6 } else { 0.4 });
        (depth, rad)
    }

    #[test]
    fn shot_noise_is_reproducible() {
        let (depth, rad) = two_plane_patch();
        let cfg = SensorConfig {
            shot_noise: Some(ShotNoise {
                photon_budget: 1e4,
                rng_seed: 42,
            }),
            ..config(16)
        };
        let a = simulate_frame(&depth, &rad, &cfg, 3).unwrap();
        let b = simulate_frame(&depth, &rad, &cfg, 3).unwrap();
        let c = simulate_frame(&depth, &rad, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shot_noise_keeps_argmax_on_two_plane_patch() {
        let (depth, rad) = two_plane_patch();
        let clean = simulate_frame(&depth, &rad, &config(16), 0).unwrap();
        let clean_hist = &clean.histograms().unwrap().data()[0];
        let clean_peak = peak_detect(clean_hist).unwrap().bin;

        let mut successes = 0;
        for seed in 0..100 {
            let cfg = SensorConfig {
                shot_noise: Some(ShotNoise {
                    photon_budget: 1e4,
                    rng_seed: seed,
                }),
                ..config(16)
            };
            let noisy = simulate_frame(&depth, &rad, &cfg, 0).unwrap();
            let h = &noisy.histograms().unwrap().data()[0];
            let zero_bins_stay_zero = h
                .mass()
                .iter()
                .zip(clean_hist.mass())
                .all(|(n, c)| *c > 0.0 || *n == 0.0);
            if zero_bins_stay_zero && peak_detect(h).unwrap().bin == clean_peak {
                successes += 1;
            }
        }
        assert!(successes >= 99, "{successes}/100");
    }
}
