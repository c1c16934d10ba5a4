//! Pipeline commands behind the `dtof` binary.
//!
//! Output layout under a run directory:
//!
//! ```text
//! <out>/manifest.toml, rgb/, depth/, ...   synth
//! <out>/dtof/frame_0000.dtfh | .pfm        simulate (+ dtof/run.toml)
//! <out>/pred/frame_0000.pfm, conf_0000.png superres
//! <out>/report.txt                         eval
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_sequence, synth_scene, write_sequence, DepthUnit, LoadOptions, SceneSpec,
};
use crate::error::{Error, Result};
use crate::histogram::{
    compress, peak_detect, wasserstein_distance, Pulse, TimeAxis, SPEED_OF_LIGHT,
};
use crate::io;
use crate::metrics::{
    abs_error, delta_metric, tepe_with_count, FrameMetrics, MetricReport, DEFAULT_TAUS,
};
use crate::raster::{valid_depth_mask, ConfidenceMap, DepthFrame, Raster};
use crate::sensor::{
    grayscale_radiance, radiance_map, simulate_frame, DToFData, DToFFrame, PeakSample,
    RadianceMode, SensorConfig, SensorMode, ShotNoise,
};
use crate::superres::{
    candidate_select_upsample, confidence_from_histogram, guided_bilateral_upsample,
    histogram_rank_refine, temporal_fuse, upsample_baseline, BilateralParams, UpsampleMethod,
};

pub const DTOF_DIR: &str = "dtof";
pub const PRED_DIR: &str = "pred";
pub const REPORT_NAME: &str = "report.txt";
pub const RUN_SUMMARY: &str = "run.toml";

/// Default scene when `synth` gets no spec file.
const DEFAULT_SCENE_DIMS: (usize, usize, usize) = (64, 64, 10);

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Hist,
    Peak,
}

impl FromStr for ModeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hist" => Ok(ModeName::Hist),
            "peak" => Ok(ModeName::Peak),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected hist or peak"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadianceName {
    Grayscale,
    Physical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "nearest")]
    Nearest,
    #[serde(rename = "bilinear")]
    Bilinear,
    #[serde(rename = "bilateral")]
    Bilateral,
    #[serde(rename = "candidate")]
    Candidate,
    #[serde(rename = "candidate+temporal")]
    CandidateTemporal,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Nearest => "nearest",
            Method::Bilinear => "bilinear",
            Method::Bilateral => "bilateral",
            Method::Candidate => "candidate",
            Method::CandidateTemporal => "candidate+temporal",
        }
    }

    fn needs_histograms(&self) -> bool {
        matches!(self, Method::Candidate | Method::CandidateTemporal)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Nearest,
            Method::Bilinear,
            Method::Bilateral,
            Method::Candidate,
            Method::CandidateTemporal,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSection {
    pub k: usize,
    pub t0_ns: f64,
    pub s: usize,
    pub m: usize,
    pub noise_floor: f64,
    /// Expected photons per dToF pixel; absent means noise-free.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub photon_budget: Option<f64>,
    /// Gaussian pulse width; absent means an ideal delta pulse.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pulse_fwhm_ns: Option<f64>,
    pub radiance: RadianceName,
    pub mode: ModeName,
}

impl Default for SensorSection {
    fn default() -> Self {
        Self {
            k: crate::histogram::DEFAULT_NUM_BINS,
            t0_ns: crate::histogram::DEFAULT_BIN_WIDTH * 1e9,
            s: crate::sensor::DEFAULT_DOWNSAMPLE,
            m: 4,
            noise_floor: 0.0,
            photon_budget: None,
            pulse_fwhm_ns: None,
            radiance: RadianceName::Grayscale,
            mode: ModeName::Hist,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilateralSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spatial_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperresSection {
    pub method: Method,
    pub sigma_d: f64,
    pub decay: f64,
    /// Reshape candidate outputs to match each patch's histogram.
    pub refine: bool,
}

impl Default for SuperresSection {
    fn default() -> Self {
        Self {
            method: Method::Candidate,
            sigma_d: crate::superres::DEFAULT_SIGMA_D,
            decay: 0.8,
            refine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub taus: Vec<f64>,
    /// Subset of `ae`, `delta`, `tepe`. AE and δ are always reported; listing
    /// `tepe` makes flow mandatory. Absent: TEPE whenever flow is present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<String>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            taus: DEFAULT_TAUS.to_vec(),
            metrics: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sensor: SensorSection,
    pub bilateral: BilateralSection,
    pub superres: SuperresSection,
    pub eval: EvalSection,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<ModeName>,
    pub method: Option<Method>,
    pub k: Option<usize>,
    pub t0_ns: Option<f64>,
    pub s: Option<usize>,
    pub m: Option<usize>,
    pub noise_floor: Option<f64>,
    pub photon_budget: Option<f64>,
    pub taus: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads `path` (defaults when `None`), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::FileMissing(p.to_path_buf()));
                }
                Self::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        let s = &mut self.sensor;
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.mode {
            s.mode = v;
        }
        if let Some(v) = o.method {
            self.superres.method = v;
        }
        if let Some(v) = o.k {
            s.k = v;
        }
        if let Some(v) = o.t0_ns {
            s.t0_ns = v;
        }
        if let Some(v) = o.s {
            s.s = v;
        }
        if let Some(v) = o.m {
            s.m = v;
        }
        if let Some(v) = o.noise_floor {
            s.noise_floor = v;
        }
        if let Some(v) = o.photon_budget {
            s.photon_budget = Some(v);
        }
        if let Some(v) = &o.taus {
            self.eval.taus = v.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.sensor_config()?.validate()?;
        let s = &self.sensor;
        if s.m < 1 || 2 * s.m > s.k {
            return cfg(format!(
                "m = {} must satisfy 1 <= m and 2m <= k = {}",
                s.m, s.k
            ));
        }
        if !(s.noise_floor >= 0.0) {
            return cfg(format!("noise_floor {} must be >= 0", s.noise_floor));
        }
        self.bilateral_params().validate()?;
        if !(self.superres.sigma_d > 0.0) {
            return cfg("superres.sigma_d must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.superres.decay) {
            return cfg("superres.decay must lie in [0, 1]".into());
        }
        if self.eval.taus.is_empty() || self.eval.taus.iter().any(|&t| !(t > 1.0)) {
            return cfg("eval.taus must be non-empty and > 1".into());
        }
        if let Some(list) = &self.eval.metrics {
            if let Some(bad) = list
                .iter()
                .find(|m| !matches!(m.as_str(), "ae" | "delta" | "tepe"))
            {
                return cfg(format!("unknown metric {bad:?}"));
            }
        }
        Ok(())
    }

    pub fn sensor_config(&self) -> Result<SensorConfig> {
        let s = &self.sensor;
        let axis = TimeAxis::new(s.k, s.t0_ns * 1e-9)?;
        let pulse = match s.pulse_fwhm_ns {
            Some(w) => Pulse::gaussian(w * 1e-9)?,
            None => Pulse::Delta,
        };
        Ok(SensorConfig {
            downsample_factor: s.s,
            axis,
            pulse,
            mode: match s.mode {
                ModeName::Hist => SensorMode::Histogram,
                ModeName::Peak => SensorMode::Peak,
            },
            radiance_mode: match s.radiance {
                RadianceName::Grayscale => RadianceMode::GrayscaleApprox,
                RadianceName::Physical => RadianceMode::PhysicalRendering,
            },
            shot_noise: s.photon_budget.map(|photon_budget| ShotNoise {
                photon_budget,
                rng_seed: self.seed,
            }),
        })
    }

    pub fn bilateral_params(&self) -> BilateralParams {
        let d = BilateralParams::for_factor(self.sensor.s);
        BilateralParams {
            spatial_sigma: self.bilateral.spatial_sigma.unwrap_or(d.spatial_sigma),
            range_sigma: self.bilateral.range_sigma.unwrap_or(d.range_sigma),
            window_radius: self.bilateral.window_radius.unwrap_or(d.window_radius),
        }
    }
}

/// Writes a procedural sequence (float-meter depth) and returns its manifest.
/// Without a spec file a 64×64×10 desk scene is generated from the seed.
pub fn cmd_synth(spec_file: Option<&Path>, out_dir: &Path, config: &RunConfig) -> Result<PathBuf> {
    let spec = match spec_file {
        Some(p) => SceneSpec::read(p)?,
        None => {
            let (w, h, n) = DEFAULT_SCENE_DIMS;
            SceneSpec::random_desk(w, h, n, config.seed)
        }
    };
    let s = config.sensor.s;
    if spec.width % s != 0 || spec.height % s != 0 {
        return Err(Error::InvalidSpec(format!(
            "{}x{} is not divisible by the downsampling factor {s}",
            spec.width, spec.height
        )));
    }
    let out = synth_scene(&spec, config.seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scene_path = out_dir.join("scene.toml");
    fs::write(&scene_path, spec.to_toml()).map_err(|e| Error::io(&scene_path, e))?;
    let manifest = write_sequence(out_dir, &out.sequence, DepthUnit::FloatMeters)?;
    info!(
        "wrote {} frames to {}",
        out.sequence.frames.len(),
        out_dir.display()
    );
    Ok(manifest)
}

fn load_for(manifest: &Path, config: &RunConfig) -> Result<crate::dataset::Sequence> {
    load_sequence(
        manifest,
        &LoadOptions {
            downsample_factor: config.sensor.s,
            ..LoadOptions::default()
        },
    )
}

/// Simulates every frame of the sequence into `<out>/dtof/`.
pub fn cmd_simulate(manifest: &Path, config: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let sensor = config.sensor_config()?;
    let seq = load_for(manifest, config)?;
    if sensor.radiance_mode == RadianceMode::PhysicalRendering {
        for (i, f) in seq.frames.iter().enumerate() {
            for (name, present) in [
                ("normal", f.normal.is_some()),
                ("albedo", f.albedo.is_some()),
            ] {
                if !present {
                    return Err(Error::MissingLayer(format!(
                        "{name} (frame {i}); physical radiance needs normal and albedo layers"
                    )));
                }
            }
        }
    }
    let (w, h) = seq.dims();
    let view = seq.intrinsics.view_directions(w, h);
    let dir = out_dir.join(DTOF_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    for (i, f) in seq.frames.iter().enumerate() {
        let valid = valid_depth_mask(&f.depth);
        let radiance = match sensor.radiance_mode {
            RadianceMode::GrayscaleApprox => grayscale_radiance(&f.rgb),
            RadianceMode::PhysicalRendering => {
                let safe = f
                    .depth
                    .map(|&d| if d.is_finite() && d > 0.0 { d } else { 1.0 });
                let albedo = f.albedo.as_ref().expect("checked");
                let normal = f.normal.as_ref().expect("checked");
                radiance_map(albedo, normal, &view, &safe)?
            }
        };
        // missing depth returns nothing
        let radiance = Raster::from_vec(
            w,
            h,
            radiance
                .data()
                .iter()
                .zip(valid.data())
                .map(|(&r, &v)| if v { r } else { 0.0 })
                .collect(),
        )?;
        let depth = f
            .depth
            .map(|&d| if d.is_finite() && d > 0.0 { d } else { 0.0 });
        let frame = simulate_frame(&depth, &radiance, &sensor, i as u64)?;
        match &frame.data {
            DToFData::Histograms(g) => {
                io::write_dtfh(&dir.join(format!("{}.dtfh", frame_name(i))), g)?
            }
            DToFData::Peaks(_) => {
                let (d, _) = frame.low_res_depth();
                io::write_pfm_gray(&dir.join(format!("{}.pfm", frame_name(i))), &d)?;
            }
        }
    }
    let summary = dir.join(RUN_SUMMARY);
    fs::write(&summary, config.to_toml()).map_err(|e| Error::io(&summary, e))?;
    info!(
        "simulated {} frames into {}",
        seq.frames.len(),
        dir.display()
    );
    Ok(dir)
}

/// Reads the simulated frames in `dtof_dir` with the sensor settings recorded
/// in its run summary.
pub fn read_dtof_dir(dtof_dir: &Path, frames: usize) -> Result<Vec<DToFFrame>> {
    let summary = dtof_dir.join(RUN_SUMMARY);
    if !summary.exists() {
        return Err(Error::FileMissing(summary));
    }
    let run =
        RunConfig::from_toml(&fs::read_to_string(&summary).map_err(|e| Error::io(&summary, e))?)?;
    let sensor = run.sensor_config()?;
    (0..frames)
        .map(|i| {
            let data = match sensor.mode {
                SensorMode::Histogram => DToFData::Histograms(io::read_dtfh(
                    &dtof_dir.join(format!("{}.dtfh", frame_name(i))),
                )?),
                SensorMode::Peak => {
                    let d = io::read_pfm_gray(&dtof_dir.join(format!("{}.pfm", frame_name(i))))?;
                    DToFData::Peaks(d.map(|&depth| PeakSample {
                        depth,
                        mass: if depth > 0.0 { 1.0 } else { 0.0 },
                    }))
                }
            };
            Ok(DToFFrame {
                config: sensor,
                data,
            })
        })
        .collect()
}

/// Upsamples every simulated frame into `<out>/pred/`.
pub fn cmd_superres(
    manifest: &Path,
    dtof_dir: &Path,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<PathBuf> {
    config.validate()?;
    let seq = load_for(manifest, config)?;
    let dtof = read_dtof_dir(dtof_dir, seq.frames.len())?;
    let method = config.superres.method;
    let s = dtof[0].config.downsample_factor;
    let (w, h) = seq.dims();
    for (i, f) in dtof.iter().enumerate() {
        if f.mode() == SensorMode::Peak && method.needs_histograms() {
            return Err(Error::MethodUnavailable {
                method: method.as_str().into(),
                reason: "candidate selection needs histogram-mode input".into(),
            });
        }
        let (cols, rows) = f.grid_dims();
        if cols * s != w || rows * s != h {
            return Err(Error::ShapeMismatch(format!(
                "dToF frame {i} is {cols}x{rows}, sequence is {w}x{h} with factor {s}"
            )));
        }
    }
    let params = config.bilateral_params();
    let temporal = method == Method::CandidateTemporal && {
        if !seq.has_flow() {
            warn!("no flow in sequence; candidate+temporal falls back to per-frame candidate");
        }
        seq.has_flow()
    };

    let dir = out_dir.join(PRED_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut prev: Option<(DepthFrame, ConfidenceMap)> = None;
    for (i, (frame, f)) in seq.frames.iter().zip(&dtof).enumerate() {
        let (depth, conf) = match method {
            Method::Nearest | Method::Bilinear | Method::Bilateral => {
                let (low, _) = f.low_res_depth();
                let depth = match method {
                    Method::Nearest => upsample_baseline(&low, s, UpsampleMethod::Nearest)?,
                    Method::Bilinear => upsample_baseline(&low, s, UpsampleMethod::Bilinear)?,
                    _ => guided_bilateral_upsample(&low, &frame.rgb, &params, s)?,
                };
                (depth, None)
            }
            Method::Candidate | Method::CandidateTemporal => {
                let grid = f.compress(config.sensor.m, config.sensor.noise_floor)?;
                let (mut d, c_select) = candidate_select_upsample(&grid, &frame.rgb, &params)?;
                if config.superres.refine {
                    let (low, _) = f.low_res_depth();
                    let guide = upsample_baseline(&low, s, UpsampleMethod::Bilinear)?;
                    d = histogram_rank_refine(&d, &guide, &grayscale_radiance(&frame.rgb), f)?;
                }
                let c_hist = confidence_from_histogram(&d, f, config.superres.sigma_d)?;
                let c = Raster::from_vec(
                    w,
                    h,
                    c_select
                        .data()
                        .iter()
                        .zip(c_hist.data())
                        .map(|(a, b)| a * b)
                        .collect(),
                )?;
                let (d, c) = match (&prev, temporal) {
                    (Some((pd, pc)), true) => {
                        let flow = seq.frames[i - 1].flow.as_ref().expect("checked");
                        temporal_fuse(pd, pc, flow, &d, &c, config.superres.decay)?
                    }
                    _ => (d, c),
                };
                prev = Some((d.clone(), c.clone()));
                (d, Some(c))
            }
        };
        io::write_pfm_gray(&dir.join(format!("{}.pfm", frame_name(i))), &depth)?;
        if let Some(c) = conf {
            io::write_gray_png(&dir.join(format!("conf_{i:04}.png")), &c)?;
        }
    }
    info!(
        "{} predictions written to {}",
        seq.frames.len(),
        dir.display()
    );
    Ok(dir)
}

/// Scores the predictions in `pred_dir` against the sequence ground truth and
/// writes the report to `out_file`.
pub fn cmd_eval(
    manifest: &Path,
    pred_dir: &Path,
    config: &RunConfig,
    out_file: &Path,
) -> Result<MetricReport> {
    config.validate()?;
    let seq = load_sequence(
        manifest,
        &LoadOptions {
            downsample_factor: 1,
            ..LoadOptions::default()
        },
    )?;
    let tepe_requested = config
        .eval
        .metrics
        .as_ref()
        .is_some_and(|m| m.iter().any(|x| x == "tepe"));
    let with_tepe = match &config.eval.metrics {
        Some(_) if tepe_requested => {
            let n = seq.frames.len();
            if let Some(frame) = seq.frames[..n.saturating_sub(1)]
                .iter()
                .position(|f| f.flow.is_none())
            {
                return Err(Error::MissingFlow { frame });
            }
            true
        }
        Some(_) => false,
        None => seq.frames[..seq.frames.len() - 1]
            .iter()
            .all(|f| f.flow.is_some()),
    };

    let preds = (0..seq.frames.len())
        .map(|i| io::read_pfm_gray(&pred_dir.join(format!("{}.pfm", frame_name(i)))))
        .collect::<Result<Vec<_>>>()?;

    let mut frames = Vec::with_capacity(seq.frames.len());
    for (i, (gt, pred)) in seq.frames.iter().zip(&preds).enumerate() {
        gt.depth
            .ensure_same_dims(pred, "ground truth vs prediction")?;
        let mask = Raster::from_vec(
            pred.width(),
            pred.height(),
            gt.depth
                .data()
                .iter()
                .zip(pred.data())
                .map(|(&a, &b)| a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0)
                .collect(),
        )?;
        let pixels = mask.data().iter().filter(|&&v| v).count();
        let ae_mm = abs_error(&gt.depth, pred, Some(&mask))?;
        let delta = config
            .eval
            .taus
            .iter()
            .map(|&t| delta_metric(&gt.depth, pred, t, Some(&mask)))
            .collect::<Result<Vec<_>>>()?;
        let (tepe_mm, tepe_pixels) = if with_tepe && i + 1 < seq.frames.len() {
            let next = &seq.frames[i + 1];
            match tepe_with_count(
                &gt.depth,
                &next.depth,
                pred,
                &preds[i + 1],
                gt.flow.as_ref().expect("checked"),
            ) {
                Ok((v, n)) => (Some(v), n),
                Err(Error::EmptyValidRegion) => (None, 0),
                Err(e) => return Err(e),
            }
        } else {
            (None, 0)
        };
        frames.push(FrameMetrics {
            frame: i,
            ae_mm,
            delta,
            tepe_mm,
            tepe_pixels,
            pixels,
        });
    }
    let report = MetricReport {
        taus: config.eval.taus.clone(),
        frames,
    };
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out_file, report.to_text()).map_err(|e| Error::io(out_file, e))?;
    Ok(report)
}

/// Describes one dToF pixel of a DTFH file: non-zero bins, peak, compressed
/// form, and the distance to the same pixel of `reference` when given.
pub fn cmd_inspect(
    file: &Path,
    pixel: (usize, usize),
    reference: Option<&Path>,
    config: &RunConfig,
) -> Result<String> {
    let grid = io::read_dtfh(file)?;
    let (x, y) = pixel;
    if x >= grid.width() || y >= grid.height() {
        return Err(Error::InvalidParameter(format!(
            "pixel ({x}, {y}) outside {}x{} grid",
            grid.width(),
            grid.height()
        )));
    }
    let h = grid.get(x, y);
    let axis = h.axis();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "file {}\npixel {x} {y}\nbins {} t0_ns {} depth_per_bin_m {:.6} total_mass {:.6}",
        file.display(),
        axis.num_bins(),
        axis.bin_width() * 1e9,
        axis.bin_width() * SPEED_OF_LIGHT / 2.0,
        h.total_mass()
    );
    let _ = writeln!(out, "bin\tdepth_m\tmass");
    for (k, &m) in h.mass().iter().enumerate().filter(|(_, &m)| m != 0.0) {
        let _ = writeln!(out, "{k}\t{:.6}\t{m:.6}", axis.bin_center_depth(k));
    }
    match peak_detect(h) {
        Ok(p) => {
            let _ = writeln!(
                out,
                "peak bin {} depth_m {:.6} mass {:.6}",
                p.bin, p.depth, p.mass
            );
        }
        Err(e) => {
            let _ = writeln!(out, "peak none ({e})");
        }
    }
    let c = compress(h, config.sensor.m, config.sensor.noise_floor)?;
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.6}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let _ = writeln!(
        out,
        "compressed m {}\nedges {}\nmass {}\npeak_depths_m {}\npeak_masses {}",
        c.section_count(),
        c.edges
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(" "),
        join(&c.mass),
        join(&c.peak_depths),
        join(&c.peak_masses)
    );
    if let Some(r) = reference {
        let rg = io::read_dtfh(r)?;
        rg.ensure_same_dims(&grid, "reference grid")?;
        match wasserstein_distance(h, rg.get(x, y)) {
            Ok(d) => {
                let _ = writeln!(out, "wasserstein_bins {d:.6}");
            }
            Err(e) => {
                let _ = writeln!(out, "wasserstein_bins - ({e})");
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_config() -> RunConfig {
        RunConfig {
            seed: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let c = small_config();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(matches!(
            RunConfig::from_toml("[sensor]\nbins = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("typo = 1\n"),
            Err(Error::Config(_))
        ));
        let c = RunConfig::from_toml("[superres]\nmethod = \"candidate+temporal\"\n").unwrap();
        assert_eq!(c.superres.method, Method::CandidateTemporal);
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "seed = 1\n[sensor]\nk = 512\nm = 8\n").unwrap();
        let o = Overrides {
            k: Some(256),
            seed: Some(9),
            ..Default::default()
        };
        let c = RunConfig::load(Some(&p), &o).unwrap();
        assert_eq!((c.seed, c.sensor.k, c.sensor.m), (9, 256, 8));
        let bad = Overrides { m: Some(200), ..o };
        assert!(RunConfig::load(Some(&p), &bad).is_err());
    }

    #[test]
    fn synth_rejects_indivisible_dims() {
        let dir = tempdir().unwrap();
        let mut spec = SceneSpec::random_desk(60, 60, 1, 0);
        let p = dir.path().join("scene.toml");
        fs::write(&p, spec.to_toml()).unwrap();
        let err = cmd_synth(Some(&p), &dir.path().join("a"), &small_config());
        assert!(matches!(err, Err(Error::InvalidSpec(_))));
        spec.width = 64;
        spec.height = 64;
        fs::write(&p, spec.to_toml()).unwrap();
        cmd_synth(Some(&p), &dir.path().join("b"), &small_config()).unwrap();
    }

    #[test]
    fn pipeline_modes_and_errors() {
        let dir = tempdir().unwrap();
        let spec = SceneSpec::random_desk(32, 32, 3, 1);
        let sp = dir.path().join("scene.toml");
        fs::write(&sp, spec.to_toml()).unwrap();
        let mut cfg = small_config();
        cfg.sensor.s = 16;
        let m = cmd_synth(Some(&sp), dir.path(), &cfg).unwrap();

        // DTFH payload size
        let dtof = cmd_simulate(&m, &cfg, dir.path()).unwrap();
        let bytes = fs::read(dtof.join("frame_0000.dtfh")).unwrap();
        assert_eq!(bytes.len(), 28 + 2 * 2 * 1024 * 4);

        let pred = cmd_superres(&m, &dtof, &cfg, dir.path()).unwrap();
        let report = cmd_eval(&m, &pred, &cfg, &dir.path().join(REPORT_NAME)).unwrap();
        assert_eq!(report.frames.len(), 3);
        assert!(report.frames[0].tepe_mm.is_some());

        // peak mode: bilinear runs, candidate refuses
        let mut peak = cfg.clone();
        peak.sensor.mode = ModeName::Peak;
        let pdir = dir.path().join("peak");
        let dtof = cmd_simulate(&m, &peak, &pdir).unwrap();
        peak.superres.method = Method::Bilinear;
        cmd_superres(&m, &dtof, &peak, &pdir).unwrap();
        peak.superres.method = Method::Candidate;
        assert!(matches!(
            cmd_superres(&m, &dtof, &peak, &pdir),
            Err(Error::MethodUnavailable { .. })
        ));

        // physical radiance without normals
        let mut manifest = crate::dataset::SequenceManifest::read(&m).unwrap();
        for f in &mut manifest.frames {
            f.normal = None;
            f.flow = None;
        }
        let m2 = dir.path().join("rgb_only.toml");
        fs::write(&m2, manifest.to_toml()).unwrap();
        let mut phys = cfg.clone();
        phys.sensor.radiance = RadianceName::Physical;
        assert!(matches!(
            cmd_simulate(&m2, &phys, &dir.path().join("phys")),
            Err(Error::MissingLayer(_))
        ));
        cmd_simulate(&m2, &cfg, &dir.path().join("gray")).unwrap();

        // flow missing: temporal falls back, tepe explicitly requested fails
        let mut temporal = cfg.clone();
        temporal.superres.method = Method::CandidateTemporal;
        let tdir = dir.path().join("t");
        let dtof = cmd_simulate(&m2, &temporal, &tdir).unwrap();
        let pred = cmd_superres(&m2, &dtof, &temporal, &tdir).unwrap();
        let r = cmd_eval(&m2, &pred, &temporal, &tdir.join(REPORT_NAME)).unwrap();
        assert!(r.frames.iter().all(|f| f.tepe_mm.is_none()));
        temporal.eval.metrics = Some(vec!["ae".into(), "tepe".into()]);
        assert!(matches!(
            cmd_eval(&m2, &pred, &temporal, &tdir.join(REPORT_NAME)),
            Err(Error::MissingFlow { frame: 0 })
        ));
    }

    #[test]
    fn inspect_prints_peak_and_distance() {
        let dir = tempdir().unwrap();
        let axis = TimeAxis::new(64, 1e-9).unwrap();
        let mut mass = vec![0.0; 64];
        mass[10] = 2.0;
        let g = Raster::filled(
            1,
            1,
            crate::histogram::Histogram::new(axis, mass.clone()).unwrap(),
        );
        mass[10] = 0.0;
        mass[13] = 2.0;
        let r = Raster::filled(1, 1, crate::histogram::Histogram::new(axis, mass).unwrap());
        io::write_dtfh(&dir.path().join("a.dtfh"), &g).unwrap();
        io::write_dtfh(&dir.path().join("b.dtfh"), &r).unwrap();
        let mut cfg = RunConfig::default();
        cfg.sensor.k = 64;
        let text = cmd_inspect(
            &dir.path().join("a.dtfh"),
            (0, 0),
            Some(&dir.path().join("b.dtfh")),
            &cfg,
        )
        .unwrap();
        assert!(text.contains("peak bin 10"));
        assert!(text.contains("wasserstein_bins 3.000000"));
        assert!(cmd_inspect(&dir.path().join("a.dtfh"), (1, 0), None, &cfg).is_err());
    }
}
