// Per-frame candidate predictions jitter under shot noise; carrying the
// previous frame forward along the flow steadies them.

use dtof::dataset::{synth_scene, SceneSpec};
use dtof::metrics::{abs_error, tepe};
use dtof::raster::{DepthFrame, Raster};
use dtof::sensor::{grayscale_radiance, simulate_frame, SensorConfig, ShotNoise};
use dtof::superres::{
    candidate_select_upsample, confidence_from_histogram, temporal_fuse, BilateralParams,
    DEFAULT_SIGMA_D,
};

pub fn run_example() -> dtof::Result<()> {
    let mut spec = SceneSpec::random_desk(64, 64, 6, 1);
    spec.camera.step = [0.0; 3];
    let seq = synth_scene(&spec, 1)?.sequence;
    let config = SensorConfig {
        shot_noise: Some(ShotNoise {
            photon_budget: 300.0,
            rng_seed: 5,
        }),
        ..SensorConfig::default()
    };
    let params = BilateralParams::for_factor(config.downsample_factor);

    let mut single: Vec<DepthFrame> = Vec::new();
    let mut fused: Vec<DepthFrame> = Vec::new();
    let mut prev = None;
    for (i, frame) in seq.frames.iter().enumerate() {
        let dtof = simulate_frame(
            &frame.depth,
            &grayscale_radiance(&frame.rgb),
            &config,
            i as u64,
        )?;
        let grid = dtof.compress(4, 0.0)?;
        let (d, c_select) = candidate_select_upsample(&grid, &frame.rgb, &params)?;
        let c_hist = confidence_from_histogram(&d, &dtof, DEFAULT_SIGMA_D)?;
        let c = Raster::from_vec(
            d.width(),
            d.height(),
            c_select
                .data()
                .iter()
                .zip(c_hist.data())
                .map(|(a, b)| a * b)
                .collect(),
        )?;
        let (fd, fc) = match &prev {
            Some((pd, pc)) => {
                let flow = seq.frames[i - 1].flow.as_ref().expect("synth writes flow");
                temporal_fuse(pd, pc, flow, &d, &c, 0.8)?
            }
            None => (d.clone(), c.clone()),
        };
        prev = Some((fd.clone(), fc));
        single.push(d);
        fused.push(fd);
    }

    let mut t_single = 0.0;
    let mut t_fused = 0.0;
    for i in 0..seq.frames.len() - 1 {
        let (a, b) = (&seq.frames[i], &seq.frames[i + 1]);
        let flow = a.flow.as_ref().expect("synth writes flow");
        t_single += tepe(&a.depth, &b.depth, &single[i], &single[i + 1], flow)?;
        t_fused += tepe(&a.depth, &b.depth, &fused[i], &fused[i + 1], flow)?;
    }
    let n = (seq.frames.len() - 1) as f64;
    let last = seq.frames.len() - 1;
    println!(
        "per-frame: TEPE {:.2} mm, last-frame AE {:.1} mm",
        t_single / n,
        abs_error(&seq.frames[last].depth, &single[last], None)?
    );
    println!(
        "temporal:  TEPE {:.2} mm, last-frame AE {:.1} mm",
        t_fused / n,
        abs_error(&seq.frames[last].depth, &fused[last], None)?
    );
    assert!(t_fused <= t_single);
    Ok(())
}

#[allow(dead_code)]
fn main() -> dtof::Result<()> {
    run_example()
}
