// Upsample a 4x4 dToF frame of a box scene to 64x64 with each method and
// score the results.

use dtof::dataset::{synth_scene, BoxSpec, CameraPath, PlaneSpec, SceneSpec};
use dtof::metrics::abs_error;
use dtof::sensor::{grayscale_radiance, simulate_frame, SensorConfig};
use dtof::superres::{
    candidate_select_upsample, confidence_from_histogram, guided_bilateral_upsample,
    histogram_rank_refine, upsample_baseline, BilateralParams, UpsampleMethod, DEFAULT_SIGMA_D,
};

fn box_scene() -> SceneSpec {
    SceneSpec {
        width: 64,
        height: 64,
        frame_count: 1,
        hfov_deg: 60.0,
        intrinsics: None,
        clip_range: [0.0, 40.0],
        light_dir: [-0.6, -0.8, -0.5],
        camera: CameraPath {
            start: [0.0; 3],
            step: [0.0; 3],
            look_at: None,
        },
        planes: vec![PlaneSpec {
            point: [0.0, 0.0, 4.0],
            normal: [0.0, 0.0, -1.0],
            albedo: [0.75, 0.72, 0.65],
        }],
        boxes: vec![BoxSpec {
            min: [-0.52, -0.44, 2.2],
            max: [0.66, 0.48, 2.7],
            albedo: [0.8, 0.3, 0.2],
            velocity: [0.0; 3],
        }],
        random_boxes: None,
    }
}

pub fn run_example() -> dtof::Result<()> {
    let frame = &synth_scene(&box_scene(), 0)?.sequence.frames[0];
    let config = SensorConfig::default();
    let s = config.downsample_factor;
    let dtof = simulate_frame(&frame.depth, &grayscale_radiance(&frame.rgb), &config, 0)?;
    let (low, _) = dtof.low_res_depth();
    let params = BilateralParams::for_factor(s);

    let nearest = upsample_baseline(&low, s, UpsampleMethod::Nearest)?;
    let bilinear = upsample_baseline(&low, s, UpsampleMethod::Bilinear)?;
    let bilateral = guided_bilateral_upsample(&low, &frame.rgb, &params, s)?;
    let grid = dtof.compress(4, 0.0)?;
    let (candidate, c_select) = candidate_select_upsample(&grid, &frame.rgb, &params)?;
    let refined = histogram_rank_refine(
        &candidate,
        &bilinear,
        &grayscale_radiance(&frame.rgb),
        &dtof,
    )?;

    let mut scores = Vec::new();
    for (name, pred) in [
        ("nearest", &nearest),
        ("bilinear", &bilinear),
        ("bilateral", &bilateral),
        ("candidate", &candidate),
        ("candidate+refine", &refined),
    ] {
        let ae = abs_error(&frame.depth, pred, None)?;
        let conf = confidence_from_histogram(pred, &dtof, DEFAULT_SIGMA_D)?;
        let mean_conf = conf.data().iter().sum::<f64>() / conf.len() as f64;
        println!("{name:>17}: AE {ae:7.1} mm, histogram confidence {mean_conf:.3}");
        scores.push(ae);
    }
    let mean_select = c_select.data().iter().sum::<f64>() / c_select.len() as f64;
    println!("mean selection confidence {mean_select:.3}");
    assert!(scores[3] < scores[2] && scores[2] < scores[1]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> dtof::Result<()> {
    run_example()
}
