// Depth metrics on hand-made predictions: AE, δ thresholds, TEPE under a
// moving camera, z-buffer warping and the training loss.

use dtof::dataset::{synth_scene, SceneSpec};
use dtof::metrics::{
    abs_error, charbonnier_gradient_loss, delta_metric, forward_warp_zbuffer, tepe,
};

pub fn run_example() -> dtof::Result<()> {
    let spec = SceneSpec::random_desk(64, 64, 2, 4);
    let seq = synth_scene(&spec, 4)?.sequence;
    let (f0, f1) = (&seq.frames[0], &seq.frames[1]);
    let flow = f0.flow.as_ref().expect("synth writes flow");

    // A prediction 3% too far everywhere.
    let biased0 = f0.depth.map(|d| d * 1.03);
    let biased1 = f1.depth.map(|d| d * 1.03);
    println!("AE      {:.2} mm", abs_error(&f0.depth, &biased0, None)?);
    for tau in [1.02, 1.25] {
        println!(
            "δ<{tau}  {:.3}",
            delta_metric(&f0.depth, &biased0, tau, None)?
        );
    }
    // Scale errors change between frames as depth changes, so TEPE is small
    // but not zero; a constant offset would give exactly 0.
    let offset0 = f0.depth.map(|d| d + 0.05);
    let offset1 = f1.depth.map(|d| d + 0.05);
    println!(
        "TEPE scaled {:.3} mm",
        tepe(&f0.depth, &f1.depth, &biased0, &biased1, flow)?
    );
    let t = tepe(&f0.depth, &f1.depth, &offset0, &offset1, flow)?;
    println!("TEPE offset {t:.3} mm");
    assert!(t < 1e-6);

    // Warp frame 0 into frame 1 and check it lands on the true depth.
    let (warped, hit) = forward_warp_zbuffer(&f0.depth, &f0.depth, flow)?;
    // Sub-pixel flow is rounded when splatting, and disoccluded pixels keep
    // whatever landed there, so only most pixels agree closely.
    let mut close = 0;
    let mut n = 0;
    for i in 0..warped.len() {
        if hit.data()[i] {
            close += usize::from((warped.data()[i] - f1.depth.data()[i]).abs() < 0.01);
            n += 1;
        }
    }
    println!("warped {n} pixels, {close} within 1 cm of frame 1");

    let near = f0.depth.map(|&d| d < 3.0);
    println!(
        "AE nearer than 3 m {:.2} mm",
        abs_error(&f0.depth, &biased0, Some(&near))?
    );

    let loss = charbonnier_gradient_loss(
        &[f0.depth.map(|d| d / 40.0)],
        &[biased0.map(|d| d / 40.0)],
        0.01,
    )?;
    println!("loss on normalized depth {loss:.5}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> dtof::Result<()> {
    run_example()
}
