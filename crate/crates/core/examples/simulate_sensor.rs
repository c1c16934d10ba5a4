// Simulate a 4x4 dToF sensor over a procedurally generated desk scene in
// both sensor modes, with and without shot noise.

use dtof::dataset::{synth_scene, SceneSpec};
use dtof::sensor::{grayscale_radiance, simulate_frame, SensorConfig, SensorMode, ShotNoise};

pub fn run_example() -> dtof::Result<()> {
    let spec = SceneSpec::random_desk(64, 64, 1, 3);
    let frame = &synth_scene(&spec, 3)?.sequence.frames[0];
    let radiance = grayscale_radiance(&frame.rgb);

    let config = SensorConfig::default();
    let hist = simulate_frame(&frame.depth, &radiance, &config, 0)?;
    let (cols, rows) = hist.grid_dims();
    println!(
        "{cols}x{rows} histograms of {} bins",
        config.axis.num_bins()
    );

    let (low, valid) = hist.low_res_depth();
    for j in 0..rows {
        let row: Vec<String> = (0..cols)
            .map(|i| format!("{:6.3}", low.get(i, j)))
            .collect();
        println!("  {}", row.join(" "));
    }
    assert!(valid.data().iter().all(|&v| v));

    // Every patch keeps the radiance that fell on it.
    let grid = hist.histograms()?;
    let s = config.downsample_factor;
    for j in 0..rows {
        for i in 0..cols {
            let expect: f64 = radiance.block(i * s, j * s, s).iter().sum();
            let got = grid.get(i, j).total_mass();
            assert!((got - expect).abs() <= 1e-9 * expect.max(1.0));
        }
    }

    let peak = simulate_frame(
        &frame.depth,
        &radiance,
        &SensorConfig {
            mode: SensorMode::Peak,
            ..config
        },
        0,
    )?;
    assert_eq!(peak.low_res_depth().0, low);
    println!("peak mode reports the same depths without the histograms");

    let noisy_config = SensorConfig {
        shot_noise: Some(ShotNoise {
            photon_budget: 200.0,
            rng_seed: 11,
        }),
        ..config
    };
    let noisy = simulate_frame(&frame.depth, &radiance, &noisy_config, 0)?;
    let h = noisy.histograms()?.get(1, 2);
    println!(
        "with 200 photons: {} counts in {} occupied bins",
        h.total_mass(),
        h.mass().iter().filter(|&&m| m > 0.0).count()
    );
    let again = simulate_frame(&frame.depth, &radiance, &noisy_config, 0)?;
    assert_eq!(noisy, again);
    Ok(())
}

#[allow(dead_code)]
fn main() -> dtof::Result<()> {
    run_example()
}
