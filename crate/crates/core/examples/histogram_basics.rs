// Render a two-surface patch into a dToF histogram, detect its peak,
// compress it and compare it against a shifted copy.

use dtof::histogram::{
    compress, depth_patch_to_histogram, peak_detect, wasserstein_distance, Pulse, TimeAxis,
};

pub fn run_example() -> dtof::Result<()> {
    let axis = TimeAxis::default();
    println!(
        "K = {}, t0 = {:.2} ns, {:.4} m per bin, range {:.1} m",
        axis.num_bins(),
        axis.bin_width() * 1e9,
        axis.depth_per_bin(),
        axis.max_depth()
    );

    // 4x4 patch: a box edge at 1.2 m in front of a wall at 3.1 m.
    let depth: Vec<f64> = (0..16).map(|i| if i % 4 < 1 { 1.2 } else { 3.1 }).collect();
    let radiance = vec![1.0; 16];
    let h = depth_patch_to_histogram(&depth, &radiance, &Pulse::Delta, &axis)?;
    let peak = peak_detect(&h)?;
    println!(
        "peak bin {} at {:.3} m, mass {}",
        peak.bin, peak.depth, peak.mass
    );

    let c = compress(&h, 4, 0.0)?;
    println!("edges {:?}", c.edges);
    println!("masses {:?}", c.mass);
    let depths: Vec<String> = c.peak_depths.iter().map(|d| format!("{d:.3}")).collect();
    println!("section peaks [{}]", depths.join(", "));
    assert!((c.total_mass() - h.total_mass()).abs() < 1e-9);

    // Same patch pushed back by 5 bins.
    let shifted: Vec<f64> = depth
        .iter()
        .map(|d| d + 5.0 * axis.depth_per_bin())
        .collect();
    let h2 = depth_patch_to_histogram(&shifted, &radiance, &Pulse::Delta, &axis)?;
    let w = wasserstein_distance(&h, &h2)?;
    println!("distance to the shifted patch: {w:.3} bins");
    assert!((w - 5.0).abs() < 1e-9);

    // A wide pulse smears the same scene over neighboring bins.
    let blurred = depth_patch_to_histogram(&depth, &radiance, &Pulse::gaussian(1e-9)?, &axis)?;
    let spread = blurred.mass().iter().filter(|&&m| m > 1e-6).count();
    println!("gaussian pulse occupies {spread} bins, delta pulse 2");
    Ok(())
}

#[allow(dead_code)]
fn main() -> dtof::Result<()> {
    run_example()
}
