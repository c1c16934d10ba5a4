// Grayscale radiance is a stand-in for what the laser actually returns.
// On a tilted floor the two disagree about where the histogram mass sits,
// and a surface seen edge-on returns nothing at all.

use dtof::dataset::{synth_scene, CameraPath, PlaneSpec, SceneSpec};
use dtof::histogram::wasserstein_distance;
use dtof::raster::Raster;
use dtof::sensor::{grayscale_radiance, radiance_map, simulate_frame, SensorConfig};

pub fn run_example() -> dtof::Result<()> {
    let spec = SceneSpec {
        width: 64,
        height: 64,
        frame_count: 1,
        hfov_deg: 60.0,
        intrinsics: None,
        clip_range: [0.0, 40.0],
        light_dir: [0.3, -1.0, 0.4],
        camera: CameraPath {
            start: [0.0, -0.4, 0.0],
            step: [0.0; 3],
            look_at: Some([0.0, 0.6, 1.2]),
        },
        planes: vec![PlaneSpec {
            point: [0.0, 0.6, 0.0],
            normal: [0.0, -1.0, 0.0],
            albedo: [0.5, 0.45, 0.4],
        }],
        boxes: Vec::new(),
        random_boxes: None,
    };
    let seq = synth_scene(&spec, 0)?.sequence;
    let f = &seq.frames[0];
    let config = SensorConfig::default();

    let gray = simulate_frame(&f.depth, &grayscale_radiance(&f.rgb), &config, 0)?;
    let view = seq.intrinsics.view_directions(64, 64);
    let albedo = f.albedo.as_ref().expect("synth writes albedo");
    let normal = f.normal.as_ref().expect("synth writes normals");
    let physical = simulate_frame(
        &f.depth,
        &radiance_map(albedo, normal, &view, &f.depth)?,
        &config,
        0,
    )?;

    let (a, b) = (gray.histograms()?, physical.histograms()?);
    let mut worst: f64 = 0.0;
    for j in 0..a.height() {
        let row: Vec<String> = (0..a.width())
            .map(|i| {
                let w = wasserstein_distance(a.get(i, j), b.get(i, j)).unwrap_or(0.0);
                worst = worst.max(w);
                format!("{w:5.2}")
            })
            .collect();
        println!("  {}", row.join(" "));
    }
    println!("largest grayscale/physical distance: {worst:.2} bins");

    // A facet whose normal is perpendicular to the view returns no photons.
    let depth = Raster::filled(16, 16, 2.0);
    let edge_on = Raster::filled(16, 16, [1.0, 0.0, 0.0]);
    let toward = Raster::filled(16, 16, [0.0, 0.0, -1.0]);
    let r = radiance_map(&Raster::filled(16, 16, 0.9), &edge_on, &toward, &depth)?;
    let h = simulate_frame(&depth, &r, &config, 0)?;
    println!(
        "edge-on facet mass: {}",
        h.histograms()?.get(0, 0).total_mass()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> dtof::Result<()> {
    run_example()
}
