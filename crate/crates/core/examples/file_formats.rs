// Round-trip every on-disk format: PFM and 16-bit PNG depth, PNG color,
// Middlebury flow and the DTFH/DTFC histogram containers.

use dtof::dataset::{synth_scene, SceneSpec};
use dtof::io;
use dtof::sensor::{grayscale_radiance, simulate_frame, SensorConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name);
    let spec = SceneSpec::random_desk(32, 32, 2, 2);
    let f = &synth_scene(&spec, 2)?.sequence.frames[0];

    io::write_pfm_gray(&p("depth.pfm"), &f.depth)?;
    let back = io::read_pfm_gray(&p("depth.pfm"))?;
    let worst = back
        .data()
        .iter()
        .zip(f.depth.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("pfm: largest error {worst:.2e} m (f32 storage)");

    io::write_depth_png_mm(&p("depth.png"), &f.depth)?;
    let mm = io::read_depth_png_mm(&p("depth.png"))?;
    let worst = mm
        .data()
        .iter()
        .zip(f.depth.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("png: largest error {:.2} mm", worst * 1000.0);
    assert!(worst <= 0.0005 + 1e-12);

    io::write_rgb_png(&p("rgb.png"), &f.rgb)?;
    let rgb = io::read_rgb_png(&p("rgb.png"))?;
    println!("rgb png: {}x{}", rgb.width(), rgb.height());

    let flow = f.flow.as_ref().expect("synth writes flow");
    io::write_flo(&p("flow.flo"), flow)?;
    let flow_back = io::read_flo(&p("flow.flo"))?;
    println!(
        "flo: {} vectors, first {:?}",
        flow_back.vectors.len(),
        flow_back.vectors.data()[0]
    );

    let dtof = simulate_frame(
        &f.depth,
        &grayscale_radiance(&f.rgb),
        &SensorConfig::default(),
        0,
    )?;
    let grid = dtof.histograms()?;
    io::write_dtfh(&p("frame.dtfh"), grid)?;
    // Masses are stored as f32.
    let back = io::read_dtfh(&p("frame.dtfh"))?;
    for (a, b) in back.data().iter().zip(grid.data()) {
        assert!(a
            .mass()
            .iter()
            .zip(b.mass())
            .all(|(x, y)| *x == *y as f32 as f64));
    }
    let compressed = dtof.compress(4, 0.0)?;
    io::write_dtfc(&p("frame.dtfc"), &compressed)?;
    let c_back = io::read_dtfc(&p("frame.dtfc"))?;
    assert_eq!(c_back.get(1, 1).edges, compressed.get(1, 1).edges);
    for name in ["frame.dtfh", "frame.dtfc"] {
        println!("{name}: {} bytes", std::fs::metadata(p(name))?.len());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
