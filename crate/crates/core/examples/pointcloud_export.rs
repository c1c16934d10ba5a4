// Back-project a depth frame into a colored world-space point cloud and
// save it as PLY.

use dtof::dataset::{export_pointcloud, synth_scene, SceneSpec};
use dtof::io::{decode_ply, encode_ply, write_ply};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::random_desk(64, 48, 2, 9);
    let seq = synth_scene(&spec, 9)?.sequence;
    let f = &seq.frames[1];
    let points = export_pointcloud(&f.depth, &f.rgb, &seq.intrinsics, f.pose.as_ref())?;

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &points {
        for a in 0..3 {
            lo[a] = lo[a].min(p.position[a]);
            hi[a] = hi[a].max(p.position[a]);
        }
    }
    println!("{} points", points.len());
    println!(
        "x {:.2}..{:.2}  y {:.2}..{:.2}  z {:.2}..{:.2}",
        lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]
    );
    // The floor sits at y = 0.6 and the back wall at z = 4 in world space.
    assert!((hi[1] - 0.6).abs() < 1e-6 && (hi[2] - 4.0).abs() < 1e-6);

    let bytes = encode_ply(&points);
    assert_eq!(decode_ply(&bytes)?.len(), points.len());
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("frame_0001.ply");
    write_ply(&path, &points)?;
    println!("wrote {} bytes", bytes.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
