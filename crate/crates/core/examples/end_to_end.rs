// The command pipeline driven from code: generate a scene, simulate the
// sensor, upsample with two methods and compare their reports.

use dtof::commands::{cmd_eval, cmd_simulate, cmd_superres, cmd_synth, Method, RunConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut config = RunConfig {
        seed: 21,
        ..RunConfig::default()
    };

    let manifest = cmd_synth(None, &dir.path().join("seq"), &config)?;
    let run = dir.path().join("run");
    let dtof_dir = cmd_simulate(&manifest, &config, &run)?;

    let mut ae = Vec::new();
    for method in [Method::Bilinear, Method::Candidate] {
        config.superres.method = method;
        let pred = cmd_superres(&manifest, &dtof_dir, &config, &run)?;
        let report = cmd_eval(&manifest, &pred, &config, &run.join("report.txt"))?;
        println!("{}:\n{}", method.as_str(), report.to_text());
        ae.push(report.frame_mean().ae_mm);
    }
    assert!(ae[1] <= ae[0]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
