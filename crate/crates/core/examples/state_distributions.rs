//! Record joint-position and action histograms over a few training
//! iterations and render them as SVG.
//!
//! `cargo run --release --example state_distributions -- [out_dir]`

use std::fs::{self, File};
use std::path::PathBuf;

use rolldrop::analysis::{histogram_plot, record_distributions, write_histograms_csv, Channel};
use rolldrop::config::ExperimentConfig;

fn main() -> rolldrop::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("rolldrop_distributions"), PathBuf::from);
    fs::create_dir_all(&out).map_err(|e| rolldrop::Error::io(&out, e))?;

    let mut cfg = ExperimentConfig::desk();
    cfg.ppo.num_envs = 16;
    cfg.ppo.steps_per_env = 100;
    cfg.ppo.minibatch_size = 400;
    cfg.ppo.epochs = 2;
    let channels = Channel::parse_list("joint_pos:1,action:1", cfg.env.joint_limit)?;
    let records = record_distributions(&cfg, 0, channels, 3)?;

    let csv = out.join("histograms.csv");
    write_histograms_csv(&records, File::create(&csv).map_err(|e| rolldrop::Error::io(&csv, e))?)?;
    for r in &records {
        let name = r.channel.name();
        let svg = histogram_plot(&name, &name, &r.histogram);
        let path = out.join(format!("{}.svg", name.replace(':', "_")));
        fs::write(&path, svg).map_err(|e| rolldrop::Error::io(&path, e))?;
        println!("{name}: {} samples -> {}", r.histogram.total(), path.display());
    }
    Ok(())
}
