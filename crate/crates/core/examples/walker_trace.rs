//! Drive the planar walker with an open-loop trot-like pattern and write a
//! per-step CSV trace.
//!
//! `cargo run --release --example walker_trace -- [trace.csv]`

use std::fs::File;
use std::sync::Arc;

use rolldrop::env::{generate_terrain, Command, EnvConfig, TraceWriter, Walker};
use rolldrop::rng::{RngStream, StreamId};

fn main() -> rolldrop::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "walker_trace.csv".into());
    let cfg = EnvConfig::default();
    let terrain = generate_terrain(&cfg.terrain, 0)?;
    let walker = Walker::new(cfg.clone(), Arc::new(terrain))?;
    let mut rng = RngStream::new(0, 0, StreamId::EnvReset);
    let (mut state, _) = walker.reset(&mut rng, Some(Command { vx: 0.5, pitch_rate: 0.0 }));

    let mut trace = TraceWriter::new(File::create(&path).map_err(|e| rolldrop::Error::io(&path, e))?)?;
    let x0 = state.q[0];
    for k in 0..walker.episode_steps() {
        let phase = k as f64 * cfg.control_dt * 2.0 * std::f64::consts::PI * 1.5;
        let a = [phase.sin(), -phase.sin(), -phase.sin(), phase.sin()].map(|v| 0.8 * v);
        let out = walker.step(&state, &walker.target_from_action(&a));
        trace.record(&out)?;
        state = out.state;
        if let Some(reason) = out.done {
            println!("episode ended at step {}: {reason:?}", k + 1);
            break;
        }
    }
    trace.finish()?;
    println!("travelled {:.3} m, trace in {path}", state.q[0] - x0);
    Ok(())
}
