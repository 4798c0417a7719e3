//! Runs the estimator over a simulated dataset and writes the run artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::Result;
use crate::estimator::{Estimator, FrameInput, Mode, Timings};
use crate::eval::{format_tum, Trajectory};
use crate::loopclosure::Event;
use crate::sim::SimDataset;

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub causal: Trajectory,
    pub final_trajectory: Trajectory,
    pub events: Vec<Event>,
    pub timings: Timings,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn timing_summary(t: &Timings) -> BTreeMap<String, Percentiles> {
    t.stages
        .iter()
        .map(|(k, v)| {
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            let mean = if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
            (
                k.clone(),
                Percentiles {
                    count: s.len(),
                    mean,
                    p50: percentile(&s, 50.0),
                    p90: percentile(&s, 90.0),
                    p99: percentile(&s, 99.0),
                    max: s.last().copied().unwrap_or(0.0),
                },
            )
        })
        .collect()
}

/// Feeds every frame with the IMU samples since the previous one. `on_frame`
/// sees the estimator after each frame.
pub fn run_dataset(ds: &SimDataset, cfg: &Config, mode: Mode, mut on_frame: impl FnMut(&Estimator) -> Result<()>) -> Result<RunOutput> {
    let rig = cfg.rig.clone().unwrap_or_else(|| ds.config.rig.clone());
    let mut est = Estimator::new(cfg.clone(), rig, mode)?;
    let mut t_prev = ds.frames.first().map(|f| f.t).unwrap_or(0.0);
    for fr in &ds.frames {
        let start = if fr.frame_id == 0 { f64::NEG_INFINITY } else { t_prev };
        let input = FrameInput::from(fr);
        est.ingest_frame(&input, ds.imu_between(start, fr.t))?;
        on_frame(&est)?;
        t_prev = fr.t;
    }
    est.finish()?;
    let causal = est.causal_trajectory().iter().map(|(_, t, p)| (*t, *p)).collect();
    let final_trajectory = est.final_trajectory().into_iter().map(|(_, t, p)| (t, p)).collect();
    Ok(RunOutput {
        causal,
        final_trajectory,
        events: est.events().to_vec(),
        timings: est.timings().clone(),
    })
}

/// Writes `causal.txt`, `final.txt`, `events.jsonl` and `timings.json`.
pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("causal.txt"), format_tum(&out.causal))?;
    std::fs::write(dir.join("final.txt"), format_tum(&out.final_trajectory))?;
    let mut events = String::new();
    for e in &out.events {
        let _ = writeln!(events, "{}", serde_json::to_string(e)?);
    }
    std::fs::write(dir.join("events.jsonl"), events)?;
    std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timing_summary(&out.timings))?)?;
    Ok(())
}
