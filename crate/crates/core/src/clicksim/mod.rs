//! Click simulation and the NoC / FR evaluation metrics.

mod bench;
mod regions;

use serde::{Deserialize, Serialize};

use crate::engine::iou;
use crate::error::{Error, Result};
use crate::segmenter::{Click, Mask};

pub use bench::{
    run_benchmark, threshold_key, write_csv, BenchConfig, BenchSample, LoadFailure, ModeSummary, Report, SampleRecord,
};
pub use regions::{
    connected_components, error_regions, next_click, squared_distance_to_boundary, ErrorRegion, Polarity,
};

/// Anything that turns a click into an updated mask.
pub trait ClickEngine {
    fn click(&mut self, click: Click) -> Result<Mask>;
}

/// First click index (1-based) at which one IoU threshold was met.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdHit {
    pub threshold: f64,
    pub click: Option<usize>,
}

/// Per-click IoU sequence of one evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub sample_id: String,
    pub ious: Vec<f64>,
    pub reached: Vec<ThresholdHit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    pub fn new(sample_id: impl Into<String>, ious: Vec<f64>, thresholds: &[f64]) -> Self {
        let reached = thresholds
            .iter()
            .map(|&t| ThresholdHit { threshold: t, click: ious.iter().position(|&v| v >= t).map(|i| i + 1) })
            .collect();
        Self { sample_id: sample_id.into(), ious, reached, error: None }
    }
}

/// Clicks needed to reach `threshold`; `max_clicks` when never reached.
pub fn noc(traj: &Trajectory, threshold: f64, max_clicks: usize) -> usize {
    traj.ious
        .iter()
        .take(max_clicks)
        .position(|&v| v >= threshold)
        .map_or(max_clicks, |i| i + 1)
}

/// Fraction in `[0, 1]` of trajectories that never reach `threshold` within
/// `max_clicks`.
pub fn fr(trajs: &[Trajectory], threshold: f64, max_clicks: usize) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Input("failure rate of an empty trajectory list".into()));
    }
    let failed = trajs
        .iter()
        .filter(|t| !t.ious.iter().take(max_clicks).any(|&v| v >= threshold))
        .count();
    Ok(failed as f64 / trajs.len() as f64)
}

/// Runs the simulated user against one engine until every threshold is met
/// or `max_clicks` clicks were placed. Engine failures end the sample and are
/// recorded in [`Trajectory::error`].
pub fn run_sample<E: ClickEngine>(
    engine: &mut E,
    sample_id: &str,
    gt: &Mask,
    max_clicks: usize,
    thresholds: &[f64],
) -> Result<Trajectory> {
    if gt.is_empty() {
        return Err(Error::Input(format!("sample {sample_id} has an empty ground truth")));
    }
    let mut pred = Mask::empty(gt.width(), gt.height());
    let mut ious = Vec::with_capacity(max_clicks);
    let mut error = None;
    while ious.len() < max_clicks {
        if pred == *gt {
            break;
        }
        let mut click = next_click(&pred, gt)?;
        click.serial = ious.len() as u32 + 1;
        match engine.click(click) {
            Ok(mask) => pred = mask,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
        let v = iou(&pred, gt)?;
        ious.push(v);
        if thresholds.iter().all(|&t| v >= t) || thresholds.iter().all(|&t| ious.iter().any(|&u| u >= t)) {
            break;
        }
    }
    let mut traj = Trajectory::new(sample_id, ious, thresholds);
    traj.error = error;
    Ok(traj)
}
