use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{fr, noc, run_sample, ThresholdHit, Trajectory};
use crate::engine::{Engine, EngineConfig, Mode};
use crate::error::{Error, Result};
use crate::numerics::ParamVector;
use crate::segmenter::{FrozenScene, Image, Mask};

/// One evaluation sample: an image and its (union) ground truth.
#[derive(Debug, Clone)]
pub struct BenchSample {
    pub sample_id: String,
    pub image: Arc<Image>,
    pub gt: Mask,
}

/// A sample that could not be loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadFailure {
    pub sample_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub modes: Vec<Mode>,
    pub max_clicks: usize,
    pub thresholds: Vec<f64>,
    pub seed: u64,
    pub engine: EngineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Baseline, Mode::NaiveTta, Mode::DcOnly, Mode::DcTta],
            max_clicks: 20,
            thresholds: vec![0.85, 0.90],
            seed: 0,
            engine: EngineConfig::default(),
            model_hash: None,
            dataset: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("no modes to benchmark".into()));
        }
        if self.max_clicks == 0 {
            return Err(Error::Config("max_clicks must be at least 1".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config(format!("thresholds {:?} must lie in (0, 1]", self.thresholds)));
        }
        self.engine.validate()
    }
}

/// `0.85 -> "85"`, `0.875 -> "87.5"`.
pub fn threshold_key(threshold: f64) -> String {
    let pct = (threshold * 1e4).round() / 100.0;
    if pct.fract() == 0.0 {
        format!("{}", pct as i64)
    } else {
        format!("{pct}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub n_samples: usize,
    /// `noc85`, `fr85`, ... with FR as a percentage.
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
}

impl ModeSummary {
    pub fn noc(&self, threshold: f64) -> Option<f64> {
        self.metrics.get(&format!("noc{}", threshold_key(threshold))).copied()
    }

    pub fn fr_percent(&self, threshold: f64) -> Option<f64> {
        self.metrics.get(&format!("fr{}", threshold_key(threshold))).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub mode: Mode,
    pub ious: Vec<f64>,
    pub reached: Vec<ThresholdHit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: BenchConfig,
    pub summary: Vec<ModeSummary>,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub load_failures: Vec<LoadFailure>,
}

impl Report {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }

    /// Plain-text mode x metric table.
    pub fn table(&self) -> String {
        let mut cols = Vec::new();
        for &t in &self.config.thresholds {
            cols.push(format!("noc{}", threshold_key(t)));
        }
        for &t in &self.config.thresholds {
            cols.push(format!("fr{}", threshold_key(t)));
        }
        let mut out = format!("{:<16}{:>6}", "mode", "n");
        for c in &cols {
            out.push_str(&format!("{c:>9}"));
        }
        out.push('\n');
        for s in &self.summary {
            out.push_str(&format!("{:<16}{:>6}", s.mode.as_str(), s.n_samples));
            for c in &cols {
                out.push_str(&format!("{:>9.3}", s.metrics[c]));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates every mode on every loaded sample. Samples that failed to load
/// are listed in the report and skipped.
pub fn run_benchmark(
    samples: &[std::result::Result<BenchSample, LoadFailure>],
    pretrained: &Arc<ParamVector>,
    config: &BenchConfig,
) -> Result<Report> {
    config.validate()?;
    let mut per_mode: Vec<Vec<Trajectory>> = vec![Vec::new(); config.modes.len()];
    let mut load_failures = Vec::new();
    for (i, entry) in samples.iter().enumerate() {
        let sample = match entry {
            Ok(s) => s,
            Err(f) => {
                log::warn!("skipping sample {}: {}", f.sample_id, f.message);
                load_failures.push(f.clone());
                continue;
            }
        };
        let scene = Arc::new(FrozenScene::new(Arc::clone(&sample.image), pretrained, config.engine.sigma_fraction)?);
        for (m, &mode) in config.modes.iter().enumerate() {
            let traj = match Engine::with_scene(Arc::clone(&scene), Arc::clone(pretrained), mode, config.engine.clone()) {
                Ok(mut engine) => {
                    run_sample(&mut engine, &sample.sample_id, &sample.gt, config.max_clicks, &config.thresholds)?
                }
                Err(e) => {
                    let mut t = Trajectory::new(sample.sample_id.clone(), Vec::new(), &config.thresholds);
                    t.error = Some(e.to_string());
                    t
                }
            };
            per_mode[m].push(traj);
        }
        log::info!("sample {} ({}/{}) done", sample.sample_id, i + 1, samples.len());
    }

    let mut summary = Vec::new();
    let mut records = Vec::new();
    for (m, &mode) in config.modes.iter().enumerate() {
        let trajs = &per_mode[m];
        let mut metrics = BTreeMap::new();
        for &t in &config.thresholds {
            let key = threshold_key(t);
            let (mean_noc, fail) = if trajs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let total: usize = trajs.iter().map(|tr| noc(tr, t, config.max_clicks)).sum();
                (total as f64 / trajs.len() as f64, fr(trajs, t, config.max_clicks)? * 100.0)
            };
            metrics.insert(format!("noc{key}"), mean_noc);
            metrics.insert(format!("fr{key}"), fail);
        }
        summary.push(ModeSummary { mode, n_samples: trajs.len(), metrics });
        records.extend(trajs.iter().map(|tr| SampleRecord {
            sample_id: tr.sample_id.clone(),
            mode,
            ious: tr.ious.clone(),
            reached: tr.reached.clone(),
            error: tr.error.clone(),
        }));
    }
    if load_failures.len() == samples.len() && !samples.is_empty() {
        return Err(Error::Input("no sample could be loaded".into()));
    }
    Ok(Report { config: config.clone(), summary, samples: records, load_failures })
}

/// Flat `sample_id,mode,click_idx,iou` table.
pub fn write_csv<W: Write>(report: &Report, mut out: W) -> Result<()> {
    writeln!(out, "sample_id,mode,click_idx,iou")?;
    for r in &report.samples {
        for (i, v) in r.ious.iter().enumerate() {
            writeln!(out, "{},{},{},{}", r.sample_id, r.mode.as_str(), i + 1, v)?;
        }
    }
    Ok(())
}
