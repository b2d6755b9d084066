//! Predictions files and the before/after gap report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use super::correction::Correction;
use super::metrics::{episode_metrics, EpisodeResult};
use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::navgraph::NavGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub episode_id: String,
    pub predicted_step: usize,
    pub probabilities: Vec<f64>,
}

pub fn write_predictions(path: &FsPath, predictions: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &FsPath) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Baseline and corrected metrics for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode_id: String,
    pub baseline: EpisodeResult,
    pub corrected_return: EpisodeResult,
    pub corrected_crop: EpisodeResult,
}

/// Means over episodes; rates are fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub gp: f64,
    pub ndtw: f64,
    pub sdtw: f64,
    /// `osr - sr`.
    pub gap: f64,
}

impl Aggregate {
    pub fn of(results: &[EpisodeResult]) -> Aggregate {
        if results.is_empty() {
            return Aggregate::default();
        }
        let n = results.len() as f64;
        let mean = |f: fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        let sr = mean(|r| f64::from(u8::from(r.success)));
        let osr = mean(|r| f64::from(u8::from(r.oracle_success)));
        Aggregate {
            tl: mean(|r| r.tl),
            ne: mean(|r| r.ne),
            sr,
            osr,
            spl: mean(|r| r.spl),
            gp: mean(|r| r.gp),
            ndtw: mean(|r| r.ndtw),
            sdtw: mean(|r| r.sdtw),
            gap: osr - sr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectedSummary {
    pub metrics: Aggregate,
    /// Share of baseline successes still successful after correction;
    /// `None` when the baseline has no successes.
    pub keeping_rate: Option<f64>,
    /// Share of baseline failures with oracle success that become successful;
    /// `None` when there are no such episodes.
    pub correcting_rate: Option<f64>,
}

impl CorrectedSummary {
    /// `keeping_rate * SR + correcting_rate * (OSR - SR)` of the baseline.
    pub fn decomposed_sr(&self, baseline: &Aggregate) -> f64 {
        self.keeping_rate.unwrap_or(0.0) * baseline.sr + self.correcting_rate.unwrap_or(0.0) * baseline.gap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub episodes: usize,
    pub radius: f64,
    pub baseline: Aggregate,
    pub corrected_return: CorrectedSummary,
    pub corrected_crop: CorrectedSummary,
}

/// Evaluates each episode's trajectory as recorded and under both
/// corrections. Predictions are matched to episodes by id.
pub fn evaluate_episodes(
    g: &NavGraph,
    episodes: &[Episode],
    predictions: &[Prediction],
    radius: f64,
) -> Result<Vec<EpisodeOutcome>> {
    if episodes.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            left: episodes.len(),
            right: predictions.len(),
        });
    }
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.episode_id.as_str(), p)).collect();
    episodes
        .iter()
        .map(|ep| {
            let pred = by_id
                .get(ep.episode_id.as_str())
                .ok_or_else(|| Error::InvariantViolation(format!("no prediction for episode `{}`", ep.episode_id)))?;
            let start = g.node(&ep.start)?;
            let target = g.node(&ep.target)?;
            let traj = g.path_from_ids(&ep.path)?;
            let reference = g.shortest_path(start, target)?;
            let eval = |c: Option<Correction>| -> Result<EpisodeResult> {
                let path = match c {
                    Some(c) => c.apply(g, &traj, pred.predicted_step)?,
                    None => traj.clone(),
                };
                let mut r = episode_metrics(g, &path, start, target, radius, &reference)?;
                r.predicted_step = c.map(|_| pred.predicted_step);
                Ok(r)
            };
            Ok(EpisodeOutcome {
                episode_id: ep.episode_id.clone(),
                baseline: eval(None)?,
                corrected_return: eval(Some(Correction::Return))?,
                corrected_crop: eval(Some(Correction::Crop))?,
            })
        })
        .collect()
}

fn corrected(outcomes: &[EpisodeOutcome], pick: fn(&EpisodeOutcome) -> &EpisodeResult) -> CorrectedSummary {
    let results: Vec<EpisodeResult> = outcomes.iter().map(|o| *pick(o)).collect();
    let kept = outcomes.iter().filter(|o| o.baseline.success);
    let (mut succ, mut still) = (0usize, 0usize);
    for o in kept {
        succ += 1;
        still += usize::from(pick(o).success);
    }
    let (mut gap, mut fixed) = (0usize, 0usize);
    for o in outcomes.iter().filter(|o| !o.baseline.success && o.baseline.oracle_success) {
        gap += 1;
        fixed += usize::from(pick(o).success);
    }
    CorrectedSummary {
        metrics: Aggregate::of(&results),
        keeping_rate: (succ > 0).then(|| still as f64 / succ as f64),
        correcting_rate: (gap > 0).then(|| fixed as f64 / gap as f64),
    }
}

pub fn summarize(outcomes: &[EpisodeOutcome], radius: f64) -> GapReport {
    let baseline: Vec<EpisodeResult> = outcomes.iter().map(|o| o.baseline).collect();
    GapReport {
        episodes: outcomes.len(),
        radius,
        baseline: Aggregate::of(&baseline),
        corrected_return: corrected(outcomes, |o| &o.corrected_return),
        corrected_crop: corrected(outcomes, |o| &o.corrected_crop),
    }
}

pub fn gap_report(g: &NavGraph, episodes: &[Episode], predictions: &[Prediction], radius: f64) -> Result<GapReport> {
    Ok(summarize(&evaluate_episodes(g, episodes, predictions, radius)?, radius))
}

impl GapReport {
    /// Human-readable table; rates in percent, lengths in meters.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            "variant", "TL", "NE", "SR", "OSR", "SPL", "GP", "nDTW", "sDTW", "gap", "keep", "corr"
        );
        let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut row = |name: &str, a: &Aggregate, keep: Option<f64>, corr: Option<f64>| {
            let _ = writeln!(
                s,
                "{:<10} {:>6.2} {:>6.2} {:>6.1} {:>6.1} {:>6.1} {:>6.2} {:>6.1} {:>6.1} {:>6.1} {:>6} {:>6}",
                name,
                a.tl,
                a.ne,
                100.0 * a.sr,
                100.0 * a.osr,
                100.0 * a.spl,
                a.gp,
                100.0 * a.ndtw,
                100.0 * a.sdtw,
                100.0 * a.gap,
                pct(keep),
                pct(corr)
            );
        };
        row("baseline", &self.baseline, None, None);
        row("+return", &self.corrected_return.metrics, self.corrected_return.keeping_rate, self.corrected_return.correcting_rate);
        row("+crop", &self.corrected_crop.metrics, self.corrected_crop.keeping_rate, self.corrected_crop.correcting_rate);
        let _ = writeln!(
            s,
            "{} episodes, success radius {} m; +return TL includes the walk back to the predicted viewpoint",
            self.episodes, self.radius
        );
        s
    }
}
