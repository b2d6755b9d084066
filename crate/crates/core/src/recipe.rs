//! Experiment recipes: a config, a list of metric assertions and a runtime
//! budget, executed through the full pipeline.

use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cli::{Command, Run};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::GapReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Lt => value < threshold,
            Comparator::Le => value <= threshold,
            Comparator::Gt => value > threshold,
            Comparator::Ge => value >= threshold,
            Comparator::Eq => value == threshold,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Eq => "==",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    pub metric: String,
    pub comparator: Comparator,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecipe {
    pub name: String,
    /// Config file, relative to the recipe file.
    pub config: PathBuf,
    /// Extra dotted-key overrides applied on top of the config.
    #[serde(default)]
    pub overrides: Vec<String>,
    pub assertions: Vec<Assertion>,
    /// Wall-clock budget for the whole pipeline.
    pub runtime_budget_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub metric: String,
    pub comparator: Comparator,
    pub threshold: f64,
    pub value: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeOutcome {
    pub name: String,
    pub passed: bool,
    pub elapsed_secs: f64,
    pub within_budget: bool,
    pub verdicts: Vec<Verdict>,
    pub report: GapReport,
}

/// File name of the archived outcome inside the run directory.
pub const OUTCOME_FILE: &str = "recipe_outcome.json";

/// Metric names accepted by assertions: every numeric leaf of the gap report
/// as a dotted path (`corrected_return.metrics.sr`), plus
/// `recovery.return` and `recovery.crop`, the share of the baseline gap
/// closed by each correction.
pub fn metric_names() -> Vec<String> {
    let sample = serde_json::to_value(GapReport {
        episodes: 0,
        radius: 0.0,
        baseline: Default::default(),
        corrected_return: crate::eval::CorrectedSummary {
            metrics: Default::default(),
            keeping_rate: Some(0.0),
            correcting_rate: Some(0.0),
        },
        corrected_crop: crate::eval::CorrectedSummary {
            metrics: Default::default(),
            keeping_rate: Some(0.0),
            correcting_rate: Some(0.0),
        },
    })
    .expect("report serializes");
    let mut out = Vec::new();
    leaves(&sample, String::new(), &mut out);
    out.push("recovery.return".into());
    out.push("recovery.crop".into());
    out
}

fn leaves(v: &Value, prefix: String, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(child, key, out);
            }
        }
        _ => out.push(prefix),
    }
}

/// Value of `metric` in `report`; `NaN` when the report leaves it undefined.
pub fn metric_value(report: &GapReport, metric: &str) -> Result<f64> {
    let recovery = |sr: f64| {
        let b = &report.baseline;
        if b.gap > 0.0 {
            (sr - b.sr) / b.gap
        } else {
            f64::NAN
        }
    };
    match metric {
        "recovery.return" => return Ok(recovery(report.corrected_return.metrics.sr)),
        "recovery.crop" => return Ok(recovery(report.corrected_crop.metrics.sr)),
        _ => {}
    }
    let mut v = &serde_json::to_value(report)?;
    for part in metric.split('.') {
        v = v
            .get(part)
            .ok_or_else(|| Error::config(format!("assertions.{metric}"), "unknown metric"))?;
    }
    match v {
        Value::Number(n) => Ok(n.as_f64().unwrap_or(f64::NAN)),
        Value::Null => Ok(f64::NAN),
        _ => Err(Error::config(format!("assertions.{metric}"), "not a numeric metric")),
    }
}

impl ExperimentRecipe {
    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut recipe: ExperimentRecipe = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
            .map_err(|e| Error::config(e.path().to_string(), e.into_inner().to_string()))?;
        if recipe.config.is_relative() {
            if let Some(dir) = path.parent() {
                recipe.config = dir.join(&recipe.config);
            }
        }
        Ok(recipe)
    }

    pub fn validate(&self) -> Result<()> {
        let known = metric_names();
        for a in &self.assertions {
            if !known.contains(&a.metric) {
                return Err(Error::config(
                    format!("assertions.{}", a.metric),
                    format!("unknown metric; expected one of {}", known.join(", ")),
                ));
            }
        }
        if !(self.runtime_budget_secs > 0.0) {
            return Err(Error::config("runtime_budget_secs", "must be positive"));
        }
        Ok(())
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config)?.with_overrides(&self.overrides)
    }
}

/// Runs the recipe's pipeline in `out_dir` (the config's `out_dir` when
/// `None`), checks every assertion and archives the outcome there. Fails
/// with [`Error::AssertionFailed`] naming each failed check, including an
/// exceeded runtime budget.
pub fn run_recipe(recipe: &ExperimentRecipe, out_dir: Option<&FsPath>, quiet: bool) -> Result<RecipeOutcome> {
    recipe.validate()?;
    let mut cfg = recipe.run_config()?;
    if let Some(d) = out_dir {
        cfg.out_dir = d.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    let run = Run::new(cfg, quiet);
    let t0 = Instant::now();
    run.dispatch(Command::Pipeline)?;
    let elapsed_secs = t0.elapsed().as_secs_f64();
    let report: GapReport = {
        let p = run.path(crate::cli::artifact::REPORT_JSON);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text)?
    };
    let verdicts = recipe
        .assertions
        .iter()
        .map(|a| {
            let value = metric_value(&report, &a.metric)?;
            Ok(Verdict {
                metric: a.metric.clone(),
                comparator: a.comparator,
                threshold: a.threshold,
                value,
                passed: a.comparator.holds(value, a.threshold),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let within_budget = elapsed_secs <= recipe.runtime_budget_secs;
    let outcome = RecipeOutcome {
        name: recipe.name.clone(),
        passed: within_budget && verdicts.iter().all(|v| v.passed),
        elapsed_secs,
        within_budget,
        verdicts,
        report,
    };
    let p = run.path(OUTCOME_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&outcome)? + "\n").map_err(|e| Error::io(&p, e))?;
    if !outcome.passed {
        let mut failed: Vec<String> = outcome
            .verdicts
            .iter()
            .filter(|v| !v.passed)
            .map(|v| format!("{} = {} (want {} {})", v.metric, v.value, v.comparator.symbol(), v.threshold))
            .collect();
        if !within_budget {
            failed.push(format!(
                "runtime {:.1} s exceeds budget {:.1} s",
                elapsed_secs, recipe.runtime_budget_secs
            ));
        }
        return Err(Error::AssertionFailed(failed));
    }
    Ok(outcome)
}
