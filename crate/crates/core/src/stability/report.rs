use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{estimate_containment, wilson_interval, Outcome, StabilityQuery, TrialRecord, Z95};
use crate::dynamics::{ProblemSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::nn::MlpParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub contained: usize,
    pub escaped: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub scenario: String,
    pub r: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    #[serde(rename = "M")]
    pub trials: usize,
    pub seed: u64,
    pub outcome_counts: OutcomeCounts,
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
}

impl StabilityReport {
    pub(super) fn from_trials(
        scenario: String,
        query: &StabilityQuery,
        delta: f64,
        records: Vec<TrialRecord>,
    ) -> Self {
        let mut counts = OutcomeCounts::default();
        for r in &records {
            match r.outcome {
                Outcome::Contained => counts.contained += 1,
                Outcome::Escaped => counts.escaped += 1,
                Outcome::Diverged => counts.diverged += 1,
            }
        }
        let m = records.len();
        let (ci_lo, ci_hi) = wilson_interval(counts.contained, m, Z95);
        Self {
            scenario,
            r: query.r,
            epsilon: query.epsilon,
            delta,
            p_hat: counts.contained as f64 / m as f64,
            ci_lo,
            ci_hi,
            trials: m,
            seed: query.seed,
            outcome_counts: counts,
            records,
        }
    }

    pub fn with_scenario(mut self, label: impl Into<String>) -> Self {
        self.scenario = label.into();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One row per trial: `trial, outcome, exit_step, x0_0.., x0_{d-1}`.
pub fn write_trials_csv(report: &StabilityReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = report.records.first().map_or(0, |r| r.initial_state.len());
    let mut header = vec!["trial".to_string(), "outcome".into(), "exit_step".into()];
    header.extend((0..d).map(|c| format!("x0_{c}")));
    w.write_record(&header)?;
    for (t, rec) in report.records.iter().enumerate() {
        let mut row = vec![
            t.to_string(),
            match rec.outcome {
                Outcome::Contained => "contained",
                Outcome::Escaped => "escaped",
                Outcome::Diverged => "diverged",
            }
            .to_string(),
            rec.exit_step.map_or(String::new(), |k| k.to_string()),
        ];
        row.extend(rec.initial_state.iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub label: String,
    pub r: f64,
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub controller: String,
    pub r: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub controllers: Vec<String>,
    pub scenarios: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn get(&self, scenario: &str, controller: &str) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.controller == controller)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Scenarios as rows, controllers as columns, `p_hat [lo, hi]` cells.
    pub fn to_text_table(&self) -> String {
        let mut cells: Vec<Vec<String>> = Vec::new();
        let mut head = vec!["scenario".to_string(), "delta".to_string()];
        head.extend(self.controllers.iter().cloned());
        cells.push(head);
        for s in &self.scenarios {
            let delta = self
                .rows
                .iter()
                .find(|r| &r.scenario == s)
                .map_or(String::new(), |r| format!("{}", r.delta));
            let mut line = vec![s.clone(), delta];
            for c in &self.controllers {
                line.push(match self.get(s, c) {
                    Some(r) => format!("{:.3} [{:.3}, {:.3}]", r.p_hat, r.ci_lo, r.ci_hi),
                    None => "-".into(),
                });
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

/// Containment estimate for every `(scenario, controller)` pair. All
/// controllers see the same initial states and noise for a scenario.
pub fn compare_controllers(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    controllers: &[(String, MlpParams)],
    scenarios: &[Scenario],
    query: &StabilityQuery,
) -> Result<Comparison> {
    if controllers.len() < 2 {
        return Err(Error::invalid("controllers", "need at least two to compare"));
    }
    let mut rows = Vec::new();
    for s in scenarios {
        let q = StabilityQuery {
            r: s.r,
            epsilon: s.epsilon,
            ..query.clone()
        };
        for (label, params) in controllers {
            let rep = estimate_containment(spec, grid, params, s.delta, &q)?;
            rows.push(ComparisonRow {
                scenario: s.label.clone(),
                controller: label.clone(),
                r: s.r,
                epsilon: s.epsilon,
                delta: s.delta,
                p_hat: rep.p_hat,
                ci_lo: rep.ci_lo,
                ci_hi: rep.ci_hi,
                trials: rep.trials,
            });
        }
    }
    Ok(Comparison {
        controllers: controllers.iter().map(|c| c.0.clone()).collect(),
        scenarios: scenarios.iter().map(|s| s.label.clone()).collect(),
        rows,
    })
}
