//! Cohort benchmark: model x attack x clamp runs over a seeded cohort.

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alerts::AlertConfig;
use crate::clamp::{rounding_slack, trailing_window_extremes, ClampConfig};
use crate::closed_loop::{run_scenario, settings_for, LoopConfig, RunOutput};
use crate::event_store::{write_log, EventStoreError, LogHeader};
use crate::metrics::{cohort_average, format_table, OutcomeSummary};
use crate::models::{model_by_name, DosingModel, MaliciousScale};
use crate::patient::{make_cohort, CohortSpec, PatientParams, Scenario};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("unknown attack {0:?}")]
    UnknownAttack(String),
    #[error("an attack needs a predictive base model")]
    AttackWithoutModel,
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("output: {0}")]
    Csv(#[from] csv::Error),
    #[error("output: {0}")]
    Events(#[from] EventStoreError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Attack {
    None,
    Overdose10x,
    Underdose10x,
}

impl Attack {
    pub fn factor(self) -> Option<f64> {
        match self {
            Attack::None => None,
            Attack::Overdose10x => Some(10.0),
            Attack::Underdose10x => Some(0.1),
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attack::None => "none",
            Attack::Overdose10x => "overdose10x",
            Attack::Underdose10x => "underdose10x",
        })
    }
}

impl FromStr for Attack {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Attack::None),
            "overdose10x" => Ok(Attack::Overdose10x),
            "underdose10x" => Ok(Attack::Underdose10x),
            other => Err(BenchError::UnknownAttack(other.into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchConfig {
    pub cohort: CohortSpec,
    pub scenario: Scenario,
    /// `reactive` runs the safe model alone.
    pub model: String,
    pub attack: Attack,
    pub clamp_enabled: bool,
    pub invariant_enabled: bool,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub alerts: AlertConfig,
}

impl BenchConfig {
    pub fn new(model: &str, attack: Attack, clamp_enabled: bool) -> Self {
        BenchConfig {
            cohort: CohortSpec::default(),
            scenario: Scenario::three_meals(3, 42),
            model: model.into(),
            attack,
            clamp_enabled,
            invariant_enabled: false,
            seed: 42,
            output_dir: None,
            alerts: AlertConfig::default(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}-{}-clamp-{}", self.model, self.attack, if self.clamp_enabled { "on" } else { "off" })
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.model != "reactive" && model_by_name(&self.model).is_none() {
            return Err(BenchError::UnknownModel(self.model.clone()));
        }
        if self.model == "reactive" && self.attack != Attack::None {
            return Err(BenchError::AttackWithoutModel);
        }
        Ok(())
    }

    fn build_model(&self) -> Option<Box<dyn DosingModel>> {
        if self.model == "reactive" {
            return None;
        }
        let base = model_by_name(&self.model)?;
        Some(match self.attack.factor() {
            Some(f) => Box::new(MaliciousScale::new(base, f)),
            None => base,
        })
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            use_ml: self.model != "reactive",
            clamp_enabled: self.clamp_enabled,
            invariant: if self.invariant_enabled { LoopConfig::default().invariant } else { None },
            alerts: self.alerts,
            ..LoopConfig::default()
        }
    }

    /// Scenario seed for patient `index`.
    fn patient_seed(&self, index: usize) -> u64 {
        self.scenario.rng_seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PatientOutcome {
    pub patient: PatientParams,
    pub summary: OutcomeSummary,
    /// Largest chosen-minus-safe insulin over any trailing horizon window.
    pub max_window_deviation: f64,
    /// Most negative chosen-minus-safe insulin over any trailing window.
    pub min_window_deviation: f64,
    pub budget: ClampConfig,
    pub rounding_slack: f64,
    /// Worst safety-logic time for one iteration.
    pub max_safety_logic: Duration,
}

impl PatientOutcome {
    /// Whether every trailing window stayed inside the budget plus the
    /// rounding slack.
    pub fn within_budget(&self) -> bool {
        self.max_window_deviation <= self.budget.upper_budget + self.rounding_slack
            && self.min_window_deviation >= -self.budget.lower_budget - self.rounding_slack
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchResult {
    pub label: String,
    pub per_patient: Vec<PatientOutcome>,
    pub aggregate: OutcomeSummary,
    pub elapsed: Duration,
}

fn outcome(p: &PatientParams, run: &RunOutput) -> PatientOutcome {
    let (hi, lo) = trailing_window_extremes(&run.states, run.budget.horizon);
    PatientOutcome {
        patient: p.clone(),
        summary: run.summary,
        max_window_deviation: hi,
        min_window_deviation: lo,
        budget: run.budget,
        rounding_slack: rounding_slack(&settings_for(p)),
        max_safety_logic: run.timings.iter().map(|t| t.safety_logic()).max().unwrap_or_default(),
    }
}

/// Runs every patient of the cohort through the scenario in parallel.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult, BenchError> {
    cfg.validate()?;
    let started = Instant::now();
    let cohort = make_cohort(cfg.cohort, cfg.seed);
    let loop_cfg = cfg.loop_config();
    let runs: Vec<(PatientParams, RunOutput)> = cohort
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let scenario = Scenario { rng_seed: cfg.patient_seed(i), ..cfg.scenario.clone() };
            let run = run_scenario(p, &settings_for(p), &scenario, cfg.build_model(), &loop_cfg);
            (p.clone(), run)
        })
        .collect();
    let per_patient: Vec<PatientOutcome> = runs.iter().map(|(p, r)| outcome(p, r)).collect();
    let aggregate = cohort_average(&per_patient.iter().map(|o| o.summary).collect::<Vec<_>>());
    let result = BenchResult { label: cfg.label(), per_patient, aggregate, elapsed: started.elapsed() };

    if let Some(dir) = &cfg.output_dir {
        let dir = dir.join(&result.label);
        fs::create_dir_all(&dir)?;
        for (i, (p, run)) in runs.iter().enumerate() {
            let stem = p.name.replace('#', "-");
            run.write_csv_file(&dir.join(format!("{stem}.csv")))?;
            let header = LogHeader::new(cfg.patient_seed(i), &cfg.model, settings_for(p), loop_cfg.clone());
            write_log(&dir.join(format!("{stem}.events.jsonl")), &header, run.log.records())?;
        }
        write_summary_csv(&dir.join("summary.csv"), &result)?;
        fs::write(dir.join("summary.txt"), render(&result))?;
    }
    Ok(result)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SummaryRow<'a> {
    patient: &'a str,
    tir_percent: f64,
    below_percent: f64,
    above_percent: f64,
    ml_used: f64,
    safe_used: f64,
    identical: f64,
    invariant_violation_percent: f64,
    mean_glucose: f64,
    reached_floor: bool,
    max_window_deviation: f64,
    min_window_deviation: f64,
}

fn row<'a>(name: &'a str, s: &OutcomeSummary, hi: f64, lo: f64) -> SummaryRow<'a> {
    SummaryRow {
        patient: name,
        tir_percent: s.tir_percent,
        below_percent: s.below_percent,
        above_percent: s.above_percent,
        ml_used: s.command_split.ml_used,
        safe_used: s.command_split.safe_used,
        identical: s.command_split.identical,
        invariant_violation_percent: s.invariant_violation_percent,
        mean_glucose: s.mean_glucose,
        reached_floor: s.reached_floor,
        max_window_deviation: hi,
        min_window_deviation: lo,
    }
}

fn write_summary_csv(path: &std::path::Path, result: &BenchResult) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for o in &result.per_patient {
        w.serialize(row(&o.patient.name, &o.summary, o.max_window_deviation, o.min_window_deviation))?;
    }
    let hi = result.per_patient.iter().map(|o| o.max_window_deviation).fold(0.0, f64::max);
    let lo = result.per_patient.iter().map(|o| o.min_window_deviation).fold(0.0, f64::min);
    w.serialize(row("cohort", &result.aggregate, hi, lo))?;
    w.flush()?;
    Ok(())
}

/// Human-readable table of a result, patients then cohort average.
pub fn render(result: &BenchResult) -> String {
    let mut rows: Vec<(String, OutcomeSummary)> =
        result.per_patient.iter().map(|o| (o.patient.name.clone(), o.summary)).collect();
    rows.push(("cohort".into(), result.aggregate));
    format!("{}\n{}", result.label, format_table(&rows))
}

/// Runs the requested subset of the model x attack x clamp grid.
pub fn run_grid(
    base: &BenchConfig,
    models: &[&str],
    attacks: &[Attack],
    clamps: &[bool],
) -> Result<Vec<BenchResult>, BenchError> {
    let mut out = Vec::new();
    for model in models {
        for &attack in attacks {
            if *model == "reactive" && attack != Attack::None {
                continue;
            }
            for &clamp in clamps {
                let cfg = BenchConfig { model: model.to_string(), attack, clamp_enabled: clamp, ..base.clone() };
                out.push(run_bench(&cfg)?);
            }
        }
    }
    Ok(out)
}
