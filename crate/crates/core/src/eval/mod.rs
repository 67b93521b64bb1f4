//! Scenario-sweep evaluation: distance-threshold and failure-rate metrics
//! across the eight damage scenarios and the configured inference settings.

pub mod ablate;
pub mod report;

pub use ablate::{run_ablation, AblateKnob};
pub use report::{parse_csv, parse_json, write_report, ReportFormat};

use serde::{Deserialize, Serialize};

use crate::damage::{sample_scenario_spec, DamageParams};
use crate::env::{EnvConfig, SimEnv};
use crate::policy::{Actor, ActorInput};
use crate::rng::RngStream;
use crate::{Result, UmcError};

/// One evaluation setting: which seed draws the damaged joints and when the
/// malfunction strikes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceSetting {
    pub id: String,
    pub seed: u64,
    pub malfunction_timing: usize,
    pub damage_count_range: (usize, usize),
}

impl InferenceSetting {
    pub fn validate(&self, episode_length: usize) -> Result<()> {
        if self.malfunction_timing >= episode_length {
            return Err(UmcError::invalid(
                "inference setting",
                format!("timing {} >= episode length {episode_length}", self.malfunction_timing),
            ));
        }
        Ok(())
    }
}

/// Default three-setting battery: seeds and malfunction timings vary.
pub fn default_settings() -> Vec<InferenceSetting> {
    [(1u64, 75usize), (800, 100), (50, 125)]
        .iter()
        .enumerate()
        .map(|(i, &(seed, timing))| InferenceSetting {
            id: format!("s{i}"),
            seed,
            malfunction_timing: timing,
            damage_count_range: (2, 3),
        })
        .collect()
}

/// Everything needed to run evaluation episodes.
#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub env: EnvConfig,
    pub damage: DamageParams,
    pub mask_value: f64,
    pub n_envs: usize,
    pub thresholds: [f64; 5],
}

impl EvalConfig {
    pub fn new(mut env: EnvConfig, damage: DamageParams, mask_value: f64, n_envs: usize) -> Self {
        env.episode_length = 750;
        EvalConfig { env, damage, mask_value, n_envs, thresholds: [1.0, 2.0, 3.0, 4.0, 5.0] }
    }
}

/// Outcome of one evaluation episode.
#[derive(Clone, Copy, Debug)]
pub struct EnvOutcome {
    /// Post-onset displacement, frozen at the fall step for fallen envs.
    pub displacement: f64,
    /// Fell at or after damage onset.
    pub fell_after_onset: bool,
    /// Fell before the malfunction was even introduced; excluded from both
    /// the reach buckets and the failed fraction.
    pub fell_before_onset: bool,
}

/// Run every env of one `(scenario, setting)` cell to completion under
/// deterministic mean actions.
pub fn run_scenario(
    actor: &Actor,
    scenario_id: u8,
    setting: &InferenceSetting,
    cfg: &EvalConfig,
) -> Result<Vec<EnvOutcome>> {
    setting.validate(cfg.env.episode_length)?;
    let n_joints = cfg.env.n_joints();
    let mut rng = RngStream::new(setting.seed, 0x5C_0000 | scenario_id as u64);
    let mut envs = Vec::with_capacity(cfg.n_envs);
    for _ in 0..cfg.n_envs {
        let spec = sample_scenario_spec(
            &mut rng,
            scenario_id,
            &cfg.damage,
            n_joints,
            setting.damage_count_range,
            setting.malfunction_timing,
        )?;
        envs.push(SimEnv::new(cfg.env, spec, rng.next_u64(), cfg.mask_value)?);
    }

    let mut alive: Vec<usize> = (0..cfg.n_envs).collect();
    while !alive.is_empty() {
        let obs: Vec<_> = alive.iter().map(|&i| envs[i].observe_corrupted()).collect();
        let flags: Vec<_> = alive.iter().map(|&i| envs[i].flags()).collect();
        let pairs: Vec<_> = obs.iter().zip(&flags).collect();
        let input = ActorInput::build(&pairs, cfg.mask_value, actor.mask_mode())?;
        let means = actor.forward_batch(&input)?;
        let mut still = Vec::with_capacity(alive.len());
        for (row, &i) in alive.iter().enumerate() {
            let r = envs[i].step(means.row(row))?;
            if !r.done {
                still.push(i);
            }
        }
        alive = still;
    }

    Ok(envs
        .iter()
        .map(|e| {
            let fell = e.state().fallen;
            let after = e.state().damage_active;
            EnvOutcome {
                displacement: e.displacement_since_onset().unwrap_or(0.0),
                fell_after_onset: fell && after,
                fell_before_onset: fell && !after,
            }
        })
        .collect())
}

/// Distance-threshold and failure metrics for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub scenario: String,
    pub setting: String,
    pub seed: u64,
    pub n_envs: usize,
    pub reach: [f64; 5],
    pub failed: f64,
    pub mean_displacement: f64,
}

impl MetricsReport {
    /// Bucket monotonicity and fallen-exclusion, checked at emission.
    pub fn validate(&self) -> Result<()> {
        for w in self.reach.windows(2) {
            if w[1] > w[0] + 1e-12 {
                return Err(UmcError::Invariant(format!(
                    "reach buckets not monotone: {:?}",
                    self.reach
                )));
            }
        }
        for (k, r) in self.reach.iter().enumerate() {
            if r + self.failed > 1.0 + 1e-12 {
                return Err(UmcError::Invariant(format!(
                    "reach({}) + failed = {} exceeds 1",
                    k + 1,
                    r + self.failed
                )));
            }
        }
        Ok(())
    }
}

/// Fold per-env outcomes into a [`MetricsReport`]. Fallen envs are excluded
/// from every reach bucket; envs that fell before onset count in neither
/// statistic.
pub fn aggregate(
    outcomes: &[EnvOutcome],
    thresholds: &[f64; 5],
    model: &str,
    scenario: &str,
    setting: &str,
    seed: u64,
) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(UmcError::invalid("aggregate", "no outcomes"));
    }
    let n = outcomes.len() as f64;
    let mut reach = [0.0; 5];
    let mut failed = 0usize;
    let mut disp_sum = 0.0;
    let mut survivors = 0usize;
    for o in outcomes {
        if o.fell_after_onset {
            failed += 1;
            continue;
        }
        if o.fell_before_onset {
            continue;
        }
        survivors += 1;
        disp_sum += o.displacement;
        for (k, th) in thresholds.iter().enumerate() {
            if o.displacement >= *th {
                reach[k] += 1.0;
            }
        }
    }
    for r in reach.iter_mut() {
        *r /= n;
    }
    let report = MetricsReport {
        model: model.to_string(),
        scenario: scenario.to_string(),
        setting: setting.to_string(),
        seed,
        n_envs: outcomes.len(),
        reach,
        failed: failed as f64 / n,
        mean_displacement: if survivors > 0 { disp_sum / survivors as f64 } else { 0.0 },
    };
    report.validate()?;
    Ok(report)
}

/// All 24 cells plus the averaged rows.
#[derive(Clone, Debug)]
pub struct SweepResult {
    /// 8 scenarios x settings, scenario-major.
    pub cells: Vec<MetricsReport>,
    /// Per-scenario averages over settings (setting = "avg") plus one
    /// overall row (scenario = "all").
    pub averaged: Vec<MetricsReport>,
}

impl SweepResult {
    pub fn all_rows(&self) -> Vec<MetricsReport> {
        let mut rows = self.cells.clone();
        rows.extend(self.averaged.clone());
        rows
    }

    pub fn overall(&self) -> &MetricsReport {
        self.averaged.last().expect("sweep has an overall row")
    }

    /// The scenario-average row for scenario `id`.
    pub fn scenario_avg(&self, id: u8) -> &MetricsReport {
        self.averaged
            .iter()
            .find(|r| r.scenario == id.to_string())
            .expect("scenario average present")
    }
}

fn mean_of(rows: &[&MetricsReport], model: &str, scenario: &str) -> MetricsReport {
    let n = rows.len() as f64;
    let mut reach = [0.0; 5];
    let mut failed = 0.0;
    let mut disp = 0.0;
    let mut envs = 0usize;
    for r in rows {
        for k in 0..5 {
            reach[k] += r.reach[k];
        }
        failed += r.failed;
        disp += r.mean_displacement;
        envs += r.n_envs;
    }
    for k in reach.iter_mut() {
        *k /= n;
    }
    MetricsReport {
        model: model.to_string(),
        scenario: scenario.to_string(),
        setting: "avg".to_string(),
        seed: 0,
        n_envs: envs,
        reach,
        failed: failed / n,
        mean_displacement: disp / n,
    }
}

/// Evaluate all eight scenarios across every setting and average.
pub fn full_sweep(
    actor: &Actor,
    settings: &[InferenceSetting],
    cfg: &EvalConfig,
    model: &str,
) -> Result<SweepResult> {
    if settings.is_empty() {
        return Err(UmcError::invalid("sweep", "no inference settings"));
    }
    let mut cells = Vec::with_capacity(8 * settings.len());
    for scenario_id in 1..=8u8 {
        for setting in settings {
            let outcomes = run_scenario(actor, scenario_id, setting, cfg)?;
            cells.push(aggregate(
                &outcomes,
                &cfg.thresholds,
                model,
                &scenario_id.to_string(),
                &setting.id,
                setting.seed,
            )?);
        }
    }
    let mut averaged = Vec::with_capacity(9);
    for scenario_id in 1..=8u8 {
        let rows: Vec<&MetricsReport> =
            cells.iter().filter(|c| c.scenario == scenario_id.to_string()).collect();
        let avg = mean_of(&rows, model, &scenario_id.to_string());
        avg.validate()?;
        averaged.push(avg);
    }
    let all: Vec<&MetricsReport> = cells.iter().collect();
    let overall = mean_of(&all, model, "all");
    overall.validate()?;
    averaged.push(overall);
    Ok(SweepResult { cells, averaged })
}

/// Render the averaged table in the familiar layout: one line per scenario
/// plus an overall line, columns 1..5 units and failed.
pub fn format_table(result: &SweepResult) -> String {
    let mut out = String::new();
    out.push_str("scenario  1 unit  2 unit  3 unit  4 unit  5 unit  failed\n");
    for row in &result.averaged {
        out.push_str(&format!(
            "{:<8} {:>6.1}% {:>6.1}% {:>6.1}% {:>6.1}% {:>6.1}% {:>6.1}%\n",
            row.scenario,
            row.reach[0] * 100.0,
            row.reach[1] * 100.0,
            row.reach[2] * 100.0,
            row.reach[3] * 100.0,
            row.reach[4] * 100.0,
            row.failed * 100.0
        ));
    }
    out
}
