//! Ablation harness: re-train under each knob configuration and emit one
//! averaged table per run plus a cross-configuration summary.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{format_table, full_sweep, write_report, EvalConfig, InferenceSetting, MetricsReport, ReportFormat};
use crate::ppo::{train, Paradigm, TrainConfig};
use crate::{Result, UmcError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateKnob {
    /// The seven Stage-II sampling-ratio configurations.
    Ratio,
    /// Masking values {-100, 0, 100}.
    MaskValue,
    /// Stage-based vs curriculum-based pipelines.
    Paradigm,
}

impl FromStr for AblateKnob {
    type Err = UmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(AblateKnob::Ratio),
            "maskvalue" => Ok(AblateKnob::MaskValue),
            "paradigm" => Ok(AblateKnob::Paradigm),
            other => Err(UmcError::invalid("ablate knob", other.to_string())),
        }
    }
}

impl fmt::Display for AblateKnob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblateKnob::Ratio => "ratio",
            AblateKnob::MaskValue => "maskvalue",
            AblateKnob::Paradigm => "paradigm",
        })
    }
}

/// One knob setting: a label and the train/eval configs it induces.
struct Variation {
    label: String,
    train: TrainConfig,
    mask_value: f64,
}

fn variations(knob: AblateKnob, base: &TrainConfig) -> Vec<Variation> {
    match knob {
        AblateKnob::Ratio => {
            let ratio_sets: [[f64; 4]; 7] = [
                [1.0, 1.0, 1.0, 0.0],
                [1.0, 1.0, 0.0, 1.0],
                [1.0, 0.0, 1.0, 1.0],
                [0.0, 1.0, 1.0, 1.0],
                [1.0, 2.0, 2.0, 1.0],
                [1.0, 3.0, 3.0, 1.0],
                [1.0, 1.0, 1.0, 1.0],
            ];
            ratio_sets
                .iter()
                .map(|r| {
                    let mut cfg = base.clone();
                    cfg.stage2_ratios = *r;
                    Variation {
                        label: format!(
                            "ratio-{}",
                            r.iter().map(|w| format!("{w}")).collect::<Vec<_>>().join(":")
                        ),
                        train: cfg,
                        mask_value: base.mask_value,
                    }
                })
                .collect()
        }
        AblateKnob::MaskValue => [100.0, -100.0, 0.0]
            .iter()
            .map(|&mv| {
                let mut cfg = base.clone();
                cfg.mask_value = mv;
                Variation { label: format!("maskvalue-{mv}"), train: cfg, mask_value: mv }
            })
            .collect(),
        AblateKnob::Paradigm => [Paradigm::CurriculumBased, Paradigm::StageBased]
            .iter()
            .map(|&p| {
                let mut cfg = base.clone();
                cfg.paradigm = p;
                Variation { label: format!("paradigm-{p}"), train: cfg, mask_value: base.mask_value }
            })
            .collect(),
    }
}

/// Result of one ablation configuration: its label and overall averaged row.
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub label: String,
    pub overall: MetricsReport,
}

/// Train and sweep every configuration of `knob`, writing per-configuration
/// reports and a cross-configuration summary under `out_dir`. Outcomes are
/// reported, never gated.
pub fn run_ablation(
    knob: AblateKnob,
    base: &TrainConfig,
    eval_base: &EvalConfig,
    settings: &[InferenceSetting],
    config_hash: u64,
    out_dir: &Path,
) -> Result<Vec<AblationOutcome>> {
    fs::create_dir_all(out_dir).map_err(|e| UmcError::io(out_dir.display().to_string(), e))?;
    let mut outcomes = Vec::new();
    let mut summary_rows = Vec::new();

    for var in variations(knob, base) {
        let run_dir = out_dir.join(&var.label);
        let artifacts = train(&var.train, config_hash, Some(&run_dir))?;
        let mut eval_cfg = eval_base.clone();
        eval_cfg.mask_value = var.mask_value;
        let label = format!("{}-{}", artifacts.actor.variant(), var.label);
        let sweep = full_sweep(&artifacts.actor, settings, &eval_cfg, &label)?;

        write_report(&sweep.all_rows(), &run_dir.join("sweep.csv"), ReportFormat::Csv)?;
        let table = format_table(&sweep);
        let table_path = run_dir.join("table.txt");
        fs::write(&table_path, &table)
            .map_err(|e| UmcError::io(table_path.display().to_string(), e))?;

        summary_rows.push(sweep.overall().clone());
        outcomes.push(AblationOutcome { label: var.label, overall: sweep.overall().clone() });
    }

    write_report(&summary_rows, &out_dir.join("summary.csv"), ReportFormat::Csv)?;
    Ok(outcomes)
}

/// Number of configurations a knob runs (used by the CLI and tests).
pub fn variation_count(knob: AblateKnob) -> usize {
    match knob {
        AblateKnob::Ratio => 7,
        AblateKnob::MaskValue => 3,
        AblateKnob::Paradigm => 2,
    }
}
