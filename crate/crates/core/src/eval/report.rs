//! Report emission: CSV and JSON, written atomically, with parsers used for
//! round-trip verification.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::MetricsReport;
use crate::{Result, UmcError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> ReportFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

pub const CSV_HEADER: &str =
    "model,scenario,setting,seed,n_envs,reach_1,reach_2,reach_3,reach_4,reach_5,failed,mean_displacement";

fn to_csv_row(r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.model,
        r.scenario,
        r.setting,
        r.seed,
        r.n_envs,
        r.reach[0],
        r.reach[1],
        r.reach[2],
        r.reach[3],
        r.reach[4],
        r.failed,
        r.mean_displacement
    )
}

pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&to_csv_row(r));
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(UmcError::invalid("report csv", format!("bad header {other:?}"))),
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(UmcError::invalid("report csv", format!("line {}: {} fields", ln + 2, f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| UmcError::invalid("report csv", format!("{s}: {e}")))
        };
        out.push(MetricsReport {
            model: f[0].to_string(),
            scenario: f[1].to_string(),
            setting: f[2].to_string(),
            seed: f[3].parse().map_err(|e| UmcError::invalid("report csv", format!("{e}")))?,
            n_envs: f[4].parse().map_err(|e| UmcError::invalid("report csv", format!("{e}")))?,
            reach: [num(f[5])?, num(f[6])?, num(f[7])?, num(f[8])?, num(f[9])?],
            failed: num(f[10])?,
            mean_displacement: num(f[11])?,
        });
    }
    Ok(out)
}

pub fn to_json(reports: &[MetricsReport]) -> Result<String> {
    serde_json::to_string_pretty(reports)
        .map_err(|e| UmcError::invalid("report json", format!("{e}")))
}

pub fn parse_json(text: &str) -> Result<Vec<MetricsReport>> {
    serde_json::from_str(text).map_err(|e| UmcError::invalid("report json", format!("{e}")))
}

/// Emit the reports to `path`, validating every row first. Atomic: a temp
/// file in the target directory is renamed into place.
pub fn write_report(reports: &[MetricsReport], path: &Path, format: ReportFormat) -> Result<()> {
    for r in reports {
        r.validate()?;
    }
    let text = match format {
        ReportFormat::Csv => to_csv(reports),
        ReportFormat::Json => to_json(reports)?,
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| UmcError::io(dir.display().to_string(), e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into())
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| UmcError::io(tmp.display().to_string(), e))?;
    f.write_all(text.as_bytes()).map_err(|e| UmcError::io(tmp.display().to_string(), e))?;
    f.sync_all().ok();
    drop(f);
    fs::rename(&tmp, path).map_err(|e| UmcError::io(path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, scenario: &str, setting: &str) -> MetricsReport {
        MetricsReport {
            model: model.into(),
            scenario: scenario.into(),
            setting: setting.into(),
            seed: 3,
            n_envs: 16,
            reach: [0.875, 0.75, 0.5, 0.25, 0.125],
            failed: 0.0625,
            mean_displacement: 2.71828182845,
        }
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let rows = vec![row("trf", "1", "s0"), row("trf", "all", "avg")];
        let text = to_csv(&rows);
        assert_eq!(parse_csv(&text).unwrap(), rows);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let rows = vec![row("mlp", "8", "s2")];
        let text = to_json(&rows).unwrap();
        assert_eq!(parse_json(&text).unwrap(), rows);
    }

    #[test]
    fn empty_report_is_header_only() {
        let text = to_csv(&[]);
        assert_eq!(text, format!("{CSV_HEADER}\n"));
        assert!(parse_csv(&text).unwrap().is_empty());
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = std::env::temp_dir().join("umc_report_test");
        let rows = vec![row("trf", "2", "s1")];
        let csv_path = dir.join("r.csv");
        write_report(&rows, &csv_path, ReportFormat::Csv).unwrap();
        let parsed = parse_csv(&fs::read_to_string(&csv_path).unwrap()).unwrap();
        assert_eq!(parsed, rows);
        let json_path = dir.join("r.json");
        write_report(&rows, &json_path, ReportFormat::Json).unwrap();
        let parsed = parse_json(&fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed, rows);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn format_inferred_from_extension() {
        assert_eq!(ReportFormat::from_path(Path::new("a/b.json")), ReportFormat::Json);
        assert_eq!(ReportFormat::from_path(Path::new("a/b.csv")), ReportFormat::Csv);
        assert_eq!(ReportFormat::from_path(Path::new("a/b")), ReportFormat::Csv);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_report() -> impl Strategy<Value = MetricsReport> {
            (
                "[a-z]{1,8}",
                1u8..=8,
                0usize..3,
                any::<u64>(),
                1usize..10_000,
                proptest::array::uniform5(0.0f64..1.0),
                0.0f64..1.0,
                0.0f64..100.0,
            )
                .prop_map(|(model, scenario, setting, seed, n_envs, mut reach, failed, disp)| {
                    // Make the buckets monotone and consistent with failed.
                    reach.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    let cap = 1.0 - failed;
                    for r in reach.iter_mut() {
                        *r = r.min(cap).max(0.0);
                    }
                    MetricsReport {
                        model,
                        scenario: scenario.to_string(),
                        setting: format!("s{setting}"),
                        seed,
                        n_envs,
                        reach,
                        failed,
                        mean_displacement: disp,
                    }
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// Emission and parse-back are lossless in both formats.
            #[test]
            fn roundtrip_lossless(rows in proptest::collection::vec(arb_report(), 0..6)) {
                let csv = to_csv(&rows);
                prop_assert_eq!(&parse_csv(&csv).unwrap(), &rows);
                let json = to_json(&rows).unwrap();
                prop_assert_eq!(&parse_json(&json).unwrap(), &rows);
            }
        }
    }

    #[test]
    fn invalid_rows_refused_at_emission() {
        let mut bad = row("trf", "1", "s0");
        bad.reach = [0.1, 0.9, 0.0, 0.0, 0.0];
        let dir = std::env::temp_dir().join("umc_report_bad");
        let err = write_report(&[bad], &dir.join("r.csv"), ReportFormat::Csv);
        assert!(err.is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
