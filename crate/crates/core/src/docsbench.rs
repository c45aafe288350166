//! Golden-value fixtures that bind reference numbers to runnable experiment
//! configs.
//!
//! A fixture names an experiment config file, a list of checks against the
//! aggregate table of the resulting report, and where the expected numbers
//! come from. Checks are either absolute values with a tolerance or
//! orderings between two table cells (used for accuracy comparisons, whose
//! absolute values depend on architecture and learning rate).

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountants::Accountant;
use crate::error::{Error, Result};
use crate::harness::{run_experiment_in, ExperimentConfig, ExperimentReport, TableRow};

/// Where an expected value comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Provenance {
    /// A published number, identified by a free-text source.
    Published { source: String },
    /// A number produced by an independent oracle computation.
    Derived { oracle: String },
    /// A deliberately wrong value that must fail.
    NegativeControl { note: String },
}

/// One cell of a report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accountant: Option<Accountant>,
    pub metric: String,
}

impl Cell {
    fn find<'a>(&self, table: &'a [TableRow]) -> Option<&'a TableRow> {
        table
            .iter()
            .find(|r| r.arm == self.arm && r.accountant == self.accountant && r.metric == self.metric)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.accountant {
            Some(a) => write!(f, "{}/{}/{}", self.arm, a.name(), self.metric),
            None => write!(f, "{}/{}", self.arm, self.metric),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    /// `|mean(cell) − expected| ≤ tolerance`.
    Value {
        cell: Cell,
        expected: f64,
        tolerance: f64,
    },
    /// `mean(higher) ≥ mean(lower) − slack`.
    AtLeast {
        higher: Cell,
        lower: Cell,
        #[serde(default)]
        slack: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenFixture {
    pub name: String,
    /// Experiment config path, relative to the fixture file.
    pub config: PathBuf,
    pub checks: Vec<Check>,
    pub provenance: Provenance,
}

impl GoldenFixture {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let f: GoldenFixture = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.into_inner().to_string()))?;
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.checks.is_empty() {
            return Err(Error::config("checks", "a fixture needs at least one check"));
        }
        for (i, c) in self.checks.iter().enumerate() {
            let bad = match c {
                Check::Value { tolerance, .. } => !(*tolerance >= 0.0),
                Check::AtLeast { slack, .. } => !(*slack >= 0.0),
            };
            if bad {
                return Err(Error::config(format!("checks[{i}]"), "tolerance must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub description: String,
    pub actual: Option<f64>,
    pub expected: Option<f64>,
    /// `actual − expected` for value checks, `higher − lower` for orderings.
    pub delta: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureOutcome {
    pub name: String,
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

impl fmt::Display for FixtureOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}", if self.passed { "PASS" } else { "FAIL" }, self.name)?;
        for c in &self.checks {
            let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "missing".into());
            writeln!(
                f,
                "  [{}] {}: actual {} expected {} delta {}",
                if c.passed { "ok" } else { "x" },
                c.description,
                num(c.actual),
                num(c.expected),
                num(c.delta)
            )?;
        }
        Ok(())
    }
}

/// Evaluates the checks against an existing report.
pub fn check_report(fixture: &GoldenFixture, report: &ExperimentReport) -> FixtureOutcome {
    let table = &report.table;
    let checks: Vec<CheckOutcome> = fixture
        .checks
        .iter()
        .map(|c| match c {
            Check::Value {
                cell,
                expected,
                tolerance,
            } => {
                let actual = cell.find(table).map(|r| r.mean);
                let delta = actual.map(|a| a - expected);
                CheckOutcome {
                    description: format!("{cell} within {tolerance}"),
                    actual,
                    expected: Some(*expected),
                    delta,
                    passed: delta.is_some_and(|d| d.abs() <= *tolerance),
                }
            }
            Check::AtLeast { higher, lower, slack } => {
                let hi = higher.find(table).map(|r| r.mean);
                let lo = lower.find(table).map(|r| r.mean);
                let delta = hi.zip(lo).map(|(h, l)| h - l);
                CheckOutcome {
                    description: format!("{higher} >= {lower} - {slack}"),
                    actual: hi,
                    expected: lo,
                    delta,
                    passed: delta.is_some_and(|d| d >= -slack),
                }
            }
        })
        .collect();
    FixtureOutcome {
        name: fixture.name.clone(),
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

/// Runs the fixture's config (paths relative to `base`) and checks the result.
pub fn verify_fixture(fixture: &GoldenFixture, base: &Path) -> Result<FixtureOutcome> {
    let path = base.join(&fixture.config);
    if !path.is_file() {
        return Err(Error::config(
            "config",
            format!("referenced config {} does not exist", path.display()),
        ));
    }
    let cfg = ExperimentConfig::load(&path)?;
    let report = run_experiment_in(&cfg, path.parent())?;
    Ok(check_report(fixture, &report))
}

/// Loads and verifies one fixture file.
pub fn verify_fixture_file(path: impl AsRef<Path>) -> Result<FixtureOutcome> {
    let path = path.as_ref();
    let fixture = GoldenFixture::load(path)?;
    verify_fixture(&fixture, path.parent().unwrap_or(Path::new(".")))
}

/// Fixture files (`*.fixture.json`) in `dir`, sorted by name.
pub fn fixture_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".fixture.json"))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{ExperimentConfig, Protocol};
    use crate::policies::DecaySchedule;

    fn table_report() -> ExperimentReport {
        let cfg = ExperimentConfig {
            name: "table".into(),
            dataset: None,
            split: 0.8,
            train: None,
            methods: Vec::new(),
            preset: Default::default(),
            privacy: None,
            protocol: Protocol::AccountantTable {
                q: 0.01,
                sigma: DecaySchedule::constant(6.0).unwrap(),
                iterations: 5000,
                delta: 1e-5,
            },
            repeats: None,
            output: None,
        };
        run_experiment_in(&cfg, None).unwrap()
    }

    fn zcdp_cell() -> Cell {
        Cell {
            arm: "schedule".into(),
            accountant: Some(Accountant::Zcdp),
            metric: "epsilon".into(),
        }
    }

    fn fixture(checks: Vec<Check>) -> GoldenFixture {
        GoldenFixture {
            name: "f".into(),
            config: "none.json".into(),
            checks,
            provenance: Provenance::Derived { oracle: "test".into() },
        }
    }

    #[test]
    fn value_check_passes_and_fails() {
        let report = table_report();
        let good = fixture(vec![Check::Value {
            cell: zcdp_cell(),
            expected: 0.814,
            tolerance: 0.001,
        }]);
        assert!(check_report(&good, &report).passed);
        let bad = fixture(vec![Check::Value {
            cell: zcdp_cell(),
            expected: 0.9,
            tolerance: 0.001,
        }]);
        let out = check_report(&bad, &report);
        assert!(!out.passed);
        assert!((out.checks[0].delta.unwrap() + 0.086).abs() < 0.002);
    }

    #[test]
    fn ordering_check_uses_slack() {
        let report = table_report();
        let optc = Cell {
            accountant: Some(Accountant::OptC),
            ..zcdp_cell()
        };
        let f = fixture(vec![Check::AtLeast {
            higher: optc.clone(),
            lower: zcdp_cell(),
            slack: 0.0,
        }]);
        assert!(check_report(&f, &report).passed);
        let f = fixture(vec![Check::AtLeast {
            higher: zcdp_cell(),
            lower: optc,
            slack: 0.0,
        }]);
        assert!(!check_report(&f, &report).passed);
    }

    #[test]
    fn missing_cell_fails() {
        let report = table_report();
        let f = fixture(vec![Check::Value {
            cell: Cell {
                arm: "nope".into(),
                accountant: None,
                metric: "epsilon".into(),
            },
            expected: 0.0,
            tolerance: 1.0,
        }]);
        let out = check_report(&f, &report);
        assert!(!out.passed);
        assert_eq!(out.checks[0].actual, None);
    }

    #[test]
    fn missing_config_is_an_error() {
        let f = fixture(vec![Check::Value {
            cell: zcdp_cell(),
            expected: 0.0,
            tolerance: 0.0,
        }]);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(verify_fixture(&f, dir.path()), Err(Error::Config { .. })));
    }

    #[test]
    fn negative_tolerance_rejected() {
        let f = fixture(vec![Check::Value {
            cell: zcdp_cell(),
            expected: 0.0,
            tolerance: -1.0,
        }]);
        assert!(f.validate().is_err());
    }
}
