//! Single-document run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backtest::Mode;
use crate::calendar::{Market, SplitSpec};
use crate::classifier::FitOptions;
use crate::error::{Error, Result};
use crate::features::FeatureSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub panel: PathBuf,
    pub stacks: PathBuf,
    /// Market defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calendar: Option<PathBuf>,
    pub output: PathBuf,
}

/// Threshold grids searched on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub gamma_pos: Vec<f64>,
    pub gamma_neg: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            gamma_pos: vec![2.0, 5.0, 10.0, 15.0, 30.0],
            gamma_neg: vec![5.0, 8.0, 10.0, 30.0],
            tau: vec![0.5, 0.6, 0.7, 0.75, 0.8, 0.9, 0.95],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpactSettings {
    /// Stack perturbation size, MWh.
    pub delta_q: f64,
    /// Hours per bucket feeding the energy-impact average.
    pub top_n: usize,
    /// Zone whose |DART| ranks calibration hours; the reference zone when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_zone: Option<String>,
    pub reference_zone: String,
    /// `k_z` of the reference zone, $/MWh per MWh.
    pub k_reference: f64,
}

impl Default for ImpactSettings {
    fn default() -> Self {
        ImpactSettings {
            delta_q: 1000.0,
            top_n: 10,
            selection_zone: None,
            reference_zone: "LONGIL".into(),
            k_reference: 0.05,
        }
    }
}

impl ImpactSettings {
    pub fn selection_zone(&self) -> &str {
        self.selection_zone
            .as_deref()
            .unwrap_or(&self.reference_zone)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignificanceSettings {
    pub min_trades: usize,
    pub t_threshold: f64,
}

impl Default for SignificanceSettings {
    fn default() -> Self {
        SignificanceSettings {
            min_trades: 50,
            t_threshold: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSettings {
    pub inc_top_fraction: f64,
    pub dec_top_fraction: f64,
}

impl Default for AlignmentSettings {
    fn default() -> Self {
        AlignmentSettings {
            inc_top_fraction: 0.2,
            dec_top_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: Market,
    #[serde(default)]
    pub mode: Mode,
    /// Used only by synthetic-data generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub paths: Paths,
    pub split: SplitSpec,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub impact: ImpactSettings,
    #[serde(default)]
    pub significance: SignificanceSettings,
    #[serde(default)]
    pub alignment: AlignmentSettings,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml_str(&s)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base =
            std::path::absolute(base).map_err(|e| Error::io("resolving config directory", e))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.panel);
        fix(&mut self.paths.stacks);
        if let Some(c) = self.paths.calendar.as_mut() {
            fix(c);
        }
        fix(&mut self.paths.output);
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut need = |name: &str, path: &Path| {
            if !path.is_file() {
                p.push(format!("{name} file {} does not exist", path.display()));
            }
        };
        need("panel", &self.paths.panel);
        need("stacks", &self.paths.stacks);
        if let Some(c) = &self.paths.calendar {
            need("calendar", c);
        }
        p.extend(self.split.problems());
        // An empty zone list means every zone in the panel.
        p.extend(self.features.lag_problems());
        for (name, g) in [
            ("gamma_pos", &self.grid.gamma_pos),
            ("gamma_neg", &self.grid.gamma_neg),
        ] {
            if g.is_empty() {
                p.push(format!("grid.{name} is empty"));
            }
            if let Some(v) = g.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                p.push(format!("grid.{name} value {v} must be positive"));
            }
        }
        if self.grid.tau.is_empty() {
            p.push("grid.tau is empty".into());
        }
        if let Some(v) = self.grid.tau.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            p.push(format!("grid.tau value {v} outside (0, 1)"));
        }
        if !(self.fit.tol > 0.0) || self.fit.max_iter == 0 || !(self.fit.l2 >= 0.0) {
            p.push("fit needs max_iter > 0, tol > 0, l2 >= 0".into());
        }
        let imp = &self.impact;
        if !(imp.delta_q > 0.0 && imp.delta_q.is_finite()) {
            p.push(format!("impact.delta_q {} must be positive", imp.delta_q));
        }
        if imp.top_n == 0 {
            p.push("impact.top_n must be positive".into());
        }
        if !(imp.k_reference > 0.0 && imp.k_reference.is_finite()) {
            p.push(format!(
                "impact.k_reference {} must be positive",
                imp.k_reference
            ));
        }
        if self.significance.t_threshold.is_nan() {
            p.push("significance.t_threshold is NaN".into());
        }
        for (name, f) in [
            ("inc_top_fraction", self.alignment.inc_top_fraction),
            ("dec_top_fraction", self.alignment.dec_top_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                p.push(format!("alignment.{name} {f} outside (0, 1]"));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// The config as recorded in a run manifest: resolved input paths, output
    /// directory blanked so that reruns elsewhere compare equal.
    pub fn echo(&self) -> RunConfig {
        let mut c = self.clone();
        c.paths.output = PathBuf::new();
        c
    }
}
