//! End-to-end orchestration from a [`RunConfig`]: ingest, features, fit,
//! calibrate, size, backtest, report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{
    bucket_significance, bucket_trades, classify, emit_report, run_strategy, BacktestReport,
    BucketStat, ClassificationRow, StrategyOptions,
};
use crate::bidstack::{
    calibrate_kz, estimate_energy_coeffs, load_stacks, ImpactParams, ReferenceInfo, Selection,
};
use crate::calendar::{DateRange, MarketCalendar, SplitRole};
use crate::classifier::{fit, tune_thresholds, Side, SpikeModel, TunedThresholds};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::{
    build_features, leakage_audit, AuditReport, FeatureSet, LabeledObservation, Standardizer,
};
use crate::panel::{load_panel, Panel};
use crate::sizing::{estimate_payoffs, PayoffTable};

/// Inputs loaded and checked once per run.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub config: RunConfig,
    pub calendar: MarketCalendar,
    pub panel: Panel,
}

/// Standardized observations by split role.
#[derive(Debug, Clone)]
pub struct Splits {
    pub features: FeatureSet,
    pub standardizer: Standardizer,
    pub train: Vec<LabeledObservation>,
    pub validation: Vec<LabeledObservation>,
    pub test: Vec<LabeledObservation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedModel {
    pub zone: String,
    pub side: Side,
    pub thresholds: TunedThresholds,
}

#[derive(Debug, Clone)]
pub struct FittedModels {
    pub models: Vec<SpikeModel>,
    pub tuning: Vec<TunedModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    /// File name to lowercase hex SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub report: BacktestReport,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Validates the config, then loads the calendar and panel.
pub fn load_inputs(config: &RunConfig) -> Result<Inputs> {
    config.validate()?;
    let mut calendar = match &config.paths.calendar {
        Some(p) => MarketCalendar::load(p)?,
        None => MarketCalendar::for_market(config.market),
    };
    if calendar.market != config.market {
        return Err(Error::Config(vec![format!(
            "calendar market {} differs from config market {}",
            calendar.market, config.market
        )]));
    }
    calendar.split = Some(config.split);
    let panel = load_panel(&config.paths.panel, config.market)?;
    Ok(Inputs {
        config: config.clone(),
        calendar,
        panel,
    })
}

fn feature_spec(inputs: &Inputs) -> crate::features::FeatureSpec {
    let mut spec = inputs.config.features.clone();
    if spec.zones_pooled.is_empty() {
        spec.zones_pooled = inputs.panel.zones().to_vec();
    }
    spec
}

fn label_thresholds(config: &RunConfig) -> (f64, f64) {
    let g = &config.grid;
    (g.gamma_neg[0], g.gamma_pos[0])
}

/// Builds the feature set and audits it against the panel timestamps.
pub fn audit(inputs: &Inputs) -> Result<(FeatureSet, AuditReport)> {
    let set = build_features(
        &inputs.panel,
        &feature_spec(inputs),
        &inputs.calendar,
        label_thresholds(&inputs.config),
    )?;
    let report = leakage_audit(&set, &inputs.panel, &inputs.calendar);
    Ok((set, report))
}

/// Audits, splits by role, and standardizes with train-split statistics.
pub fn prepare(inputs: &Inputs) -> Result<(Splits, AuditReport)> {
    let (features, report) = audit(inputs)?;
    if !report.pass {
        return Err(Error::Leakage(
            report
                .failing_columns()
                .into_iter()
                .map(String::from)
                .collect(),
        ));
    }
    let split = &inputs.config.split;
    let take = |role: SplitRole| -> Result<Vec<LabeledObservation>> {
        let range = split.range(role);
        let rows: Vec<LabeledObservation> = features.in_range(range).into_iter().cloned().collect();
        if rows.is_empty() {
            return Err(Error::InsufficientHistory(format!(
                "{role:?} split {range} has no observations with full feature history"
            )));
        }
        Ok(rows)
    };
    let mut train = take(SplitRole::Train)?;
    let mut validation = take(SplitRole::Validation)?;
    let mut test = take(SplitRole::Test)?;
    let standardizer = Standardizer::fit(train.iter())?;
    standardizer.apply_all(&mut train);
    standardizer.apply_all(&mut validation);
    standardizer.apply_all(&mut test);
    Ok((
        Splits {
            features,
            standardizer,
            train,
            validation,
            test,
        },
        report,
    ))
}

/// Fits one model per (zone, side, gamma) in parallel, then keeps the
/// validation-tuned (gamma, tau) per (zone, side). Cells whose training labels
/// are single-class are skipped with a warning.
pub fn fit_models(config: &RunConfig, splits: &Splits) -> Result<FittedModels> {
    let mut by_zone: BTreeMap<&str, Vec<&LabeledObservation>> = BTreeMap::new();
    for o in &splits.train {
        by_zone.entry(o.zone.as_str()).or_default().push(o);
    }
    let mut tasks = Vec::new();
    for zone in by_zone.keys() {
        for side in Side::BOTH {
            let grid = match side {
                Side::Inc => &config.grid.gamma_neg,
                Side::Dec => &config.grid.gamma_pos,
            };
            for &g in grid {
                tasks.push((*zone, side, g));
            }
        }
    }
    let fitted: Vec<Result<Option<SpikeModel>>> = tasks
        .par_iter()
        .map(
            |&(zone, side, gamma)| match fit(&by_zone[zone], side, gamma, &config.fit) {
                Ok(mut m) => {
                    m.train_meta.train_range = Some(config.split.train);
                    Ok(Some(m))
                }
                Err(Error::SingleClassData(what)) => {
                    warn!(
                        "skipping {zone} {side} gamma={gamma}: single-class training data ({what})"
                    );
                    Ok(None)
                }
                Err(e) => Err(e),
            },
        )
        .collect();
    let mut families: BTreeMap<(String, Side), Vec<SpikeModel>> = BTreeMap::new();
    for m in fitted {
        if let Some(m) = m? {
            families
                .entry((m.zone.clone(), m.side))
                .or_default()
                .push(m);
        }
    }
    let tuned: Vec<Result<(TunedModel, SpikeModel)>> = families
        .par_iter()
        .map(|((zone, side), family)| {
            let (t, m) = tune_thresholds(family, &config.grid.tau, &splits.validation)?;
            Ok((
                TunedModel {
                    zone: zone.clone(),
                    side: *side,
                    thresholds: t,
                },
                m,
            ))
        })
        .collect();
    let mut out = FittedModels {
        models: Vec::new(),
        tuning: Vec::new(),
    };
    for r in tuned {
        let (t, m) = r?;
        out.tuning.push(t);
        out.models.push(m);
    }
    if out.models.is_empty() {
        return Err(Error::EmptyTrades);
    }
    Ok(out)
}

/// Window used for impact calibration: train start to validation end.
pub fn calibration_window(config: &RunConfig) -> DateRange {
    DateRange::new(config.split.train.start, config.split.validation.end)
}

/// Energy-impact slopes from the stacks and zonal `k_z` from mean loads.
pub fn calibrate(inputs: &Inputs) -> Result<ImpactParams> {
    let cfg = &inputs.config;
    let stacks = load_stacks(&cfg.paths.stacks)?;
    let window = calibration_window(cfg);
    let selection = Selection {
        top_n: cfg.impact.top_n,
        zone: cfg.impact.selection_zone().to_string(),
        window: Some(window),
    };
    let energy = estimate_energy_coeffs(
        &stacks,
        &inputs.panel,
        &inputs.calendar,
        &selection,
        cfg.impact.delta_q,
    )?;
    let loads = inputs.panel.mean_actual_loads(Some(window));
    let k_z = calibrate_kz(&loads, &cfg.impact.reference_zone, cfg.impact.k_reference)?;
    Ok(ImpactParams {
        k_e_plus: energy.k_e_plus,
        k_e_minus: energy.k_e_minus,
        k_z,
        reference: Some(ReferenceInfo {
            zone: cfg.impact.reference_zone.clone(),
            k_reference: cfg.impact.k_reference,
            mean_loads: loads,
        }),
    })
}

/// Classification counts of the tuned models on the test split.
pub fn metrics(inputs: &Inputs) -> Result<Vec<ClassificationRow>> {
    let (splits, _) = prepare(inputs)?;
    let fitted = fit_models(&inputs.config, &splits)?;
    classify(&fitted.models, &splits.test)
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs every stage and writes the report, model artifacts, and manifest under
/// the configured output directory.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let inputs = load_inputs(config)?;
    let (splits, audit_report) = prepare(&inputs)?;
    info!(
        "observations: train {}, validation {}, test {}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );
    let fitted = fit_models(config, &splits)?;
    let payoffs: PayoffTable =
        estimate_payoffs(&fitted.models, &splits.validation, &inputs.calendar)?;
    let params = calibrate(&inputs)?;

    let stats: Vec<BucketStat> = bucket_significance(
        &bucket_trades(&fitted.models, &splits.validation, &inputs.calendar)?,
        config.significance.min_trades,
        config.significance.t_threshold,
    );
    let admissible: BTreeSet<_> = stats
        .iter()
        .filter(|s| s.admitted)
        .map(|s| s.key.clone())
        .collect();
    let opts = StrategyOptions {
        mode: config.mode,
        admissible,
        inc_top_fraction: config.alignment.inc_top_fraction,
        dec_top_fraction: config.alignment.dec_top_fraction,
        ..Default::default()
    };
    let mut report = run_strategy(
        &fitted.models,
        &payoffs,
        &params,
        &splits.test,
        &inputs.calendar,
        &opts,
    )?;
    report.significance = stats;

    let out_dir = config.paths.output.clone();
    let mut names = emit_report(&report, &out_dir)?;
    let extras: [(&str, Vec<u8>); 6] = [
        ("models.json", json(&fitted.models)?),
        ("tuning.json", json(&fitted.tuning)?),
        ("standardizer.json", json(&splits.standardizer)?),
        ("impact.json", (params.to_json() + "\n").into_bytes()),
        ("payoffs.json", json(&payoffs)?),
        ("audit.json", json(&audit_report)?),
    ];
    for (name, bytes) in extras {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        names.push(name.to_string());
    }
    let mut files = BTreeMap::new();
    for n in names {
        let path = out_dir.join(&n);
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        files.insert(n, sha256_hex(&bytes));
    }
    let manifest = Manifest {
        config: config.echo(),
        files,
    };
    write_manifest(&manifest, &out_dir)?;
    Ok(RunOutcome {
        out_dir,
        manifest,
        report,
    })
}

pub fn write_manifest(manifest: &Manifest, out_dir: &Path) -> Result<()> {
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_manifest(out_dir: &Path) -> Result<Manifest> {
    let path = out_dir.join(MANIFEST_FILE);
    let s = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Manifest::from_json(&s)
}
