//! Seeded synthetic panels and bid stacks with planted ground truth.
//!
//! Each zone-hour draws a latent driver `e ~ N(0, 1)` that moves the zonal load
//! forecast, `L = base (1 + cv e)`. A negative spike occurs with probability
//! `sigmoid(beta_neg . (1, e))`; otherwise a positive spike occurs with
//! probability `sigmoid(beta_pos . (1, e))`; otherwise DART is small.
//! Stacks have constant supply and demand step slopes, so buy and sell impacts
//! of whole steps are known exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, FixedOffset, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bidstack::{write_stacks, BidStack, StackSet};
use crate::calendar::{DateRange, Market, MarketCalendar, SplitSpec};
use crate::classifier::sigmoid;
use crate::config::{Grid, ImpactSettings, Paths, RunConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureSpec, LabeledObservation};
use crate::panel::{write_panel, HourlyRecord, Panel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub market: Market,
    /// First local operating day.
    pub start: NaiveDate,
    pub hours: usize,
    pub zones: Vec<String>,
    /// Mean zonal load per zone, MW.
    pub base_load: Vec<f64>,
    /// Load forecast coefficient of variation carried by the latent driver.
    pub load_cv: f64,
    pub beta_neg: [f64; 2],
    pub beta_pos: [f64; 2],
    pub gamma_neg: f64,
    pub gamma_pos: f64,
    /// Mean spike excess beyond the threshold, $/MWh.
    pub neg_excess_mean: f64,
    pub pos_excess_mean: f64,
    /// Slope of loss minus congestion on the zonal load forecast.
    pub loss_slope: f64,
    pub stacks: bool,
    /// Supply price rise per MWh, $/MWh per MWh.
    pub supply_slope: f64,
    /// Demand price fall per MWh, $/MWh per MWh.
    pub demand_slope: f64,
    pub step_mw: f64,
    pub stack_steps: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 1,
            market: Market::Nyiso,
            start: NaiveDate::from_ymd_opt(2024, 7, 1).expect("valid date"),
            hours: 200,
            zones: vec!["CAPITL".into(), "LONGIL".into(), "NYC".into()],
            base_load: vec![1500.0, 2500.0, 6000.0],
            load_cv: 0.1,
            beta_neg: [-1.0, 2.0],
            beta_pos: [-1.0, -2.0],
            gamma_neg: 30.0,
            gamma_pos: 5.0,
            neg_excess_mean: 20.0,
            pos_excess_mean: 10.0,
            loss_slope: 0.005,
            stacks: true,
            supply_slope: 0.01,
            demand_slope: 0.02,
            step_mw: 10.0,
            stack_steps: 400,
        }
    }
}

impl SynthSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.zones.is_empty() || self.zones.len() != self.base_load.len() {
            p.push("zones and base_load must be non-empty and of equal length".into());
        }
        if self.base_load.iter().any(|l| !(*l > 0.0)) {
            p.push("base loads must be positive".into());
        }
        if self.hours == 0 {
            p.push("hours must be positive".into());
        }
        for (n, v) in [
            ("gamma_neg", self.gamma_neg),
            ("gamma_pos", self.gamma_pos),
            ("neg_excess_mean", self.neg_excess_mean),
            ("pos_excess_mean", self.pos_excess_mean),
            ("supply_slope", self.supply_slope),
            ("demand_slope", self.demand_slope),
            ("step_mw", self.step_mw),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("{n} must be positive"));
            }
        }
        if !(self.load_cv >= 0.0) {
            p.push("load_cv must be non-negative".into());
        }
        if self.stack_steps < 2 {
            p.push("stack_steps must be at least 2".into());
        }
        p
    }

    /// Days covered, rounded up.
    pub fn days(&self) -> i64 {
        (self.hours as i64 + 23) / 24
    }

    /// Chronological split: about 55% train, 20% validation, the rest test.
    pub fn default_split(&self) -> SplitSpec {
        let days = self.days().max(3);
        let n_train = ((days as f64 * 0.55).round() as i64).max(1);
        let n_val = ((days as f64 * 0.2).round() as i64).max(1);
        let at = |k: i64| self.start + Duration::days(k);
        SplitSpec {
            train: DateRange::new(at(0), at(n_train)),
            validation: DateRange::new(at(n_train), at(n_train + n_val)),
            test: DateRange::new(at(n_train + n_val), at(days.max(n_train + n_val + 1))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub negative_spikes: usize,
    pub positive_spikes: usize,
    /// Buy and sell impact slopes for shocks that are whole multiples of `step_mw`.
    pub k_e_plus: f64,
    pub k_e_minus: f64,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub panel: Panel,
    pub stacks: StackSet,
    pub calendar: MarketCalendar,
    pub truth: SynthTruth,
}

/// Stack clearing at `(p_star, s0 + w/2)`. Supply steps up `w` MWh every
/// `supply_slope * w` dollars from `p_star`; demand is vertical at `s0 + w/2`
/// down to `p_star - demand_slope * w` and then steps out `w` MWh every
/// `demand_slope * w` dollars.
pub fn planted_stack(
    timestamp: DateTime<FixedOffset>,
    p_star: f64,
    s0: f64,
    w: f64,
    supply_slope: f64,
    demand_slope: f64,
    steps: usize,
) -> Result<BidStack> {
    let p_low = p_star - (steps as f64 + 1.0) * demand_slope * w - 1.0;
    let p_cap = p_star + (steps as f64 + 1.0) * supply_slope * w + 1.0;
    let d0 = s0 + w / 2.0;
    let mut supply = vec![(p_low, s0)];
    for k in 0..steps {
        supply.push((
            p_star + k as f64 * supply_slope * w,
            s0 + (k + 1) as f64 * w,
        ));
    }
    let mut demand = vec![(p_cap, d0)];
    for j in 1..=steps {
        demand.push((p_star - j as f64 * demand_slope * w, d0 + j as f64 * w));
    }
    BidStack::new(timestamp, supply, demand)
}

/// Generates the panel, stacks, calendar (with the default split), and truth.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    let p = spec.problems();
    if !p.is_empty() {
        return Err(Error::Config(p));
    }
    let mut calendar = MarketCalendar::for_market(spec.market);
    calendar.split = Some(spec.default_split());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let neg_exp = Exp::new(1.0 / spec.neg_excess_mean).expect("positive rate");
    let pos_exp = Exp::new(1.0 / spec.pos_excess_mean).expect("positive rate");
    let calm = 0.9 * spec.gamma_neg.min(spec.gamma_pos);

    let t0 = calendar
        .local_to_instant(spec.start.and_hms_opt(0, 0, 0).expect("midnight"))
        .to_utc();
    let nz = spec.zones.len();
    let mut records = Vec::with_capacity(spec.hours * nz);
    let mut stacks = StackSet::new();
    let (mut n_neg, mut n_pos) = (0, 0);
    for h in 0..spec.hours {
        let ts = calendar.to_local(t0 + Duration::hours(h as i64));
        let mut rows = Vec::with_capacity(nz);
        for z in 0..nz {
            let e: f64 = StandardNormal.sample(&mut rng);
            let load_noise: f64 = StandardNormal.sample(&mut rng);
            let price_noise: f64 = StandardNormal.sample(&mut rng);
            let cong: f64 = StandardNormal.sample(&mut rng);
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            let neg_x = neg_exp.sample(&mut rng);
            let pos_x = pos_exp.sample(&mut rng);
            let flat = rng.random_range(-calm..calm);

            let base = spec.base_load[z];
            let lf = base * (1.0 + spec.load_cv * e);
            let la = (lf + 0.02 * base * load_noise).max(0.0);
            let dart = if u < sigmoid(spec.beta_neg[0] + spec.beta_neg[1] * e) {
                n_neg += 1;
                -(spec.gamma_neg + neg_x)
            } else if v < sigmoid(spec.beta_pos[0] + spec.beta_pos[1] * e) {
                n_pos += 1;
                spec.gamma_pos + pos_x
            } else {
                flat
            };
            let da = 25.0 + 0.004 * lf + price_noise;
            let congestion = 0.5 * cong;
            let loss = spec.loss_slope * lf + 1.0 + congestion;
            rows.push((lf, la, da, da - dart, loss, congestion));
        }
        let system: f64 = rows.iter().map(|r| r.0).sum();
        for (z, (lf, la, da, rt, loss, cong)) in rows.into_iter().enumerate() {
            records.push(HourlyRecord::new(
                ts,
                spec.zones[z].as_str(),
                da,
                rt,
                lf,
                la,
                system,
                Some(loss),
                Some(cong),
            ));
        }
        if spec.stacks {
            let p_star = 20.0 + 0.002 * system;
            let stack = planted_stack(
                ts,
                p_star,
                system,
                spec.step_mw,
                spec.supply_slope,
                spec.demand_slope,
                spec.stack_steps,
            )?;
            stacks.insert(ts.timestamp(), stack);
        }
    }
    let panel = Panel::from_records(spec.market, records)?;
    Ok(SynthData {
        panel,
        stacks,
        calendar,
        truth: SynthTruth {
            spec: spec.clone(),
            negative_spikes: n_neg,
            positive_spikes: n_pos,
            k_e_plus: spec.supply_slope,
            k_e_minus: spec.demand_slope,
        },
    })
}

/// One observation per zone-hour with `x = [e]`, the latent driver recovered
/// from the load forecast, and labels at the planted thresholds.
pub fn latent_observations(data: &SynthData) -> Vec<LabeledObservation> {
    let spec = &data.truth.spec;
    let base: BTreeMap<&str, f64> = spec
        .zones
        .iter()
        .map(String::as_str)
        .zip(spec.base_load.iter().copied())
        .collect();
    data.panel
        .records()
        .iter()
        .map(|r| {
            let b = base[r.zone.as_str()];
            let e = if spec.load_cv > 0.0 {
                (r.zonal_load_forecast / b - 1.0) / spec.load_cv
            } else {
                0.0
            };
            let mut o = LabeledObservation {
                timestamp: r.timestamp,
                zone: r.zone.clone(),
                x: vec![e],
                y_neg: 0,
                y_pos: 0,
                realized_dart: r.dart,
                sources: vec![None],
            };
            o.set_labels(spec.gamma_neg, spec.gamma_pos);
            o
        })
        .collect()
}

/// Run configuration matching a generated fixture, with paths relative to it.
pub fn fixture_config(spec: &SynthSpec) -> RunConfig {
    let reference = if spec.zones.iter().any(|z| z == "LONGIL") {
        "LONGIL".to_string()
    } else {
        spec.zones[0].clone()
    };
    RunConfig {
        market: spec.market,
        mode: Default::default(),
        seed: Some(spec.seed),
        paths: Paths {
            panel: "panel.csv".into(),
            stacks: "stacks.csv".into(),
            calendar: Some("calendar.toml".into()),
            output: "out".into(),
        },
        split: spec.default_split(),
        features: FeatureSpec::default(),
        grid: Grid::default(),
        fit: Default::default(),
        impact: ImpactSettings {
            reference_zone: reference,
            ..Default::default()
        },
        significance: Default::default(),
        alignment: Default::default(),
    }
}

pub const FIXTURE_FILES: [&str; 5] = [
    "panel.csv",
    "stacks.csv",
    "calendar.toml",
    "truth.json",
    "run.toml",
];

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `panel.csv`, `stacks.csv`, `calendar.toml`, `truth.json`, and `run.toml`.
pub fn write_fixture(data: &SynthData, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut panel = Vec::new();
    write_panel(&data.panel, &mut panel)?;
    let mut stacks = Vec::new();
    write_stacks(&data.stacks, &mut stacks)?;
    let truth = serde_json::to_string_pretty(&data.truth)? + "\n";
    let run = fixture_config(&data.truth.spec).to_toml_string();
    let calendar = data.calendar.to_toml_string();
    let contents: [&[u8]; 5] = [
        &panel,
        &stacks,
        calendar.as_bytes(),
        truth.as_bytes(),
        run.as_bytes(),
    ];
    let mut out = Vec::new();
    for (name, bytes) in FIXTURE_FILES.iter().zip(contents) {
        let path = dir.join(name);
        write_file(&path, bytes)?;
        out.push(path);
    }
    Ok(out)
}
